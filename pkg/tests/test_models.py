import json

import numpy as np
import pytest

from epildp import models as M
from epildp.errors import DomainError


def test_drift_sis_endemic_equilibrium(sis_model):
    assert M.drift(sis_model, np.array([1 / 3])) == pytest.approx(0.0, abs=1e-14)


def test_drift_sis_extinction(sis_model):
    assert M.drift(sis_model, np.array([0.0]))[0] == 0.0


def test_drift_outside_domain_raises(sis_model):
    with pytest.raises(DomainError):
        M.drift(sis_model, np.array([1.5]))


def test_drift_siv_near_quoted_endemic_point(siv_model):
    b = M.drift(siv_model, np.array([0.24, 0.45, 0.31]))
    assert np.linalg.norm(b) <= 1e-2


def test_rate_jacobian_sis_values(sis_model):
    scaled = sis_model.scaled(1)
    jac = M.rate_jacobian(scaled, np.array([0.5]))
    # infection rate beta z (1 - z): slope beta (1 - 2z) vanishes at z = 1/2
    assert jac[0, 0] == pytest.approx(0.0, abs=1e-14)
    assert jac[1, 0] == pytest.approx(1.0)  # N * gamma


def test_rate_jacobian_scales_with_N(sis_model):
    scaled = sis_model.scaled(500)
    jac = M.rate_jacobian(scaled, np.array([0.2]))
    assert jac[1, 0] == pytest.approx(500 * 1.0)


def test_rate_jacobian_matches_finite_differences(siv_model):
    rng = np.random.default_rng(3)
    scaled = siv_model.scaled(1)
    for _ in range(20):
        z = rng.dirichlet([2.0, 2.0, 2.0])
        z = 0.9 * z + 0.1 / 3  # keep interior
        analytic = M.rate_jacobian(scaled, z)
        fd = np.empty_like(analytic)
        for i in range(3):
            h = 1e-6 * max(1.0, abs(z[i]))
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd[:, i] = (scaled.base.beta(zp) - scaled.base.beta(zm)) / (2 * h)
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(analytic - fd) / scale) < 1e-5


def test_find_equilibria_sis(sis_model):
    eqs = M.find_equilibria(sis_model, [np.array([v]) for v in (0.0, 0.2, 0.6, 1.0)])
    pts = {round(float(e.point[0]), 10): e for e in eqs}
    assert set(pts) == {0.0, round(1 - 1.0 / 1.5, 10)}
    assert pts[0.0].stability == "unstable"
    assert pts[round(1 / 3, 10)].stability == "stable"


@pytest.mark.parametrize("beta", [1.2, 1.5, 2.0, 5.0])
def test_sis_endemic_equilibrium_formula(beta):
    model = M.sis(beta, 1.0)
    eqs = M.find_equilibria(model, [np.array([v]) for v in (0.1, 0.5, 0.9)])
    endemic = [e for e in eqs if e.point[0] > 1e-6]
    assert len(endemic) == 1
    assert endemic[0].point[0] == pytest.approx(1 - 1.0 / beta, abs=1e-12)


def test_find_equilibria_sis_degenerate_beta_equals_gamma():
    model = M.sis(1.0, 1.0)
    eqs = M.find_equilibria(model, [np.array([v]) for v in (0.0, 0.1, 0.5, 0.9)])
    assert len(eqs) == 1
    assert eqs[0].point[0] == pytest.approx(0.0, abs=1e-9)
    assert eqs[0].stability == "nonhyperbolic"


def test_find_equilibria_siv_matches_quoted_points(siv_equilibria):
    expected = {
        (0.14, 0.86, 0.00): "stable",
        (0.24, 0.45, 0.31): "stable",
        (0.23, 0.59, 0.18): "unstable",
    }
    assert len(siv_equilibria) == 3
    for point, stability in expected.items():
        match = [e for e in siv_equilibria
                 if np.max(np.abs(e.point - np.array(point))) < 0.01]
        assert len(match) == 1, f"no equilibrium near {point}"
        assert match[0].stability == stability


def test_equilibria_drift_residual(siv_model, siv_equilibria):
    for e in siv_equilibria:
        assert np.linalg.norm(siv_model.drift_raw(e.point)) <= 1e-10


def test_basic_reproduction_number_quoted_values():
    r0, r0_tilde = M.basic_reproduction_number(beta=3.6, gamma=1.0, mu=0.03,
                                               theta=0.02, eta=0.3, sigma=0.1)
    assert r0_tilde == pytest.approx(3.4951, abs=1e-4)
    assert r0 == pytest.approx(0.7989, abs=1e-4)
    assert r0 < 1 < r0_tilde


def test_basic_reproduction_number_useless_vaccine():
    r0, r0_tilde = M.basic_reproduction_number(beta=3.6, gamma=1.0, mu=0.03,
                                               theta=0.02, eta=0.3, sigma=1.0)
    assert r0 == pytest.approx(r0_tilde, rel=1e-14)


def test_basic_reproduction_number_no_vaccination():
    r0, r0_tilde = M.basic_reproduction_number(beta=3.6, gamma=1.0, mu=0.03,
                                               theta=0.02, eta=1e-300, sigma=0.1)
    assert r0 == pytest.approx(r0_tilde, rel=1e-12)


def test_boundary_rates_sis(sis_model):
    beta = sis_model.beta
    assert beta(np.array([0.0]))[0] == 0.0
    assert beta(np.array([1.0]))[0] == 0.0
    assert beta(np.array([0.0]))[1] == 0.0


def test_boundary_rates_siv_vanish_without_infectives(siv_model):
    rng = np.random.default_rng(11)
    for _ in range(100):
        v = rng.uniform(0.0, 1.0)
        z = np.array([1.0 - v, v, 0.0])
        beta = siv_model.beta(z)
        # infection, vaccinated infection, recovery and death-of-infective
        assert beta[0] == 0.0 and beta[1] == 0.0
        assert beta[2] == 0.0 and beta[5] == 0.0


def test_outward_boundary_rates_sampled(sis_model, siv_model):
    assert M.check_boundary_rates(sis_model, 100)
    assert M.check_boundary_rates(siv_model, 100)


def test_scaled_model_units(sis_model):
    scaled = sis_model.scaled(2000)
    z = np.array([0.25])
    assert np.allclose(scaled.nu * 2000, sis_model.jump_directions)
    assert scaled.a0(z) == pytest.approx(2000 * sis_model.beta(z).sum())


def test_model_json_roundtrip(tmp_path, siv_model):
    path = tmp_path / "model.json"
    with open(path, "w") as fh:
        json.dump(siv_model.to_dict(), fh)
    loaded = M.load_model(path)
    rng = np.random.default_rng(0)
    for _ in range(10):
        z = rng.dirichlet([1, 1, 1])
        assert np.allclose(loaded.beta(z), siv_model.beta(z))
    assert np.array_equal(loaded.jump_directions, siv_model.jump_directions)
    assert loaded.infected_index == siv_model.infected_index


def test_builtin_model_rejects_unknown_parameters():
    with pytest.raises(ValueError):
        M.builtin_model("sis", nu=3.0)


def test_reduced_and_full_siv_agree_on_drift(siv_model, siv_iv_model):
    rng = np.random.default_rng(5)
    for _ in range(25):
        iv = rng.uniform(0.02, 0.45, 2)
        z3 = M.siv_from_iv(iv)
        b3 = siv_model.drift_raw(z3)
        b2 = siv_iv_model.drift_raw(iv)
        # (S, V, I) drift maps onto the (I, V) drift
        assert b3[2] == pytest.approx(b2[0], abs=1e-14)
        assert b3[1] == pytest.approx(b2[1], abs=1e-14)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        M.Trajectory(np.array([0.0, 1.0]), np.zeros((3, 1)), "nsfd")
    with pytest.raises(ValueError):
        M.Trajectory(np.array([1.0, 0.0]), np.zeros((2, 1)), "nsfd")
