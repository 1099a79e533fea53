import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rk4
from epildp import models as M
from epildp import nsfd as NF
from epildp.errors import BlowupError, NonHyperbolicError, NotBistableError, SingularSystemError


# ---------------------------------------------------------------------------
# denominator function and Q
# ---------------------------------------------------------------------------

def test_compute_Q_sis_closed_form(sis_model):
    eqs = M.find_equilibria(sis_model, [np.array([v]) for v in (0.0, 0.5)])
    # both eigenvalues are +-(beta - gamma) = +-0.5, so Q = 0.5 / 2
    assert NF.compute_Q(sis_model, eqs) == pytest.approx(0.25, abs=1e-12)


def test_compute_Q_single_real_eigenvalue():
    # lambda = -2 alone gives |lambda|^2 / (2 |Re lambda|) = 1
    decay = M.CompartmentalModel(
        name="decay", jump_directions=np.array([[-1]]),
        rates=(M.PolynomialRate([2.0], [[1]]),),
        domain=M.Domain(np.array([[0.0, 10.0]])))
    eqs = M.find_equilibria(decay, [np.array([0.5])])
    assert NF.compute_Q(decay, eqs) == pytest.approx(1.0, abs=1e-12)


def test_compute_Q_siv_matches_fd_jacobian_oracle(siv_model, siv_metzler, siv_equilibria):
    q = NF.compute_Q(siv_model, siv_equilibria, mform=siv_metzler)
    # oracle: central finite differences of the Metzler right-hand side
    q_fd = 0.0
    for eq in siv_equilibria:
        J = np.empty((3, 3))
        for i in range(3):
            h = 1e-6
            zp, zm = eq.point.copy(), eq.point.copy()
            zp[i] += h
            zm[i] -= h
            J[:, i] = (siv_metzler.rhs(zp) - siv_metzler.rhs(zm)) / (2 * h)
        for lam in np.linalg.eigvals(J):
            q_fd = max(q_fd, abs(lam) ** 2 / (2 * abs(lam.real)))
    assert q == pytest.approx(q_fd, abs=1e-4)


def test_compute_Q_nonhyperbolic_raises():
    model = M.sis(1.0, 1.0)
    eqs = M.find_equilibria(model, [np.array([0.3])])
    with pytest.raises(NonHyperbolicError):
        NF.compute_Q(model, eqs)


@given(st.sampled_from(["one_minus_exp", "rational"]),
       st.floats(min_value=0.05, max_value=20.0))
@settings(max_examples=40, deadline=None)
def test_denominator_function_first_order(phi, Q):
    psi = NF.DenominatorFunction(Q, phi)
    C = max(1.0, Q)
    for h in (1e-2, 1e-3, 1e-4, 1e-5):
        assert abs(psi(h) - h) <= C * h * h


@given(st.floats(min_value=0.01, max_value=50.0))
@settings(max_examples=40, deadline=None)
def test_phi_bounded_in_unit_interval(z):
    for phi in ("one_minus_exp", "rational"):
        val = NF._PHI[phi](z)
        assert 0.0 < val <= 1.0
        if z <= 30.0:  # 1 - e^{-z} rounds to 1.0 in floats beyond this
            assert val < 1.0


# ---------------------------------------------------------------------------
# step and fixed points
# ---------------------------------------------------------------------------

def test_nsfd_fixed_points_exact(sis_metzler, siv_metzler, siv_equilibria):
    sis_eqs = M.find_equilibria(sis_metzler.model, [np.array([v]) for v in (0.0, 0.5)])
    for mform, eqs in ((sis_metzler, sis_eqs), (siv_metzler, siv_equilibria)):
        for h in (0.01, 0.1, 1.0, 10.0):
            psi_h = NF.DenominatorFunction(mform.default_Q)(h)
            for e in eqs:
                step = NF.nsfd_step(mform, psi_h, e.point)
                assert np.max(np.abs(step - e.point)) < 1e-12


def test_nsfd_step_origin_fixed(sis_metzler):
    psi_h = NF.DenominatorFunction(sis_metzler.default_Q)(0.5)
    assert NF.nsfd_step(sis_metzler, psi_h, np.array([0.0]))[0] == 0.0


def test_nsfd_stability_preservation(sis_metzler):
    eqs = M.find_equilibria(sis_metzler.model, [np.array([v]) for v in (0.0, 0.5)])
    stable = next(e for e in eqs if e.stability == "stable")
    unstable = next(e for e in eqs if e.stability == "unstable")
    for h in (0.1, 1.0):
        psi_h = NF.DenominatorFunction(sis_metzler.default_Q)(h)
        z = stable.point + 1e-3
        for _ in range(int(200 / h)):
            z = NF.nsfd_step(sis_metzler, psi_h, z)
        assert np.max(np.abs(z - stable.point)) < 1e-6
        z = unstable.point + 1e-3
        for _ in range(int(200 / h)):
            z = NF.nsfd_step(sis_metzler, psi_h, z)
        assert np.max(np.abs(z - unstable.point)) > 1e-2


def test_nsfd_positivity(sis_metzler, siv_metzler):
    for h in (0.1, 0.5, 1.0):
        for x0 in (0.001, 0.3, 0.9):
            tr = NF.nsfd_integrate(sis_metzler, [x0], NF.NSFDConfig(h=h, T=50.0))
            assert tr.states.min() >= -1e-12 and tr.states.max() <= 1 + 1e-12
        tr = NF.nsfd_integrate(siv_metzler, [0.45, 0.5, 0.05], NF.NSFDConfig(h=h, T=50.0))
        assert tr.states.min() >= -1e-12
        assert np.abs(tr.states.sum(axis=1) - 1.0).max() < 1e-9


def test_nsfd_large_step_sis_stays_in_domain_and_converges():
    """Fixed step h = 0.1 with beta = 40, gamma = 20: the implicit scheme stays
    in [0, 1] and its distance to x* = 0.5 decreases monotonically, in contrast
    with the sustained oscillation of the explicit scheme."""
    mform = NF.metzler_sis(40.0, 20.0)
    tr = NF.nsfd_integrate(mform, [0.3], NF.NSFDConfig(h=0.1, T=4.0))
    z = tr.states[:, 0]
    assert z.min() >= 0.0 and z.max() <= 1.0
    dist = np.abs(z - 0.5)
    assert np.all(np.diff(dist) <= 1e-12)
    assert dist[-1] < 1e-6


def test_singular_system_raises():
    mform = NF.MetzlerForm(A=lambda z: np.array([[1e30]]), f=np.zeros(1),
                           model=M.sis())
    with pytest.raises(SingularSystemError):
        NF.nsfd_step(mform, 1e-15, np.array([0.5]))


# ---------------------------------------------------------------------------
# explicit scheme instabilities
# ---------------------------------------------------------------------------

def test_explicit_all_negative_for_beta_10_gamma_20():
    model = M.sis(10.0, 20.0)   # beta = 1/h, gamma = 2/h at h = 0.1
    tr = NF.explicit_integrate(model, [0.3], NF.NSFDConfig(h=0.1, T=4.0))
    # strictly negative until float underflow turns iterates into -0.0
    assert np.all(np.signbit(tr.states[1:, 0]))


def test_explicit_oscillates_around_zero_for_beta_10_gamma_40():
    model = M.sis(10.0, 40.0)
    tr = NF.explicit_integrate(model, [0.3], NF.NSFDConfig(h=0.1, T=4.0))
    s = np.sign(tr.states[:, 0])
    flips = (s[1:] * s[:-1] < 0).mean()
    assert flips > 0.5
    assert (s < 0).sum() >= 10 and (s > 0).sum() >= 5


def test_explicit_converges_to_exact_for_small_h(sis_model):
    tr = NF.explicit_integrate(sis_model, [0.3], NF.NSFDConfig(h=1e-4, T=4.0))
    exact = NF.sis_exact(0.3, 1.5, 1.0, tr.times)
    assert np.max(np.abs(tr.states[:, 0] - exact)) < 1e-3


def test_nsfd_first_order_consistency(sis_metzler):
    errs = []
    hs = (0.1, 0.05, 0.025)
    for h in hs:
        tr = NF.nsfd_integrate(sis_metzler, [0.3], NF.NSFDConfig(h=h, T=4.0))
        exact = NF.sis_exact(0.3, 1.5, 1.0, tr.times)
        errs.append(np.max(np.abs(tr.states[:, 0] - exact)))
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert slopes.mean() >= 0.9


# ---------------------------------------------------------------------------
# exact solution
# ---------------------------------------------------------------------------

def test_sis_exact_disease_free_invariant():
    for t in (0.0, 1.0, 10.0):
        assert NF.sis_exact(0.0, 1.5, 1.0, t) == 0.0


def test_sis_exact_equilibrium_invariant():
    x_star = 1 - 1.0 / 1.5
    for t in (0.5, 5.0, 50.0):
        assert NF.sis_exact(x_star, 1.5, 1.0, t) == pytest.approx(x_star, abs=1e-12)


def test_sis_exact_matches_rk4():
    val = NF.sis_exact(0.3, 1.5, 1.0, 4.0)
    ref = rk4(lambda z: 1.5 * z * (1 - z) - z, np.array([0.3]), 4.0, 1e-5)[0]
    assert val == pytest.approx(ref, abs=1e-8)


def test_sis_exact_beta_below_gamma_matches_rk4():
    val = NF.sis_exact(0.8, 1.0, 2.0, 3.0)
    ref = rk4(lambda z: 1.0 * z * (1 - z) - 2.0 * z, np.array([0.8]), 3.0, 1e-5)[0]
    assert val == pytest.approx(ref, abs=1e-8)


def test_sis_exact_equal_rates_corrected_branch_matches_rk4():
    val = NF.sis_exact(0.3, 1.0, 1.0, 4.0)
    ref = rk4(lambda z: -z * z, np.array([0.3]), 4.0, 1e-5)[0]
    assert val == pytest.approx(ref, abs=1e-8)


def test_sis_exact_equal_rates_printed_branch_blows_up():
    with pytest.raises(BlowupError):
        NF.sis_exact(0.3, 1.0, 1.0, 4.0, as_printed=True)


# ---------------------------------------------------------------------------
# attractors and the characteristic boundary
# ---------------------------------------------------------------------------

def test_classify_attractor_fig3_basins(siv_metzler, siv_equilibria):
    left = NF.classify_attractor(siv_metzler, siv_equilibria, M.siv_from_iv((0.05, 0.5)))
    right = NF.classify_attractor(siv_metzler, siv_equilibria, M.siv_from_iv((0.2, 0.5)))
    assert left is not None and left.kind == "disease_free"
    assert right is not None and right.kind == "endemic"


def test_characteristic_boundary_contains_unstable_equilibrium(siv_metzler, siv_equilibria):
    x_tilde = next(e for e in siv_equilibria if e.stability == "unstable")
    iv = M.siv_to_iv(x_tilde.point)
    pts = NF.characteristic_boundary(siv_metzler, siv_equilibria,
                                     lines=np.array([iv[1]]))
    assert len(pts) == 1
    assert abs(pts[0, 0] - iv[0]) < 0.01


def test_characteristic_boundary_side_classification(siv_metzler, siv_equilibria):
    x_tilde = next(e for e in siv_equilibria if e.stability == "unstable")
    iv = M.siv_to_iv(x_tilde.point)
    pts = NF.characteristic_boundary(siv_metzler, siv_equilibria,
                                     lines=np.array([iv[1]]))
    b_i = pts[0, 0]
    att = NF.classify_attractor(siv_metzler, siv_equilibria,
                                M.siv_from_iv((b_i + 1e-3, iv[1])))
    assert att is not None and att.kind == "endemic"


def test_characteristic_boundary_sis_not_bistable(sis_metzler):
    eqs = M.find_equilibria(sis_metzler.model, [np.array([v]) for v in (0.0, 0.5)])
    with pytest.raises(NotBistableError):
        NF.characteristic_boundary(sis_metzler, eqs)


def test_characteristic_boundary_1d_bistable_custom_model():
    # drift z(1-z)(z-1/2): stable at 0 and 1, separatrix at 1/2
    up = M.PolynomialRate([1.0], [[2]])                    # z^2 (up-jump)
    down = M.PolynomialRate([0.5, 0.5, -1.0], [[1], [3], [2]])  # z/2 + z^3/2 ... see below
    # choose rates so that b(z) = up - down = z(1-z)(z-1/2)
    # z(1-z)(z-1/2) = -z^3 + 1.5 z^2 - 0.5 z; take up = 1.5 z^2, down = z^3 + 0.5 z
    up = M.PolynomialRate([1.5], [[2]])
    down = M.PolynomialRate([1.0, 0.5], [[3], [1]])
    model = M.CompartmentalModel(
        name="bistable1d", jump_directions=np.array([[1, -1]]),
        rates=(up, down), domain=M.Domain(np.array([[0.0, 1.0]])))
    mform = NF.MetzlerForm(
        A=lambda z: np.array([[-z[0] ** 2 + 1.5 * z[0] - 0.5]]), f=np.zeros(1),
        model=model,
        jacobian=lambda z: np.array([[-3 * z[0] ** 2 + 3.0 * z[0] - 0.5]]))
    eqs = M.find_equilibria(model, [np.array([v]) for v in (0.05, 0.45, 0.55, 0.95)])
    object.__setattr__(mform, "default_Q", NF.compute_Q(model, eqs, mform=mform))
    pts = NF.characteristic_boundary(mform, eqs)
    assert pts.shape == (1, 1)
    assert pts[0, 0] == pytest.approx(0.5, abs=1e-3)
