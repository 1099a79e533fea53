"""Command-line interface: reproducible, file-based runs of every capability.

Each command writes its outputs plus a ``manifest.json`` echoing the fully
resolved configuration; rerunning a manifest reproduces the CSV outputs byte
for byte (wall-clock timings live in stats/bench files only).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EpiLdpError, DomainError, NotBistableError
from .models import (CompartmentalModel, builtin_model, default_seed_grid,
                     find_equilibria, load_model, siv_to_iv)
from .nsfd import (NSFDConfig, builtin_metzler, characteristic_boundary,
                   explicit_integrate, nsfd_integrate, sis_exact)
from .dp import compute_vbar
from .simulate import (EnsembleSpec, RngStream, TauLeapConfig, ensemble_run,
                       ssa_direct, tau_leap_explicit, tau_leap_modified)

_FMT = "%.17g"


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = args.out or os.environ.get("EPILDP_OUT") or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_FMT % v if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def write_trajectory(path: Path, traj) -> None:
    d = traj.states.shape[1]
    header = ["t"] + [f"Z_{i + 1}" for i in range(d)]
    rows = ([float(t)] + [float(v) for v in s] for t, s in zip(traj.times, traj.states))
    write_csv(path, header, rows)


def _write_manifest(outdir: Path, command: str, resolved: dict, outputs: list[str]) -> None:
    manifest = {"tool": "epildp", "version": __version__, "command": command,
                "config": resolved, "outputs": outputs}
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_params(spec: str | None) -> dict:
    if not spec:
        return {}
    out = {}
    for item in spec.split(","):
        if not item:
            continue
        key, _, val = item.partition("=")
        if not _:
            raise ValueError(f"malformed parameter {item!r}; expected key=value")
        out[key.strip()] = float(val)
    return out


def _resolve_model(args) -> CompartmentalModel:
    params = _parse_params(getattr(args, "params", None))
    name = args.model
    if name in ("sis", "siv"):
        return builtin_model(name, **params)
    if params:
        raise ValueError("parameter overrides apply to built-in models only")
    return load_model(name)


def _parse_x0(spec: str | None, model: CompartmentalModel):
    if spec is None:
        if model.name == "sis":
            return np.array([0.1])
        if model.name in ("siv", "siv_iv"):
            return np.array([0.3, 0.5, 0.2]) if model.dimension == 3 else np.array([0.2, 0.5])
        raise ValueError("--x0 is required for custom models")
    vals = np.array([float(v) for v in spec.split(",")])
    if len(vals) != model.dimension:
        raise ValueError(f"--x0 needs {model.dimension} comma-separated values")
    return vals


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ode(args) -> int:
    outdir = _out_dir(args)
    model = _resolve_model(args)
    x0 = _parse_x0(args.x0, model)
    cfg = NSFDConfig(h=args.h, T=args.T, phi=args.phi)
    outputs = []

    scheme = args.scheme
    if args.compare:
        if model.name != "sis":
            raise ValueError("--compare needs the SIS model (exact solution required)")
        beta, gamma = model.params["beta"], model.params["gamma"]
        mform = builtin_metzler(model)
        rows = []
        for h in (args.h, args.h / 2, args.h / 4):
            c = NSFDConfig(h=h, T=args.T, phi=args.phi)
            nsfd = nsfd_integrate(mform, x0, c)
            expl = explicit_integrate(model, x0, c)
            exact = np.array([sis_exact(float(x0[0]), beta, gamma, t) for t in nsfd.times])
            err_n = float(np.max(np.abs(nsfd.states[:, 0] - exact)))
            err_e = float(np.max(np.abs(expl.states[:, 0] - exact)))
            rows.append([h, err_e, err_n])
            if h == args.h:
                for tag, tr in (("nsfd", nsfd), ("explicit", expl)):
                    write_trajectory(outdir / f"trajectory_{tag}.csv", tr)
                    outputs.append(f"trajectory_{tag}.csv")
                write_csv(outdir / "trajectory_exact.csv", ["t", "Z_1"],
                          ([float(t), float(v)] for t, v in zip(nsfd.times, exact)))
                outputs.append("trajectory_exact.csv")
        write_csv(outdir / "errors.csv", ["h", "sup_err_explicit", "sup_err_nsfd"], rows)
        outputs.append("errors.csv")
    elif scheme == "nsfd":
        tr = nsfd_integrate(builtin_metzler(model), x0, cfg)
        write_trajectory(outdir / "trajectory_nsfd.csv", tr)
        outputs.append("trajectory_nsfd.csv")
    elif scheme == "explicit":
        tr = explicit_integrate(model, x0, cfg)
        write_trajectory(outdir / "trajectory_explicit.csv", tr)
        outputs.append("trajectory_explicit.csv")
    elif scheme == "exact":
        if model.name != "sis":
            raise ValueError("exact scheme exists for the SIS model only")
        times = np.arange(int(np.ceil(args.T / args.h)) + 1) * args.h
        vals = sis_exact(float(x0[0]), model.params["beta"], model.params["gamma"], times)
        write_csv(outdir / "trajectory_exact.csv", ["t", "Z_1"],
                  ([float(t), float(v)] for t, v in zip(times, vals)))
        outputs.append("trajectory_exact.csv")
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    _write_manifest(outdir, "ode", {
        "model": model.to_dict(), "x0": [float(v) for v in x0], "h": args.h,
        "T": args.T, "phi": args.phi, "scheme": scheme, "compare": bool(args.compare),
    }, outputs)
    return 0


def cmd_boundary(args) -> int:
    outdir = _out_dir(args)
    model = _resolve_model(args)
    if model.name != "siv":
        raise NotBistableError("the characteristic boundary command supports the SIV builtin")
    mform = builtin_metzler(model)
    eqs = find_equilibria(model, default_seed_grid(model))
    pts = characteristic_boundary(mform, eqs, resolution=args.resolution)
    write_csv(outdir / "boundary.csv", ["I", "V"],
              ([float(i), float(v)] for i, v in pts))
    write_csv(outdir / "equilibria.csv", ["S", "V", "I", "stability", "kind"],
              ([*(float(v) for v in e.point), e.stability, e.kind] for e in eqs))
    _write_manifest(outdir, "boundary", {
        "model": model.to_dict(), "resolution": args.resolution,
    }, ["boundary.csv", "equilibria.csv"])
    return 0


def cmd_vbar(args) -> int:
    outdir = _out_dir(args)
    model = _resolve_model(args)
    schedule = [float(v) for v in args.schedule.split(",")]
    grid_kwargs = {}
    if args.max_speed is not None:
        grid_kwargs["max_speed"] = args.max_speed
    res = compute_vbar(model, schedule, dt=args.grid_dt, dx=args.grid_dx,
                       dx2=args.grid_dx2, tol=args.tol,
                       grid_kwargs=grid_kwargs or None)
    write_csv(outdir / "convergence.csv", ["T", "value"],
              ([float(t), float(v)] for t, v in res.convergence))
    write_trajectory(outdir / "trajectory_optimal.csv", res.trajectory)
    result = {"vbar": res.vbar, "convergence": res.convergence,
              "grid": res.grid_meta, "assumptions": list(res.assumptions)}
    with open(outdir / "result.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(outdir, "vbar", {
        "model": model.to_dict(), "schedule": schedule, "grid_dt": args.grid_dt,
        "grid_dx": args.grid_dx, "grid_dx2": args.grid_dx2, "tol": args.tol,
        "max_speed": args.max_speed,
    }, ["convergence.csv", "trajectory_optimal.csv", "result.json"])
    return 0


def _tau_config(args) -> TauLeapConfig:
    return TauLeapConfig(epsilon=args.epsilon, n_c=args.nc, variant=args.variant,
                         n_fallback=args.n_fallback, n_burst=args.n_burst)


def cmd_simulate(args) -> int:
    outdir = _out_dir(args)
    model = _resolve_model(args)
    x0 = _parse_x0(args.x0, model)
    outputs = []
    if args.replicates > 1:
        spec = EnsembleSpec(model=model, N=args.N, x0=tuple(float(v) for v in x0),
                            T=args.T, simulator=args.simulator,
                            record_dt=args.record_dt, config=_tau_config(args))
        summary = ensemble_run(spec, args.replicates, args.seed, threads=args.threads)
        d = model.dimension
        header = ["t"] + [f"{s}_{i + 1}" for s in ("mean", "var", "min", "max")
                          for i in range(d)]
        rows = ([float(t)] + [float(v) for v in np.concatenate(
            [summary.mean[g], summary.var[g], summary.min[g], summary.max[g]])]
            for g, t in enumerate(summary.times))
        write_csv(outdir / "summary.csv", header, rows)
        outputs.append("summary.csv")
        stats = {"replicates": summary.replicates, "total_events": summary.total_events,
                 "total_fallbacks": summary.total_fallbacks,
                 "total_repairs": summary.total_repairs, "seconds": summary.seconds}
    else:
        scaled = model.scaled(args.N)
        rng = RngStream(args.seed, 0)
        rec = args.record_dt
        if args.simulator == "ssa":
            tr = ssa_direct(scaled, x0, args.T, rng, record_dt=rec)
            st = tr.meta["stats"]
        elif args.variant == "modified":
            tr, st = tau_leap_modified(scaled, x0, args.T, _tau_config(args), rng,
                                       record_dt=rec)
        else:
            tr, st = tau_leap_explicit(scaled, x0, args.T, _tau_config(args), rng,
                                       record_dt=rec)
        write_trajectory(outdir / "trajectory.csv", tr)
        outputs.append("trajectory.csv")
        stats = {"event_counts": [int(v) for v in st.event_counts],
                 "fallbacks": st.fallbacks, "leaps": st.leaps, "repairs": st.repairs,
                 "violations": st.violations, "absorbed": st.absorbed,
                 "seconds": st.seconds}
    with open(outdir / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append("stats.json")
    _write_manifest(outdir, "simulate", {
        "model": model.to_dict(), "x0": [float(v) for v in x0], "N": args.N,
        "T": args.T, "simulator": args.simulator, "variant": args.variant,
        "epsilon": args.epsilon, "nc": args.nc, "n_fallback": args.n_fallback,
        "n_burst": args.n_burst, "seed": args.seed, "replicates": args.replicates,
        "record_dt": args.record_dt, "threads": args.threads,
    }, outputs)
    return 0


def cmd_bench(args) -> int:
    outdir = _out_dir(args)
    sizes = [int(v) for v in args.N_list.split(",")]
    outputs = []
    for name in ("sis", "siv"):
        model = builtin_model(name)
        x0 = _parse_x0(None, model)
        rows = []
        for method in ("ssa", "modified_tau"):
            for N in sizes:
                scaled = model.scaled(N)
                rng = RngStream(args.seed, 0)
                t0 = time.perf_counter()
                if method == "ssa":
                    tr = ssa_direct(scaled, x0, args.T, rng, record_dt=1.0)
                    st = tr.meta["stats"]
                else:
                    tr, st = tau_leap_modified(scaled, x0, args.T,
                                               TauLeapConfig(variant="modified"),
                                               rng, record_dt=1.0)
                sec = time.perf_counter() - t0
                rows.append([method, N, args.T, sec, int(st.event_counts.sum()),
                             st.leaps, st.fallbacks])
        fname = f"bench_{name}.csv"
        write_csv(outdir / fname,
                  ["method", "N", "T", "seconds", "events", "leaps", "fallbacks"], rows)
        outputs.append(fname)
    _write_manifest(outdir, "bench", {
        "N_list": sizes, "T": args.T, "seed": args.seed,
    }, outputs)
    return 0


# ---------------------------------------------------------------------------
# reproduction recipes
# ---------------------------------------------------------------------------

def cmd_reproduce(args) -> int:
    target = args.target
    base = _out_dir(args) / target
    base.mkdir(parents=True, exist_ok=True)

    def sub(**kw):
        ns = argparse.Namespace(**kw)
        ns.out = str(base)
        return ns

    common_sim = dict(params=None, epsilon=0.03, nc=10, n_fallback=10, n_burst=100,
                      threads=1, record_dt=0.1)
    if target == "fig2":
        return cmd_ode(sub(model="sis", params="beta=40,gamma=20", x0="0.3",
                           h=0.1, T=4.0, phi="one_minus_exp", scheme="nsfd",
                           compare=True))
    if target == "fig3":
        rc = 0
        for tag, i0 in (("left", 0.05), ("right", 0.2)):
            ns = sub(model="siv", params=None, x0=f"{1 - 0.5 - i0},0.5,{i0}",
                     h=0.1, T=600.0, phi="one_minus_exp", scheme="nsfd",
                     compare=False)
            ns.out = str(base / tag)
            rc |= cmd_ode(ns)
        return rc
    if target == "fig4":
        return cmd_boundary(sub(model="siv", params=None, resolution=15))
    if target == "fig5":
        rc = cmd_vbar(sub(model="sis", params=None, schedule="5,10,20,40,60",
                          grid_dt=0.01, grid_dx=0.01, grid_dx2=None, tol=1e-4,
                          max_speed=None))
        return rc
    if target in ("fig6", "fig7", "fig8", "fig9"):
        sim = "ssa" if target in ("fig6", "fig8") else "tau_leap"
        model = "sis" if target in ("fig6", "fig7") else "siv"
        x0 = "0.1" if model == "sis" else "0.1,0.2,0.7"
        rc = 0
        for N in (2000, 20000):
            ns = sub(model=model, x0=x0, N=N, T=50.0, simulator=sim,
                     variant="modified", seed=args.seed, replicates=1, **common_sim)
            ns.out = str(base / f"N{N}")
            rc |= cmd_simulate(ns)
        return rc
    if target in ("table1", "table2"):
        only = "sis" if target == "table1" else "siv"
        ns = sub(N_list="2000,20000,200000", T=50.0, seed=args.seed)
        # bench runs both models; keep both tables, the requested one is among them
        _ = only
        return cmd_bench(ns)
    raise ValueError(f"unknown reproduction target {target!r}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epildp",
                                description="Compartmental epidemic models: NSFD "
                                            "integration, exit costs, simulation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--model", default="sis",
                        help="builtin name (sis|siv) or model file path")
        sp.add_argument("--params", default=None,
                        help="builtin parameter overrides, k=v,k=v")
        sp.add_argument("--out", default=None, help="output directory "
                        "(default $EPILDP_OUT or ./out)")

    sp = sub.add_parser("ode", help="integrate the deterministic limit")
    add_common(sp)
    sp.add_argument("--scheme", default="nsfd", choices=("nsfd", "explicit", "exact"))
    sp.add_argument("--compare", action="store_true",
                    help="emit nsfd/explicit/exact plus a sup-norm error table")
    sp.add_argument("--x0", default=None)
    sp.add_argument("--h", type=float, default=0.1)
    sp.add_argument("--T", type=float, default=50.0)
    sp.add_argument("--phi", default="one_minus_exp", choices=("one_minus_exp", "rational"))
    sp.set_defaults(func=cmd_ode)

    sp = sub.add_parser("boundary", help="characteristic basin boundary (SIV)")
    add_common(sp)
    sp.add_argument("--resolution", type=int, default=15)
    sp.set_defaults(func=cmd_boundary)

    sp = sub.add_parser("vbar", help="exit cost by dynamic programming")
    add_common(sp)
    sp.add_argument("--schedule", default="5,10,20,40,60")
    sp.add_argument("--grid-dt", type=float, default=0.01)
    sp.add_argument("--grid-dx", type=float, default=0.01)
    sp.add_argument("--grid-dx2", type=float, default=None)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--max-speed", type=float, default=None)
    sp.set_defaults(func=cmd_vbar)

    sp = sub.add_parser("simulate", help="stochastic paths and ensembles")
    add_common(sp)
    sp.add_argument("--simulator", default="ssa", choices=("ssa", "tau_leap"))
    sp.add_argument("--variant", default="modified",
                    choices=("explicit", "implicit_rate", "midpoint", "modified"))
    sp.add_argument("--x0", default=None)
    sp.add_argument("--N", type=int, default=2000)
    sp.add_argument("--T", type=float, default=50.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--replicates", type=int, default=1)
    sp.add_argument("--epsilon", type=float, default=0.03)
    sp.add_argument("--nc", type=int, default=10)
    sp.add_argument("--n-fallback", type=int, default=10)
    sp.add_argument("--n-burst", type=int, default=100)
    sp.add_argument("--record-dt", type=float, default=0.1)
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("bench", help="SSA vs modified tau-leaping timings")
    sp.add_argument("--N-list", default="2000,20000,200000")
    sp.add_argument("--T", type=float, default=50.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("reproduce", help="rebuild a published figure/table dataset")
    sp.add_argument("target", choices=("fig2", "fig3", "fig4", "fig5", "fig6",
                                       "fig7", "fig8", "fig9", "table1", "table2"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_reproduce)
    return p


_ERROR_CATEGORIES = {
    DomainError: "domain",
    NotBistableError: "model_structure",
    EpiLdpError: "numerical",
    ValueError: "usage",
    FileNotFoundError: "io",
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # structured error surface for scripts
        category = next((cat for klass, cat in _ERROR_CATEGORIES.items()
                         if isinstance(exc, klass)), "internal")
        print(json.dumps({"error": category, "type": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
