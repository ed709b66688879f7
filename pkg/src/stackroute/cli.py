"""Command-line front end.

    stackroute solve-we --fixture two-link --out runs/we
    stackroute gradient-check --fixture braess-pricing --T 50
    stackroute solve-scg --fixture braess-design --alg sil --T 3
    stackroute experiment opcount --out runs/opcount

Every command exits with status 0 exactly when its checks pass.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import dynamics as dy
from . import problems as pb
from . import scg
from . import unroll as ur
from .costmodel import RoutingGame, total_travel_time
from .netcore import Network, enumerate_paths

COMMANDS = ("solve-we", "gradient-check", "solve-scg", "experiment")
ALGS = ("we", "ce", "dol", "sil", "ioa", "so")


@dataclass
class RunConfig:
    command: str = ""
    problem: str | None = None
    fixture: str | None = None
    alg: str | None = None
    T: int = 50
    r: float | None = None
    rho: float | None = None
    eps: float | None = None
    tau: float | None = None
    seed: int = 0
    multistart: int = 1
    init: str = "equal"
    out: str | None = None
    fd_step: float = 1e-6
    preset: str | None = None

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.command != "experiment" and not (self.problem or self.fixture):
            raise ValueError("give --problem PATH or --fixture NAME")
        if self.problem and self.fixture:
            raise ValueError("--problem and --fixture are mutually exclusive")
        if self.alg is not None and self.alg not in ALGS:
            raise ValueError(f"unknown algorithm {self.alg!r}")
        if self.T < 0:
            raise ValueError("--T must be nonnegative")
        for name in ("r", "rho", "eps", "tau"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise ValueError(f"--{name} must be positive")
        if self.multistart < 1:
            raise ValueError("--multistart must be at least 1")
        if self.init not in ("equal", "random"):
            raise ValueError("--init must be 'equal' or 'random'")
        if self.fd_step <= 0:
            raise ValueError("--fd-step must be positive")


class CliError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stackroute", description=__doc__.splitlines()[0] if __doc__ else None)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        src = p.add_mutually_exclusive_group()
        src.add_argument("--problem", metavar="PATH", help="problem JSON document")
        src.add_argument("--fixture", metavar="NAME", help="builtin fixture name")
        p.add_argument("--alg", choices=ALGS)
        p.add_argument("--T", type=int)
        p.add_argument("--r", type=float)
        p.add_argument("--rho", type=float)
        p.add_argument("--eps", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--multistart", type=int)
        p.add_argument("--init", choices=("equal", "random"))
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--config", metavar="PATH", help="JSON file with default option values")

    for name in ("solve-we", "gradient-check", "solve-scg"):
        p = sub.add_parser(name)
        common(p)
        if name == "gradient-check":
            p.add_argument("--fd-step", dest="fd_step", type=float)
    p = sub.add_parser("experiment")
    p.add_argument("preset")
    common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the JSON config file and explicit flags (in that order)."""
    merged = asdict(RunConfig())
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        known = {f.name for f in fields(RunConfig)}
        unknown = set(doc) - known
        if unknown:
            raise CliError(f"unknown config keys {sorted(unknown)}")
        merged.update(doc)
    for key, val in vars(args).items():
        if key in merged and val is not None:
            merged[key] = val
    merged["command"] = args.command
    cfg = RunConfig(**merged)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return cfg


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path | None:
    if cfg.out is None:
        return None
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(out: Path | None, name: str, text: str) -> None:
    if out is not None:
        (out / name).write_text(text)


def _solver_overrides(cfg: RunConfig) -> dict:
    return {"r": cfg.r, "rho": cfg.rho, "eps": cfg.eps, "tau": cfg.tau}


def load_problem(cfg: RunConfig) -> scg.ScgProblem:
    overrides = _solver_overrides(cfg)
    if cfg.fixture:
        if cfg.fixture not in pb.PROBLEM_FIXTURES:
            raise CliError(f"unknown problem fixture {cfg.fixture!r}; choose from {sorted(pb.PROBLEM_FIXTURES)}")
        return pb.fixture_problem(cfg.fixture, **overrides)
    path = Path(cfg.problem)
    try:
        spec = pb.ProblemSpec.from_json(path.read_text())
    except (OSError, json.JSONDecodeError, scg.ScgError) as exc:
        raise CliError(f"cannot load problem {path}: {exc}") from None
    net, ps, kind = _load_network(spec.network_ref, path.parent, spec.path_k)
    spec.params.setdefault("kind", kind)
    solver = {k: v for k, v in overrides.items() if v is not None}
    solver.setdefault("r", 0.1)
    return spec.build(net, ps, **solver)


def _load_network(ref: str, base: Path, k: int):
    candidate = base / ref
    if candidate.is_file():
        try:
            net = Network.from_json(candidate.read_text())
        except (KeyError, ValueError) as exc:
            raise CliError(f"bad network document {candidate}: {exc}") from None
        return net, enumerate_paths(net, k), "affine"
    try:
        return pb.fixture_network(ref)
    except scg.ScgError as exc:
        raise CliError(str(exc)) from None


def load_game(cfg: RunConfig):
    """Routing game, decision vector and lower rate for solve-we."""
    if cfg.problem or (cfg.fixture in pb.PROBLEM_FIXTURES):
        prob = load_problem(cfg)
        return prob.game, prob.z0(), cfg.r or prob.r, prob
    try:
        game = pb.fixture_game(cfg.fixture)
    except scg.ScgError as exc:
        raise CliError(str(exc)) from None
    return game, np.zeros(game.z_size()), cfg.r or pb.fixture_rate(cfg.fixture), None


def _initial_state(game: RoutingGame, init: str, seed: int):
    if init == "equal":
        return dy.equal_distribution_init(game.paths, game.n_classes)
    return dy.random_init(game.paths, np.random.default_rng(seed), game.n_classes)


def _objective(game, prob, p, z) -> float:
    return prob.evaluate(p, z) if prob is not None else total_travel_time(game, p, z)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_solve_we(cfg: RunConfig) -> int:
    game, z, r, prob = load_game(cfg)
    p0 = _initial_state(game, cfg.init, cfg.seed)
    ild = dy.IldConfig(r=r, eps=cfg.eps or 1e-10, max_iter=1_000_000)
    if cfg.alg == "ce":
        res = dy.ce_solve(game, p0, z, ild)
    else:
        res = dy.solve_we(game, p0, z, ild)
    out = _out_dir(cfg)
    _write(out, "gap_trace.csv", res.trace_csv())
    solution = {
        "z": np.asarray(z).tolist(), "p": np.asarray(res.p).tolist(),
        "objective": _objective(game, prob, res.p, z),
        "status": "converged" if res.converged else "max_iter",
    }
    _write(out, "solution.json", json.dumps(solution))
    print(f"{solution['status']}: {res.iterations} iterations, gap {res.trace[-1]:.3e}, "
          f"objective {solution['objective']:.10g}")
    return 0 if res.converged else 1


def cmd_gradient_check(cfg: RunConfig) -> int:
    prob = load_problem(cfg)
    z = prob.z0() if cfg.init == "equal" else prob.feasible.sample(np.random.default_rng(cfg.seed))
    we = dy.solve_we(prob.game, prob.p0(), z, dy.IldConfig(r=prob.r, eps=1e-12, max_iter=1_000_000))
    t0 = time.perf_counter()
    ut, _ = ur.forward_record(prob, we.p, z, cfg.T)
    grad = ur.backward(ut).l_z
    fd = ur.fd_gradient(prob, we.p, z, cfg.T, cfg.fd_step)
    err = ur.gradient_error(grad, fd)
    report = {
        "max_rel_err": err, "T": cfg.T, "fd_step": cfg.fd_step,
        "fwd_ops": ut.fwd_ops, "bwd_ops": ut.bwd_ops,
        "ratio": ur.count_report(ut.fwd_ops, ut.bwd_ops),
        "grad_max_abs_err": float(np.max(np.abs(grad - fd))) if fd.size else 0.0,
        "forward_gap": we.trace[-1], "elapsed_s": time.perf_counter() - t0,
    }
    _write(_out_dir(cfg), "gradient_check.json", json.dumps(report))
    ok = err <= 1e-5 and we.converged
    print(json.dumps({k: report[k] for k in ("max_rel_err", "T", "fd_step")}))
    return 0 if ok else 1


def cmd_solve_scg(cfg: RunConfig) -> int:
    prob = load_problem(cfg)
    alg = cfg.alg or "dol"
    if alg in ("we", "ce"):
        raise CliError("solve-scg needs --alg dol, sil, ioa or so")
    if alg == "sil" and cfg.T == 0 and not prob.z_dependent:
        raise CliError("Sil-MD with T=0 is undefined here: the objective has no direct z dependence, "
                       "so the zero-anticipation gradient vanishes; use --T 1 or more")
    if alg == "ioa" and not prob.z_dependent:
        raise CliError("IOA needs an objective with direct z dependence")
    out = _out_dir(cfg)
    if cfg.multistart > 1:
        seeds = range(cfg.seed, cfg.seed + cfg.multistart)
        runs = scg.multistart(prob, alg, seeds, cfg.init, cfg.T)
        records = [{"seed": s, **res.solution_dict()} for s, res in runs]
        _write(out, "solutions.json", json.dumps(records))
        n_ok = sum(res.converged for _, res in runs)
        objs = [res.objective for _, res in runs]
        print(f"{n_ok}/{len(runs)} converged; objective range [{min(objs):.10g}, {max(objs):.10g}]")
        return 0 if n_ok == len(runs) else 1
    p0 = _initial_state(prob.game, cfg.init, cfg.seed)
    res = scg.run_algorithm(prob, alg, p0, prob.z0(), cfg.T)
    _write(out, "iteration_log.csv", res.log_csv())
    _write(out, "solution.json", res.solution_json())
    print(f"{alg}: {res.status} after {len(res.log)} iterations, objective {res.objective:.10g}")
    return 0 if res.converged else 1


# --------------------------------------------------------------------------
# experiment presets
# --------------------------------------------------------------------------


def _seed_we(args):
    game, seed, r, eps = args
    p0 = dy.random_init(game.paths, np.random.default_rng(seed), game.n_classes)
    res = dy.solve_we(game, p0, None, dy.IldConfig(r=r, eps=eps, max_iter=1_000_000))
    return seed, res.converged, total_travel_time(game, res.p), res.trace[-1]


def preset_multi_equilibria(cfg: RunConfig, out: Path | None) -> bool:
    prob = pb.fixture_problem("braess-mixed", r=cfg.r)
    eps = cfg.eps or 1e-8
    n = max(cfg.multistart, 100)
    jobs = [(prob.game, s, prob.r, eps) for s in range(cfg.seed, cfg.seed + n)]
    rows = scg.parallel_map(_seed_we, jobs)
    tts = np.array([row[2] for row in rows])
    counts, edges = np.histogram(tts, bins=20)
    threshold = 1e3 * eps * float(np.median(tts))
    spread = float(tts.max() - tts.min())
    ok = all(row[1] for row in rows) and spread > threshold
    if out is not None:
        with open(out / "total_times.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "converged", "total_travel_time", "final_gap"])
            for row in rows:
                w.writerow([row[0], int(row[1]), repr(row[2]), repr(row[3])])
        (out / "histogram.json").write_text(json.dumps({
            "counts": counts.tolist(), "edges": edges.tolist(), "range": spread, "threshold": threshold,
        }))
    print(f"{n} starts, total time range {spread:.6g} vs threshold {threshold:.3g}")
    return ok


def preset_opcount(cfg: RunConfig, out: Path | None) -> bool:
    from .netcore import build_braess, braess_pathset, build_parallel, parallel_pathset
    records, ok = [], True
    cases = [("braess", 1), ("braess", 5), ("parallel-1000", 10)]
    for name, T in cases:
        if name == "braess":
            net = build_braess()
            ps = braess_pathset(net)
        else:
            net = build_parallel(1000, 1.0)
            ps = parallel_pathset(net)
        prob = pb.make_pricing(net, ps, range(net.n_links), r=0.02)
        ut, _ = ur.forward_record(prob, prob.p0(), prob.z0(), T)
        ur.backward(ut)
        rec = ur.opcount_record(ut)
        K, A, nnz = ps.n_paths, net.n_links, ps.lam.nnz
        rec.update(n_paths=K, n_links=A, nnz=nnz,
                   fwd_formula=ur.pricing_fp_ops(T, K, A, nnz), bwd_formula=ur.pricing_bp_ops(T, K, A, nnz))
        rec["pass"] = (rec["fwd_ops"] == rec["fwd_formula"] and rec["bwd_ops"] == rec["bwd_formula"]
                       and rec["ratio"] <= 4 / 3 + 1e-9)
        ok &= rec["pass"]
        records.append(rec)
        print(f"T={T} K={K} A={A}: fwd {rec['fwd_ops']} bwd {rec['bwd_ops']} ratio {rec['ratio']:.4f} "
              f"{'ok' if rec['pass'] else 'MISMATCH'}")
    # BPR models: measured counts only, the closed forms cover the affine model
    for name in ("braess-design", "braess-mixed"):
        prob = pb.fixture_problem(name)
        ut, _ = ur.forward_record(prob, prob.p0(), prob.z0(), 5)
        ur.backward(ut)
        rec = {**ur.opcount_record(ut), "fixture": name}
        records.append(rec)
        print(f"T=5 {name}: fwd {rec['fwd_ops']} bwd {rec['bwd_ops']} ratio {rec['ratio']:.4f} (measured)")
    _write(out, "opcount.json", json.dumps(records))
    return ok


def preset_gradient(cfg: RunConfig, out: Path | None) -> bool:
    prob = pb.fixture_problem("braess-pricing")
    z = np.array([1.0, 0.0, 2.0, 3.0, 0.5])
    p_star = dy.solve_we(prob.game, prob.p0(), z, dy.IldConfig(r=prob.r, eps=1e-12, max_iter=10**6)).p
    grads = {T: ur.gradient(prob, p_star, z, T).l_z for T in (10, 20, 40, 80)}
    diffs = [float(np.max(np.abs(grads[2 * T] - grads[T]))) for T in (10, 20, 40)]
    _write(out, "gradient_stabilization.json", json.dumps({
        "T": [10, 20, 40, 80], "gradients": [grads[T].tolist() for T in (10, 20, 40, 80)],
        "successive_diff": diffs,
    }))
    print("successive gradient differences:", ", ".join(f"{d:.3e}" for d in diffs))
    return all(b < a for a, b in zip(diffs, diffs[1:]))


def preset_scaling(cfg: RunConfig, out: Path | None) -> bool:
    from .netcore import build_parallel, parallel_pathset
    rows = []
    for n in (1_000, 10_000, 100_000):
        net = build_parallel(n, 1.0)
        prob = pb.make_pricing(net, parallel_pathset(net), range(n), r=0.5, eps=1e-3)
        t0 = time.perf_counter()
        ut, _ = ur.forward_record(prob, prob.p0(), prob.z0(), eps=1e-3)
        ur.backward(ut)
        rows.append((n, ut.T, time.perf_counter() - t0))
        print(f"|A|={n}: T={ut.T}, FP+BP {rows[-1][2]:.4f} s")
    if out is not None:
        (out / "scaling.csv").write_text("n_links,T,seconds\n" + "".join(f"{n},{T},{t!r}\n" for n, T, t in rows))
    return rows[-1][2] / rows[0][2] <= 300 and rows[-1][2] <= 60


def preset_braess_design(cfg: RunConfig, out: Path | None) -> bool:
    prob = pb.fixture_problem("braess-design", **_solver_overrides(cfg))
    we = dy.solve_we(prob.game, prob.p0(), prob.z0(), prob.ild_config())
    results = {"we": prob.evaluate(we.p, prob.z0())}
    for alg in ("so", "dol", "ioa"):
        results[alg] = scg.run_algorithm(prob, alg).objective
    for T in (0, 1, 3, 6, 10):
        results[f"sil{T}"] = scg.sil_md(prob, T=T).objective
    _write(out, "braess_design.json", json.dumps(results))
    for k, v in results.items():
        print(f"{k:6s} {v:.10g}")
    sil = [results[f"sil{T}"] for T in (0, 1, 3, 6, 10)]
    return (results["so"] <= results["dol"] <= results["we"]
            and all(b <= a + 1e-4 for a, b in zip(sil, sil[1:]))
            and abs(results["sil10"] - results["dol"]) <= 1e-2 * abs(results["dol"]))


def preset_tollable(cfg: RunConfig, out: Path | None) -> bool:
    from .netcore import build_braess, braess_pathset
    net = build_braess()
    ps = braess_pathset(net)
    x_we, x_ce = pb.we_and_ce_flows(net, ps)
    report = {"x_we": x_we.tolist(), "x_ce": x_ce.tolist()}
    for xi in (0.05, 0.2, 0.5):
        report[f"xi={xi}"] = pb.select_tollable(net, ps, xi, flows=(x_we, x_ce))
        print(f"xi={xi}: tollable links {report[f'xi={xi}']}")
    _write(out, "tollable.json", json.dumps(report))
    return 3 in report["xi=0.2"]


def preset_od_potential(cfg: RunConfig, out: Path | None) -> bool:
    net, ps, _ = pb.fixture_network("skewed-grid-3x3")
    ranking = pb.rank_od_potential(net, ps, alpha=0.2, r=0.05, eps=1e-8)
    _write(out, "od_potential.json", json.dumps([{"od": list(w), "score": s} for w, s in ranking]))
    for w, s in ranking:
        print(f"OD {w}: {s:.6g}")
    return all(np.isfinite(s) and s <= 0 for _, s in ranking)


def preset_we_convergence(cfg: RunConfig, out: Path | None) -> bool:
    ok = True
    for name in ("two-link", "braess", "braess-bpr", "3n4l"):
        game = pb.fixture_game(name)
        for init in ("equal", "random"):
            res = dy.solve_we(game, _initial_state(game, init, cfg.seed), None,
                              dy.IldConfig(r=pb.fixture_rate(name), eps=1e-10, max_iter=10**6))
            ok &= res.converged
            _write(out, f"trace_{name}_{init}.csv", res.trace_csv())
            print(f"{name} ({init}): {res.iterations} iterations, converged={res.converged}")
    return ok


PRESETS = {
    "multi-equilibria": preset_multi_equilibria,
    "opcount": preset_opcount,
    "gradient": preset_gradient,
    "scaling": preset_scaling,
    "braess-design": preset_braess_design,
    "tollable": preset_tollable,
    "od-potential": preset_od_potential,
    "we-convergence": preset_we_convergence,
}


def cmd_experiment(cfg: RunConfig) -> int:
    if cfg.preset not in PRESETS:
        raise CliError(f"unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}")
    return 0 if PRESETS[cfg.preset](cfg, _out_dir(cfg)) else 1


HANDLERS = {
    "solve-we": cmd_solve_we,
    "gradient-check": cmd_gradient_check,
    "solve-scg": cmd_solve_scg,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return HANDLERS[cfg.command](cfg)
    except (CliError, scg.ScgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
