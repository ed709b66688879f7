"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CRITERIA_RESULTS
from stackroute import dynamics as dy
from stackroute import scg
from stackroute import unroll as ur
from stackroute.costmodel import CostModel, RoutingGame, path_cost, total_travel_time
from stackroute.netcore import braess_pathset, build_braess, build_parallel, parallel_pathset
from stackroute.problems import fixture_game, fixture_problem, fixture_rate, make_pricing


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    CRITERIA_RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def test_criterion_01_two_link_we():
    game = fixture_game("two-link")
    t0 = time.perf_counter()
    res = dy.solve_we(game, dy.equal_distribution_init(game.paths), None,
                      dy.IldConfig(r=fixture_rate("two-link"), eps=1e-10))
    elapsed = time.perf_counter() - t0
    err = float(np.max(np.abs(res.p - [2 / 3, 1 / 3])))
    gap = dy.gap_relative(game, res.p)
    report(1, err <= 1e-8 and gap <= 1e-10 and elapsed < 1.0,
           f"|p - (2/3, 1/3)| = {err:.2e}, relative gap {gap:.2e}, {elapsed:.3f} s")


# ---------------------------------------------------------------- 2


def braess_analytic():
    # symmetric split of 6 units; outer link cost 10x, middle links 50 + x, bridge 10 + x
    with_bridge = 6 * (10 * 4 + 50 + 2)  # 2 units per path, outer links carry 4
    without = 6 * (10 * 3 + 50 + 3)
    return with_bridge, without


def test_criterion_02_braess_paradox():
    want_with, want_without = braess_analytic()
    got = {}
    for variant in ("with_bridge", "without_bridge"):
        net = build_braess(variant)
        game = RoutingGame(braess_pathset(net), CostModel.from_network(net))
        p0 = dy.random_init(game.paths, np.random.default_rng(7))
        res = dy.solve_we(game, p0, None, dy.IldConfig(r=0.02, eps=1e-12, max_iter=10**6))
        got[variant] = total_travel_time(game, res.p)
    rel_with = abs(got["with_bridge"] - want_with) / want_with
    rel_without = abs(got["without_bridge"] - want_without) / want_without
    ok = want_with == 552 and want_without == 498 and rel_with <= 1e-6 and rel_without <= 1e-6
    report(2, ok and got["with_bridge"] > got["without_bridge"],
           f"with bridge {got['with_bridge']:.8f} (552), without {got['without_bridge']:.8f} (498)")


# ---------------------------------------------------------------- 3

NETWORK_FIXTURES = ["two-link", "braess", "braess-no-bridge", "braess-bpr", "braess-bpr-no-bridge",
                    "3n4l", "parallel-20", "grid-3x3", "skewed-grid-3x3"]
PROBLEM_NAMES = ["braess-mixed", "braess-routing", "braess-design", "braess-pricing", "two-link-pricing"]


def test_criterion_03_fixed_point():
    worst, checked = 0.0, 0
    cases = [(fixture_game(n), None, fixture_rate(n)) for n in NETWORK_FIXTURES]
    for name in PROBLEM_NAMES:
        prob = fixture_problem(name)
        cases.append((prob.game, prob.z0(), prob.r))
    rng = np.random.default_rng(0)
    ok = True
    for game, z, r in cases:
        for p0 in (dy.equal_distribution_init(game.paths, game.n_classes),
                   dy.random_init(game.paths, rng, game.n_classes)):
            res = dy.solve_we(game, p0, z, dy.IldConfig(r=r, eps=1e-12, max_iter=10**6))
            ok &= res.converged and res.trace[-1] <= 1e-12
            step = float(np.max(np.abs(dy.ild_step(game, res.p, z, r) - res.p)))
            worst = max(worst, step)
            checked += 1
    report(3, ok and worst <= 1e-10, f"{checked} equilibria, max |ild_step(p*) - p*| = {worst:.2e}")


# ---------------------------------------------------------------- 4


def kl_run(game, p0, p_star, iters=600):
    est = dy.estimate_cocoercivity(game)
    c = est.c
    r = 0.9 * 2 * c
    factor = (2 * c - r) / (4 * c)
    p = p0
    kl = dy.kl_total(game.paths, p_star, p)
    worst = np.inf
    for _ in range(iters):
        p_next = dy.ild_step(game, p, None, r)
        kl_next = dy.kl_total(game.paths, p_star, p_next)
        bound = factor * float(np.sum((p - p_next) ** 2))
        worst = min(worst, (kl - kl_next) - bound)
        p, kl = p_next, kl_next
    return worst, r


def test_criterion_04_kl_decrease():
    two = fixture_game("two-link")
    w1, r1 = kl_run(two, np.array([0.05, 0.95]), np.array([2 / 3, 1 / 3]))
    braess = fixture_game("braess")
    w2, r2 = kl_run(braess, np.array([0.7, 0.1, 0.2]), np.full(3, 1 / 3))
    worst = min(w1, w2)
    report(4, worst >= -1e-10,
           f"600 steps at r = {r1:.4g} / {r2:.4g}; min (decrement - bound) = {worst:.2e}")


# ---------------------------------------------------------------- 5

GRADIENT_CASES = {
    "pricing": ("braess-pricing", np.array([1.0, 0.0, 2.0, 3.0, 0.5])),
    "design": ("braess-design", np.array([0.2, 0.1, 0.1, 0.0, 0.3])),
    "routing_control": ("braess-routing", np.array([0.3, 0.3, 0.4])),
    "mixed_autonomy_pricing": ("braess-mixed",
                               np.array([0.02, 0.01, 0.03, 0.05, 0.02, 0.01, 0.02, 0.01, 0.03, 0.02])),
}


def test_criterion_05_gradient_correctness():
    parts, ok = [], True
    for family, (name, z) in GRADIENT_CASES.items():
        prob = fixture_problem(name)
        assert prob.family == family and prob.game.paths.n_paths <= 50
        t0 = time.perf_counter()
        we = dy.solve_we(prob.game, prob.p0(), z, dy.IldConfig(r=prob.r, eps=1e-12, max_iter=10**6))
        g = ur.gradient(prob, we.p, z, 50).l_z
        fd = ur.fd_gradient(prob, we.p, z, 50, step=1e-6)
        err = ur.gradient_error(g, fd)
        elapsed = time.perf_counter() - t0
        ok &= we.trace[-1] <= 1e-12 and err <= 1e-5 and elapsed <= 10 and np.max(np.abs(fd)) > 0
        parts.append(f"{family} {err:.1e} ({elapsed:.2f} s)")
    report(5, ok, "max relative error: " + ", ".join(parts))


# ---------------------------------------------------------------- 6


def test_criterion_06_gradient_stabilization():
    prob = fixture_problem("braess-pricing")
    z = GRADIENT_CASES["pricing"][1]
    p_star = dy.solve_we(prob.game, prob.p0(), z, dy.IldConfig(r=prob.r, eps=1e-12, max_iter=10**6)).p
    g = {T: ur.gradient(prob, p_star, z, T).l_z for T in (10, 20, 40)}
    d1 = float(np.max(np.abs(g[20] - g[10])))
    d2 = float(np.max(np.abs(g[40] - g[20])))
    report(6, d2 < d1, f"|g40 - g20| = {d2:.4g} < |g20 - g10| = {d1:.4g}")


# ---------------------------------------------------------------- 7


def test_criterion_07_op_counts():
    cases = []
    net = build_braess()
    ps = braess_pathset(net)
    cases += [(make_pricing(net, ps, range(5), r=0.02), 1), (make_pricing(net, ps, range(5), r=0.02), 5)]
    big = build_parallel(1000, 1.0)
    cases.append((make_pricing(big, parallel_pathset(big), range(1000), r=0.5), 10))
    ok, parts = True, []
    for prob, T in cases:
        ps = prob.game.paths
        ut, _ = ur.forward_record(prob, prob.p0(), prob.z0(), T)
        ur.backward(ut)
        K, A, nnz = ps.n_paths, ps.n_links, ps.lam.nnz
        fp, bp = ur.pricing_fp_ops(T, K, A, nnz), ur.pricing_bp_ops(T, K, A, nnz)
        ratio = ut.bwd_ops / ut.fwd_ops
        ok &= ut.fwd_ops == fp and ut.bwd_ops == bp and ratio <= 4 / 3
        parts.append(f"(T={T}, K={K}, A={A}) fwd {ut.fwd_ops}/{fp} bwd {ut.bwd_ops}/{bp} ratio {ratio:.3f}")
    report(7, ok, "; ".join(parts))


# ---------------------------------------------------------------- 8


def fp_bp_seconds(n, repeats=3):
    net = build_parallel(n, 1.0)
    prob = make_pricing(net, parallel_pathset(net), range(n), r=0.5, eps=1e-3)
    best, depth = np.inf, 0
    for _ in range(repeats):
        t0 = time.perf_counter()
        ut, _ = ur.forward_record(prob, prob.p0(), prob.z0(), eps=1e-3)
        ur.backward(ut)
        best = min(best, time.perf_counter() - t0)
        depth = ut.T
    return best, depth


def test_criterion_08_scaling():
    small, T_small = fp_bp_seconds(1_000)
    large, T_large = fp_bp_seconds(100_000)
    ratio = large / small
    report(8, ratio <= 300 and large <= 60,
           f"FP+BP {small * 1e3:.2f} ms at 1e3 links (T={T_small}), {large:.3f} s at 1e5 (T={T_large}), "
           f"ratio {ratio:.1f}")


# ---------------------------------------------------------------- 9


def test_criterion_09_multiple_equilibria():
    prob = fixture_problem("braess-mixed")
    game, eps = prob.game, 1e-8
    times, ok = [], True
    for seed in range(100):
        p0 = dy.random_init(game.paths, np.random.default_rng(seed), game.n_classes)
        res = dy.solve_we(game, p0, None, dy.IldConfig(r=prob.r, eps=eps, max_iter=10**6))
        ok &= res.converged and dy.gap_relative(game, res.p) <= eps
        times.append(total_travel_time(game, res.p))
    times = np.array(times)
    counts, _ = np.histogram(times, bins=20)
    spread = float(times.max() - times.min())
    threshold = 1e3 * eps * float(np.median(times))
    report(9, ok and spread > threshold,
           f"100 starts, total time range {spread:.4g} > {threshold:.3g}; histogram {counts.tolist()}")


# ---------------------------------------------------------------- 10 and 11


@pytest.fixture(scope="module")
def design_results():
    prob = fixture_problem("braess-design")
    we = dy.solve_we(prob.game, prob.p0(), prob.z0(), prob.ild_config())
    out = {"problem": prob, "we": prob.evaluate(we.p, prob.z0())}
    out["so"] = scg.so_solve(prob)
    out["dol"] = scg.dol_md(prob)
    out["ioa"] = scg.ioa(prob)
    for T in (0, 1, 3, 6, 10):
        out[f"sil{T}"] = scg.sil_md(prob, T=T)
    return out


def test_criterion_10_solver_ordering(design_results):
    r = design_results
    so, dol, we = r["so"].objective, r["dol"].objective, r["we"]
    sil = [r[f"sil{T}"].objective for T in (0, 1, 3, 6, 10)]
    converged = all(r[k].converged for k in ("so", "dol", "sil0", "sil1", "sil3", "sil6", "sil10"))
    monotone = all(b <= a + 1e-4 for a, b in zip(sil, sil[1:]))
    close = abs(sil[-1] - dol) <= 1e-2 * abs(dol)
    report(10, converged and so <= dol <= we and monotone and close,
           f"SO {so:.6f} <= Dol {dol:.6f} <= WE {we:.6f}; Sil(0,1,3,6,10) "
           + ", ".join(f"{v:.6f}" for v in sil))


def test_criterion_11_ioa_matches_sil0(design_results):
    prob = design_results["problem"]
    a, b = design_results["ioa"], design_results["sil0"]
    rel = abs(a.objective - b.objective) / abs(b.objective)
    res_a = scg.cournot_residual(prob, a.p, a.z, 0)
    res_b = scg.cournot_residual(prob, b.p, b.z, 0)
    vi_ok = all(m < prob.tau and g <= prob.eps for m, g in (res_a, res_b))
    report(11, a.converged and b.converged and rel <= 1e-3 and vi_ok,
           f"IOA {a.objective:.8f} vs Sil-0 {b.objective:.8f} (rel {rel:.1e}); "
           f"VI residuals {res_a[0]:.1e}, {res_b[0]:.1e} (tau {prob.tau:g})")


# ---------------------------------------------------------------- 12

CASES = 1000
_props_done = []


def _parallel_case(n, seed):
    rng = np.random.default_rng(seed)
    net = build_parallel(n, 1.0).replace(u0=rng.uniform(0.1, 5, n), b=rng.uniform(0, 3, n),
                                         bpr_b=None, power=None)
    game = RoutingGame(parallel_pathset(net), CostModel.from_network(net))
    p = rng.dirichlet(np.ones(n))
    p[rng.random(n) < 0.3] = 0.0
    if p.sum() == 0:
        p[0] = 1.0
    return game, p / p.sum(), rng


def _grid_case(seed):
    rng = np.random.default_rng(seed)
    game = fixture_game("skewed-grid-3x3")
    p = dy.random_init(game.paths, rng)
    p[rng.random(p.size) < 0.3] = 0.0
    for w in range(game.paths.n_od):
        sl = game.paths.od_slice(w)
        if p[sl].sum() == 0:
            p[sl.start] = 1.0
        p[sl] /= p[sl].sum()
    return game, p, rng


def _case(kind, n, seed):
    return _parallel_case(n, seed) if kind == "parallel" else _grid_case(seed)


KINDS = st.sampled_from(["parallel", "grid"])
SIZES = st.integers(1, 12)
SEEDS = st.integers(0, 2**32 - 1)
RATES = st.floats(0.0, 2.0)


@settings(max_examples=CASES, derandomize=True)
@given(KINDS, SIZES, SEEDS, RATES)
def prop_simplex(kind, n, seed, r):
    game, p, _ = _case(kind, n, seed)
    out = dy.ild_step(game, p, None, r)
    assert np.all(out >= 0)
    assert np.allclose(game.paths.od_sum(out), 1.0, atol=1e-12, rtol=0)


@settings(max_examples=CASES, derandomize=True)
@given(KINDS, SIZES, SEEDS, RATES)
def prop_support(kind, n, seed, r):
    game, p, _ = _case(kind, n, seed)
    out = dy.ild_step(game, p, None, r)
    assert np.array_equal(out > 0, p > 0)


@settings(max_examples=CASES, derandomize=True)
@given(KINDS, SIZES, SEEDS, RATES, st.floats(-1e3, 1e3))
def prop_shift(kind, n, seed, r, kappa):
    game, p, rng = _case(kind, n, seed)
    ps = game.paths
    c = path_cost(game, p)
    shift = ps.spread(kappa * rng.uniform(-1, 1, ps.n_od))
    a = dy.ild_from_costs(ps, p, c, r)
    b = dy.ild_from_costs(ps, p, c + shift, r)
    assert np.allclose(a, b, atol=1e-12, rtol=0)


@settings(max_examples=CASES, derandomize=True)
@given(KINDS, SIZES, SEEDS)
def prop_gap(kind, n, seed):
    game, p, _ = _case(kind, n, seed)
    assert dy.gap_absolute(game, p) >= 0
    assert dy.gap_relative(game, p) >= 0
    # at the all-or-nothing state of its own costs the excess is exactly zero or positive
    c = path_cost(game, p)
    assert dy.gap_absolute_from_costs(game.paths, dy.all_or_nothing(game.paths, c), c, game.class_q) == 0


FEASIBLE = [
    scg.FeasibleSet.orthant(6),
    scg.FeasibleSet.orthant(6, free=[0, 3, 5]),
    scg.FeasibleSet("simplex", 6, ptr=[0, 6]),
    scg.FeasibleSet("simplex", 6, ptr=[0, 2, 3, 6]),
    scg.FeasibleSet("box", 6, lower=np.zeros(6), upper=np.arange(1.0, 7.0)),
]


@settings(max_examples=CASES, derandomize=True)
@given(st.integers(0, len(FEASIBLE) - 1), SEEDS, st.floats(1e-4, 10.0), st.floats(1e-3, 1e3),
       st.integers(1, 5))
def prop_feasible(which, seed, rho, scale, steps):
    fs = FEASIBLE[which]
    rng = np.random.default_rng(seed)
    geometries = ["euclidean"] + (["entropic"] if fs.kind == "simplex" else [])
    for geometry in geometries:
        z = fs.sample(rng, 3.0)
        for _ in range(steps):
            z = scg.upper_md_step(z, scale * rng.normal(size=6), rho, geometry, fs)
            assert fs.contains(z, tol=1e-12)


PROPERTIES = [
    ("simplex preservation", prop_simplex),
    ("support monotonicity", prop_support),
    ("additive-shift invariance", prop_shift),
    ("gap nonnegativity", prop_gap),
    ("upper feasibility preservation", prop_feasible),
]


def test_criterion_12_invariants():
    results = []
    for label, prop in PROPERTIES:
        try:
            prop()
            results.append((label, True, ""))
        except Exception as exc:  # report every property before failing
            results.append((label, False, type(exc).__name__))
    ok = all(r[1] for r in results)
    detail = "; ".join(f"{label} {'ok' if good else 'failed (' + why + ')'}" for label, good, why in results)
    report(12, ok, f"{CASES} cases each: {detail}")
