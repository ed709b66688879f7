"""Builders for the leader problem families and two heuristics on top of them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import tape as tp
from .costmodel import ClassSpec, CostModel, Coupling, RoutingGame
from .dynamics import IldConfig, ce_solve, equal_distribution_init, solve_we
from .netcore import Network, PathSet
from .scg import FeasibleSet, ScgError, ScgProblem
from .unroll import backward, forward_record

FAMILIES = ("pricing", "design", "routing_control", "mixed_autonomy_pricing")


# objective functions live at module level so problems pickle for worker pools


def total_time_objective(game: RoutingGame, p_rows, z):
    return game.total_travel_time(p_rows, z)


def design_objective_fn(game: RoutingGame, p_rows, z, w, beta):
    time = game.total_travel_time(p_rows, z)
    if beta == 0:
        return time
    return time + beta * tp.inner(w * z, z)


def _index_array(indices, n: int, what: str) -> np.ndarray:
    idx = np.asarray(sorted(set(int(i) for i in indices)), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ScgError(f"{what} index out of range")
    return idx


def make_pricing(net: Network, ps: PathSet, tollable, gamma: float = 1.0, kind: str = "affine",
                 **solver) -> ScgProblem:
    """Congestion pricing: ``z`` are link tolls, objective is total travel time."""
    idx = _index_array(tollable, net.n_links, "tollable")
    game = RoutingGame(ps, CostModel.from_network(net, kind), coupling=Coupling("toll", gamma))
    return ScgProblem(
        game=game, objective_fn=total_time_objective,
        feasible=FeasibleSet.orthant(net.n_links, idx), geometry="euclidean",
        z_dependent=False, family="pricing",
        params={"tollable": idx.tolist(), "gamma": gamma, "kind": kind}, **solver,
    )


def make_design(net: Network, ps: PathSet, expandable, w=None, beta: float = 1.0,
                kind: str = "affine", **solver) -> ScgProblem:
    """Capacity expansion: ``z`` are capacity additions, objective is time plus ``beta <w, z^2>``."""
    idx = _index_array(expandable, net.n_links, "expandable")
    w = np.asarray(net.u0 if w is None else w, dtype=float)
    if w.shape != (net.n_links,) or np.any(w < 0) or beta < 0:
        raise ScgError("weights must be nonnegative per link and beta nonnegative")
    game = RoutingGame(ps, CostModel.from_network(net, kind), coupling=Coupling("capacity"))
    return ScgProblem(
        game=game, objective_fn=partial(design_objective_fn, w=w, beta=float(beta)),
        feasible=FeasibleSet.orthant(net.n_links, idx), geometry="euclidean",
        z_dependent=True, family="design",
        params={"expandable": idx.tolist(), "w": w.tolist(), "beta": beta, "kind": kind}, **solver,
    )


def controlled_split(ps: PathSet, controlled_ods, alpha: float):
    """Split demand into free travelers and a controlled path set."""
    if not 0.0 <= alpha <= 1.0:
        raise ScgError("alpha must lie in [0, 1]")
    ods = _index_array(controlled_ods, ps.n_od, "controlled OD")
    if ods.size == 0:
        raise ScgError("need at least one controlled OD")
    free_demand = ps.demand.copy()
    free_demand[ods] *= 1.0 - alpha
    free_ps = ps.with_demand(free_demand)
    groups = [[ps.paths[k] for k in range(ps.od_ptr[w], ps.od_ptr[w + 1])] for w in ods]
    ctrl = PathSet.from_link_paths(ps.network, groups, ps.od_index[ods])
    ctrl = ctrl.with_demand(alpha * ps.demand[ods])
    return free_ps, ctrl, ods


def make_routing_control(net: Network, ps: PathSet, controlled_ods, alpha: float,
                         kind: str = "affine", **solver) -> ScgProblem:
    """Stackelberg routing: ``z`` are route probabilities of the controlled share."""
    free_ps, ctrl, ods = controlled_split(ps, controlled_ods, alpha)
    coupling = Coupling("controlled", controlled=ctrl, controlled_q=ctrl.q)
    game = RoutingGame(free_ps, CostModel.from_network(net, kind), coupling=coupling)
    solver.setdefault("rho", 0.05)
    return ScgProblem(
        game=game, objective_fn=total_time_objective,
        feasible=FeasibleSet("simplex", ctrl.n_paths, ptr=ctrl.od_ptr), geometry="entropic",
        z_dependent=True, family="routing_control",
        params={"controlled_ods": ods.tolist(), "alpha": alpha, "kind": kind}, **solver,
    )


def make_mixed_autonomy_pricing(net: Network, ps: PathSet, alpha: float, eta: float = 1.0,
                                gamma: float = 1.0, tollable=None, **solver) -> ScgProblem:
    """Class-specific tolls on a CAV/HDV population with revised BPR times.

    ``tollable`` is a pair of link index sets (CAV, HDV); by default every
    link is tollable for both classes.
    """
    n = net.n_links
    if tollable is None:
        tollable = (range(n), range(n))
    free = [int(a) for a in _index_array(tollable[0], n, "tollable")]
    free += [n + int(a) for a in _index_array(tollable[1], n, "tollable")]
    game = RoutingGame(
        ps, CostModel.from_network(net, "revised_bpr", eta=eta), ClassSpec.mixed(alpha),
        Coupling("class_toll", gamma),
    )
    return ScgProblem(
        game=game, objective_fn=total_time_objective,
        feasible=FeasibleSet.orthant(2 * n, free), geometry="euclidean",
        z_dependent=False, family="mixed_autonomy_pricing",
        params={"alpha": alpha, "eta": eta, "gamma": gamma}, **solver,
    )


# --------------------------------------------------------------------------
# problem documents
# --------------------------------------------------------------------------


@dataclass
class ProblemSpec:
    family: str
    params: dict = field(default_factory=dict)
    network_ref: str = ""
    path_k: int = 3
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ScgError(f"unknown problem family {self.family!r}")
        if self.path_k < 1:
            raise ScgError("path_k must be at least 1")
        alpha = self.params.get("alpha")
        if alpha is not None and not 0.0 <= alpha <= 1.0:
            raise ScgError("alpha must lie in [0, 1]")
        if self.params.get("beta", 0.0) < 0:
            raise ScgError("beta must be nonnegative")

    def to_json(self) -> str:
        return json.dumps({
            "family": self.family, "params": self.params, "network_ref": self.network_ref,
            "path_k": self.path_k, "seeds": self.seeds,
        })

    @classmethod
    def from_json(cls, text: str) -> "ProblemSpec":
        doc = json.loads(text)
        missing = {"family", "network_ref"} - set(doc)
        if missing:
            raise ScgError(f"problem document lacks {sorted(missing)}")
        return cls(doc["family"], doc.get("params", {}), doc["network_ref"],
                   int(doc.get("path_k", 3)), list(doc.get("seeds", [0])))

    def build(self, net: Network, ps: PathSet, **solver) -> ScgProblem:
        prm = dict(self.params)
        kind = prm.pop("kind", "affine")
        if self.family == "pricing":
            return make_pricing(net, ps, prm.get("tollable", range(net.n_links)),
                                prm.get("gamma", 1.0), kind, **solver)
        if self.family == "design":
            return make_design(net, ps, prm.get("expandable", range(net.n_links)), prm.get("w"),
                               prm.get("beta", 1.0), kind, **solver)
        if self.family == "routing_control":
            return make_routing_control(net, ps, prm.get("controlled_ods", range(ps.n_od)),
                                        prm.get("alpha", 1.0), kind, **solver)
        tollable = prm.get("tollable")
        return make_mixed_autonomy_pricing(net, ps, prm.get("alpha", 0.2), prm.get("eta", 1.0),
                                           prm.get("gamma", 1.0), tollable, **solver)


# --------------------------------------------------------------------------
# heuristics
# --------------------------------------------------------------------------


def we_and_ce_flows(net: Network, ps: PathSet, kind: str = "affine", cfg: IldConfig | None = None):
    cfg = cfg or IldConfig(r=0.01, eps=1e-10, max_iter=200_000)
    game = RoutingGame(ps, CostModel.from_network(net, kind))
    p0 = equal_distribution_init(ps)
    p_we = solve_we(game, p0, cfg=cfg).p
    p_ce = ce_solve(game, p0, cfg=cfg).p
    return ps.lam.matvec(ps.q * p_we), ps.lam.matvec(ps.q * p_ce)


def select_tollable(net: Network, ps: PathSet, xi: float, denominator: str = "ce",
                    kind: str = "affine", cfg: IldConfig | None = None, flows=None) -> list:
    """Links whose relative WE/CE flow discrepancy exceeds ``xi``.

    The discrepancy is ``|x_we - x_ce| / x_ref`` with ``x_ref`` the CE flow
    (``denominator="ce"``) or the WE flow (``"we"``); a zero reference flow
    counts as infinite discrepancy when the other flow is positive.
    """
    if xi <= 0:
        raise ScgError("threshold must be positive")
    if denominator not in ("ce", "we"):
        raise ScgError("denominator must be 'ce' or 'we'")
    x_we, x_ce = flows if flows is not None else we_and_ce_flows(net, ps, kind, cfg)
    ref = x_ce if denominator == "ce" else x_we
    diff = np.abs(x_we - x_ce)
    rel = np.divide(diff, ref, out=np.where(diff > 1e-9, np.inf, 0.0), where=ref > 0)
    return [int(a) for a in np.flatnonzero(rel > xi)]


def remaining_gap(objective: float, we_value: float, ce_value: float) -> float:
    """``(objective - CE) / (WE - CE)``."""
    span = we_value - ce_value
    if span <= 0:
        raise ScgError("WE and CE objectives coincide; remaining gap undefined")
    return (objective - ce_value) / span


def rank_od_potential(net: Network, ps: PathSet, alpha: float, kind: str = "affine",
                      rho: float = 0.05, **solver) -> list:
    """Order OD pairs by the predicted benefit of controlling their CAVs.

    The controlled strategy starts at the selfish equilibrium split.  One
    equilibrate-and-differentiate pass gives ``l_z``; each OD is scored by the
    first-order change ``<l_z, dz>`` from an entropic step restricted to its
    own controlled paths (more negative is better).  Returns
    ``[(od_pair, score)]`` sorted from most to least promising.
    """
    problem = make_routing_control(net, ps, range(ps.n_od), alpha, kind, rho=rho, **solver)
    base = RoutingGame(ps, CostModel.from_network(net, kind))
    p_we = solve_we(base, equal_distribution_init(ps), cfg=problem.ild_config()).p
    z = p_we.copy()  # controlled paths coincide with all paths here
    ut, _ = forward_record(problem, p_we, z, eps=problem.eps, max_T=problem.max_inner,
                           gap_kind=problem.gap_kind, min_T=1)
    grad = backward(ut).l_z
    scores = []
    for w in range(ps.n_od):
        sl = ps.od_slice(w)
        zw = z[sl]
        a = -rho * grad[sl]
        step = zw * np.exp(a - a.max())
        step /= step.sum()
        scores.append(float(np.dot(grad[sl], step - zw)))
    order = sorted(range(ps.n_od), key=lambda w: (scores[w], w))
    return [(net.od_pairs[ps.od_index[w]], scores[w]) for w in order]


# --------------------------------------------------------------------------
# named fixtures
# --------------------------------------------------------------------------

# Lower rates for the fixtures.  The theory-safe rate from the cocoercivity
# bound is far more conservative (about 0.002 on the classic Braess network);
# these values were checked to give monotone, linearly convergent ILD runs.
FIXTURE_RATES = {
    "two-link": 0.1,
    "braess": 0.02,
    "braess-no-bridge": 0.02,
    "braess-bpr": 0.4,
    "braess-bpr-no-bridge": 0.4,
    "3n4l": 0.1,
}

DESIGN_BETA = 5.0
MIXED_ALPHA = 0.2
MIXED_ETA = 1.0
CONTROL_ALPHA = 0.5


def _network_by_name(name: str):
    from .netcore import (
        braess_pathset, build_3n4l, build_braess, build_grid, build_parallel, build_two_link,
        enumerate_paths, parallel_pathset,
    )
    if name == "two-link":
        net = build_two_link()
        return net, parallel_pathset(net), "affine"
    if name in ("braess", "braess-no-bridge", "braess-bpr", "braess-bpr-no-bridge"):
        variant = "without_bridge" if name.endswith("no-bridge") else "with_bridge"
        costs = "bpr" if "bpr" in name else "classic"
        net = build_braess(variant, costs)
        return net, braess_pathset(net), ("bpr" if costs == "bpr" else "affine")
    if name == "3n4l":
        net = build_3n4l()
        return net, enumerate_paths(net, 4), "affine"
    if name.startswith("parallel-"):
        n = int(name.split("-", 1)[1])
        net = build_parallel(n, 1.0)
        return net, parallel_pathset(net), "affine"
    if name.startswith("skewed-grid-"):
        rows, cols = (int(v) for v in name.rsplit("-", 1)[1].split("x"))
        net = skewed_grid(rows, cols)
        return net, enumerate_paths(net, 4), "affine"
    if name.startswith("grid-"):
        rows, cols = (int(v) for v in name.split("-", 1)[1].split("x"))
        net = build_grid(rows, cols)
        return net, enumerate_paths(net, 4), "affine"
    raise KeyError(name)


def skewed_grid(rows: int, cols: int):
    """Grid with deterministic, uneven free-flow times and slopes.

    On the uniform grid every corner-to-corner path has the same free-flow
    time, which makes the selfish and cooperative flows coincide.
    """
    from .netcore import build_grid
    net = build_grid(rows, cols)
    a = np.arange(net.n_links)
    return net.replace(u0=1.0 + 0.5 * (3 * a % 4), b=0.2 + 0.3 * (7 * a % 5), name=f"skewed-grid-{rows}x{cols}")


def fixture_network(name: str):
    """``(network, path set, cost kind)`` for a named fixture network."""
    try:
        return _network_by_name(name)
    except (KeyError, ValueError):
        raise ScgError(f"unknown fixture {name!r}") from None


def fixture_rate(name: str) -> float:
    if name.startswith("parallel-"):
        return 0.5
    if name.startswith(("grid-", "skewed-grid-")):
        return 0.05
    return FIXTURE_RATES[name]


def fixture_game(name: str) -> RoutingGame:
    net, ps, kind = fixture_network(name)
    return RoutingGame(ps, CostModel.from_network(net, kind))


# problem fixtures: (network fixture, family, builder arguments, solver defaults)
PROBLEM_FIXTURES = {
    "two-link-pricing": ("two-link", "pricing", {"tollable": [0, 1]}, {"r": 0.1, "rho": 0.05}),
    "braess-pricing": ("braess", "pricing", {"tollable": [0, 1, 2, 3, 4]},
                       {"r": 0.02, "rho": 0.002, "tau": 1e-6, "eps": 1e-8}),
    "braess-design": ("braess-bpr", "design",
                      {"expandable": [0, 1, 2, 4], "beta": DESIGN_BETA, "kind": "bpr"},
                      {"r": 0.4, "rho": 0.05, "tau": 1e-8, "eps": 1e-10}),
    "braess-routing": ("braess-bpr", "routing_control",
                       {"controlled_ods": [0], "alpha": CONTROL_ALPHA, "kind": "bpr"},
                       {"r": 0.4, "rho": 0.05, "tau": 1e-8, "eps": 1e-10}),
    "braess-mixed": ("braess-bpr", "mixed_autonomy_pricing",
                     {"alpha": MIXED_ALPHA, "eta": MIXED_ETA, "gamma": 1.0},
                     {"r": 0.2, "rho": 0.05, "tau": 1e-6, "eps": 1e-8}),
}


def fixture_problem(name: str, **overrides) -> ScgProblem:
    """Build a named problem fixture; keyword arguments override solver settings."""
    if name not in PROBLEM_FIXTURES:
        raise ScgError(f"unknown problem fixture {name!r}; choose from {sorted(PROBLEM_FIXTURES)}")
    net_name, family, params, solver = PROBLEM_FIXTURES[name]
    net, ps, _ = fixture_network(net_name)
    solver = {**solver, **{k: v for k, v in overrides.items() if v is not None}}
    return ProblemSpec(family, dict(params), net_name).build(net, ps, **solver)
