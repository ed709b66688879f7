"""Route-choice dynamics, equilibrium gaps and equilibrium solvers.

A routing state is an array of path probabilities: shape (K,) for a single
class or (M, K) for M classes, each row lying on the product of per-OD
simplices defined by the path set.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tape as tp
from .costmodel import RoutingGame, as_rows, zeros_z
from .netcore import PathSet


class DegenerateGapError(ValueError):
    """Relative gap requested at a state with zero total cost."""


@dataclass(frozen=True)
class IldConfig:
    r: float = 0.1
    max_iter: int = 100_000
    eps: float = 1e-10
    gap_kind: str = "relative"

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.eps <= 0:
            raise ValueError("gap tolerance must be positive")
        if self.gap_kind not in ("absolute", "relative"):
            raise ValueError(f"unknown gap kind {self.gap_kind!r}")


@dataclass
class DualAveragingState:
    s: np.ndarray
    t: int = 0
    watling: bool = False
    schedule: Callable[[int], float] | None = None

    def alpha(self) -> float:
        if self.schedule is not None:
            return float(self.schedule(self.t))
        return self.t / (self.t + 1.0)


@dataclass
class WeResult:
    p: np.ndarray
    iterations: int
    trace: list
    converged: bool
    kl_trace: list = field(default_factory=list)

    def __iter__(self):
        # allows ``p, iters, trace = solve_we(...)``
        return iter((self.p, self.iterations, self.trace))

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "gap", "kl_to_reference"])
        for t, g in enumerate(self.trace):
            kl = repr(self.kl_trace[t]) if t < len(self.kl_trace) else ""
            writer.writerow([t, repr(float(g)), kl])
        return buf.getvalue()


@dataclass(frozen=True)
class CocoercivityEstimate:
    L: float
    c: float
    safe_rate: float
    bounded: bool = True

    def practical_rate(self, factor: float = 0.9) -> float:
        return factor * self.safe_rate


# --------------------------------------------------------------------------
# the ILD map
# --------------------------------------------------------------------------


def _support_shift(ps: PathSet, v: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Per-path constant: max of ``v`` over the OD's support paths."""
    masked = np.where(p > 0, v, -np.inf)
    top = ps.od_max(masked)
    top = np.where(np.isfinite(top), top, 0.0)
    return ps.spread(top)


def ild_update(ps: PathSet, p, c, r: float):
    """One ILD update of a single class row given its path costs.

    Works on arrays or tape variables; the per-OD overflow shift is a
    constant computed from current values.
    """
    neg = tp.scale(c, -r)
    shift = _support_shift(ps, tp.value(neg), tp.value(p))
    e = tp.exp(neg, shift)
    g = e * p
    s = tp.rmatvec(ps.sigma, tp.matvec(ps.sigma, g))
    return tp.div(g, s), (e, g, s)


def _check_costs(c_rows):
    for c in c_rows:
        if not np.all(np.isfinite(tp.value(c))):
            raise FloatingPointError("non-finite path cost")


def ild_step(game: RoutingGame, p, z=None, r: float = 0.1) -> np.ndarray:
    """One step of imitative logit dynamics (all classes)."""
    z = zeros_z(game) if z is None else np.asarray(z, dtype=float)
    rows = as_rows(p)
    c_rows = game.path_costs(rows, z)
    _check_costs(c_rows)
    out = [ild_update(game.paths, pm, cm, r)[0] for pm, cm in zip(rows, c_rows)]
    return out[0] if np.ndim(p) == 1 else np.vstack(out)


def ild_step_multiclass(game: RoutingGame, p, z=None, r: float = 0.1) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 2:
        raise ValueError("multi-class state must have shape (M, K)")
    return ild_step(game, p, z, r)


def ild_from_costs(ps: PathSet, p, c, r: float) -> np.ndarray:
    """ILD update for given costs; ``p`` and ``c`` have shape (K,) or (M, K)."""
    p, c = np.asarray(p, dtype=float), np.asarray(c, dtype=float)
    if p.ndim == 1:
        return ild_update(ps, p, c, r)[0]
    return np.vstack([ild_update(ps, pm, cm, r)[0] for pm, cm in zip(p, c)])


def softmax_per_od(ps: PathSet, scores: np.ndarray, r: float) -> np.ndarray:
    return ild_from_costs(ps, np.ones_like(scores), scores, r)


def dual_averaging_step(game: RoutingGame, state: DualAveragingState, p_unused=None, z=None, r: float = 0.1):
    """Score-averaging dynamics: accumulate costs, play the per-OD softmax.

    Costs are evaluated at the strategy implied by the current score.
    """
    z = zeros_z(game) if z is None else np.asarray(z, dtype=float)
    s = np.asarray(state.s, dtype=float)
    p = softmax_per_od(game.paths, s, r) if s.ndim == 1 else np.vstack(
        [softmax_per_od(game.paths, row, r) for row in s])
    c = np.asarray(game.path_costs(as_rows(p), z))
    c = c[0] if s.ndim == 1 else c
    if state.watling:
        a = state.alpha()
        s_new = a * s + (1.0 - a) * c
    else:
        s_new = s + c
    new_state = DualAveragingState(s_new, state.t + 1, state.watling, state.schedule)
    p_new = softmax_per_od(game.paths, s_new, r) if s.ndim == 1 else np.vstack(
        [softmax_per_od(game.paths, row, r) for row in s_new])
    return p_new, new_state


# --------------------------------------------------------------------------
# gaps and assignments
# --------------------------------------------------------------------------


def all_or_nothing(ps: PathSet, c) -> np.ndarray:
    """Unit mass on the cheapest path of each OD (lowest index on ties)."""
    c = np.asarray(c, dtype=float)
    if c.ndim == 2:
        return np.vstack([all_or_nothing(ps, row) for row in c])
    out = np.zeros_like(c)
    for w in range(ps.n_od):
        sl = ps.od_slice(w)
        out[sl.start + int(np.argmin(c[sl]))] = 1.0
    return out


def gap_absolute_from_costs(ps: PathSet, p, c, q_rows) -> float:
    p, c = np.atleast_2d(p), np.atleast_2d(c)
    q_rows = np.atleast_2d(q_rows)
    total = 0.0
    for pm, cm, qm in zip(p, c, q_rows):
        # summing nonnegative excess costs keeps the result >= 0 in floating point
        total += float(np.dot(qm * pm, cm - ps.spread(ps.od_min(cm))))
    return total


def gap_relative_from_costs(ps: PathSet, p, c) -> float:
    p, c = np.atleast_2d(p), np.atleast_2d(c)
    worst = 0.0
    for pm, cm in zip(p, c):
        cp = float(np.dot(cm, pm))
        if cp <= 0:
            raise DegenerateGapError("zero total cost; relative gap undefined")
        worst = max(worst, float(np.dot(pm, cm - ps.spread(ps.od_min(cm)))) / cp)
    return worst


def gap_absolute(game: RoutingGame, p, z=None) -> float:
    """Demand-weighted gap: total cost minus all-or-nothing cost (all classes)."""
    c = _costs(game, p, z)
    return gap_absolute_from_costs(game.paths, p, c, game.class_q)


def gap_relative(game: RoutingGame, p, z=None) -> float:
    """Largest per-class ratio of excess cost to current cost (probability space)."""
    return gap_relative_from_costs(game.paths, p, _costs(game, p, z))


gap_relative_multiclass = gap_relative


def _costs(game, p, z):
    z = zeros_z(game) if z is None else np.asarray(z, dtype=float)
    rows = game.path_costs(as_rows(p), z)
    return rows[0] if np.ndim(p) == 1 else np.vstack(rows)


def gap_from_costs(game: RoutingGame, p, c, kind: str) -> float:
    if kind == "absolute":
        return gap_absolute_from_costs(game.paths, p, c, game.class_q)
    return gap_relative_from_costs(game.paths, p, c)


# --------------------------------------------------------------------------
# initial states
# --------------------------------------------------------------------------


def equal_distribution_init(ps: PathSet, n_classes: int = 1) -> np.ndarray:
    counts = np.diff(ps.od_ptr)
    row = ps.spread(1.0 / counts)
    return row.copy() if n_classes == 1 else np.tile(row, (n_classes, 1))


def random_init(ps: PathSet, rng: np.random.Generator, n_classes: int = 1) -> np.ndarray:
    """Uniform draw on each OD simplex (normalized exponentials)."""
    e = rng.exponential(size=(n_classes, ps.n_paths))
    p = e / ps.spread(np.vstack([ps.od_sum(row) for row in e]))
    return p[0] if n_classes == 1 else p


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------


def solve_we(game: RoutingGame, p0, z=None, cfg: IldConfig = IldConfig(), reference=None) -> WeResult:
    """Iterate ILD from ``p0`` until the gap drops to ``cfg.eps``.

    The trace holds the gap of every visited state, including the returned
    one.  If ``reference`` is given, the KL divergence from it is traced too.
    """
    z = zeros_z(game) if z is None else np.asarray(z, dtype=float)
    p = np.array(p0, dtype=float)
    trace, kl_trace = [], []
    for t in range(cfg.max_iter + 1):
        c = _costs(game, p, z)
        _check_costs([c])
        gap = gap_from_costs(game, p, c, cfg.gap_kind)
        trace.append(gap)
        if reference is not None:
            kl_trace.append(kl_total(game.paths, reference, p))
        if gap <= cfg.eps:
            return WeResult(p, t, trace, True, kl_trace)
        if t == cfg.max_iter:
            break
        p = ild_from_costs(game.paths, p, c, cfg.r)
    return WeResult(p, cfg.max_iter, trace, False, kl_trace)


def ce_solve(game: RoutingGame, p0, z=None, cfg: IldConfig = IldConfig()) -> WeResult:
    """Cooperative equilibrium: ILD driven by system-marginal link costs.

    Supports single-class games with the ``none`` or ``capacity`` coupling.
    """
    if game.n_classes != 1 or game.coupling.kind not in ("none", "capacity"):
        raise ValueError("ce_solve supports single-class games without tolls or control")
    z = zeros_z(game) if z is None else np.asarray(z, dtype=float)
    cap_add = z if game.coupling.kind == "capacity" else None
    ps = game.paths
    p = np.array(p0, dtype=float)
    trace = []
    if float(ps.demand.sum()) == 0.0:
        return WeResult(p, 0, [0.0], True)
    for t in range(cfg.max_iter + 1):
        x = ps.lam.matvec(ps.q * p)
        c = ps.lam.rmatvec(game.cost.marginal(x, cap_add))
        gap = gap_from_costs(game, p, c, cfg.gap_kind)
        trace.append(gap)
        if gap <= cfg.eps:
            return WeResult(p, t, trace, True)
        if t == cfg.max_iter:
            break
        p = ild_from_costs(ps, p, c, cfg.r)
    return WeResult(p, cfg.max_iter, trace, False)


# --------------------------------------------------------------------------
# convergence-theory helpers
# --------------------------------------------------------------------------


def cover_check(ps: PathSet, p_star, p0) -> bool:
    """True when every path used by ``p_star`` is also used by ``p0``."""
    return bool(np.all((np.asarray(p_star) <= 0) | (np.asarray(p0) > 0)))


def kl_total(ps: PathSet, p_a, p_b) -> float:
    """Sum over ODs (and classes) of KL(p_a || p_b); infinite when not covered."""
    p_a, p_b = np.asarray(p_a, dtype=float), np.asarray(p_b, dtype=float)
    used = p_a > 0
    if np.any(used & (p_b <= 0)):
        return float("inf")
    return float(np.sum(p_a[used] * np.log(p_a[used] / p_b[used])))


def _spectral_norm(m: np.ndarray, iters: int = 200) -> float:
    if m.size == 0:
        return 0.0
    v = np.ones(m.shape[1]) / np.sqrt(m.shape[1])
    for _ in range(iters):
        w = m.T @ (m @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
    return float(np.sqrt(np.linalg.norm(m.T @ (m @ v))))


def _norm_bound(ps: PathSet, weights: np.ndarray, small: bool) -> float:
    """Bound on the 2-norm of ``lam @ diag(weights)``."""
    if small:
        return _spectral_norm(ps.lam.toarray() * weights[None, :])
    # sqrt(max row sum * max column sum) of the absolute matrix
    row = ps.lam.matvec(np.abs(weights))
    col = np.abs(weights) * np.diff(ps.lam.indptr)
    return float(np.sqrt(row.max() * col.max()))


def estimate_cocoercivity(game: RoutingGame, z=None, small_limit: int = 2000) -> CocoercivityEstimate:
    """Bound ``L`` on the path-cost Jacobian and the constant ``c = 1/(4L)``.

    The link-cost derivative is bounded by its value at the largest possible
    link flow (every traveler on the link).
    """
    if game.n_classes != 1 or game.cost.kind == "revised_bpr":
        raise ValueError("cocoercivity bound needs a single-class separable cost")
    z = zeros_z(game) if z is None else np.asarray(z, dtype=float)
    ps = game.paths
    cap_add = None
    if game.coupling.kind == "capacity":
        cap_add = z
    elif game.coupling.kind == "controlled":
        raise ValueError("controlled coupling is not covered by the bound")
    x_max = ps.lam.matvec(ps.q)
    du = game.cost.derivative(x_max, cap_add)
    if not np.all(np.isfinite(du)):
        return CocoercivityEstimate(float("inf"), 0.0, 0.0, bounded=False)
    small = ps.n_paths * ps.n_links <= small_limit**2
    lam_t = _norm_bound(ps, np.ones(ps.n_paths), small)
    lam_q = _norm_bound(ps, ps.q, small)
    L = lam_t * float(np.max(du)) * lam_q
    if L <= 0:
        return CocoercivityEstimate(0.0, float("inf"), float("inf"), bounded=True)
    c = 1.0 / (4.0 * L)
    return CocoercivityEstimate(L, c, 2.0 * c)


def safe_rate(game: RoutingGame, r: float, z=None, factor: float = 0.9) -> float:
    """``min(r, factor * 2c)``; falls back to ``r`` with a warning."""
    try:
        est = estimate_cocoercivity(game, z)
    except ValueError as exc:
        warnings.warn(f"no cocoercivity estimate ({exc}); using r={r}")
        return r
    return min(r, factor * est.safe_rate)
