"""Upper-level solvers for Stackelberg congestion games.

The leader's decision ``z`` is updated by mirror descent using gradients of
the unrolled (or equilibrated) lower-level dynamics.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tape as tp
from .costmodel import RoutingGame, as_rows
from .dynamics import (
    IldConfig, equal_distribution_init, gap_from_costs, ild_from_costs, random_init, solve_we,
)
from .unroll import backward, forward_record


class ScgError(ValueError):
    """Invalid problem setup or solver request."""


# --------------------------------------------------------------------------
# feasible sets and the mirror-descent step
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeasibleSet:
    """Domain of the leader's decision.

    ``orthant``: ``z >= 0`` with ``z[fixed] == 0``.
    ``simplex``: each segment ``ptr[j]:ptr[j+1]`` is a probability simplex.
    ``box``: ``lower <= z <= upper``.
    """

    kind: str
    size: int
    fixed: np.ndarray | None = None
    ptr: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("orthant", "simplex", "box"):
            raise ScgError(f"unknown feasible set {self.kind!r}")
        if self.kind == "orthant":
            fixed = np.zeros(self.size, bool) if self.fixed is None else np.asarray(self.fixed, bool)
            if fixed.shape != (self.size,):
                raise ScgError("fixed mask has the wrong length")
            object.__setattr__(self, "fixed", fixed)
        if self.kind == "simplex":
            ptr = np.asarray(self.ptr, dtype=np.int64)
            if ptr[0] != 0 or ptr[-1] != self.size or np.any(np.diff(ptr) <= 0):
                raise ScgError("simplex segments must tile the decision vector")
            object.__setattr__(self, "ptr", ptr)
        if self.kind == "box":
            lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
            if lo.shape != (self.size,) or hi.shape != (self.size,) or np.any(lo > hi):
                raise ScgError("invalid box bounds")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)

    @classmethod
    def orthant(cls, size: int, free=None) -> "FeasibleSet":
        """Nonnegative orthant where only indices in ``free`` may be nonzero."""
        fixed = np.zeros(size, bool)
        if free is not None:
            fixed[:] = True
            fixed[np.asarray(list(free), dtype=np.int64)] = False
        return cls("orthant", size, fixed=fixed)

    def contains(self, z, tol: float = 1e-12) -> bool:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.size,) or not np.all(np.isfinite(z)):
            return False
        if self.kind == "orthant":
            return bool(np.all(z >= 0) and np.all(z[self.fixed] == 0))
        if self.kind == "simplex":
            sums = np.add.reduceat(z, self.ptr[:-1]) if self.size else np.zeros(0)
            return bool(np.all(z >= 0) and np.all(np.abs(sums - 1) <= tol))
        return bool(np.all(z >= self.lower) and np.all(z <= self.upper))

    def project(self, z) -> np.ndarray:
        """Euclidean projection."""
        z = np.asarray(z, dtype=float)
        if self.kind == "orthant":
            out = np.maximum(z, 0.0)
            out[self.fixed] = 0.0
            return out
        if self.kind == "box":
            return np.clip(z, self.lower, self.upper)
        out = np.empty_like(z)
        for lo, hi in zip(self.ptr[:-1], self.ptr[1:]):
            out[lo:hi] = _project_simplex(z[lo:hi])
        return out

    def sample(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        if self.kind == "orthant":
            z = rng.uniform(0.0, scale, self.size)
            z[self.fixed] = 0.0
            return z
        if self.kind == "box":
            return rng.uniform(self.lower, self.upper)
        e = rng.exponential(size=self.size)
        return e / np.repeat(np.add.reduceat(e, self.ptr[:-1]), np.diff(self.ptr))

    def default_point(self) -> np.ndarray:
        if self.kind == "orthant":
            return np.zeros(self.size)
        if self.kind == "box":
            return self.project(np.zeros(self.size))
        return 1.0 / np.repeat(np.diff(self.ptr), np.diff(self.ptr)).astype(float)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def upper_md_step(z, grad, rho: float, geometry: str, feasible: FeasibleSet) -> np.ndarray:
    """Mirror-descent step ``argmin rho<grad, y - z> + D(y, z)`` over the feasible set."""
    z, grad = np.asarray(z, dtype=float), np.asarray(grad, dtype=float)
    if not feasible.contains(z, tol=1e-9):
        raise ScgError("current decision is infeasible")
    if not np.all(np.isfinite(grad)):
        raise ScgError("non-finite gradient")
    if geometry == "euclidean":
        return feasible.project(z - rho * grad)
    if geometry != "entropic":
        raise ScgError(f"unknown geometry {geometry!r}")
    if feasible.kind == "simplex":
        # zero entries stay zero; shifting by the live maximum keeps exponents <= 0
        out = np.zeros_like(z)
        for lo, hi in zip(feasible.ptr[:-1], feasible.ptr[1:]):
            a = -rho * grad[lo:hi]
            live = z[lo:hi] > 0
            w = z[lo:hi][live] * np.exp(a[live] - a[live].max())
            out[lo:hi][live] = w / w.sum()
        return out
    raise ScgError("entropic geometry needs a simplex domain")


def termination_metric(grad, z, z_next, rho: float) -> float:
    """Normalized decrement ``-<grad, z_next - z> / rho``."""
    return float(-np.dot(np.asarray(grad, float), np.asarray(z_next, float) - np.asarray(z, float)) / rho)


# --------------------------------------------------------------------------
# the problem record
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScgProblem:
    """A leader objective over a routing game plus solver parameters."""

    game: RoutingGame
    objective_fn: Callable
    feasible: FeasibleSet
    geometry: str = "euclidean"
    r: float = 0.1
    rho: float = 0.1
    tau: float = 1e-6
    eps: float = 1e-8
    z_dependent: bool = True
    family: str = "custom"
    params: dict = field(default_factory=dict)
    max_outer: int = 5000
    max_inner: int = 100_000
    gap_kind: str = "relative"
    halve_on_increase: bool = False

    def __post_init__(self):
        if self.r <= 0 or self.rho <= 0 or self.tau <= 0 or self.eps <= 0:
            raise ScgError("r, rho, tau and eps must be positive")
        if self.geometry not in ("euclidean", "entropic"):
            raise ScgError(f"unknown geometry {self.geometry!r}")
        if self.geometry == "entropic" and self.feasible.kind != "simplex":
            raise ScgError("entropic geometry needs a simplex domain")
        if self.feasible.size != self.game.z_size() and self.game.z_size() != 0:
            raise ScgError("feasible set size does not match the decision vector")

    def objective(self, p_rows, z):
        return self.objective_fn(self.game, p_rows, z)

    def evaluate(self, p, z) -> float:
        return float(self.objective(as_rows(p), np.asarray(z, dtype=float)))

    def with_params(self, **changes) -> "ScgProblem":
        return replace(self, **changes)

    def p0(self) -> np.ndarray:
        return equal_distribution_init(self.game.paths, self.game.n_classes)

    def z0(self) -> np.ndarray:
        return self.feasible.default_point()

    def ild_config(self) -> IldConfig:
        return IldConfig(r=self.r, eps=self.eps, max_iter=self.max_inner, gap_kind=self.gap_kind)

    def costs(self, p, z) -> np.ndarray:
        rows = self.game.path_costs(as_rows(p), np.asarray(z, dtype=float))
        return rows[0] if np.ndim(p) == 1 else np.vstack(rows)

    def gap(self, p, z) -> float:
        return gap_from_costs(self.game, p, self.costs(p, z), self.gap_kind)

    def md_step(self, z, grad, rho: float | None = None) -> np.ndarray:
        return upper_md_step(z, grad, self.rho if rho is None else rho, self.geometry, self.feasible)

    def self_check(self) -> None:
        """Objective and gradient finite at the default point; projection idempotent."""
        p, z = self.p0(), self.z0()
        val = self.evaluate(p, z)
        ut, _ = forward_record(self, p, z, 1)
        g = backward(ut).l_z
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            raise ScgError("objective or gradient not finite at the default point")
        zp = self.feasible.project(z)
        if not np.allclose(self.feasible.project(zp), zp, atol=1e-14, rtol=0):
            raise ScgError("projection is not idempotent")


# --------------------------------------------------------------------------
# results and logs
# --------------------------------------------------------------------------


LOG_COLUMNS = ("iter", "objective", "lower_gap", "upper_metric", "elapsed_s")


@dataclass
class SolveResult:
    z: np.ndarray
    p: np.ndarray
    objective: float
    status: str
    log: list = field(default_factory=list)
    algorithm: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def __iter__(self):
        # ``z, p, log = dol_md(...)``
        return iter((self.z, self.p, self.log))

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.log:
            writer.writerow([row["iter"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def solution_dict(self) -> dict:
        return {
            "z": self.z.tolist(),
            "p": np.asarray(self.p).tolist(),
            "objective": self.objective,
            "status": self.status,
        }

    def solution_json(self) -> str:
        return json.dumps(self.solution_dict())


class _Log:
    def __init__(self):
        self.rows = []
        self.t0 = time.perf_counter()

    def add(self, it, objective, gap, metric):
        self.rows.append({
            "iter": it, "objective": float(objective), "lower_gap": float(gap),
            "upper_metric": float(metric), "elapsed_s": time.perf_counter() - self.t0,
        })


class _StepSize:
    """Constant rho, optionally halved after 5 consecutive objective increases."""

    PATIENCE = 5

    def __init__(self, problem: ScgProblem):
        self.rho = problem.rho
        self.enabled = problem.halve_on_increase
        self.prev = float("inf")
        self.rises = 0

    def observe(self, objective: float) -> None:
        self.rises = self.rises + 1 if objective > self.prev else 0
        self.prev = objective
        if self.enabled and self.rises >= self.PATIENCE:
            self.rho /= 2
            self.rises = 0


def _check_start(problem: ScgProblem, p0, z0):
    z0 = problem.z0() if z0 is None else np.asarray(z0, dtype=float)
    p0 = problem.p0() if p0 is None else np.asarray(p0, dtype=float)
    if not problem.feasible.contains(z0, tol=1e-9):
        raise ScgError("initial decision is infeasible")
    return p0, z0.copy()


# --------------------------------------------------------------------------
# algorithms
# --------------------------------------------------------------------------


def dol_md(problem: ScgProblem, p0=None, z0=None, min_depth: int = 1) -> SolveResult:
    """Double loop: equilibrate from ``p0`` (depth set by the gap test), differentiate, step ``z``.

    At least ``min_depth`` layers are recorded so that a start already at
    equilibrium still sees how the flows respond to ``z``.
    """
    p0, z = _check_start(problem, p0, z0)
    log = _Log()
    step = _StepSize(problem)
    p_eq = p0
    for i in range(problem.max_outer):
        ut, value = forward_record(problem, p0, z, eps=problem.eps, max_T=problem.max_inner,
                                   gap_kind=problem.gap_kind, min_T=min_depth)
        p_eq = ut.p_final
        gap = problem.gap(p_eq, z)
        if gap > problem.eps:
            log.add(i, value, gap, float("nan"))
            return SolveResult(z, p_eq, value, "inner_not_converged", log.rows, "dol")
        grad = backward(ut).l_z
        step.observe(value)
        z_next = problem.md_step(z, grad, step.rho)
        metric = termination_metric(grad, z, z_next, step.rho)
        log.add(i, value, gap, metric)
        if metric < problem.tau:
            return SolveResult(z, p_eq, value, "converged", log.rows, "dol")
        z = z_next
    return SolveResult(z, p_eq, problem.evaluate(p_eq, z), "max_outer", log.rows, "dol")


def sil_md(problem: ScgProblem, p0=None, z0=None, T: int = 1) -> SolveResult:
    """Single loop: leader looks ``T`` ILD steps ahead while travelers take one step."""
    if T < 0:
        raise ScgError("anticipation depth must be nonnegative")
    if T == 0 and not problem.z_dependent:
        raise ScgError("T=0 gives a zero gradient when the objective does not depend on z directly")
    p, z = _check_start(problem, p0, z0)
    game = problem.game
    log = _Log()
    step = _StepSize(problem)
    for i in range(problem.max_outer):
        ut, value = forward_record(problem, p, z, T)
        grad = backward(ut).l_z
        step.observe(value)
        z_next = problem.md_step(z, grad, step.rho)
        metric = termination_metric(grad, z, z_next, step.rho)
        c = problem.costs(p, z)
        p_next = ild_from_costs(game.paths, p, c, problem.r)
        p, z = p_next, z_next
        gap = problem.gap(p, z)
        log.add(i, problem.evaluate(p, z), gap, metric)
        if gap <= problem.eps and metric < problem.tau:
            return SolveResult(z, p, problem.evaluate(p, z), "converged", log.rows, f"sil{T}")
    return SolveResult(z, p, problem.evaluate(p, z), "max_outer", log.rows, f"sil{T}")


def _minimize_at_fixed_p(problem: ScgProblem, p, z, max_iter: int):
    """Upper mirror descent at fixed ``p`` until the metric drops below tau."""
    steps, metric = 0, float("inf")
    for steps in range(max_iter):
        ut, _ = forward_record(problem, p, z, 0)
        grad = backward(ut).l_z
        z_next = problem.md_step(z, grad)
        metric = termination_metric(grad, z, z_next, problem.rho)
        if metric < problem.tau:
            return z, steps, metric
        z = z_next
    return z, steps + 1, metric


def ioa(problem: ScgProblem, p0=None, z0=None, max_upper: int = 100_000) -> SolveResult:
    """Alternate a full equilibrium solve with a full upper minimization at fixed flows.

    Stops when the decision is already stationary for the newly equilibrated flows.
    """
    if not problem.z_dependent:
        raise ScgError("alternation needs an objective that depends on z directly")
    p0, z = _check_start(problem, p0, z0)
    log = _Log()
    p = p0
    for k in range(problem.max_outer):
        we = solve_we(problem.game, p0, z, problem.ild_config())
        p = we.p
        if not we.converged:
            return SolveResult(z, p, problem.evaluate(p, z), "inner_not_converged", log.rows, "ioa")
        z_new, steps, metric = _minimize_at_fixed_p(problem, p, z, max_upper)
        log.add(k, problem.evaluate(p, z), we.trace[-1], metric)
        if steps == 0:
            return SolveResult(z, p, problem.evaluate(p, z), "converged", log.rows, "ioa")
        z = z_new
    return SolveResult(z, p, problem.evaluate(p, z), "max_outer", log.rows, "ioa")


def marginal_path_costs(problem: ScgProblem, p, z):
    """Objective gradient in path flows, ``l_p / q`` (zero where ``q`` is 0), plus ``l_z``."""
    ut, _ = forward_record(problem, p, z, 0)
    res = backward(ut)
    q = problem.game.class_q
    lp = np.atleast_2d(res.l_p0)
    c = np.divide(lp, q, out=np.zeros_like(lp), where=q > 0)
    return (c[0] if np.ndim(p) == 1 else c), res.l_z


def so_solve(problem: ScgProblem, p0=None, z0=None) -> SolveResult:
    """Joint minimization over (p, z) ignoring the equilibrium constraint.

    ILD on marginal path costs for ``p`` and a mirror-descent step for ``z``.
    """
    p, z = _check_start(problem, p0, z0)
    game = problem.game
    log = _Log()
    for i in range(problem.max_outer * 20):
        c, grad = marginal_path_costs(problem, p, z)
        gap = gap_from_costs(game, p, c, problem.gap_kind)
        z_next = problem.md_step(z, grad)
        metric = termination_metric(grad, z, z_next, problem.rho)
        log.add(i, problem.evaluate(p, z), gap, metric)
        if gap <= problem.eps and metric < problem.tau:
            return SolveResult(z, p, problem.evaluate(p, z), "converged", log.rows, "so")
        p = ild_from_costs(game.paths, p, c, problem.r)
        z = z_next
    return SolveResult(z, p, problem.evaluate(p, z), "max_outer", log.rows, "so")


def cournot_residual(problem: ScgProblem, p, z, T: int = 0) -> tuple[float, float]:
    """(upper VI residual, lower gap) at ``(p, z)``.

    The upper residual is the mirror-descent decrement of the depth-``T``
    gradient; it is nonnegative and vanishes exactly when ``z`` solves the
    variational inequality over the feasible set.
    """
    ut, _ = forward_record(problem, p, z, T)
    grad = backward(ut).l_z
    z_next = problem.md_step(z, grad)
    return termination_metric(grad, z, z_next, problem.rho), problem.gap(p, z)


ALGORITHMS = {"dol": dol_md, "ioa": ioa, "so": so_solve}


def run_algorithm(problem: ScgProblem, alg: str, p0=None, z0=None, T: int = 1) -> SolveResult:
    if alg == "sil":
        return sil_md(problem, p0, z0, T)
    if alg not in ALGORITHMS:
        raise ScgError(f"unknown algorithm {alg!r}")
    return ALGORITHMS[alg](problem, p0, z0)


# --------------------------------------------------------------------------
# multi-start
# --------------------------------------------------------------------------


def worker_count(default: int | None = None) -> int:
    env = os.environ.get("STACKROUTE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ScgError(f"STACKROUTE_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return default or max(1, min(os.cpu_count() or 1, 8))


def _start_point(problem: ScgProblem, seed: int, init: str):
    rng = np.random.default_rng(seed)
    if init == "equal":
        return problem.p0(), problem.z0()
    p0 = random_init(problem.game.paths, rng, problem.game.n_classes)
    return p0, problem.z0()


def _solve_seed(args):
    problem, alg, seed, init, T = args
    p0, z0 = _start_point(problem, seed, init)
    res = run_algorithm(problem, alg, p0, z0, T)
    return seed, res


def multistart(problem: ScgProblem, alg: str, seeds, init: str = "random", T: int = 1,
               workers: int | None = None) -> list:
    """Run ``alg`` from one random start per seed; returns ``[(seed, SolveResult)]``."""
    jobs = [(problem, alg, int(s), init, T) for s in seeds]
    n = workers or worker_count()
    if n == 1 or len(jobs) <= 1:
        return [_solve_seed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
        return list(pool.map(_solve_seed, jobs))


def parallel_map(fn, items, workers: int | None = None) -> list:
    n = workers or worker_count()
    items = list(items)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
