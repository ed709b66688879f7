"""Link and path cost evaluation.

All evaluation functions accept numpy arrays or tape :class:`~stackroute.tape.Var`
objects, so they serve both the numeric solvers and the unrolled
differentiation.  A routing state is passed as a list of per-class rows
``p_rows`` (one path-probability vector per user class).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .netcore import Incidence, Network, PathSet

KINDS = ("affine", "bpr", "revised_bpr")
COUPLINGS = ("none", "toll", "class_toll", "capacity", "controlled")


@dataclass(frozen=True)
class CostModel:
    """Separable link travel-time function.

    ``affine``: ``u0 + slope * x``.  ``bpr``: ``u0 * (1 + coef * (x / v0) ** power)``.
    ``revised_bpr``: the BPR form with capacity inflated by
    ``1 + eta * share ** 2`` where ``share`` is the CAV fraction of link flow.
    """

    kind: str
    u0: np.ndarray
    v0: np.ndarray
    slope: np.ndarray
    power: np.ndarray
    coef: np.ndarray
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.kind != "affine" and np.any(np.asarray(self.v0) <= 0):
            raise ValueError("BPR-type costs need positive capacities")

    @classmethod
    def from_network(cls, net: Network, kind: str = "affine", eta: float = 0.0) -> "CostModel":
        return cls(kind=kind, u0=net.u0, v0=net.v0, slope=net.b, power=net.power, coef=net.bpr_b, eta=eta)

    @property
    def n_links(self) -> int:
        return len(self.u0)

    def _uniform_power(self):
        pw = np.asarray(self.power, dtype=float)
        return float(pw[0]) if pw.size and np.all(pw == pw[0]) else pw

    # ------------------------------------------------------------------
    def time(self, x, cap_add=None, x_cav=None):
        """Link travel time at flow ``x``.

        ``cap_add`` is added to the capacity (design coupling).  ``x_cav`` is
        the CAV part of ``x`` and only matters for the revised BPR kind.
        """
        if self.kind == "affine":
            if cap_add is None:
                return self.u0 + self.slope * x
            # slope scales inversely with capacity
            return self.u0 + (self.slope * tp.div(self.v0, self.v0 + cap_add)) * x
        cap = self.v0 if cap_add is None else self.v0 + cap_add
        if self.kind == "revised_bpr" and x_cav is not None and self.eta > 0:
            share = tp.safe_div(x_cav, x)
            cap = cap * (1.0 + self.eta * tp.power(share, 2.0))
        ratio = tp.power(tp.div(x, cap), self._uniform_power())
        return self.u0 + self.u0 * self.coef * ratio

    def derivative(self, x, cap_add=None) -> np.ndarray:
        """Numeric ``du/dx`` for the single-class kinds."""
        x = np.asarray(x, dtype=float)
        if self.kind == "affine":
            if cap_add is None:
                return np.broadcast_to(np.asarray(self.slope, dtype=float), x.shape).copy()
            return self.slope * self.v0 / (self.v0 + cap_add) + 0 * x
        cap = self.v0 if cap_add is None else self.v0 + np.asarray(cap_add)
        k = np.asarray(self.power, dtype=float)
        return self.u0 * self.coef * k * np.power(x, k - 1.0) / np.power(cap, k)

    def marginal(self, x, cap_add=None) -> np.ndarray:
        """System-marginal cost ``u(x) + x * u'(x)``."""
        if self.kind == "revised_bpr" and self.eta > 0:
            raise ValueError("marginal cost needs a separable single-class kind")
        x = np.asarray(x, dtype=float)
        return self.time(x, cap_add) + x * self.derivative(x, cap_add)


def link_cost_affine(a, b, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("negative link flow")
    return np.asarray(a, dtype=float) + np.asarray(b, dtype=float) * x


def link_cost_revised_bpr(u0, v0, eta, x1, x2, coef=0.15, power=4.0) -> np.ndarray:
    """Revised BPR time for CAV flow ``x1`` and HDV flow ``x2``."""
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    if np.any(x1 < 0) or np.any(x2 < 0):
        raise ValueError("negative link flow")
    if np.any(np.asarray(v0) <= 0):
        raise ValueError("capacities must be positive")
    xs = x1 + x2
    share = np.divide(x1, xs, out=np.zeros_like(xs), where=xs > 0)
    return u0 * (1.0 + coef * (xs / ((1.0 + eta * share**2) * v0)) ** power)


@dataclass(frozen=True)
class ClassSpec:
    """User classes as shares of the common OD demand."""

    shares: tuple = (1.0,)
    names: tuple = ()

    def __post_init__(self):
        shares = np.asarray(self.shares, dtype=float)
        if shares.ndim != 1 or len(shares) == 0:
            raise ValueError("need at least one class")
        if np.any(shares < 0) or abs(shares.sum() - 1.0) > 1e-12:
            raise ValueError("class shares must be nonnegative and sum to 1")
        object.__setattr__(self, "shares", tuple(float(s) for s in shares))

    @classmethod
    def mixed(cls, alpha: float) -> "ClassSpec":
        """Two classes: CAV share ``alpha`` first, HDV second."""
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        return cls((alpha, 1.0 - alpha), ("cav", "hdv"))

    @property
    def n_classes(self) -> int:
        return len(self.shares)

    def class_demand(self, d) -> np.ndarray:
        return np.outer(self.shares, np.asarray(d, dtype=float))


@dataclass(frozen=True)
class Coupling:
    """How the leader's decision ``z`` enters link costs.

    * ``none``: costs ignore ``z``.
    * ``toll``: ``z`` holds one toll per link; every class pays ``gamma * z``.
    * ``class_toll``: ``z`` stacks one toll vector per class.
    * ``capacity``: ``z`` is added to link capacities.
    * ``controlled``: ``z`` holds route probabilities of controlled travelers
      on ``controlled`` paths; their link flow ``lam_c (q_c * z)`` is added to
      the time argument (as CAV flow for the revised BPR kind).
    """

    kind: str = "none"
    gamma: float = 1.0
    controlled: PathSet | None = None
    controlled_q: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in COUPLINGS:
            raise ValueError(f"unknown coupling {self.kind!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.kind == "controlled" and (self.controlled is None or self.controlled_q is None):
            raise ValueError("controlled coupling needs a controlled path set and demand")


@dataclass(frozen=True)
class RoutingGame:
    """Lower-level congestion game: paths, classes, cost model and coupling."""

    paths: PathSet
    cost: CostModel
    classes: ClassSpec = field(default_factory=ClassSpec)
    coupling: Coupling = field(default_factory=Coupling)

    def __post_init__(self):
        if self.cost.n_links != self.paths.n_links:
            raise ValueError("cost model and path set disagree on the link count")

    @property
    def n_classes(self) -> int:
        return self.classes.n_classes

    @property
    def n_paths(self) -> int:
        return self.paths.n_paths

    @property
    def lam(self) -> Incidence:
        return self.paths.lam

    @property
    def sigma(self) -> Incidence:
        return self.paths.sigma

    @property
    def class_q(self) -> np.ndarray:
        """Per-class path demand, shape (M, K)."""
        if self.n_classes == 1:
            return self.paths.q[None, :]
        return np.outer(self.classes.shares, self.paths.q)

    def z_size(self) -> int:
        kind = self.coupling.kind
        if kind in ("toll", "capacity"):
            return self.paths.n_links
        if kind == "class_toll":
            return self.n_classes * self.paths.n_links
        if kind == "controlled":
            return self.coupling.controlled.n_paths
        return 0

    # ------------------------------------------------------------------
    def link_flows(self, p_rows):
        """Per-class link flows ``x_m = lam (q_m * p_m)``."""
        qs = self.class_q
        return [tp.matvec(self.lam, qs[m] * p_rows[m]) for m in range(self.n_classes)]

    def controlled_flow(self, z):
        c = self.coupling
        return tp.matvec(c.controlled.lam, c.controlled_q * z)

    def _pooled(self, x_rows, z):
        """Total link flow, CAV flow and capacity addition entering the time function."""
        x_total = x_rows[0]
        for x in x_rows[1:]:
            x_total = x_total + x
        x_cav = x_rows[0] if (self.n_classes > 1 and self.cost.kind == "revised_bpr") else None
        cap_add = None
        kind = self.coupling.kind
        if kind == "capacity":
            cap_add = z
        elif kind == "controlled":
            x_ctrl = self.controlled_flow(z)
            x_total = x_total + x_ctrl
            if self.cost.kind == "revised_bpr":
                x_cav = x_ctrl if x_cav is None else x_cav + x_ctrl
        return x_total, x_cav, cap_add

    def link_time(self, x_rows, z):
        x_total, x_cav, cap_add = self._pooled(x_rows, z)
        return self.cost.time(x_total, cap_add, x_cav), x_total

    def class_link_costs(self, x_rows, z):
        """Per-class generalized link costs (time plus monetized toll)."""
        u_time, _ = self.link_time(x_rows, z)
        kind, gamma = self.coupling.kind, self.coupling.gamma
        if kind == "toll":
            u = u_time + gamma * z
            return [u] * self.n_classes
        if kind == "class_toll":
            n = self.paths.n_links
            return [u_time + gamma * tp.part(z, slice(m * n, (m + 1) * n)) for m in range(self.n_classes)]
        return [u_time] * self.n_classes

    def path_costs(self, p_rows, z, detail: bool = False):
        """Per-class path costs ``c_m = lam^T u_m``.

        With ``detail=True`` also returns the intermediates (flows, link costs).
        """
        x_rows = self.link_flows(p_rows)
        u_rows = self.class_link_costs(x_rows, z)
        c_rows, seen = [], {}
        for u in u_rows:
            key = id(u)
            if key not in seen:
                seen[key] = tp.rmatvec(self.lam, u)
            c_rows.append(seen[key])
        if detail:
            return c_rows, x_rows, u_rows
        return c_rows

    def total_travel_time(self, p_rows, z):
        """Sum over links of pooled flow times travel time."""
        x_rows = self.link_flows(p_rows)
        u_time, x_total = self.link_time(x_rows, z)
        return tp.inner(u_time, x_total)


# --------------------------------------------------------------------------
# numeric conveniences on ndarray states
# --------------------------------------------------------------------------


def as_rows(p) -> list:
    p = np.asarray(p, dtype=float)
    return [p] if p.ndim == 1 else list(p)


def zeros_z(game: RoutingGame) -> np.ndarray:
    return np.zeros(game.z_size())


def path_cost(game: RoutingGame, p, z=None) -> np.ndarray:
    """Path costs for a state ``p`` of shape (K,) or (M, K); same shape out."""
    z = zeros_z(game) if z is None else np.asarray(z, dtype=float)
    rows = game.path_costs(as_rows(p), z)
    return rows[0] if np.ndim(p) == 1 else np.vstack(rows)


def total_travel_time(game: RoutingGame, p, z=None) -> float:
    z = zeros_z(game) if z is None else np.asarray(z, dtype=float)
    return float(game.total_travel_time(as_rows(p), z))


def design_objective(game: RoutingGame, p, z, w, beta: float) -> float:
    """Total travel time plus the penalty ``beta * <w, z**2>``."""
    z = np.asarray(z, dtype=float)
    if beta < 0 or np.any(np.asarray(w) < 0):
        raise ValueError("weights and penalty must be nonnegative")
    return total_travel_time(game, p, z) + beta * float(np.dot(w, z * z))


def marginal_link_cost(cost: CostModel, x, cap_add=None) -> np.ndarray:
    return cost.marginal(x, cap_add)
