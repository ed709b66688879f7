"""Unrolled ILD: record the forward pass on a tape and differentiate it.

A *problem* here is any object exposing ``game`` (a
:class:`~stackroute.costmodel.RoutingGame`), ``r`` (the lower learning rate)
and ``objective(p_rows, z)`` written with the dispatch helpers of
:mod:`stackroute.tape`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .dynamics import gap_from_costs, ild_from_costs, ild_update
from .costmodel import as_rows


@dataclass
class UnrollTape:
    tape: tp.Tape
    p_leaf: tp.Var
    z_leaf: tp.Var
    output: tp.Var
    T: int
    p_final: np.ndarray
    r: float
    gaps: list = field(default_factory=list)
    fwd_ops: int = 0
    bwd_ops: int | None = None

    @property
    def l_value(self) -> float:
        return float(self.output.value)

    @property
    def n_records(self) -> int:
        return len(self.tape.layers)


@dataclass
class GradientResult:
    l_z: np.ndarray
    l_p0: np.ndarray
    l_value: float


def _rows_of(leaf: tp.Var, ndim: int) -> list:
    if ndim == 1:
        return [leaf]
    return [tp.part(leaf, m) for m in range(leaf.shape[0])]


def forward_record(problem, p0, z, T: int | None = None, eps: float | None = None,
                   max_T: int = 100_000, gap_kind: str = "relative", r: float | None = None,
                   min_T: int = 0):
    """Record ``T`` ILD layers from ``p0`` followed by the objective layer.

    With ``T=None`` the depth is chosen adaptively: layers are added until
    the gap at the current state is at most ``eps`` (or ``max_T`` layers),
    but never fewer than ``min_T``.
    Returns ``(UnrollTape, l_value)``.
    """
    if T is None and eps is None:
        raise ValueError("give a depth T or a gap tolerance eps")
    if T is not None and T < 0:
        raise ValueError("depth must be nonnegative")
    r = problem.r if r is None else r
    game = problem.game
    ps = game.paths
    p0 = np.asarray(p0, dtype=float)
    z = np.asarray(z, dtype=float)

    t = tp.Tape()
    p_leaf = t.leaf(p0, "p0")
    z_leaf = t.leaf(z, "z")
    rows = _rows_of(p_leaf, p0.ndim)
    gaps = []
    limit = T if T is not None else max_T
    depth = 0
    while depth < limit:
        mark = t.checkpoint()
        c_rows, x_rows, u_rows = game.path_costs(rows, z_leaf, detail=True)
        if T is None and depth >= min_T:
            c_val = np.vstack([tp.value(c) for c in c_rows])
            p_val = np.vstack([tp.value(p) for p in rows])
            gap = gap_from_costs(game, p_val, c_val, gap_kind)
            gaps.append(gap)
            if gap <= eps:
                t.truncate(mark)
                break
        new_rows = []
        for m, (p, c) in enumerate(zip(rows, c_rows)):
            p_next, (e, g, s) = ild_update(ps, p, c, r)
            new_rows.append(p_next)
            t.record_layer(x=x_rows[m], u=u_rows[m], c=c, e=e, g=g, s=s, p=p_next)
        rows = new_rows
        depth += 1
    output = problem.objective(rows, z_leaf)
    if not isinstance(output, tp.Var):
        raise ValueError("objective did not depend on the taped inputs")
    t.record_layer(l=output)
    p_final = np.vstack([tp.value(p) for p in rows])
    p_final = p_final[0] if p0.ndim == 1 else p_final
    ut = UnrollTape(t, p_leaf, z_leaf, output, depth, p_final, r, gaps, t.fwd_ops)
    return ut, ut.l_value


def backward(ut: UnrollTape) -> GradientResult:
    """Reverse sweep of a recorded tape."""
    if ut.output is None:
        raise ValueError("tape has no output layer")
    l_p0, l_z = ut.tape.backward(ut.output, [ut.p_leaf, ut.z_leaf])
    ut.bwd_ops = ut.tape.bwd_ops
    return GradientResult(np.asarray(l_z, dtype=float), np.asarray(l_p0, dtype=float), ut.l_value)


def gradient(problem, p0, z, T: int, r: float | None = None) -> GradientResult:
    ut, _ = forward_record(problem, p0, z, T, r=r)
    return backward(ut)


def truncated_objective(problem, p0, z, T: int, r: float | None = None) -> float:
    """``l(h^T(p0; z); z)`` evaluated without a tape."""
    r = problem.r if r is None else r
    game = problem.game
    z = np.asarray(z, dtype=float)
    p = np.asarray(p0, dtype=float)
    for _ in range(T):
        c = np.vstack(game.path_costs(as_rows(p), z))
        p = ild_from_costs(game.paths, p, c[0] if p.ndim == 1 else c, r)
    return float(problem.objective(as_rows(p), z))


def fd_gradient(problem, p0, z, T: int, step: float = 1e-6, r: float | None = None) -> np.ndarray:
    """Central finite differences of the truncated objective in each z component."""
    if step <= 0:
        raise ValueError("step must be positive")
    z = np.asarray(z, dtype=float)
    grad = np.zeros_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        grad[i] = (truncated_objective(problem, p0, zp, T, r) - truncated_objective(problem, p0, zm, T, r)) / (2 * step)
    return grad


def gradient_error(bwd: np.ndarray, fd: np.ndarray) -> float:
    """``max |bwd - fd| / (1 + max |fd|)``."""
    fd = np.asarray(fd, dtype=float)
    if fd.size == 0:
        return 0.0
    return float(np.max(np.abs(np.asarray(bwd) - fd)) / (1.0 + np.max(np.abs(fd))))


# --------------------------------------------------------------------------
# operation counts
# --------------------------------------------------------------------------


def count_report(fwd_ops: int, bwd_ops: int) -> float:
    """Backward-to-forward operation ratio."""
    if fwd_ops <= 0:
        raise ValueError("forward count must be positive")
    return bwd_ops / fwd_ops


def pricing_fp_ops(T: int, n_paths: int, n_links: int, nnz: int) -> int:
    """Forward count of the affine pricing model: (7T+1)K + (4T+3)A + (2T+1)nnz."""
    return (7 * T + 1) * n_paths + (4 * T + 3) * n_links + (2 * T + 1) * nnz


def pricing_bp_ops(T: int, n_paths: int, n_links: int, nnz: int) -> int:
    """Backward count of the affine pricing model: (10T+1)K + (2T+3)A + (2T+1)nnz."""
    return (10 * T + 1) * n_paths + (2 * T + 3) * n_links + (2 * T + 1) * nnz


def opcount_record(ut: UnrollTape, grad_max_abs_err: float | None = None) -> dict:
    if ut.bwd_ops is None:
        raise ValueError("run backward() first")
    return {
        "T": ut.T,
        "fwd_ops": int(ut.fwd_ops),
        "bwd_ops": int(ut.bwd_ops),
        "ratio": count_report(ut.fwd_ops, ut.bwd_ops),
        "grad_max_abs_err": grad_max_abs_err,
    }


def opcount_json(ut: UnrollTape, grad_max_abs_err: float | None = None) -> str:
    return json.dumps(opcount_record(ut, grad_max_abs_err))
