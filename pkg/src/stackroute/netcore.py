"""Road network representation, path sets and 0-1 incidence algebra.

A :class:`Network` is a directed multigraph with per-link cost attributes and
an OD demand table.  A :class:`PathSet` fixes the route alternatives and holds
the link-path matrix (``lam``) and OD-path matrix (``sigma``) as
:class:`Incidence` patterns.  Paths are stored grouped by OD so per-OD
reductions can use contiguous segments (``od_ptr``).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class NetworkError(ValueError):
    """Invalid network data or an impossible path request."""


class TntpParseError(NetworkError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


# --------------------------------------------------------------------------
# sparse 0-1 matrices
# --------------------------------------------------------------------------


class Incidence:
    """0-1 sparse matrix stored column-wise as lists of row indices.

    Column ``j`` has ones at rows ``indices[indptr[j]:indptr[j + 1]]``.  Both
    ``M @ v`` and ``M.T @ u`` touch each nonzero exactly once.
    """

    __slots__ = ("shape", "indptr", "indices", "_cols", "_empty")

    def __init__(self, shape: tuple[int, int], indptr, indices):
        nrows, ncols = shape
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        if indptr.shape != (ncols + 1,) or indptr[0] != 0 or indptr[-1] != len(indices):
            raise ValueError("indptr does not describe the index array")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("indptr must be nondecreasing")
        if len(indices) and (indices.min() < 0 or indices.max() >= nrows):
            raise ValueError("row index out of range")
        self.shape = (int(nrows), int(ncols))
        self.indptr = indptr
        self.indices = indices
        # column id of every stored entry, used by matvec
        self._cols = np.repeat(np.arange(ncols), np.diff(indptr))
        self._empty = np.diff(indptr) == 0

    @classmethod
    def from_columns(cls, nrows: int, columns: Sequence[Sequence[int]]) -> "Incidence":
        indptr = np.zeros(len(columns) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(c) for c in columns])
        flat = [i for c in columns for i in c]
        return cls((nrows, len(columns)), indptr, np.array(flat, dtype=np.int64))

    @classmethod
    def from_dense(cls, dense) -> "Incidence":
        dense = np.asarray(dense)
        cols = [np.flatnonzero(dense[:, j]).tolist() for j in range(dense.shape[1])]
        return cls.from_columns(dense.shape[0], cols)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Return ``M @ v`` (``v`` indexed by columns)."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.shape[1],):
            raise ValueError(f"matvec expects length {self.shape[1]}, got {v.shape}")
        return np.bincount(self.indices, weights=v[self._cols], minlength=self.shape[0])

    def rmatvec(self, u: np.ndarray) -> np.ndarray:
        """Return ``M.T @ u`` (``u`` indexed by rows)."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.shape[0],):
            raise ValueError(f"rmatvec expects length {self.shape[0]}, got {u.shape}")
        if self.nnz == 0:
            return np.zeros(self.shape[1])
        gathered = u[self.indices]
        out = np.add.reduceat(gathered, np.minimum(self.indptr[:-1], self.nnz - 1))
        out[self._empty] = 0.0
        return out

    def toarray(self) -> np.ndarray:
        dense = np.zeros(self.shape)
        dense[self.indices, self._cols] = 1.0
        return dense

    def __eq__(self, other) -> bool:
        if not isinstance(other, Incidence):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def __repr__(self) -> str:
        return f"Incidence(shape={self.shape}, nnz={self.nnz})"


def spmv(m: Incidence, v) -> np.ndarray:
    return m.matvec(v)


def spmv_t(m: Incidence, v) -> np.ndarray:
    return m.rmatvec(v)


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Network:
    """Directed network with link attributes and OD demand.

    ``u0`` is the free-flow time (intercept of an affine cost), ``v0`` the
    capacity and ``b`` the affine slope.  ``bpr_b`` and ``power`` keep the
    TNTP BPR columns; the cost model decides whether to use them.
    """

    nodes: tuple
    tails: np.ndarray
    heads: np.ndarray
    u0: np.ndarray
    v0: np.ndarray
    b: np.ndarray
    od_pairs: tuple
    demand: np.ndarray
    bpr_b: np.ndarray = None
    power: np.ndarray = None
    name: str = ""
    _node_pos: dict = field(default=None, repr=False)

    def __post_init__(self):
        n_links = len(self.tails)
        arrays = {
            "tails": np.asarray(self.tails, dtype=np.int64),
            "heads": np.asarray(self.heads, dtype=np.int64),
            "u0": np.asarray(self.u0, dtype=float),
            "v0": np.asarray(self.v0, dtype=float),
            "b": np.asarray(self.b, dtype=float),
            "demand": np.asarray(self.demand, dtype=float),
            "bpr_b": np.full(n_links, 0.15) if self.bpr_b is None else np.asarray(self.bpr_b, float),
            "power": np.full(n_links, 4.0) if self.power is None else np.asarray(self.power, float),
        }
        for key, value in arrays.items():
            value.setflags(write=False)
            object.__setattr__(self, key, value)
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "od_pairs", tuple(tuple(w) for w in self.od_pairs))
        object.__setattr__(self, "_node_pos", {n: i for i, n in enumerate(self.nodes)})
        self._validate()

    def _validate(self):
        n_nodes, n_links = len(self.nodes), len(self.tails)
        if len(self._node_pos) != n_nodes:
            raise NetworkError("duplicate node identifiers")
        for name in ("heads", "u0", "v0", "b", "bpr_b", "power"):
            if getattr(self, name).shape != (n_links,):
                raise NetworkError(f"{name} must have one entry per link")
        if n_links and (
            self.tails.min() < 0 or self.heads.min() < 0
            or self.tails.max() >= n_nodes or self.heads.max() >= n_nodes
        ):
            raise NetworkError("link endpoint is not a declared node")
        for name in ("u0", "v0", "b"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NetworkError(f"non-finite link attribute {name}")
        if np.any(self.v0 <= 0):
            raise NetworkError("capacities must be positive")
        if self.demand.shape != (len(self.od_pairs),):
            raise NetworkError("demand length must equal the number of OD pairs")
        if np.any(self.demand < 0) or not np.all(np.isfinite(self.demand)):
            raise NetworkError("demand must be finite and nonnegative")
        for o, d in self.od_pairs:
            if o not in self._node_pos or d not in self._node_pos:
                raise NetworkError(f"OD pair ({o}, {d}) references an unknown node")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.tails)

    @property
    def n_od(self) -> int:
        return len(self.od_pairs)

    def node_index(self, node) -> int:
        return self._node_pos[node]

    def links_out(self) -> list[list[int]]:
        out = [[] for _ in self.nodes]
        for a, t in enumerate(self.tails):
            out[t].append(a)
        return out

    def with_demand(self, demand) -> "Network":
        return self.replace(demand=np.asarray(demand, dtype=float))

    def replace(self, **changes) -> "Network":
        fields = dict(
            nodes=self.nodes, tails=self.tails, heads=self.heads, u0=self.u0, v0=self.v0,
            b=self.b, od_pairs=self.od_pairs, demand=self.demand, bpr_b=self.bpr_b,
            power=self.power, name=self.name,
        )
        fields.update(changes)
        return Network(**fields)

    # JSON document {nodes, links: [{tail, head, u0, v0, b}], od: [{o, d, demand}]}
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "nodes": list(self.nodes),
            "links": [
                {
                    "tail": self.nodes[t], "head": self.nodes[h], "u0": float(u),
                    "v0": float(v), "b": float(s), "bpr_b": float(bb), "power": float(pw),
                }
                for t, h, u, v, s, bb, pw in zip(
                    self.tails, self.heads, self.u0, self.v0, self.b, self.bpr_b, self.power
                )
            ],
            "od": [{"o": o, "d": d, "demand": float(q)} for (o, d), q in zip(self.od_pairs, self.demand)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Network":
        nodes = list(doc["nodes"])
        pos = {n: i for i, n in enumerate(nodes)}
        links = doc["links"]
        try:
            tails = [pos[link["tail"]] for link in links]
            heads = [pos[link["head"]] for link in links]
        except KeyError as exc:
            raise NetworkError(f"link endpoint {exc.args[0]!r} is not a declared node") from None
        return cls(
            nodes=nodes,
            tails=tails,
            heads=heads,
            u0=[link["u0"] for link in links],
            v0=[link.get("v0", 1.0) for link in links],
            b=[link.get("b", 0.0) for link in links],
            bpr_b=[link.get("bpr_b", 0.15) for link in links],
            power=[link.get("power", 4.0) for link in links],
            od_pairs=[(w["o"], w["d"]) for w in doc["od"]],
            demand=[w["demand"] for w in doc["od"]],
            name=doc.get("name", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Network":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# TNTP ingestion
# --------------------------------------------------------------------------

_LINK_COLUMNS = ("init", "term", "capacity", "length", "fftt", "b", "power", "speed", "toll", "type")


def _tntp_metadata(lines: list[str]) -> tuple[dict, int]:
    """Parse ``<KEY> value`` header lines up to ``<END OF METADATA>``."""
    meta = {}
    for i, raw in enumerate(lines):
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        if not line.startswith("<"):
            raise TntpParseError("expected a metadata line or <END OF METADATA>", i + 1)
        close = line.find(">")
        if close < 0:
            raise TntpParseError("malformed metadata tag", i + 1)
        key = line[1:close].strip().upper()
        if key == "END OF METADATA":
            return meta, i + 1
        meta[key] = line[close + 1:].strip()
    raise TntpParseError("missing <END OF METADATA>")


def _meta_int(meta: dict, key: str, required: bool = True) -> int | None:
    if key not in meta:
        if required:
            raise TntpParseError(f"metadata field <{key}> missing")
        return None
    try:
        return int(float(meta[key]))
    except ValueError:
        raise TntpParseError(f"metadata field <{key}> is not numeric: {meta[key]!r}") from None


def parse_tntp(net_text: str, trips_text: str) -> Network:
    """Build a :class:`Network` from TNTP ``_net`` and ``_trips`` file contents.

    Node identifiers are the integers used in the files.  TNTP tolls are
    ignored.  Only OD pairs with positive demand are kept.
    """
    lines = net_text.splitlines()
    meta, start = _tntp_metadata(lines)
    n_nodes = _meta_int(meta, "NUMBER OF NODES")
    n_links = _meta_int(meta, "NUMBER OF LINKS")

    tails, heads, cap, fftt, bb, pw = [], [], [], [], [], []
    for i in range(start, len(lines)):
        line = lines[i].strip()
        if not line or line.startswith("~"):
            continue
        fields = line.rstrip(";").split()
        if len(fields) < 7:
            raise TntpParseError(f"link row has {len(fields)} fields, need at least 7", i + 1)
        try:
            vals = [float(f) for f in fields[:7]]
        except ValueError:
            raise TntpParseError(f"non-numeric field in link row: {line!r}", i + 1) from None
        init, term = int(vals[0]), int(vals[1])
        for node in (init, term):
            if not 1 <= node <= n_nodes:
                raise TntpParseError(f"link references undeclared node {node}", i + 1)
        tails.append(init - 1)
        heads.append(term - 1)
        cap.append(vals[2])
        fftt.append(vals[4])
        bb.append(vals[5])
        pw.append(vals[6])
    if len(tails) != n_links:
        raise TntpParseError(f"metadata declares {n_links} links, found {len(tails)}")

    od_pairs, demand = _parse_trips(trips_text, n_nodes)
    fftt_arr = np.array(fftt, dtype=float)
    cap_arr = np.array(cap, dtype=float)
    return Network(
        nodes=list(range(1, n_nodes + 1)),
        tails=tails,
        heads=heads,
        u0=fftt_arr,
        v0=cap_arr,
        b=np.divide(fftt_arr, cap_arr, out=np.zeros_like(fftt_arr), where=cap_arr > 0),
        bpr_b=bb,
        power=pw,
        od_pairs=od_pairs,
        demand=demand,
    )


def _parse_trips(trips_text: str, n_nodes: int) -> tuple[list, list]:
    lines = trips_text.splitlines()
    meta, start = _tntp_metadata(lines)
    declared_total = meta.get("TOTAL OD FLOW")
    table: dict = {}
    origin = None
    for i in range(start, len(lines)):
        line = lines[i].strip()
        if not line or line.startswith("~"):
            continue
        if line.lower().startswith("origin"):
            parts = line.split()
            if len(parts) < 2:
                raise TntpParseError("Origin line without a node id", i + 1)
            try:
                origin = int(parts[1])
            except ValueError:
                raise TntpParseError(f"non-numeric origin {parts[1]!r}", i + 1) from None
            if not 1 <= origin <= n_nodes:
                raise TntpParseError(f"origin {origin} is not a declared node", i + 1)
            continue
        if origin is None:
            raise TntpParseError("destination entries before any Origin line", i + 1)
        for entry in line.split(";"):
            entry = entry.strip()
            if not entry:
                continue
            if ":" not in entry:
                raise TntpParseError(f"malformed trips entry {entry!r}", i + 1)
            dest_s, flow_s = entry.split(":", 1)
            try:
                dest, flow = int(dest_s), float(flow_s)
            except ValueError:
                raise TntpParseError(f"non-numeric trips entry {entry!r}", i + 1) from None
            if not 1 <= dest <= n_nodes:
                raise TntpParseError(f"destination {dest} is not a declared node", i + 1)
            if flow > 0 and dest != origin:
                table[(origin, dest)] = table.get((origin, dest), 0.0) + flow
    if declared_total is not None:
        try:
            total = float(declared_total)
        except ValueError:
            raise TntpParseError("<TOTAL OD FLOW> is not numeric") from None
        found = sum(table.values())
        if not math.isclose(total, found, rel_tol=1e-6, abs_tol=1e-6):
            raise TntpParseError(f"<TOTAL OD FLOW> {total} does not match table sum {found}")
    pairs = sorted(table)
    return pairs, [table[w] for w in pairs]


# --------------------------------------------------------------------------
# fixture builders
# --------------------------------------------------------------------------

# demand-to-capacity ratio on the parallel network
PARALLEL_LOAD = 1.0


def build_parallel(n: int, total_demand: float = 1.0) -> Network:
    """Single OD connected by ``n`` parallel links.

    Link ``k`` has free-flow time ``1 + k / n`` and capacity
    ``total_demand / (n * PARALLEL_LOAD)``; the affine slope is ``u0 / v0``
    so every link doubles its time at capacity.  With these choices the
    per-link load, and therefore the ILD contraction rate, does not depend on
    ``n``.
    """
    if n < 1:
        raise NetworkError("parallel network needs at least one link")
    if total_demand < 0:
        raise NetworkError("demand must be nonnegative")
    u0 = 1.0 + np.arange(n) / n
    v0 = np.full(n, (total_demand if total_demand > 0 else 1.0) / (n * PARALLEL_LOAD))
    return Network(
        nodes=["o", "d"],
        tails=np.zeros(n, dtype=np.int64),
        heads=np.ones(n, dtype=np.int64),
        u0=u0,
        v0=v0,
        b=u0 / v0,
        od_pairs=[("o", "d")],
        demand=[total_demand],
        name=f"parallel-{n}",
    )


def build_two_link(demand: float = 3.0) -> Network:
    """Two parallel links with u1 = 1 + x1 and u2 = 2 + x2."""
    return Network(
        nodes=["o", "d"], tails=[0, 0], heads=[1, 1], u0=[1.0, 2.0], v0=[1.0, 1.0],
        b=[1.0, 1.0], od_pairs=[("o", "d")], demand=[demand], name="two-link",
    )


def build_grid(rows: int, cols: int) -> Network:
    """``rows x cols`` lattice with bidirectional unit links.

    OD pairs join opposite corners in both diagonal directions, each carrying
    ``min(rows, cols) / 2`` travelers, so the load per cut stays roughly
    constant as the grid grows.  Nodes are ``(i, j)`` tuples rendered as
    ``"i,j"`` strings.
    """
    if rows < 2 or cols < 2:
        raise NetworkError("grid needs at least 2 rows and 2 columns")
    nodes = [f"{i},{j}" for i in range(rows) for j in range(cols)]
    tails, heads = [], []
    for i in range(rows):
        for j in range(cols):
            here = i * cols + j
            if j + 1 < cols:
                tails += [here, here + 1]
                heads += [here + 1, here]
            if i + 1 < rows:
                tails += [here, here + cols]
                heads += [here + cols, here]
    n_links = len(tails)
    corners = [nodes[0], nodes[cols - 1], nodes[(rows - 1) * cols], nodes[-1]]
    od = [(corners[0], corners[3]), (corners[3], corners[0]), (corners[1], corners[2]), (corners[2], corners[1])]
    return Network(
        nodes=nodes, tails=tails, heads=heads, u0=np.ones(n_links), v0=np.ones(n_links),
        b=np.ones(n_links), od_pairs=od, demand=np.full(4, min(rows, cols) / 2.0),
        name=f"grid-{rows}x{cols}",
    )


# Braess topology: 1->2, 1->3, 2->4, 2->3 (bridge), 3->4
_BRAESS_TAILS = [0, 0, 1, 1, 2]
_BRAESS_HEADS = [1, 2, 3, 2, 3]
# paths in link-index form: {1,3}, {1,4,5}, {2,5}
BRAESS_PATHS = ((0, 2), (0, 3, 4), (1, 4))

# BPR variant used by the design and mixed-autonomy fixtures
BRAESS_BPR_U0 = np.array([1.0, 3.0, 3.0, 0.5, 1.0])
BRAESS_BPR_V0 = np.array([1.0, 2.0, 2.0, 1.0, 1.0])
BRAESS_BPR_DEMAND = 2.0


def build_braess(variant: str = "with_bridge", costs: str = "classic") -> Network:
    """Four-node Braess network.

    ``costs="classic"`` gives the textbook affine instance with demand 6:
    u1 = 10 x1, u2 = 50 + x2, u3 = 50 + x3, u4 = 10 + x4, u5 = 10 x5.
    ``costs="bpr"`` gives a congestible BPR instance (free-flow times
    ``BRAESS_BPR_U0``, capacities ``BRAESS_BPR_V0``, demand 2) where the
    bridge still worsens equilibrium travel time.
    """
    if variant not in ("with_bridge", "without_bridge"):
        raise NetworkError(f"unknown Braess variant {variant!r}")
    if costs == "classic":
        u0 = np.array([0.0, 50.0, 50.0, 10.0, 0.0])
        b = np.array([10.0, 1.0, 1.0, 1.0, 10.0])
        v0 = np.ones(5)
        demand = 6.0
    elif costs == "bpr":
        u0, v0 = BRAESS_BPR_U0.copy(), BRAESS_BPR_V0.copy()
        b = u0 / v0
        demand = BRAESS_BPR_DEMAND
    else:
        raise NetworkError(f"unknown Braess cost set {costs!r}")
    keep = [0, 1, 2, 3, 4] if variant == "with_bridge" else [0, 1, 2, 4]
    return Network(
        nodes=[1, 2, 3, 4],
        tails=[_BRAESS_TAILS[a] for a in keep],
        heads=[_BRAESS_HEADS[a] for a in keep],
        u0=u0[keep], v0=v0[keep], b=b[keep],
        od_pairs=[(1, 4)], demand=[demand],
        name=f"braess-{costs}-{variant}",
    )


def braess_pathset(net: Network) -> "PathSet":
    """Braess paths in the conventional order (path 1, 2, 3)."""
    if net.n_links == 5:
        return PathSet.from_link_paths(net, [list(BRAESS_PATHS)])
    # bridge removed: link 5 (3->4) is now index 3
    return PathSet.from_link_paths(net, [[(0, 2), (1, 3)]])


def build_3n4l(demand: float = 4.0) -> Network:
    """Three nodes, two parallel links per stage (1->2 twice, 2->3 twice).

    The four paths share links pairwise, so the link-path matrix has rank 3
    and equilibrium path flows are not unique even though link flows are.
    """
    return Network(
        nodes=[1, 2, 3], tails=[0, 0, 1, 1], heads=[1, 1, 2, 2],
        u0=[1.0, 2.0, 1.0, 2.0], v0=[1.0, 1.0, 1.0, 1.0], b=[1.0, 1.0, 1.0, 1.0],
        od_pairs=[(1, 3)], demand=[demand], name="3n4l",
    )


# --------------------------------------------------------------------------
# paths
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathSet:
    """Enumerated routes with their incidence structure.

    Paths are grouped by OD: paths of OD ``w`` occupy
    ``od_ptr[w]:od_ptr[w + 1]``.  ``od_index`` maps row ``w`` of ``sigma`` to
    the position of that OD in ``network.od_pairs``.
    """

    network: Network
    paths: tuple
    od_index: np.ndarray
    od_of_path: np.ndarray
    od_ptr: np.ndarray
    lam: Incidence
    sigma: Incidence
    demand: np.ndarray
    q: np.ndarray

    @classmethod
    def from_link_paths(cls, net: Network, per_od: Sequence[Sequence[Sequence[int]]],
                        od_index: Iterable[int] | None = None) -> "PathSet":
        od_index = np.arange(len(per_od)) if od_index is None else np.asarray(list(od_index), dtype=np.int64)
        if len(od_index) != len(per_od):
            raise NetworkError("od_index and path lists differ in length")
        paths, owner = [], []
        for w, group in enumerate(per_od):
            if not group:
                raise NetworkError(f"OD {net.od_pairs[od_index[w]]} has no path")
            for path in group:
                _check_path(net, path, net.od_pairs[od_index[w]])
                paths.append(tuple(int(a) for a in path))
                owner.append(w)
        owner = np.array(owner, dtype=np.int64)
        od_ptr = np.zeros(len(per_od) + 1, dtype=np.int64)
        od_ptr[1:] = np.cumsum([len(g) for g in per_od])
        demand = np.asarray(net.demand, dtype=float)[od_index]
        lam = Incidence.from_columns(net.n_links, paths)
        sigma = Incidence.from_columns(len(per_od), [[w] for w in owner])
        return cls(
            network=net, paths=tuple(paths), od_index=od_index, od_of_path=owner, od_ptr=od_ptr,
            lam=lam, sigma=sigma, demand=demand, q=demand[owner],
        )

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def n_od(self) -> int:
        return len(self.od_ptr) - 1

    @property
    def n_links(self) -> int:
        return self.network.n_links

    @property
    def nbar_link(self) -> float:
        return self.lam.nnz / self.n_paths

    def od_slice(self, w: int) -> slice:
        return slice(int(self.od_ptr[w]), int(self.od_ptr[w + 1]))

    def with_demand(self, demand) -> "PathSet":
        """Same routes with a different per-OD demand vector (rows of ``sigma``)."""
        demand = np.asarray(demand, dtype=float)
        if demand.shape != (self.n_od,):
            raise ValueError("demand must have one entry per OD row")
        return PathSet(
            network=self.network, paths=self.paths, od_index=self.od_index, od_of_path=self.od_of_path,
            od_ptr=self.od_ptr, lam=self.lam, sigma=self.sigma, demand=demand, q=demand[self.od_of_path],
        )

    # per-OD segment reductions
    def od_sum(self, v: np.ndarray) -> np.ndarray:
        return np.add.reduceat(v, self.od_ptr[:-1], axis=-1)

    def od_min(self, v: np.ndarray) -> np.ndarray:
        return np.minimum.reduceat(v, self.od_ptr[:-1], axis=-1)

    def od_max(self, v: np.ndarray) -> np.ndarray:
        return np.maximum.reduceat(v, self.od_ptr[:-1], axis=-1)

    def spread(self, per_od: np.ndarray) -> np.ndarray:
        """Broadcast a per-OD vector onto paths."""
        return np.asarray(per_od)[..., self.od_of_path]


def _check_path(net: Network, path: Sequence[int], od) -> None:
    if not path:
        raise NetworkError("empty path")
    o, d = net.node_index(od[0]), net.node_index(od[1])
    node, seen = o, {o}
    for a in path:
        if not 0 <= a < net.n_links or net.tails[a] != node:
            raise NetworkError(f"path {tuple(path)} is not a connected walk from {od[0]}")
        node = int(net.heads[a])
        if node in seen:
            raise NetworkError(f"path {tuple(path)} revisits a node")
        seen.add(node)
    if node != d:
        raise NetworkError(f"path {tuple(path)} does not end at {od[1]}")


def _shortest_path(out_links, heads, weight, source, target, banned_links, banned_nodes):
    """Dijkstra returning the least (cost, link sequence) path, or None.

    Labels compare cost first and then the link-index sequence, so among
    equal-cost shortest paths the lexicographically smallest one wins.
    """
    best = {source: (0.0, ())}
    heap = [(0.0, (), source)]
    done = set()
    while heap:
        cost, seq, node = heapq.heappop(heap)
        if node in done:
            continue
        if node == target:
            return cost, seq
        done.add(node)
        for a in out_links[node]:
            if a in banned_links:
                continue
            nxt = int(heads[a])
            if nxt in banned_nodes or nxt in done:
                continue
            label = (cost + weight[a], seq + (a,))
            if nxt not in best or label < best[nxt]:
                best[nxt] = label
                heapq.heappush(heap, (label[0], label[1], nxt))
    return None


def yen_k_shortest(net: Network, origin: int, dest: int, k: int, weight=None) -> list[tuple]:
    """Loopless k shortest paths (Yen) between node positions ``origin`` and ``dest``.

    Returned in order of (cost, link sequence).
    """
    weight = np.asarray(net.u0 if weight is None else weight, dtype=float)
    out_links = net.links_out()
    heads = net.heads
    first = _shortest_path(out_links, heads, weight, origin, dest, frozenset(), frozenset())
    if first is None:
        return []
    accepted = [first]
    candidates: list = []
    seen = {first[1]}
    while len(accepted) < k:
        _, last = accepted[-1]
        spur_node = origin
        root_nodes = [origin]
        for i in range(len(last)):
            root = last[:i]
            banned_links = {p[i] for _, p in accepted if p[:i] == root and len(p) > i}
            banned_nodes = frozenset(root_nodes[:-1])
            spur = _shortest_path(out_links, heads, weight, spur_node, dest, banned_links, banned_nodes)
            if spur is not None:
                seq = root + spur[1]
                if seq not in seen:
                    seen.add(seq)
                    cost = float(sum(weight[a] for a in seq))
                    heapq.heappush(candidates, (cost, seq))
            spur_node = int(heads[last[i]])
            root_nodes.append(spur_node)
        if not candidates:
            break
        accepted.append(heapq.heappop(candidates))
    return [seq for _, seq in accepted]


def enumerate_paths(net: Network, k: int) -> PathSet:
    """Up to ``k`` loopless shortest paths per OD by free-flow time.

    OD pairs with zero demand and no route are dropped; a positive-demand OD
    without a route raises :class:`NetworkError`.
    """
    if k < 1:
        raise NetworkError("k must be at least 1")
    per_od, kept = [], []
    for w, (o, d) in enumerate(net.od_pairs):
        found = yen_k_shortest(net, net.node_index(o), net.node_index(d), k)
        if not found:
            if net.demand[w] > 0:
                raise NetworkError(f"OD pair ({o}, {d}) with positive demand is disconnected")
            continue
        per_od.append(found)
        kept.append(w)
    if not per_od:
        raise NetworkError("no OD pair has a path")
    return PathSet.from_link_paths(net, per_od, kept)


def parallel_pathset(net: Network) -> PathSet:
    """One single-link path per link of a one-OD parallel network."""
    return PathSet.from_link_paths(net, [[(a,) for a in range(net.n_links)]])
