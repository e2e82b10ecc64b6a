"""Graphs, graph shift operators and random edge sampling.

A :class:`Graph` is an undirected edge list over ``N`` nodes.  A
:class:`ShiftOperator` is the dense adjacency or Laplacian built from it.
Random edge sampling (RES) keeps every edge of a nominal graph with
probability ``p``; sampled operators are rebuilt from the kept edges so that
Laplacian realizations stay valid Laplacians.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GSOKind(str, enum.Enum):
    ADJACENCY = "adjacency"
    LAPLACIAN = "laplacian"


class GraphError(ValueError):
    """Raised for malformed graphs or incompatible shift operators."""


class EigenError(RuntimeError):
    """Raised when the symmetric eigensolver fails."""


def derive_seed(root: int, *keys: int) -> int:
    """Derive a 64-bit seed from ``root`` and an integer key path.

    Uses numpy's ``SeedSequence`` spawn keys, so ``derive_seed(s, 3, 1)`` is the
    stream for child 3, grandchild 1 of root ``s``.  Distinct key paths give
    statistically independent streams and the mapping is stable across runs.
    """
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def make_rng(root: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys)))


@dataclass(frozen=True)
class Graph:
    """Undirected graph with optional edge weights.

    Edges are stored as sorted ``(i, j)`` pairs with ``i < j``.
    """

    node_count: int
    edges: tuple[tuple[int, int], ...] = ()
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.node_count < 1:
            raise GraphError(f"node_count must be positive, got {self.node_count}")
        canon = []
        seen = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self-loop at node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise GraphError(f"edge ({i}, {j}) out of range for N={self.node_count}")
            pair = (min(i, j), max(i, j))
            if pair in seen:
                raise GraphError(f"duplicate edge {pair}")
            seen.add(pair)
            canon.append(pair)
        object.__setattr__(self, "edges", tuple(canon))
        if self.weights is not None:
            if len(self.weights) != len(canon):
                raise GraphError("weights must have one entry per edge")
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def edge_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(len(self.edges))
        return np.asarray(self.weights, dtype=float)

    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(self.edges)

    def degrees(self) -> np.ndarray:
        """Unweighted node degrees."""
        deg = np.zeros(self.node_count, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    @classmethod
    def from_adjacency(cls, adj: np.ndarray, atol: float = 0.0) -> "Graph":
        """Build a weighted graph from the strict upper triangle of ``adj``."""
        adj = np.asarray(adj, dtype=float)
        n = adj.shape[0]
        iu, ju = np.nonzero(np.abs(np.triu(adj, k=1)) > atol)
        return cls(n, tuple(zip(iu.tolist(), ju.tolist())), tuple(adj[iu, ju].tolist()))


@dataclass(frozen=True)
class ShiftOperator:
    """Dense symmetric graph shift operator (adjacency or Laplacian)."""

    kind: GSOKind
    matrix: np.ndarray = field(repr=False)
    source: Graph = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", GSOKind(self.kind))
        m = np.array(self.matrix, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T


@dataclass(frozen=True)
class RESConfig:
    probability: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")


@dataclass(frozen=True)
class PerturbationSample:
    """One RES realization ``S_k`` together with its deviation ``E_k = S_k - S``."""

    sampled_gso: ShiftOperator
    deviation: np.ndarray = field(repr=False)


def _adjacency_matrix(graph: Graph) -> np.ndarray:
    a = np.zeros((graph.node_count, graph.node_count))
    if graph.edges:
        idx = np.asarray(graph.edges)
        w = graph.edge_weights
        a[idx[:, 0], idx[:, 1]] = w
        a[idx[:, 1], idx[:, 0]] = w
    return a


def build_gso(graph: Graph, kind: GSOKind | str = GSOKind.ADJACENCY) -> ShiftOperator:
    """Adjacency ``A`` or Laplacian ``D - A`` of ``graph`` (weighted if weights are set)."""
    kind = GSOKind(kind)
    a = _adjacency_matrix(graph)
    if kind is GSOKind.ADJACENCY:
        return ShiftOperator(kind, a, graph)
    lap = -a
    lap[np.diag_indices_from(lap)] = a.sum(axis=1)
    return ShiftOperator(kind, lap, graph)


def _matrix_of(s) -> np.ndarray:
    return s.matrix if isinstance(s, ShiftOperator) else np.asarray(s, dtype=float)


def eigendecompose(s: ShiftOperator | np.ndarray) -> SpectralDecomposition:
    """Ascending eigenvalues and orthonormal eigenvectors of a symmetric GSO."""
    m = _matrix_of(s)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise GraphError(f"expected a square matrix, got shape {m.shape}")
    if not np.array_equal(m, m.T):
        raise GraphError("shift operator is not symmetric")
    try:
        lam, vec = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(m) if np.all(np.isfinite(m)) else float("nan")
        raise EigenError(
            f"symmetric eigensolver failed (N={m.shape[0]}, cond={cond:.3g}, "
            f"fro={np.linalg.norm(m):.3g}): {exc}"
        ) from exc
    return SpectralDecomposition(lam, vec)


def res_sample(nominal: Graph, cfg: RESConfig, rng: np.random.Generator | None = None) -> Graph:
    """Keep each undirected edge of ``nominal`` independently with probability ``p``.

    Kept edges retain their weights.  With no ``rng`` the draw is seeded by
    ``cfg.seed``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    m = len(nominal.edges)
    keep = rng.random(m) < cfg.probability
    edges = tuple(e for e, k in zip(nominal.edges, keep) if k)
    weights = None
    if nominal.weights is not None:
        weights = tuple(w for w, k in zip(nominal.weights, keep) if k)
    return Graph(nominal.node_count, edges, weights)


def sample_gso_sequence(nominal: ShiftOperator, cfg: RESConfig, length: int) -> list[PerturbationSample]:
    """Draw ``length`` independent RES realizations ``S_1..S_K`` of ``nominal``.

    Draw ``k`` (1-based) uses the stream ``derive_seed(cfg.seed, k)``.  The
    identity slot ``S_0`` is not part of the returned list.
    """
    if length < 1:
        raise ValueError("sequence length must be at least 1")
    out = []
    for k in range(1, length + 1):
        g = res_sample(nominal.source, cfg, make_rng(cfg.seed, k))
        s_k = build_gso(g, nominal.kind)
        out.append(PerturbationSample(s_k, s_k.matrix - nominal.matrix))
    return out


def alpha_constant(s: ShiftOperator) -> float:
    """Max unweighted node degree for adjacencies, 2 for Laplacians."""
    if s.kind is GSOKind.LAPLACIAN:
        return 2.0
    deg = s.source.degrees()
    return float(deg.max()) if deg.size else 0.0


def average_gso(sequence: Sequence[ShiftOperator]) -> ShiftOperator:
    """Entrywise mean of a sequence of same-kind shift operators.

    The result is rebuilt from the averaged weighted graph, so RES draws from
    it (and ``p = 1`` draws in particular) reproduce it exactly.
    """
    if not sequence:
        raise GraphError("cannot average an empty sequence")
    kind = sequence[0].kind
    n = sequence[0].n
    for s in sequence:
        if s.kind is not kind or s.n != n:
            raise GraphError("all operators must share kind and dimension")
    adj = np.zeros((n, n))
    for s in sequence:
        adj += _adjacency_matrix(s.source)
    adj /= len(sequence)
    return build_gso(Graph.from_adjacency(adj), kind)


def communication_edges(positions: np.ndarray, radius: float) -> tuple[tuple[int, int], ...]:
    """Pairs ``i < j`` with ``||p_i - p_j|| <= radius``."""
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    iu, ju = np.nonzero(np.triu(dist <= radius, k=1))
    return tuple(zip(iu.tolist(), ju.tolist()))


# -- text format -------------------------------------------------------------

def dumps_graph(graph: Graph) -> str:
    lines = [f"N {graph.node_count}"]
    for (i, j), w in zip(graph.edges, graph.edge_weights):
        lines.append(f"{i} {j} {float(w)!r}")
    return "\n".join(lines) + "\n"


def loads_graph(text: str) -> Graph:
    """Parse the ``N <count>`` / ``i j w`` line format."""
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or rows[0][0] != "N" or len(rows[0]) != 2:
        raise GraphError("graph text must start with 'N <count>'")
    n = int(rows[0][1])
    edges, weights = [], []
    for row in rows[1:]:
        if len(row) != 3:
            raise GraphError(f"bad edge line: {' '.join(row)!r}")
        edges.append((int(row[0]), int(row[1])))
        weights.append(float(row[2]))
    return Graph(n, tuple(edges), tuple(weights))


def save_graph(graph: Graph, path: str | Path) -> None:
    Path(path).write_text(dumps_graph(graph))


def load_graph(path: str | Path) -> Graph:
    return loads_graph(Path(path).read_text())


def path_graph(n: int) -> Graph:
    return Graph(n, tuple((i, i + 1) for i in range(n - 1)))


def cycle_graph(n: int) -> Graph:
    return Graph(n, tuple((i, (i + 1) % n) for i in range(n)))


def star_graph(leaves: int) -> Graph:
    return Graph(leaves + 1, tuple((0, i) for i in range(1, leaves + 1)))


def random_graph(n: int, edge_prob: float, rng: np.random.Generator) -> Graph:
    """Erdos-Renyi graph, used for tests and synthetic sweeps."""
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < edge_prob
    return Graph(n, tuple(zip(iu[keep].tolist(), ju[keep].tolist())))


def random_geometric_graph(n: int, radius: float, rng: np.random.Generator, side: float | None = None) -> Graph:
    side = np.sqrt(n) * radius / 2 if side is None else side
    pos = rng.uniform(0.0, side, size=(n, 2))
    return Graph(n, communication_edges(pos, radius))


def edges_subset(sub: Graph, sup: Graph) -> bool:
    return sub.edge_set() <= sup.edge_set()


def as_gso_list(items: Iterable) -> list[np.ndarray]:
    return [_matrix_of(s) for s in items]
