"""Areal adjacency structures and CAR precision matrices.

Graphs are stored as immutable per-node neighbour tuples with 0-based node
indices. The CAR precision for a graph with degree matrix ``D`` and 0/1
adjacency ``W`` is ``tau * (D - phi * W)``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sps
import scipy.sparse.linalg as spla

# dense factorizations are used below this dimension
DENSE_THRESHOLD = 512


class InvalidGraphError(ValueError):
    pass


class DegeneratePrecisionError(ValueError):
    pass


@dataclass(frozen=True)
class CarParams:
    """Precision scale ``tau`` and spatial dependence ``phi`` of a CAR field."""

    tau: float
    phi: float

    def __post_init__(self):
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not np.isfinite(self.phi) or abs(self.phi) >= 1:
            raise ValueError(f"phi must lie in (-1, 1), got {self.phi}")


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    n: int
    neighbors: tuple

    def __post_init__(self):
        if self.n < 1:
            raise InvalidGraphError("graph needs at least one node")
        if len(self.neighbors) != self.n:
            raise InvalidGraphError(
                f"expected {self.n} neighbour lists, got {len(self.neighbors)}")
        nb = tuple(tuple(sorted(set(int(j) for j in row))) for row in self.neighbors)
        for i, row in enumerate(nb):
            for j in row:
                if j < 0 or j >= self.n:
                    raise InvalidGraphError(f"node index {j} out of range [0, {self.n})")
                if j == i:
                    raise InvalidGraphError(f"self-loop at node {i}")
        for i, row in enumerate(nb):
            for j in row:
                if i not in nb[j]:
                    raise InvalidGraphError(f"asymmetric edge ({i}, {j})")
        object.__setattr__(self, "neighbors", nb)

    def __eq__(self, other):
        if not isinstance(other, AdjacencyGraph):
            return NotImplemented
        return self.n == other.n and self.neighbors == other.neighbors

    def __hash__(self):
        return hash((self.n, self.neighbors))

    @cached_property
    def degrees(self) -> np.ndarray:
        d = np.array([len(row) for row in self.neighbors], dtype=float)
        d.setflags(write=False)
        return d

    @cached_property
    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, row in enumerate(self.neighbors) for j in row if i < j]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> sps.csr_matrix:
        """0/1 adjacency matrix ``W`` as CSR."""
        rows = [i for i, row in enumerate(self.neighbors) for _ in row]
        cols = [j for row in self.neighbors for j in row]
        W = sps.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n))
        W.sort_indices()
        return W

    @property
    def is_regular(self) -> bool:
        return bool(np.all(self.degrees == self.degrees[0]))

    def isolated_nodes(self) -> list[int]:
        return [i for i, row in enumerate(self.neighbors) if not row]

    def require_no_isolated(self):
        iso = self.isolated_nodes()
        if iso:
            raise DegeneratePrecisionError(
                f"CAR precision undefined for isolated nodes {iso[:10]}"
                + (" ..." if len(iso) > 10 else ""))

    @cached_property
    def normalized_spectrum(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigen-decomposition of ``D^{-1/2} W D^{-1/2}``.

        Every CAR block built on this graph is ``D^{1/2} (I - phi S) D^{1/2}``
        up to scale, so one decomposition diagonalises all of them at once.
        Returns ``(eigenvalues, eigenvectors)``; eigenvalues lie in [-1, 1].
        """
        self.require_no_isolated()
        s = 1.0 / np.sqrt(self.degrees)
        S = self.adjacency.toarray() * s[:, None] * s[None, :]
        lam, vec = np.linalg.eigh(S)
        lam = np.clip(lam, -1.0, 1.0)
        lam.setflags(write=False)
        return lam, vec

    @cached_property
    def coloring(self) -> list[np.ndarray]:
        """Greedy proper colouring; each class is an independent node set."""
        colour = -np.ones(self.n, dtype=int)
        order = np.argsort(-self.degrees, kind="stable")
        for i in order:
            used = {colour[j] for j in self.neighbors[i]}
            c = 0
            while c in used:
                c += 1
            colour[i] = c
        return [np.flatnonzero(colour == c) for c in range(colour.max() + 1)]


def _from_neighbor_sets(n: int, sets: Sequence[Iterable[int]]) -> AdjacencyGraph:
    return AdjacencyGraph(n, tuple(tuple(sorted(s)) for s in sets))


def ring(n: int) -> AdjacencyGraph:
    """Cycle graph: node ``i`` is adjacent to ``i - 1`` and ``i + 1`` (mod n)."""
    if n < 3:
        raise InvalidGraphError(f"a ring needs n >= 3, got {n}")
    return _from_neighbor_sets(n, [{(i - 1) % n, (i + 1) % n} for i in range(n)])


def grid(rows: int, cols: int) -> AdjacencyGraph:
    """Regular lattice with rook (4-neighbour) adjacency, row-major node order."""
    if rows < 1 or cols < 1:
        raise InvalidGraphError(f"grid dimensions must be positive, got {rows}x{cols}")
    sets = []
    for r in range(rows):
        for c in range(cols):
            nb = set()
            if r > 0:
                nb.add((r - 1) * cols + c)
            if r < rows - 1:
                nb.add((r + 1) * cols + c)
            if c > 0:
                nb.add(r * cols + c - 1)
            if c < cols - 1:
                nb.add(r * cols + c + 1)
            sets.append(nb)
    return _from_neighbor_sets(rows * cols, sets)


def from_edge_list(n: int, edges: Iterable[tuple[int, int]]) -> AdjacencyGraph:
    """Build a symmetric, de-duplicated graph from undirected edges."""
    sets = [set() for _ in range(n)]
    for i, j in edges:
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n):
            raise InvalidGraphError(f"edge ({i}, {j}) out of range for n={n}")
        if i == j:
            raise InvalidGraphError(f"self-loop ({i}, {i})")
        sets[i].add(j)
        sets[j].add(i)
    g = _from_neighbor_sets(n, sets)
    iso = g.isolated_nodes()
    if iso:
        warnings.warn(f"graph has {len(iso)} isolated node(s)", stacklevel=2)
    return g


def read_edge_csv(path, ids: Sequence[str] | None = None):
    """Read an ``src,dst`` edge list with string node IDs.

    If ``ids`` is given, it fixes the node order and every edge endpoint must
    appear in it. Otherwise IDs are numbered in order of first appearance.
    Returns ``(graph, ids)``.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"src", "dst"} <= set(reader.fieldnames):
            raise InvalidGraphError(f"{path}: edge list needs header 'src,dst'")
        pairs = [(row["src"].strip(), row["dst"].strip()) for row in reader]
    if ids is None:
        order: dict[str, int] = {}
        for a, b in pairs:
            order.setdefault(a, len(order))
            order.setdefault(b, len(order))
        ids = list(order)
    else:
        order = {k: i for i, k in enumerate(ids)}
        missing = sorted({k for p in pairs for k in p if k not in order})
        if missing:
            raise InvalidGraphError(f"edge list references unknown IDs: {missing[:20]}")
    return from_edge_list(len(ids), [(order[a], order[b]) for a, b in pairs]), list(ids)


def write_edge_csv(graph: AdjacencyGraph, path, ids: Sequence[str] | None = None):
    ids = [str(i) for i in range(graph.n)] if ids is None else list(ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst"])
        for i, j in graph.edges:
            w.writerow([ids[i], ids[j]])


def car_precision(g: AdjacencyGraph, p: CarParams) -> sps.csr_matrix:
    """Sparse CAR precision ``tau * (D - phi * W)``."""
    g.require_no_isolated()
    P = p.tau * (sps.diags(g.degrees) - p.phi * g.adjacency)
    return sps.csr_matrix(P)


def is_positive_definite(m) -> bool:
    """True iff a symmetric factorization of ``m`` has strictly positive pivots."""
    if sps.issparse(m) and m.shape[0] > DENSE_THRESHOLD:
        try:
            lu = spla.splu(sps.csc_matrix(m), permc_spec="NATURAL",
                           diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError:
            return False
        # no pivoting was requested; bail out if SuperLU permuted anyway
        if not (np.array_equal(lu.perm_r, np.arange(m.shape[0]))):
            return bool(np.linalg.eigvalsh(m.toarray())[0] > 0)
        return bool(np.all(lu.U.diagonal() > 0))
    a = m.toarray() if sps.issparse(m) else np.asarray(m, dtype=float)
    try:
        scipy.linalg.cholesky(a, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        return False
    return True
