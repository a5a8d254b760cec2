"""Urban flow graph: grid adjacency and the spectral operators built on it.

Nodes are the H*W cells of a regular grid; edges connect spatially adjacent
cells (4- or 8-neighborhood). The same adjacency feeds the Chebyshev graph
convolutions and the conservation aggregation used for sample scoring.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GraphError

NEIGHBORHOODS = ("four", "eight")


def lattice_edges(height: int, width: int, neighborhood: str) -> list[tuple[int, int]]:
    """Undirected edges (i < j) of an H x W lattice with the given stencil."""
    if neighborhood not in NEIGHBORHOODS:
        raise GraphError(f"unknown neighborhood {neighborhood!r}, expected one of {NEIGHBORHOODS}")
    offsets = [(0, 1), (1, 0)]
    if neighborhood == "eight":
        offsets += [(1, 1), (1, -1)]
    edges = []
    for r in range(height):
        for c in range(width):
            i = r * width + c
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr < height and 0 <= cc < width:
                    j = rr * width + cc
                    edges.append((min(i, j), max(i, j)))
    return edges


def _row_normalize(adjacency: np.ndarray) -> np.ndarray:
    degree = adjacency.sum(axis=1)
    out = np.zeros_like(adjacency)
    nz = degree > 0
    out[nz] = adjacency[nz] / degree[nz, None]
    return out


@dataclass(frozen=True)
class UrbanGraph:
    """Grid geometry plus adjacency over M = height*width region nodes."""

    height: int
    width: int
    adjacency: np.ndarray
    neighborhood: str
    row_normalized_adjacency: np.ndarray = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        m = self.height * self.width
        if a.shape != (m, m):
            raise GraphError(f"adjacency shape {a.shape} does not match M={m}")
        if np.any(a < 0):
            raise GraphError("adjacency must be non-negative")
        if np.any(np.diag(a) != 0):
            raise GraphError("adjacency must have a zero diagonal (no self-loops)")
        if not np.allclose(a, a.T):
            raise GraphError("adjacency must be symmetric")
        if m >= 2 and np.any(a.sum(axis=1) == 0):
            raise GraphError("every node must have degree >= 1")
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "row_normalized_adjacency", _row_normalize(a))

    @property
    def num_nodes(self) -> int:
        return self.height * self.width

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def combinatorial_laplacian(self) -> np.ndarray:
        """D - A; annihilates constants, so it conserves total density."""
        return np.diag(self.degrees) - self.adjacency

    def normalized_laplacian(self) -> np.ndarray:
        """I - D^{-1/2} A D^{-1/2}; eigenvalues in [0, 2]."""
        d = self.degrees
        if np.any(d == 0):
            raise GraphError("normalized Laplacian undefined for degree-0 nodes")
        inv_sqrt = 1.0 / np.sqrt(d)
        return np.eye(self.num_nodes) - inv_sqrt[:, None] * self.adjacency * inv_sqrt[None, :]


def build_grid_graph(height: int, width: int, neighborhood: str = "eight") -> UrbanGraph:
    """Binary lattice adjacency over an H x W grid (4- or 8-connected)."""
    if height < 1 or width < 1:
        raise GraphError("grid dimensions must be positive")
    if height * width < 2:
        raise GraphError("need at least two cells to form a graph")
    m = height * width
    a = np.zeros((m, m), dtype=np.float64)
    for i, j in lattice_edges(height, width, neighborhood):
        a[i, j] = 1.0
        a[j, i] = 1.0
    return UrbanGraph(height=height, width=width, adjacency=a, neighborhood=neighborhood)


def graph_from_adjacency(height: int, width: int, adjacency: np.ndarray,
                         neighborhood: str = "custom") -> UrbanGraph:
    """Wrap an externally supplied dense adjacency (non-grid topologies)."""
    return UrbanGraph(height=height, width=width, adjacency=np.asarray(adjacency, dtype=np.float64),
                      neighborhood=neighborhood)


def load_adjacency_override(path: str | Path, height: int, width: int) -> UrbanGraph:
    """Load a dense M x M float32 little-endian binary matrix as the adjacency."""
    m = height * width
    raw = np.fromfile(str(path), dtype="<f4")
    if raw.size != m * m:
        raise GraphError(f"adjacency file holds {raw.size} floats, expected {m * m}")
    return graph_from_adjacency(height, width, raw.reshape(m, m).astype(np.float64))


@dataclass(frozen=True)
class GraphOperator:
    """Rescaled Laplacian 2L/lambda_max - I feeding the Chebyshev recurrence."""

    scaled_laplacian: np.ndarray
    chebyshev_order: int
    lambda_max: float

    def __post_init__(self):
        if self.chebyshev_order < 1:
            raise GraphError("chebyshev_order must be >= 1")


def estimate_lambda_max(laplacian: np.ndarray, iters: int = 100, seed: int = 0) -> float:
    """Power iteration estimate of the largest Laplacian eigenvalue."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(laplacian.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = laplacian @ v
        lam = float(v @ w)
        n = np.linalg.norm(w)
        if n == 0:
            return 0.0
        v = w / n
    return lam


def scaled_laplacian(graph: UrbanGraph, chebyshev_order: int,
                     lambda_max: float | None = 2.0) -> GraphOperator:
    """Build the Chebyshev operator. lambda_max=None triggers power iteration.

    The default 2.0 is the universal upper bound for the normalized Laplacian
    and keeps the operator deterministic across platforms.
    """
    lap = graph.normalized_laplacian()
    if lambda_max is None:
        lambda_max = estimate_lambda_max(lap)
        if lambda_max <= 0:
            raise GraphError("power iteration returned a non-positive lambda_max")
    lt = (2.0 / lambda_max) * lap - np.eye(graph.num_nodes)
    lt = 0.5 * (lt + lt.T)  # kill asymmetric float dust
    return GraphOperator(scaled_laplacian=lt, chebyshev_order=chebyshev_order,
                         lambda_max=float(lambda_max))
