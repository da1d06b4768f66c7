"""Grid graphs built from grayscale images.

Every pixel becomes a vertex, numbered row-major from the top-left corner,
and is joined to its in-bounds horizontal, vertical and diagonal neighbours
by undirected, unweighted edges. Coarser grids produced by pooling keep the
same 8-neighbourhood topology and remember the window origin each coarse
vertex covers in its parent grid, which is what lets saliency be walked back
down to input pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import IntegrityError, InvalidInputError


@dataclass(frozen=True)
class Image:
    """Grayscale image with intensities in [0, 1], stored as ``values[row, col]``."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidInputError(f"image must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidInputError("image intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class GridGraph:
    """Vertices, edges and features of a 2-D grid.

    ``coords[v]`` is the (row, col) of vertex ``v`` on this grid and
    ``origin[v]`` the top-left corner of the window it covers in the parent
    grid (equal to ``coords`` for input-resolution graphs, where ``stride`` is 1).
    """

    height: int
    width: int
    edges: np.ndarray
    features: np.ndarray
    coords: np.ndarray
    origin: np.ndarray
    stride: int = 1
    _checked: bool = field(default=True, repr=False)

    def __post_init__(self):
        n = self.height * self.width
        if self.coords.shape != (n, 2):
            raise InvalidInputError(f"coords must have shape ({n}, 2), got {self.coords.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InvalidInputError(f"features must have {n} rows, got shape {self.features.shape}")
        if self.edges.ndim != 2 or self.edges.shape[1] != 2:
            raise InvalidInputError("edges must be an (E, 2) array")
        if self._checked:
            flat = self.coords[:, 0] * self.width + self.coords[:, 1]
            inside = (
                (self.coords[:, 0] >= 0)
                & (self.coords[:, 0] < self.height)
                & (self.coords[:, 1] >= 0)
                & (self.coords[:, 1] < self.width)
            )
            if not inside.all() or np.unique(flat).size != n:
                raise InvalidInputError("coords must be a bijection onto the grid cells")

    @property
    def num_vertices(self) -> int:
        return self.height * self.width

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @cached_property
    def vertex_at(self) -> np.ndarray:
        """``vertex_at[row, col]`` is the vertex id of that cell."""
        table = np.empty((self.height, self.width), dtype=np.int64)
        table[self.coords[:, 0], self.coords[:, 1]] = np.arange(self.num_vertices)
        return table

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        n = self.num_vertices
        i, j = self.edges[:, 0], self.edges[:, 1]
        ones = np.ones(2 * len(i))
        return sparse.csr_matrix((ones, (np.r_[i, j], np.r_[j, i])), shape=(n, n))

    @cached_property
    def mean_operator(self) -> sparse.csr_matrix:
        """Row-normalised ``A + I``: averages each vertex with its neighbours."""
        a_hat = self.adjacency + sparse.identity(self.num_vertices, format="csr")
        inv_deg = 1.0 / np.asarray(a_hat.sum(axis=1)).ravel()
        return sparse.diags(inv_deg) @ a_hat

    def pixel_of(self, vertex: int) -> tuple[int, int]:
        r, c = self.coords[vertex]
        return int(r), int(c)


@lru_cache(maxsize=64)
def _topology(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.arange(height * width).reshape(height, width)
    pairs = [
        (ids[:, :-1], ids[:, 1:]),  # right
        (ids[:-1, :], ids[1:, :]),  # down
        (ids[:-1, :-1], ids[1:, 1:]),  # down-right
        (ids[:-1, 1:], ids[1:, :-1]),  # down-left
    ]
    edges = np.concatenate(
        [np.stack([np.minimum(a, b).ravel(), np.maximum(a, b).ravel()], axis=1) for a, b in pairs]
    )
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    rows, cols = np.divmod(np.arange(height * width), width)
    coords = np.stack([rows, cols], axis=1)
    edges.setflags(write=False)
    coords.setflags(write=False)
    return edges, coords


def _grid(height: int, width: int, features: np.ndarray, stride: int, origin=None) -> GridGraph:
    edges, coords = _topology(height, width)
    return GridGraph(
        height=height,
        width=width,
        edges=edges,
        features=features,
        coords=coords,
        origin=coords if origin is None else origin,
        stride=stride,
        _checked=False,
    )


def build_grid_graph(image: Image) -> GridGraph:
    """8-connected grid graph whose single feature channel is the pixel intensity."""
    if not isinstance(image, Image):
        image = Image(np.asarray(image))
    features = image.values.reshape(-1, 1)
    return _grid(image.height, image.width, features, stride=1)


def grid_topology(height: int, width: int) -> GridGraph:
    """Featureless grid graph of the given dims."""
    if height < 1 or width < 1:
        raise InvalidInputError(f"grid dims must be positive, got {height}x{width}")
    return _grid(height, width, np.zeros((height * width, 0)), stride=1)


def neighbors(graph: GridGraph, vertex: int) -> list[int]:
    """In-bounds 8-neighbourhood of ``vertex`` in row-major pixel order."""
    if not 0 <= vertex < graph.num_vertices:
        raise InvalidInputError(f"vertex {vertex} out of range [0, {graph.num_vertices})")
    adj = graph.adjacency
    nbrs = adj.indices[adj.indptr[vertex] : adj.indptr[vertex + 1]]
    key = graph.coords[nbrs, 0] * graph.width + graph.coords[nbrs, 1]
    return [int(v) for v in nbrs[np.argsort(key, kind="stable")]]


def coarsen_grid(graph: GridGraph, s: int) -> GridGraph:
    """Grid covering ``graph`` with s x s windows (partial windows at the border)."""
    if s < 1:
        raise InvalidInputError(f"pool window size must be >= 1, got {s}")
    if s == 1:
        return _grid(graph.height, graph.width, np.zeros((graph.num_vertices, 0)), stride=1)
    h = -(-graph.height // s)
    w = -(-graph.width // s)
    _, coords = _topology(h, w)
    return _grid(h, w, np.zeros((h * w, 0)), stride=s, origin=coords * s)


@lru_cache(maxsize=64)
def _window_slots(height: int, width: int, s: int) -> np.ndarray:
    """Row-major cell ids of every s x s window, padded with the window's first cell."""
    h = -(-height // s)
    w = -(-width // s)
    dr, dc = np.divmod(np.arange(s * s), s)
    rows = (np.arange(h) * s)[:, None, None] + dr[None, None, :]
    cols = (np.arange(w) * s)[None, :, None] + dc[None, None, :]
    rows = np.broadcast_to(rows, (h, w, s * s))
    cols = np.broadcast_to(cols, (h, w, s * s))
    valid = (rows < height) & (cols < width)
    cells = np.where(valid, rows * width + cols, (rows[..., :1] * width + cols[..., :1]))
    out = cells.reshape(h * w, s * s)
    out.setflags(write=False)
    return out


def pool_windows(fine: GridGraph, s: int) -> np.ndarray:
    """Vertex ids of ``fine`` grouped by pooling window, one row per coarse vertex.

    Slots follow row-major order inside the window; slots falling outside a
    partial border window repeat the window's first vertex, so a
    first-occurrence argmax never lands on padding.
    """
    if s < 1:
        raise InvalidInputError(f"pool window size must be >= 1, got {s}")
    cells = _window_slots(fine.height, fine.width, s)
    return fine.vertex_at.reshape(-1)[cells]


def vertex_to_pixels(chain: Sequence[GridGraph], coarse_vertex: int) -> set[tuple[int, int]]:
    """Input-resolution pixels covered by a vertex of the last grid in ``chain``.

    ``chain`` runs from the input grid to the coarsest grid, as produced by a
    forward pass.
    """
    if not chain:
        raise InvalidInputError("empty grid chain")
    last = chain[-1]
    if not 0 <= coarse_vertex < last.num_vertices:
        raise InvalidInputError(f"vertex {coarse_vertex} out of range [0, {last.num_vertices})")
    r, c = last.pixel_of(coarse_vertex)
    r0, r1, c0, c1 = r, r + 1, c, c + 1
    for k in range(len(chain) - 1, 0, -1):
        fine, coarse = chain[k - 1], chain[k]
        s = coarse.stride
        if -(-fine.height // s) != coarse.height or -(-fine.width // s) != coarse.width:
            raise IntegrityError(
                f"grid {k} ({coarse.height}x{coarse.width}) is not a stride-{s} pooling of "
                f"grid {k - 1} ({fine.height}x{fine.width})"
            )
        r0, r1 = r0 * s, min(r1 * s, fine.height)
        c0, c1 = c0 * s, min(c1 * s, fine.width)
    return {(i, j) for i in range(r0, r1) for j in range(c0, c1)}
