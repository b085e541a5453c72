"""Boxes, grid layouts, positional encodings and the region/grid alignment graph.

All coordinates are normalised to the unit square. Box arrays use corner
order ``(x_min, y_min, x_max, y_max)`` throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor, as_tensor, clamp_min, matmul, relu, transpose

DELTA_EPS = 1e-3      # clamp on |dx|, |dy| before the log
OMEGA_FLOOR = 1e-6    # floor on the embedded bias so its log is finite
GEO_DIM = 64
GEO_WAVE = 1000.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"degenerate box {vals}: need x_min < x_max and y_min < y_max")
        if min(vals) < 0.0 or max(vals) > 1.0:
            raise GeometryError(f"box {vals} leaves the unit square")

    @property
    def center(self) -> tuple[float, float, float, float]:
        """(x, y, w, h) with (x, y) the box centre."""
        return (
            (self.x_min + self.x_max) / 2,
            (self.y_min + self.y_max) / 2,
            self.x_max - self.x_min,
            self.y_max - self.y_min,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class GridLayout:
    rows: int = 7
    cols: int = 7

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise GeometryError(f"grid layout needs positive extents, got {self.rows}x{self.cols}")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def cell(self, i: int, j: int) -> BoundingBox:
        return BoundingBox(j / self.cols, i / self.rows, (j + 1) / self.cols, (i + 1) / self.rows)

    def boxes(self) -> np.ndarray:
        """Cell boxes in row-major order, shape [rows*cols, 4]."""
        i, j = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        i, j = i.reshape(-1), j.reshape(-1)
        return np.stack([j / self.cols, i / self.rows, (j + 1) / self.cols, (i + 1) / self.rows], axis=1)

    @classmethod
    def parse(cls, text: str) -> "GridLayout":
        rows, _, cols = text.lower().partition("x")
        return cls(int(rows), int(cols))

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


def boxes_array(boxes) -> np.ndarray:
    """Validate and stack boxes (BoundingBox objects or quads) into [N, 4]."""
    if isinstance(boxes, np.ndarray) and boxes.ndim == 2:
        arr = boxes.astype(np.float64)
    else:
        arr = np.array([b.as_array() if isinstance(b, BoundingBox) else np.asarray(b, dtype=np.float64)
                        for b in boxes], dtype=np.float64).reshape(-1, 4)
    validate_boxes(arr)
    return arr


def validate_boxes(arr: np.ndarray) -> None:
    if arr.size == 0:
        return
    if not np.all(np.isfinite(arr)):
        raise GeometryError("non-finite box coordinates")
    bad = np.nonzero((arr[:, 0] >= arr[:, 2]) | (arr[:, 1] >= arr[:, 3]))[0]
    if bad.size:
        raise GeometryError(f"degenerate box at index {int(bad[0])}: {arr[bad[0]].tolist()}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise GeometryError("box coordinates leave the unit square")


def to_center(arr: np.ndarray) -> np.ndarray:
    """Corner quads [..., 4] to (x, y, w, h)."""
    return np.stack([
        (arr[..., 0] + arr[..., 2]) / 2,
        (arr[..., 1] + arr[..., 3]) / 2,
        arr[..., 2] - arr[..., 0],
        arr[..., 3] - arr[..., 1],
    ], axis=-1)


# -- absolute encodings ----------------------------------------------------

def sinusoid(pos: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos table: even slots sin(pos / base^(2k/dim)), odd slots cos."""
    pos = np.asarray(pos, dtype=np.float64)
    k = np.arange(dim // 2)
    freq = base ** (2.0 * k / dim)
    angle = pos[..., None] / freq
    out = np.empty(pos.shape + (dim,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def grid_positional_encoding(layout: GridLayout, d_model: int) -> np.ndarray:
    """Row-major [rows*cols, d_model]; row index fills the first half, column the second."""
    if d_model % 4:
        raise GeometryError(f"d_model={d_model} must be divisible by 4 for grid encodings")
    half = d_model // 2
    rows = sinusoid(np.arange(layout.rows), half)
    cols = sinusoid(np.arange(layout.cols), half)
    i, j = np.meshgrid(np.arange(layout.rows), np.arange(layout.cols), indexing="ij")
    return np.concatenate([rows[i.reshape(-1)], cols[j.reshape(-1)]], axis=1)


def region_positional_encoding(boxes, w_emb: Tensor) -> Tensor:
    """Linear embedding of corner quads: ``boxes @ w_emb.T`` with ``w_emb`` [d_model, 4].

    ``boxes`` may carry leading batch dimensions ([..., N, 4]).
    """
    arr = boxes if isinstance(boxes, np.ndarray) else boxes_array(boxes)
    return matmul(Tensor(arr), transpose(w_emb, (1, 0)))


# -- relative geometry -----------------------------------------------------

def relative_geometry_raw(box_i, box_j) -> np.ndarray:
    """4-vector relating two boxes: log offsets scaled by box_i's size, then log size ratios."""
    ci = np.asarray(box_i.center if isinstance(box_i, BoundingBox) else box_i, dtype=np.float64)
    cj = np.asarray(box_j.center if isinstance(box_j, BoundingBox) else box_j, dtype=np.float64)
    return np.array([
        np.log(max(abs(ci[0] - cj[0]), DELTA_EPS) / ci[2]),
        np.log(max(abs(ci[1] - cj[1]), DELTA_EPS) / ci[3]),
        np.log(ci[2] / cj[2]),
        np.log(ci[3] / cj[3]),
    ])


def relative_geometry_matrix(boxes_q: np.ndarray, boxes_k: np.ndarray) -> np.ndarray:
    """Pairwise raw geometry for corner quads [..., Nq, 4] x [..., Nk, 4] -> [..., Nq, Nk, 4]."""
    cq = to_center(np.asarray(boxes_q, dtype=np.float64))[..., :, None, :]
    ck = to_center(np.asarray(boxes_k, dtype=np.float64))[..., None, :, :]
    dx = np.maximum(np.abs(cq[..., 0] - ck[..., 0]), DELTA_EPS) / cq[..., 2]
    dy = np.maximum(np.abs(cq[..., 1] - ck[..., 1]), DELTA_EPS) / cq[..., 3]
    return np.stack([np.log(dx), np.log(dy), np.log(cq[..., 2] / ck[..., 2]), np.log(cq[..., 3] / ck[..., 3])],
                    axis=-1)


def geometry_features(raw: np.ndarray, d_geo: int = GEO_DIM) -> np.ndarray:
    """Sinusoidal embedding of each of the 4 raw components into d_geo/4 slots, concatenated."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise GeometryError("relative geometry contains non-finite values")
    if d_geo % 8:
        raise GeometryError(f"d_geo={d_geo} must be divisible by 8")
    parts = [sinusoid(raw[..., c], d_geo // 4, base=GEO_WAVE) for c in range(4)]
    return np.concatenate(parts, axis=-1)


def geometry_bias(features, w_geo: Tensor) -> Tensor:
    """Per-head positive bias from pre-embedded geometry features.

    features: [..., Nq, Nk, d_geo]; w_geo: [d_geo, heads]. Returns [..., heads, Nq, Nk],
    floored at OMEGA_FLOOR.
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    omega = clamp_min(relu(matmul(feats, w_geo)), OMEGA_FLOOR)
    nd = omega.ndim
    axes = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    return transpose(omega, axes)


def relative_geometry_embed(raw, w_geo: Tensor, d_geo: int = GEO_DIM) -> Tensor:
    """Raw geometry [..., Nq, Nk, 4] to the positive per-head bias [..., heads, Nq, Nk]."""
    raw = raw.data if isinstance(raw, Tensor) else raw
    return geometry_bias(geometry_features(raw, d_geo), as_tensor(w_geo))


# -- alignment graph -------------------------------------------------------

@dataclass(frozen=True)
class AlignmentGraph:
    n_regions: int
    n_grids: int
    adj: np.ndarray  # bool [N_R + N_G, N_R + N_G], regions first

    @property
    def region_grid(self) -> np.ndarray:
        """Cross-level block [N_R, N_G]."""
        return self.adj[: self.n_regions, self.n_regions:]

    @property
    def grid_region(self) -> np.ndarray:
        return self.adj[self.n_regions:, : self.n_regions]

    def neighbors(self, v: int) -> np.ndarray:
        return np.nonzero(self.adj[v])[0]


def overlap_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """True where the two boxes share positive area (touching edges do not count)."""
    a = np.asarray(boxes_a, dtype=np.float64)[..., :, None, :]
    b = np.asarray(boxes_b, dtype=np.float64)[..., None, :, :]
    w = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    h = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    return (w > 0) & (h > 0)


def build_alignment_graph(boxes, layout: GridLayout) -> AlignmentGraph:
    arr = boxes_array(boxes) if len(boxes) else np.zeros((0, 4))
    nr, ng = len(arr), layout.size
    adj = np.eye(nr + ng, dtype=bool)
    if nr:
        cross = overlap_matrix(arr, layout.boxes())
        adj[:nr, nr:] = cross
        adj[nr:, :nr] = cross.T
    return AlignmentGraph(nr, ng, adj)


def complete_bipartite_graph(n_regions: int, layout: GridLayout) -> AlignmentGraph:
    n = n_regions + layout.size
    adj = np.eye(n, dtype=bool)
    adj[:n_regions, n_regions:] = True
    adj[n_regions:, :n_regions] = True
    return AlignmentGraph(n_regions, layout.size, adj)
