"""Multi-resolution hash-encoded feature grid over the canonical box.

Each level is a lattice of ``N_l`` points per axis spanning the bounding box.
Lattice points index a table of ``2**T`` rows of ``F`` features, directly when
the level has at most ``2**T`` points and through a spatial hash otherwise.
A query point reads the 8 corners of its lattice cell and interpolates them
trilinearly; the per-level results are concatenated.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import DomainError

PRIMES = (1, 2654435761, 805459861)


class HashGridConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    levels: int = 8
    features_per_level: int = 2
    table_size_log2: int = 16
    base_resolution: int = 16
    max_resolution: int = 256
    bbox_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bbox_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    init_scale: float = 1e-4

    @field_validator("levels", "features_per_level")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("table_size_log2")
    @classmethod
    def _table_size(cls, v: int) -> int:
        if not 1 <= v <= 30:
            raise ValueError("table_size_log2 must be in [1, 30]")
        return v

    @model_validator(mode="after")
    def _check(self) -> "HashGridConfig":
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution must be >= base_resolution")
        if any(hi <= lo for lo, hi in zip(self.bbox_min, self.bbox_max)):
            raise ValueError("bounding box must have positive extent on every axis")
        return self

    @property
    def n_features(self) -> int:
        return self.levels * self.features_per_level

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2


def level_resolutions(config: HashGridConfig) -> list[int]:
    """Geometric schedule from ``base_resolution`` to ``max_resolution``."""
    n_min, n_max, levels = config.base_resolution, config.max_resolution, config.levels
    if levels == 1:
        return [n_min]
    growth = math.exp((math.log(n_max) - math.log(n_min)) / (levels - 1))
    # the epsilon keeps exact powers (e.g. 16 * 2**3) from flooring one below
    res = [int(math.floor(n_min * growth**level + 1e-9)) for level in range(levels)]
    res[-1] = n_max
    return res


@numba.njit(cache=True, inline="always")
def _row(ix, iy, iz, n, dense, mask):
    if dense:
        return ix + n * (iy + n * iz)
    h = (
        np.uint64(ix)
        ^ (np.uint64(iy) * np.uint64(2654435761))
        ^ (np.uint64(iz) * np.uint64(805459861))
    )
    return np.int64(h & np.uint64(mask))


@numba.njit(cache=True)
def _hash_rows(cells, n, dense, mask):
    out = np.empty(cells.shape[0], dtype=np.int64)
    for p in range(cells.shape[0]):
        out[p] = _row(cells[p, 0], cells[p, 1], cells[p, 2], n, dense, mask)
    return out


@numba.njit(cache=True, inline="always")
def _cell(u, n):
    s = n - 1
    f = u * s
    i = int(math.floor(f))
    if i >= s:
        i = s - 1
    if i < 0:
        i = 0
    return i, f - i


@numba.njit(cache=True)
def _encode(u, tables, res, dense, mask, out):
    n_levels, _, n_feat = tables.shape
    for p in range(u.shape[0]):
        for lv in range(n_levels):
            n = res[lv]
            ix, wx = _cell(u[p, 0], n)
            iy, wy = _cell(u[p, 1], n)
            iz, wz = _cell(u[p, 2], n)
            base = lv * n_feat
            for f in range(n_feat):
                out[p, base + f] = 0.0
            for c in range(8):
                dx = c & 1
                dy = (c >> 1) & 1
                dz = (c >> 2) & 1
                w = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy) * (wz if dz else 1.0 - wz)
                row = _row(ix + dx, iy + dy, iz + dz, n, dense[lv], mask)
                for f in range(n_feat):
                    out[p, base + f] += w * tables[lv, row, f]


@numba.njit(cache=True)
def _encode_backward(u, upstream, grads, res, dense, mask):
    n_levels, _, n_feat = grads.shape
    for p in range(u.shape[0]):
        for lv in range(n_levels):
            n = res[lv]
            ix, wx = _cell(u[p, 0], n)
            iy, wy = _cell(u[p, 1], n)
            iz, wz = _cell(u[p, 2], n)
            base = lv * n_feat
            for c in range(8):
                dx = c & 1
                dy = (c >> 1) & 1
                dz = (c >> 2) & 1
                w = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy) * (wz if dz else 1.0 - wz)
                if w == 0.0:
                    continue
                row = _row(ix + dx, iy + dy, iz + dz, n, dense[lv], mask)
                for f in range(n_feat):
                    grads[lv, row, f] += w * upstream[p, base + f]


class HashGridEncoding:
    """Trainable hash tables plus their gradient accumulators."""

    def __init__(self, config: HashGridConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.resolutions = np.asarray(level_resolutions(config), dtype=np.int64)
        self.dense = self.resolutions**3 <= config.table_size
        self._mask = config.table_size - 1
        self._lo = np.asarray(config.bbox_min, dtype=np.float64)
        self._extent = np.asarray(config.bbox_max, dtype=np.float64) - self._lo
        rng = np.random.default_rng(seed)
        shape = (config.levels, config.table_size, config.features_per_level)
        self.tables = rng.uniform(-config.init_scale, config.init_scale, size=shape).astype(self.dtype)
        self.grads = np.zeros_like(self.tables)

    @property
    def n_features(self) -> int:
        return self.config.n_features

    def hash_index(self, cell, level: int) -> int:
        cells = np.asarray(cell, dtype=np.int64).reshape(-1, 3)
        rows = self.hash_rows(cells, level)
        return int(rows[0]) if np.ndim(cell) == 1 else rows

    def hash_rows(self, cells: np.ndarray, level: int) -> np.ndarray:
        if not 0 <= level < self.config.levels:
            raise IndexError(f"level {level} out of range")
        cells = np.ascontiguousarray(cells, dtype=np.int64).reshape(-1, 3)
        return _hash_rows(cells, int(self.resolutions[level]), bool(self.dense[level]), self._mask)

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        """Map canonical points to [0,1]^3, raising on points outside the box."""
        x = np.asarray(x, dtype=np.float64)
        u = (x.reshape(-1, 3) - self._lo) / self._extent
        # a few ulps of slack for points produced by float32 arithmetic on the faces
        if u.size and (u.min() < -1e-9 or u.max() > 1.0 + 1e-9):
            raise DomainError("point outside the canonical bounding box")
        return np.clip(u, 0.0, 1.0).astype(self.dtype)

    def contains(self, x: np.ndarray) -> np.ndarray:
        u = (np.asarray(x, dtype=np.float64).reshape(-1, 3) - self._lo) / self._extent
        return np.all((u >= 0.0) & (u <= 1.0), axis=1)

    def encode(self, x: np.ndarray) -> np.ndarray:
        u = self.to_unit(x)
        out = np.empty((u.shape[0], self.n_features), dtype=self.dtype)
        if u.shape[0]:
            _encode(u, self.tables, self.resolutions, self.dense, self._mask, out)
        return out[0] if np.ndim(x) == 1 else out

    def encode_backward(self, x: np.ndarray, upstream: np.ndarray) -> None:
        u = self.to_unit(x)
        up = np.ascontiguousarray(upstream, dtype=self.dtype).reshape(u.shape[0], self.n_features)
        if u.shape[0]:
            _encode_backward(u, up, self.grads, self.resolutions, self.dense, self._mask)

    def zero_grad(self) -> None:
        self.grads[...] = 0.0
