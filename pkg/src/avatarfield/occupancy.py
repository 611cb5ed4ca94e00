"""Occupancy grids in normalized space for skipping empty samples.

Normalized space is posed space with the global rigid transform removed. A
single training grid is shared by all frames and keeps a decayed maximum of
sampled densities, so a cell stays occupied while any frame still fills it.
Inference grids are rebuilt per pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage

from .articulation import PoseBatch, SkeletonPose


class OccupancyConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    resolution: int = 64
    dilation: int = 1
    decay: float = 0.95
    update_interval: int = 16
    # None: density at which a cell diagonal accumulates 1% opacity
    threshold: float | None = None


def default_threshold(cell_diagonal: float, opacity: float = 0.01) -> float:
    return -math.log(1.0 - opacity) / cell_diagonal


@dataclass
class OccupancyGrid:
    values: np.ndarray  # (R, R, R) in [0, 1]
    mask: np.ndarray  # (R, R, R) bool
    box_min: np.ndarray
    box_max: np.ndarray
    threshold: float
    dilation: int = 1
    # per-cell starting frame for the training update cycle
    pose_offsets: np.ndarray | None = None

    @classmethod
    def empty(cls, resolution: int, box_min, box_max, threshold: float | None = None, dilation: int = 1):
        box_min = np.asarray(box_min, dtype=np.float64)
        box_max = np.asarray(box_max, dtype=np.float64)
        if threshold is None:
            diag = float(np.linalg.norm((box_max - box_min) / resolution))
            threshold = default_threshold(diag)
        shape = (resolution,) * 3
        return cls(np.zeros(shape), np.zeros(shape, dtype=bool), box_min, box_max, float(threshold), dilation)

    @classmethod
    def from_config(cls, config: OccupancyConfig, box_min, box_max) -> "OccupancyGrid":
        return cls.empty(config.resolution, box_min, box_max, config.threshold, config.dilation)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def cell_size(self) -> np.ndarray:
        return (self.box_max - self.box_min) / self.resolution

    def cell_centers(self) -> np.ndarray:
        r = self.resolution
        idx = np.stack(np.meshgrid(*[np.arange(r)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        return self.box_min + (idx + 0.5) * self.cell_size

    def cell_index(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer cell indices (P, 3) and an inside-box flag per point."""
        f = (np.asarray(x, dtype=np.float64).reshape(-1, 3) - self.box_min) / self.cell_size
        inside = np.all((f >= 0.0) & (f < self.resolution), axis=1)
        idx = np.clip(np.floor(f), 0, self.resolution - 1).astype(np.int64)
        return idx, inside

    def is_occupied(self, x: np.ndarray) -> np.ndarray:
        idx, inside = self.cell_index(x)
        out = self.mask[idx[:, 0], idx[:, 1], idx[:, 2]] & inside
        return out[0] if np.ndim(x) == 1 else out

    def refresh_mask(self) -> None:
        self.mask = dilate_mask(self.values >= self.threshold, self.dilation)

    def occupied_fraction(self) -> float:
        return float(self.mask.mean())


def dilate_mask(mask: np.ndarray, r: int) -> np.ndarray:
    if r < 0:
        raise ValueError("dilation radius must be >= 0")
    if r == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((2 * r + 1,) * 3, dtype=bool))


def dilate(grid: OccupancyGrid, r: int) -> OccupancyGrid:
    return OccupancyGrid(grid.values.copy(), dilate_mask(grid.mask, r), grid.box_min, grid.box_max,
                         grid.threshold, grid.dilation, grid.pose_offsets)


def to_normalized(x_posed: np.ndarray, pose: SkeletonPose) -> np.ndarray:
    g = pose.global_transform
    x = np.asarray(x_posed, dtype=np.float64)
    return (x - g[:3, 3]) @ g[:3, :3]


def from_normalized(x_norm: np.ndarray, pose: SkeletonPose) -> np.ndarray:
    g = pose.global_transform
    return np.asarray(x_norm, dtype=np.float64) @ g[:3, :3].T + g[:3, 3]


def _posed_density(posed_field, x_norm, poses: PoseBatch, pose_idx, chunk: int = 65536) -> np.ndarray:
    pose_idx = np.broadcast_to(np.asarray(pose_idx, dtype=np.int64), (x_norm.shape[0],))
    g = poses.global_forward[pose_idx]
    x_posed = np.einsum("pij,pj->pi", g[:, :3, :3], x_norm) + g[:, :3, 3]
    out = np.empty(x_norm.shape[0])
    for s in range(0, x_norm.shape[0], chunk):
        sigma, _, _ = posed_field.query(x_posed[s : s + chunk], poses, pose_idx[s : s + chunk])
        out[s : s + chunk] = sigma
    return out


def build_inference_grid(pose: SkeletonPose, posed_field, config: OccupancyConfig, box_min, box_max) -> OccupancyGrid:
    """Threshold and dilate posed densities sampled at cell centres for one pose."""
    grid = OccupancyGrid.from_config(config, box_min, box_max)
    poses = PoseBatch([pose], posed_field.skeleton)
    sigma = _posed_density(posed_field, grid.cell_centers(), poses, 0)
    grid.values = np.minimum(sigma, 1.0).reshape(grid.values.shape)
    grid.refresh_mask()
    return grid


class InferenceGridCache:
    """Per-pose inference grids keyed by the pose's transform bytes."""

    def __init__(self, config: OccupancyConfig, box_min, box_max, max_entries: int = 32):
        self.config = config
        self.box_min, self.box_max = box_min, box_max
        self.max_entries = max_entries
        self._grids: dict[bytes, OccupancyGrid] = {}

    def get(self, pose: SkeletonPose, posed_field) -> OccupancyGrid:
        key = pose.key()
        if key not in self._grids:
            if len(self._grids) >= self.max_entries:
                self._grids.pop(next(iter(self._grids)))
            self._grids[key] = build_inference_grid(pose, posed_field, self.config, self.box_min, self.box_max)
        return self._grids[key]


def update_training_grid(grid: OccupancyGrid, posed_field, poses: PoseBatch, decay: float,
                         rng: np.random.Generator, update_count: int = 0) -> None:
    """Decayed-max refresh from one jittered sample per cell.

    Each cell cycles through the training poses starting at a random offset,
    so every pose is visited once per ``len(poses)`` updates.
    """
    r = grid.resolution
    n_cells = r**3
    jitter = rng.random((n_cells, 3))
    idx = np.stack(np.meshgrid(*[np.arange(r)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    x_norm = grid.box_min + (idx + jitter) * grid.cell_size
    if grid.pose_offsets is None or grid.pose_offsets.size != n_cells:
        grid.pose_offsets = rng.integers(0, len(poses), size=n_cells)
    pose_idx = (grid.pose_offsets + update_count) % len(poses)
    sigma = _posed_density(posed_field, x_norm, poses, pose_idx)
    fresh = np.minimum(sigma, 1.0).reshape(grid.values.shape)
    grid.values = np.maximum(decay * grid.values, fresh)
    grid.refresh_mask()
