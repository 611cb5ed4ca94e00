"""The trainable avatar: skeleton, skinning grid, canonical field, occupancy state."""

from __future__ import annotations

import numpy as np

from .articulation import PosedField, Skeleton, SkeletonPose, SkinningGrid, build_skinning_grid
from .config import RunConfig
from .field import CanonicalField
from .occupancy import InferenceGridCache, OccupancyGrid
from .renderer import Camera, render_image


class AvatarModel:
    def __init__(self, config: RunConfig, skeleton: Skeleton, skinning: SkinningGrid | None = None):
        self.config = config
        self.skeleton = skeleton
        mc = config.model
        lo, hi = skeleton.bounds(mc.bbox_margin)
        grid_cfg = mc.grid.model_copy(update={"bbox_min": tuple(lo), "bbox_max": tuple(hi)})
        self.field = CanonicalField(grid_cfg, mc.mlp, seed=config.seed, dtype=np.dtype(mc.dtype))
        if skinning is None:
            skinning = build_skinning_grid(
                skeleton, mc.articulation.skinning_resolution, (lo, hi), mc.articulation.blend_band
            )
        self.skinning = skinning
        self.posed = PosedField(self.field, skeleton, skinning, mc.articulation)
        self.training_grid = OccupancyGrid.from_config(config.occupancy, config.render.box_min, config.render.box_max)
        self.inference_grids = InferenceGridCache(config.occupancy, config.render.box_min, config.render.box_max)

    @property
    def box_min(self):
        return self.config.render.box_min

    @property
    def box_max(self):
        return self.config.render.box_max

    def render(self, camera: Camera, pose: SkeletonPose, skip: bool = True):
        """Inference render with a per-pose occupancy grid; returns ``(rgb, alpha, stats)``."""
        grid = self.inference_grids.get(pose, self.posed) if skip else None
        return render_image(self.posed, camera, pose, self.config.render, grid)
