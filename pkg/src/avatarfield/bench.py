"""Timing harness for empty-space skipping at render and training time."""

from __future__ import annotations

import copy
import time

import numpy as np

from .articulation import SkeletonPose
from .metrics import psnr
from .model import AvatarModel
from .occupancy import InferenceGridCache
from .renderer import Camera, render_image
from .trainer import FrameSet, Trainer


def _render_once(model: AvatarModel, camera: Camera, pose: SkeletonPose, skip: bool) -> dict:
    posed = model.posed
    posed.reset_counters()
    t0 = time.perf_counter()
    grid = None
    if skip:
        # a fresh cache so grid construction is part of the measured time
        cache = InferenceGridCache(model.config.occupancy, model.box_min, model.box_max)
        grid = cache.get(pose, posed)
    grid_queries = posed.posed_queries
    rgb, alpha, stats = render_image(posed, camera, pose, model.config.render, grid)
    seconds = time.perf_counter() - t0
    rays = camera.width * camera.height
    return {
        "seconds": seconds,
        "rays_per_second": rays / seconds,
        "samples": stats.samples,
        "render_queries": stats.posed_queries,
        "grid_queries": grid_queries,
        "counter_queries": posed.posed_queries,
        "queries_per_ray": posed.posed_queries / rays,
        "skip_ratio": stats.skipped / max(stats.samples, 1),
        "rgb": rgb,
        "alpha": alpha,
    }


def bench_render(model: AvatarModel, camera: Camera, pose: SkeletonPose) -> dict:
    """Render one view with and without skipping; query counts include grid construction."""
    on = _render_once(model, camera, pose, True)
    off = _render_once(model, camera, pose, False)
    report = {
        "skip": {k: v for k, v in on.items() if k not in ("rgb", "alpha")},
        "no_skip": {k: v for k, v in off.items() if k not in ("rgb", "alpha")},
        "speedup": off["seconds"] / on["seconds"],
        "query_reduction": 1.0 - on["counter_queries"] / max(off["counter_queries"], 1),
        "psnr_skip_vs_no_skip": psnr(on["rgb"], off["rgb"]),
    }
    return report


def bench_train(model: AvatarModel, frames: FrameSet, steps: int = 32, seed: int = 0) -> dict:
    """Time ``steps`` training steps from copies of ``model`` with skipping on and off."""
    out = {}
    for key, skip in (("skip", True), ("no_skip", False)):
        m = copy.deepcopy(model)
        cfg = m.config.train.model_copy(update={"skip": skip, "iterations": steps})
        trainer = Trainer(m, frames, cfg, seed=seed)
        m.posed.reset_counters()
        t0 = time.perf_counter()
        recs = trainer.train(steps)
        seconds = time.perf_counter() - t0
        out[key] = {
            "seconds": seconds,
            "steps_per_second": steps / seconds,
            "counter_queries": m.posed.posed_queries,
            "step_queries": int(np.sum([r.posed_queries for r in recs])),
            "final_loss": recs[-1].loss if recs else float("nan"),
        }
    out["speedup"] = out["no_skip"]["seconds"] / out["skip"]["seconds"]
    return out
