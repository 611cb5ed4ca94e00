"""Losses, the optimizer and the training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .articulation import PoseBatch, SkeletonPose
from .config import TrainConfig
from .errors import NumericError
from .metrics import psnr, ssim
from .model import AvatarModel
from .occupancy import update_training_grid
from .renderer import Camera, render_rays, render_rays_backward

# --------------------------------------------------------------------------
# losses; each returns (mean value, gradient w.r.t. its first argument)


def loss_rgb(color, color_gt, delta: float = 0.1):
    """Huber penalty on the per-ray colour residual norm."""
    res = np.asarray(color, dtype=np.float64) - np.asarray(color_gt, dtype=np.float64)
    res = res.reshape(-1, 3)
    n = res.shape[0]
    r = np.linalg.norm(res, axis=1)
    quad = r <= delta
    val = np.where(quad, 0.5 * r**2, delta * (r - 0.5 * delta))
    scale = np.where(quad, 1.0, delta / np.maximum(r, 1e-300))
    return float(val.sum() / n), res * (scale / n)[:, None]


def loss_alpha(alpha, alpha_gt):
    d = np.asarray(alpha, dtype=np.float64) - np.asarray(alpha_gt, dtype=np.float64)
    n = d.size
    return float(np.abs(d).sum() / n), np.sign(d) / n


def loss_hard(alpha, const: float = math.log1p(math.exp(-1.0))):
    """``-ln(exp(-|A|) + exp(-|A - 1|)) + const``; zero at A in {0, 1}."""
    a = np.asarray(alpha, dtype=np.float64)
    n = a.size
    # for A in [0, 1] the inner sum is exp(-A) + exp(A - 1)
    p, q = np.exp(-np.abs(a)), np.exp(-np.abs(a - 1.0))
    val = -np.log(p + q) + const
    # one-sided limits from inside at the end points
    sa = np.where(a > 0, 1.0, np.where(a < 0, -1.0, 1.0))
    sb = np.where(a < 1, -1.0, np.where(a > 1, 1.0, -1.0))
    grad = (p * sa + q * sb) / (p + q)
    return float(val.sum() / n), grad / n


def loss_density(sigma, empty):
    """Mean density over points in empty cells (zero contribution elsewhere)."""
    s = np.asarray(sigma, dtype=np.float64)
    n = s.size
    if n == 0:
        return 0.0, np.zeros(0)
    e = np.asarray(empty, dtype=bool)
    g = np.where(e, np.sign(s), 0.0) / n
    return float(np.abs(s[e]).sum() / n), g


# --------------------------------------------------------------------------
# optimizer


def cosine_lr(base: float, step: int, total: int, final_ratio: float) -> float:
    if total <= 1:
        return base
    frac = min(step / (total - 1), 1.0)
    return base * (final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


class Adam:
    """Adam over a list of (name, value, grad) arrays updated in place."""

    def __init__(self, params, beta1=0.9, beta2=0.99, eps=1e-15):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(v.shape) for _, v, _ in params]
        self.v = [np.zeros(v.shape) for _, v, _ in params]
        self.t = 0

    def step(self, lrs: list[float]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for (_, value, grad), m, v, lr in zip(self.params, self.m, self.v, lrs):
            g = grad.astype(np.float64)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            upd = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            value -= upd.astype(value.dtype)


# --------------------------------------------------------------------------
# training


@dataclass
class FrameSet:
    """Training frames in memory: images, exact masks, cameras and poses."""

    images: np.ndarray  # (F, H, W, 3) in [0, 1]
    masks: np.ndarray  # (F, H, W) in [0, 1]
    cameras: list[Camera]
    poses: list[SkeletonPose]

    def __post_init__(self):
        f = self.images.shape[0]
        if f == 0:
            raise ValueError("no frames")
        if not (self.masks.shape[0] == len(self.cameras) == len(self.poses) == f):
            raise ValueError("frame count mismatch between images, masks, cameras and poses")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class StepRecord:
    step: int
    loss: float
    rgb: float
    alpha: float
    hard: float
    density: float
    lr_grid: float
    lr_mlp: float
    seconds: float
    posed_queries: int
    samples: int
    occupied: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Trainer:
    model: AvatarModel
    data: FrameSet
    config: TrainConfig
    seed: int = 0
    step: int = 0
    history: list[StepRecord] = field(default_factory=list)

    def __post_init__(self):
        self.poses = PoseBatch(self.data.poses, self.model.skeleton)
        params = self.model.field.parameters()
        self.optimizer = Adam(params, self.config.beta1, self.config.beta2, self.config.adam_eps)
        self._groups = ["grid" if name.startswith("grid") else "mlp" for name, _, _ in params]
        self._rays = [cam.pixel_rays() for cam in self.data.cameras]
        self._rgb = self.data.images.reshape(len(self.data), -1, 3).astype(np.float64)
        self._mask = self.data.masks.reshape(len(self.data), -1).astype(np.float64)
        self._occ_updates = 0

    def learning_rates(self, step: int) -> tuple[float, float]:
        c = self.config
        total = max(c.iterations, 1)
        return (cosine_lr(c.lr_grid, step, total, c.lr_final_ratio),
                cosine_lr(c.lr_mlp, step, total, c.lr_final_ratio))

    def update_occupancy(self, rng: np.random.Generator, decay: float) -> None:
        update_training_grid(self.model.training_grid, self.model.posed, self.poses, decay, rng, self._occ_updates)
        self._occ_updates += 1

    def sample_batch(self, rng: np.random.Generator):
        n = self.config.rays_per_batch
        frames = rng.integers(0, len(self.data), size=n)
        pix = rng.integers(0, self._rgb.shape[1], size=n)
        origins = np.empty((n, 3))
        dirs = np.empty((n, 3))
        for f in np.unique(frames):
            sel = frames == f
            o, d = self._rays[f]
            origins[sel] = o[pix[sel]]
            dirs[sel] = d[pix[sel]]
        return frames, origins, dirs, self._rgb[frames, pix], self._mask[frames, pix]

    def density_term(self, rng: np.random.Generator) -> float:
        """Occupancy-based (or global) density penalty; accumulates its gradient."""
        c = self.config
        if c.density_reg == "none" or c.losses.density == 0.0 or c.density_points == 0:
            return 0.0
        grid = self.model.training_grid
        lo, hi = grid.box_min, grid.box_max
        x_n = lo + rng.random((c.density_points, 3)) * (hi - lo)
        pidx = rng.integers(0, len(self.poses), size=c.density_points)
        g = self.poses.global_forward[pidx]
        x_w = np.einsum("pij,pj->pi", g[:, :3, :3], x_n) + g[:, :3, 3]
        if c.density_reg == "global":
            empty = np.ones(c.density_points, dtype=bool)
        else:
            empty = ~grid.is_occupied(x_n)
        # only points that are penalized need a field query
        q = np.nonzero(empty)[0]
        posed = self.model.posed
        sigma = np.zeros(c.density_points)
        if q.size:
            s, col, cache = posed.query(x_w[q], self.poses, pidx[q])
            sigma[q] = s
        value, grad = loss_density(sigma, empty)
        if q.size:
            w = c.losses.density
            posed.backward(cache, w * grad[q], np.zeros((q.size, 3)))
        return value

    def train_step(self) -> StepRecord:
        c = self.config
        step = self.step
        t0 = time.perf_counter()
        rng = np.random.default_rng([self.seed, step])
        model = self.model
        if step % model.config.occupancy.update_interval == 0:
            # the first update builds the grid from the untrained model
            self.update_occupancy(rng, 0.0 if self._occ_updates == 0 else model.config.occupancy.decay)
        posed = model.posed
        q0 = posed.posed_queries
        model.field.zero_grad()

        frames, origins, dirs, rgb_gt, mask_gt = self.sample_batch(rng)
        occ = model.training_grid if c.skip else None
        color, alpha, ctx, stats = render_rays(posed, origins, dirs, self.poses, frames, model.config.render, occ, rng)
        w = c.losses
        l_rgb, g_rgb = loss_rgb(color, rgb_gt, w.huber_delta)
        l_alpha, g_alpha = loss_alpha(alpha, mask_gt)
        l_hard, g_hard = loss_hard(alpha, w.hard_const)
        d_color = w.rgb * g_rgb
        d_alpha = w.alpha * g_alpha + w.hard * g_hard
        render_rays_backward(posed, ctx, d_color, d_alpha)
        l_density = self.density_term(rng)

        total = w.rgb * l_rgb + w.alpha * l_alpha + w.hard * l_hard + w.density * l_density
        terms = {"rgb": l_rgb, "alpha": l_alpha, "hard": l_hard, "density": l_density}
        if not all(math.isfinite(v) for v in terms.values()) or not math.isfinite(total):
            raise NumericError(step, terms)

        lr_grid, lr_mlp = self.learning_rates(step)
        self.optimizer.step([lr_grid if g == "grid" else lr_mlp for g in self._groups])
        self.step += 1
        rec = StepRecord(step, total, l_rgb, l_alpha, l_hard, l_density, lr_grid, lr_mlp,
                         time.perf_counter() - t0, posed.posed_queries - q0, stats.samples,
                         model.training_grid.occupied_fraction())
        self.history.append(rec)
        return rec

    def train(self, iterations: int | None = None, callback=None) -> list[StepRecord]:
        n = self.config.iterations if iterations is None else iterations
        for _ in range(n):
            rec = self.train_step()
            if callback is not None:
                callback(rec)
        return self.history


# --------------------------------------------------------------------------
# evaluation


def evaluate_views(model: AvatarModel, cameras, poses, images, skip: bool = True) -> dict:
    """Mean PSNR/SSIM of model renders against reference images."""
    ps, ss = [], []
    for cam, pose, ref in zip(cameras, poses, images):
        rgb, _, _ = model.render(cam, pose, skip=skip)
        ps.append(psnr(rgb, ref))
        ss.append(ssim(rgb, ref))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "psnr_per_view": ps}
