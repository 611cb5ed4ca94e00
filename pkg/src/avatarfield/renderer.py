"""Pinhole cameras, ray sampling, volume compositing and image rendering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict


class RenderConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_samples: int = 128
    early_stop: float = 1e-3
    # render box in normalized space (global rotation/translation removed)
    box_min: tuple[float, float, float] = (-1.1, -1.1, -1.1)
    box_max: tuple[float, float, float] = (1.1, 1.1, 1.1)
    tile_rays: int = 4096
    march_chunk: int = 32


# --------------------------------------------------------------------------
# cameras and rays


def look_at(eye, target, up) -> np.ndarray:
    """World-to-camera transform; camera x right, y down, z forward."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = -r @ eye
    return m


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def camera_to_world(self) -> np.ndarray:
        r = self.world_to_camera[:3, :3]
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ self.world_to_camera[:3, 3]
        return m

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    def rays_through(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Rays through continuous image positions ``uv`` (x right, y down, in pixels)."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        d_cam = np.stack(
            [(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy, np.ones(uv.shape[0])], axis=-1
        )
        c2w = self.camera_to_world
        d = d_cam @ c2w[:3, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(c2w[:3, 3], d.shape).copy()
        return o, d

    def pixel_rays(self, pixels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Rays through pixel centres; ``pixels`` is (P, 2) integer (col, row), default all row-major."""
        if pixels is None:
            rows, cols = np.mgrid[0 : self.height, 0 : self.width]
            pixels = np.stack([cols.ravel(), rows.ravel()], axis=-1)
        return self.rays_through(np.asarray(pixels, dtype=np.float64) + 0.5)

    def project(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.world_to_camera[:3, :3].T
        p += self.world_to_camera[:3, 3]
        return np.stack([self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy], axis=-1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_camera": self.world_to_camera.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]),
            np.asarray(d["world_to_camera"], dtype=np.float64),
        )


def ray_box(origins: np.ndarray, dirs: np.ndarray, box_min, box_max):
    """Slab intersection clipped to t >= 0: ``(t_near, t_far, hit)``."""
    lo = np.asarray(box_min, dtype=np.float64)
    hi = np.asarray(box_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # parallel axes: inside the slab gives (-inf, inf), outside gives nan or an empty interval
    parallel = dirs == 0.0
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def sample_points(t_near, t_far, n: int, rng: np.random.Generator | None = None):
    """``n`` stratified positions per ray (midpoints without ``rng``) and their spacings."""
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1, 1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1, 1)
    u = np.full((t_near.shape[0], n), 0.5) if rng is None else rng.random((t_near.shape[0], n))
    t = t_near + (np.arange(n) + u) * ((t_far - t_near) / n)
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = t_far[:, 0] - t[:, -1]
    return t, delta


# --------------------------------------------------------------------------
# compositing


@dataclass
class Composite:
    color: np.ndarray  # (R, 3)
    alpha: np.ndarray  # (R,) accumulated opacity, the sum of the weights
    weights: np.ndarray  # (R, N)
    transmittance: np.ndarray  # (R, N) before each sample
    final_transmittance: np.ndarray  # (R,)
    included: np.ndarray  # (R, N) samples before early termination


def composite(sigma, color, delta, early_stop: float = 1e-3, t0=None) -> Composite:
    """Front-to-back alpha compositing with early termination.

    ``alpha_i = 1 - exp(-sigma_i delta_i)``; samples whose incoming
    transmittance is at most ``early_stop`` are dropped.
    """
    sigma = np.asarray(sigma)
    tau = sigma * delta
    a = -np.expm1(-tau)
    survive = np.exp(-tau)
    trans = np.empty_like(a)
    trans[:, 0] = 1.0
    if a.shape[1] > 1:
        np.cumprod(survive[:, :-1], axis=1, out=trans[:, 1:])
    if t0 is not None:
        trans *= np.asarray(t0).reshape(-1, 1)
    included = trans > early_stop
    w = np.where(included, a * trans, 0.0)
    c = np.einsum("rn,rnc->rc", w, color)
    last = np.where(included, trans * survive, np.inf).min(axis=1)
    final = np.where(included.any(axis=1), last, trans[:, 0])
    return Composite(c, w.sum(axis=1), w, trans, final, included)


def composite_backward(comp: Composite, color, delta, d_color, d_alpha):
    """Exact gradients of the composite w.r.t. per-sample density and colour.

    Terminated samples receive zero gradient; the termination index is held fixed.
    """
    d_color = np.asarray(d_color).reshape(-1, 3)
    d_alpha = np.asarray(d_alpha).reshape(-1)
    w = comp.weights
    # per-sample contribution to the scalar <dL/dC, C> + dL/dA * A
    contrib = np.einsum("rnc,rc->rn", color, d_color) + d_alpha[:, None]
    wc = w * contrib
    # sum over later samples (strict suffix)
    suffix = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
    trans_after = comp.transmittance - w
    d_sigma = np.where(comp.included, delta * (trans_after * contrib - suffix), 0.0)
    d_col = w[..., None] * d_color[:, None, :]
    return d_sigma, d_col


# --------------------------------------------------------------------------
# rendering through a posed field


@dataclass
class RenderStats:
    rays: int = 0
    samples: int = 0
    posed_queries: int = 0
    skipped: int = 0

    def merge(self, other: "RenderStats") -> None:
        self.rays += other.rays
        self.samples += other.samples
        self.posed_queries += other.posed_queries
        self.skipped += other.skipped


@dataclass
class RayBatchContext:
    comp: Composite
    color: np.ndarray
    delta: np.ndarray
    hit: np.ndarray
    query_index: tuple
    cache: object


def _normalize_rays(origins, dirs, poses, pose_idx):
    ginv = poses.global_inverse[pose_idx]
    o_n = np.einsum("rij,rj->ri", ginv[:, :3, :3], origins) + ginv[:, :3, 3]
    d_n = np.einsum("rij,rj->ri", ginv[:, :3, :3], dirs)
    return o_n, d_n


def render_rays(posed_field, origins, dirs, poses, pose_idx, config: RenderConfig, occupancy=None,
                rng: np.random.Generator | None = None):
    """Render a batch of rays; returns ``(color, alpha, context, stats)``.

    Samples are placed inside the normalized render box and, when an occupancy
    grid is given, samples in empty cells get zero density without a query.
    """
    n_rays = origins.shape[0]
    pose_idx = np.broadcast_to(np.asarray(pose_idx, dtype=np.int64), (n_rays,))
    o_n, d_n = _normalize_rays(origins, dirs, poses, pose_idx)
    t_near, t_far, hit = ray_box(o_n, d_n, config.box_min, config.box_max)
    hi = np.nonzero(hit)[0]
    n = config.n_samples
    t, delta = sample_points(t_near[hi], t_far[hi], n, rng)
    x_n = o_n[hi, None, :] + t[..., None] * d_n[hi, None, :]
    if occupancy is not None:
        occ = occupancy.is_occupied(x_n.reshape(-1, 3)).reshape(t.shape)
    else:
        occ = np.ones(t.shape, dtype=bool)
    qr, qs = np.nonzero(occ)
    x_w = origins[hi[qr]] + t[qr, qs, None] * dirs[hi[qr]]
    dtype = getattr(getattr(posed_field, "field", None), "dtype", np.float64)
    sigma = np.zeros(t.shape, dtype=dtype)
    color = np.zeros(t.shape + (3,), dtype=dtype)
    s, c, cache = posed_field.query(x_w, poses, pose_idx[hi[qr]])
    sigma[qr, qs] = s
    color[qr, qs] = c
    comp = composite(sigma, color, delta, config.early_stop)
    out_c = np.zeros((n_rays, 3), dtype=comp.color.dtype)
    out_a = np.zeros(n_rays, dtype=comp.alpha.dtype)
    out_c[hi] = comp.color
    out_a[hi] = comp.alpha
    stats = RenderStats(n_rays, t.size, qr.size, t.size - qr.size)
    return out_c, out_a, RayBatchContext(comp, color, delta, hi, (qr, qs), cache), stats


def render_rays_backward(posed_field, ctx: RayBatchContext, d_color, d_alpha) -> None:
    d_sigma, d_col = composite_backward(ctx.comp, ctx.color, ctx.delta, d_color[ctx.hit], d_alpha[ctx.hit])
    qr, qs = ctx.query_index
    posed_field.backward(ctx.cache, d_sigma[qr, qs], d_col[qr, qs])


def march_rays(posed_field, origins, dirs, poses, pose_idx, config: RenderConfig, occupancy=None):
    """Inference marching: midpoint samples in chunks, stopping rays once opaque."""
    n_rays = origins.shape[0]
    pose_idx = np.broadcast_to(np.asarray(pose_idx, dtype=np.int64), (n_rays,))
    o_n, d_n = _normalize_rays(origins, dirs, poses, pose_idx)
    t_near, t_far, hit = ray_box(o_n, d_n, config.box_min, config.box_max)
    hi = np.nonzero(hit)[0]
    t, delta = sample_points(t_near[hi], t_far[hi], config.n_samples)
    out_c = np.zeros((n_rays, 3))
    out_a = np.zeros(n_rays)
    trans = np.ones(hi.size)
    stats = RenderStats(rays=n_rays)
    for start in range(0, config.n_samples, config.march_chunk):
        act = np.nonzero(trans > config.early_stop)[0]
        if act.size == 0:
            break
        sl = slice(start, start + config.march_chunk)
        tc, dc = t[act, sl], delta[act, sl]
        rays = hi[act]
        x_n = o_n[rays, None, :] + tc[..., None] * d_n[rays, None, :]
        if occupancy is not None:
            occ = occupancy.is_occupied(x_n.reshape(-1, 3)).reshape(tc.shape)
        else:
            occ = np.ones(tc.shape, dtype=bool)
        qr, qs = np.nonzero(occ)
        x_w = origins[rays[qr]] + tc[qr, qs, None] * dirs[rays[qr]]
        s, c, _ = posed_field.query(x_w, poses, pose_idx[rays[qr]])
        sigma = np.zeros(tc.shape)
        color = np.zeros(tc.shape + (3,))
        sigma[qr, qs] = s
        color[qr, qs] = c
        comp = composite(sigma, color, dc, config.early_stop, t0=trans[act])
        out_c[rays] += comp.color
        out_a[rays] += comp.alpha
        trans[act] = comp.final_transmittance
        stats.samples += tc.size
        stats.posed_queries += qr.size
        stats.skipped += tc.size - qr.size
    return out_c, out_a, stats


def render_image(posed_field, camera: Camera, pose, config: RenderConfig = RenderConfig(), occupancy=None,
                 poses=None):
    """Render ``(rgb (H, W, 3), alpha (H, W), stats)`` of a posed field over black."""
    from .articulation import PoseBatch

    if poses is None:
        poses = PoseBatch([pose], posed_field.skeleton)
    origins, dirs = camera.pixel_rays()
    rgb = np.zeros((origins.shape[0], 3))
    alpha = np.zeros(origins.shape[0])
    stats = RenderStats()
    for start in range(0, origins.shape[0], config.tile_rays):
        sl = slice(start, start + config.tile_rays)
        c, a, st = march_rays(posed_field, origins[sl], dirs[sl], poses, 0, config, occupancy)
        rgb[sl] = c
        alpha[sl] = a
        stats.merge(st)
    return rgb.reshape(camera.height, camera.width, 3), alpha.reshape(camera.height, camera.width), stats
