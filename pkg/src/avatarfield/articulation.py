"""Skeleton, skinning-weight voxel grid, forward LBS and its inverse.

Poses are stored as per-bone 4x4 rigid transforms mapping canonical points to
posed space. The posed field at ``x'`` is the canonical field evaluated at a
root ``x*`` of ``sum_i w_i(x) B_i x = x'``; several roots can exist, and the
one with the highest canonical density wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.spatial.transform import Rotation

from .field import CanonicalField, FieldCache


class ArticulationConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    skinning_resolution: int = 32
    blend_band: float = 1.5
    init_cutoff: float = 3.0
    max_iter: int = 20
    root_tol: float = 1e-5
    dedup_tol: float = 1e-4


# --------------------------------------------------------------------------
# rigid transforms


def rigid(rotation=None, translation=None) -> np.ndarray:
    m = np.eye(4)
    if rotation is not None:
        m[:3, :3] = rotation
    if translation is not None:
        m[:3, 3] = translation
    return m


def invert_rigid(m: np.ndarray) -> np.ndarray:
    out = np.zeros_like(m)
    r = np.swapaxes(m[..., :3, :3], -1, -2)
    out[..., :3, :3] = r
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", r, m[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def rotvec_matrix(rotvec) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()


def apply_rigid(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x @ m[:3, :3].T + m[:3, 3]


def is_rigid(m: np.ndarray, tol: float = 1e-6) -> bool:
    r = m[:3, :3]
    return (
        m.shape == (4, 4)
        and np.allclose(r @ r.T, np.eye(3), atol=tol)
        and abs(np.linalg.det(r) - 1.0) < tol
        and np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=tol)
    )


# --------------------------------------------------------------------------
# skeleton and poses


@dataclass(frozen=True)
class Bone:
    name: str
    parent: int
    head: tuple[float, float, float]
    tail: tuple[float, float, float]
    radius: float


@dataclass
class Skeleton:
    bones: list[Bone]

    def __post_init__(self):
        if not self.bones:
            raise ValueError("skeleton needs at least one bone")
        if self.bones[0].parent != -1:
            raise ValueError("bone 0 must be the root (parent -1)")
        for i, bone in enumerate(self.bones):
            if i > 0 and not 0 <= bone.parent < i:
                raise ValueError(f"bone {i} ({bone.name}): parent must precede it")
            if bone.radius <= 0:
                raise ValueError(f"bone {i} ({bone.name}): radius must be positive")
            if np.linalg.norm(np.subtract(bone.tail, bone.head)) < 1e-9:
                raise ValueError(f"bone {i} ({bone.name}) has zero length")

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    @property
    def heads(self) -> np.ndarray:
        return np.array([b.head for b in self.bones], dtype=np.float64)

    @property
    def tails(self) -> np.ndarray:
        return np.array([b.tail for b in self.bones], dtype=np.float64)

    @property
    def radii(self) -> np.ndarray:
        return np.array([b.radius for b in self.bones], dtype=np.float64)

    @property
    def parents(self) -> np.ndarray:
        return np.array([b.parent for b in self.bones], dtype=np.int64)

    def bounds(self, margin: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box around all capsules, grown by ``margin`` of its extent."""
        pts = np.concatenate([self.heads, self.tails])
        r = np.concatenate([self.radii, self.radii])[:, None]
        lo, hi = (pts - r).min(axis=0), (pts + r).max(axis=0)
        pad = margin * (hi - lo)
        return lo - pad, hi + pad

    def to_dict(self) -> list[dict]:
        return [
            {"name": b.name, "parent": b.parent, "head": list(b.head), "tail": list(b.tail), "radius": b.radius}
            for b in self.bones
        ]

    @classmethod
    def from_dict(cls, items: list[dict]) -> "Skeleton":
        return cls(
            [Bone(d["name"], int(d["parent"]), tuple(d["head"]), tuple(d["tail"]), float(d["radius"])) for d in items]
        )


@dataclass
class SkeletonPose:
    bone_transforms: np.ndarray
    global_transform: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.bone_transforms = np.asarray(self.bone_transforms, dtype=np.float64)
        self.global_transform = np.asarray(self.global_transform, dtype=np.float64)
        if self.bone_transforms.ndim != 3 or self.bone_transforms.shape[1:] != (4, 4):
            raise ValueError("bone_transforms must have shape (n_bones, 4, 4)")
        for i, m in enumerate(self.bone_transforms):
            if not is_rigid(m):
                raise ValueError(f"bone transform {i} is not a proper rigid transform")
        if not is_rigid(self.global_transform):
            raise ValueError("global transform is not a proper rigid transform")

    @property
    def n_bones(self) -> int:
        return self.bone_transforms.shape[0]

    @classmethod
    def identity(cls, n_bones: int) -> "SkeletonPose":
        return cls(np.tile(np.eye(4), (n_bones, 1, 1)), np.eye(4))

    def key(self) -> bytes:
        return self.bone_transforms.tobytes() + self.global_transform.tobytes()


def pose_from_rotations(
    skeleton: Skeleton,
    local_rotvecs=None,
    global_rotvec=(0.0, 0.0, 0.0),
    global_translation=(0.0, 0.0, 0.0),
) -> SkeletonPose:
    """Compose per-bone rotations about each bone's head joint down the tree."""
    nb = skeleton.n_bones
    rotvecs = np.zeros((nb, 3)) if local_rotvecs is None else np.asarray(local_rotvecs, dtype=np.float64)
    g = rigid(rotvec_matrix(global_rotvec), global_translation)
    transforms = np.empty((nb, 4, 4))
    heads = skeleton.heads
    for i, bone in enumerate(skeleton.bones):
        local = rigid(translation=heads[i]) @ rigid(rotvec_matrix(rotvecs[i])) @ rigid(translation=-heads[i])
        parent = g if bone.parent < 0 else transforms[bone.parent]
        transforms[i] = parent @ local
    return SkeletonPose(transforms, g)


class PoseBatch:
    """Several poses stacked into arrays the kernels consume."""

    def __init__(self, poses: list[SkeletonPose], skeleton: Skeleton):
        if not poses:
            raise ValueError("need at least one pose")
        self.poses = list(poses)
        self.forward = np.ascontiguousarray(np.stack([p.bone_transforms[:, :3, :] for p in poses]))
        self.inverse = np.ascontiguousarray(invert_rigid(np.stack([p.bone_transforms for p in poses]))[:, :, :3, :])
        self.global_forward = np.stack([p.global_transform for p in poses])
        self.global_inverse = invert_rigid(self.global_forward)
        heads, tails = skeleton.heads, skeleton.tails
        self.heads = np.ascontiguousarray(np.einsum("fbij,bj->fbi", self.forward[..., :3], heads) + self.forward[..., 3])
        self.tails = np.ascontiguousarray(np.einsum("fbij,bj->fbi", self.forward[..., :3], tails) + self.forward[..., 3])

    def __len__(self) -> int:
        return len(self.poses)


# --------------------------------------------------------------------------
# skinning grid


def segment_distance(points: np.ndarray, heads: np.ndarray, tails: np.ndarray) -> np.ndarray:
    """Distances (P, n_segments) from points to line segments."""
    d = tails - heads
    rel = points[:, None, :] - heads[None]
    t = np.clip(np.einsum("pbi,bi->pb", rel, d) / np.einsum("bi,bi->b", d, d), 0.0, 1.0)
    return np.linalg.norm(rel - t[..., None] * d[None], axis=-1)


def blend_weights(dist: np.ndarray, band: float, tiny: float = 1e-12) -> np.ndarray:
    """Inverse-distance blend over segments within ``band`` times the nearest distance.

    Each weight is ``1/d_i - 1/(band * d_min)`` clipped at zero, so a segment's
    weight fades to zero exactly at the band edge.
    """
    d_min = dist.min(axis=1, keepdims=True)
    on_axis = d_min[:, 0] < tiny
    safe = np.maximum(dist, tiny)
    raw = np.maximum(1.0 / safe - 1.0 / (band * np.maximum(d_min, tiny)), 0.0)
    raw[on_axis] = (dist[on_axis] < tiny).astype(np.float64)
    return raw / raw.sum(axis=1, keepdims=True)


@dataclass
class SkinningGrid:
    weights: np.ndarray  # (R0, R1, R2, n_bones), one simplex vector per lattice node
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.weights.shape[:3]

    @property
    def n_bones(self) -> int:
        return self.weights.shape[3]

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(self.bbox_min, self.bbox_max, self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def build_skinning_grid(skeleton: Skeleton, resolution=32, bbox=None, band: float = 1.5) -> SkinningGrid:
    res = (resolution,) * 3 if np.isscalar(resolution) else tuple(int(r) for r in resolution)
    if min(res) < 2:
        raise ValueError("skinning grid resolution must be >= 2 per axis")
    lo, hi = skeleton.bounds() if bbox is None else (np.asarray(bbox[0]), np.asarray(bbox[1]))
    grid = SkinningGrid(np.zeros(res + (skeleton.n_bones,)), lo, hi)
    nodes = grid.node_positions().reshape(-1, 3)
    dist = segment_distance(nodes, skeleton.heads, skeleton.tails)
    grid.weights[...] = blend_weights(dist, band).reshape(grid.weights.shape)
    return grid


@numba.njit(cache=True, inline="always")
def _axis(u, n):
    s = n - 1
    f = u * s
    clamped = False
    if f <= 0.0:
        f = 0.0
        clamped = True
    elif f >= s:
        f = float(s)
        clamped = True
    i = int(math.floor(f))
    if i >= s:
        i = s - 1
    return i, f - i, clamped


@numba.njit(cache=True)
def _weights_at(x, W, lo, ext, w, dw, want_grad):
    """Trilinear, renormalised skinning weights (and spatial gradient) at one point."""
    r0, r1, r2, nb = W.shape
    ix, fx, cx = _axis((x[0] - lo[0]) / ext[0], r0)
    iy, fy, cy = _axis((x[1] - lo[1]) / ext[1], r1)
    iz, fz, cz = _axis((x[2] - lo[2]) / ext[2], r2)
    sx = 0.0 if cx else (r0 - 1) / ext[0]
    sy = 0.0 if cy else (r1 - 1) / ext[1]
    sz = 0.0 if cz else (r2 - 1) / ext[2]
    for b in range(nb):
        w[b] = 0.0
        if want_grad:
            dw[b, 0] = 0.0
            dw[b, 1] = 0.0
            dw[b, 2] = 0.0
    for c in range(8):
        dx = c & 1
        dy = (c >> 1) & 1
        dz = (c >> 2) & 1
        ax = fx if dx else 1.0 - fx
        ay = fy if dy else 1.0 - fy
        az = fz if dz else 1.0 - fz
        wt = ax * ay * az
        gx = (1.0 if dx else -1.0) * ay * az * sx
        gy = (1.0 if dy else -1.0) * ax * az * sy
        gz = (1.0 if dz else -1.0) * ax * ay * sz
        for b in range(nb):
            v = W[ix + dx, iy + dy, iz + dz, b]
            w[b] += wt * v
            if want_grad:
                dw[b, 0] += gx * v
                dw[b, 1] += gy * v
                dw[b, 2] += gz * v
    s = 0.0
    for b in range(nb):
        s += w[b]
    for b in range(nb):
        w[b] = w[b] / s
    if want_grad:
        for k in range(3):
            ds = 0.0
            for b in range(nb):
                ds += dw[b, k]
            for b in range(nb):
                dw[b, k] = (dw[b, k] - w[b] * ds) / s


@numba.njit(cache=True)
def _skinning_weights(x, W, lo, ext, out):
    nb = W.shape[3]
    dw = np.empty((nb, 3))
    w = np.empty(nb)
    for p in range(x.shape[0]):
        _weights_at(x[p], W, lo, ext, w, dw, False)
        for b in range(nb):
            out[p, b] = w[b]


@numba.njit(cache=True, inline="always")
def _seg_dist(p, a, b):
    d0 = b[0] - a[0]
    d1 = b[1] - a[1]
    d2 = b[2] - a[2]
    r0 = p[0] - a[0]
    r1 = p[1] - a[1]
    r2 = p[2] - a[2]
    t = (r0 * d0 + r1 * d1 + r2 * d2) / (d0 * d0 + d1 * d1 + d2 * d2)
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    e0 = r0 - t * d0
    e1 = r1 - t * d1
    e2 = r2 - t * d2
    return math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)


@numba.njit(cache=True)
def _lbs_residual(x, target, B, W, lo, ext, w, dw, want_grad, y):
    nb = B.shape[0]
    _weights_at(x, W, lo, ext, w, dw, want_grad)
    for a in range(3):
        y[a] = 0.0
    for b in range(nb):
        if w[b] == 0.0 and not want_grad:
            continue
        for a in range(3):
            bx = B[b, a, 0] * x[0] + B[b, a, 1] * x[1] + B[b, a, 2] * x[2] + B[b, a, 3]
            y[a] += w[b] * bx
    r = 0.0
    for a in range(3):
        r += (y[a] - target[a]) ** 2
    return math.sqrt(r)


@numba.njit(cache=True)
def _solve3(J, g, out):
    a, b, c = J[0, 0], J[0, 1], J[0, 2]
    d, e, f = J[1, 0], J[1, 1], J[1, 2]
    gg, h, i = J[2, 0], J[2, 1], J[2, 2]
    c0 = e * i - f * h
    c1 = f * gg - d * i
    c2 = d * h - e * gg
    det = a * c0 + b * c1 + c * c2
    if abs(det) < 1e-12:
        return False
    inv = 1.0 / det
    out[0] = (c0 * g[0] + (c * h - b * i) * g[1] + (b * f - c * e) * g[2]) * inv
    out[1] = (c1 * g[0] + (a * i - c * gg) * g[1] + (c * d - a * f) * g[2]) * inv
    out[2] = (c2 * g[0] + (b * gg - a * h) * g[1] + (a * e - b * d) * g[2]) * inv
    return True


@numba.njit(cache=True)
def _newton(x, target, B, W, lo, ext, max_iter, tol, w, dw, y, J, g, dx, xn):
    nb = B.shape[0]
    # rigid regions converge at the initial guess; skip the gradient there
    r = _lbs_residual(x, target, B, W, lo, ext, w, dw, False, y)
    if r < tol:
        return True
    r = _lbs_residual(x, target, B, W, lo, ext, w, dw, True, y)
    for it in range(max_iter + 1):
        if r < tol:
            return True
        if it == max_iter:
            break
        for a in range(3):
            g[a] = y[a] - target[a]
            for c in range(3):
                J[a, c] = 0.0
        for b in range(nb):
            for a in range(3):
                bx = B[b, a, 0] * x[0] + B[b, a, 1] * x[1] + B[b, a, 2] * x[2] + B[b, a, 3]
                for c in range(3):
                    J[a, c] += w[b] * B[b, a, c] + bx * dw[b, c]
        if not _solve3(J, g, dx):
            return False
        step = 1.0
        improved = False
        for _ in range(10):
            for a in range(3):
                xn[a] = x[a] - step * dx[a]
            rn = _lbs_residual(xn, target, B, W, lo, ext, w, dw, False, y)
            if rn < r:
                improved = True
                break
            step *= 0.5
        if not improved:
            return False
        for a in range(3):
            x[a] = xn[a]
        r = _lbs_residual(x, target, B, W, lo, ext, w, dw, True, y)
    return False


@numba.njit(cache=True)
def _inverse_lbs(xp, pose_idx, Bf, Bi, heads, tails, radii, cutoff, W, lo, ext, max_iter, tol, dedup, roots, counts):
    nb = radii.shape[0]
    w = np.empty(nb)
    dw = np.empty((nb, 3))
    y = np.empty(3)
    J = np.empty((3, 3))
    g = np.empty(3)
    dx = np.empty(3)
    xn = np.empty(3)
    x = np.empty(3)
    cand = np.empty(nb, dtype=np.int64)
    res = np.empty(nb)
    for p in range(xp.shape[0]):
        f = pose_idx[p]
        target = xp[p]
        n_cand = 0
        nearest = 0
        nearest_gap = np.inf
        for b in range(nb):
            d = _seg_dist(target, heads[f, b], tails[f, b])
            if d < cutoff * radii[b]:
                cand[n_cand] = b
                n_cand += 1
            if d - radii[b] < nearest_gap:
                nearest_gap = d - radii[b]
                nearest = b
        if n_cand == 0:
            cand[0] = nearest
            n_cand = 1
        count = 0
        for k in range(n_cand):
            b = cand[k]
            for a in range(3):
                x[a] = Bi[f, b, a, 0] * target[0] + Bi[f, b, a, 1] * target[1] + Bi[f, b, a, 2] * target[2] + Bi[f, b, a, 3]
            if not _newton(x, target, Bf[f], W, lo, ext, max_iter, tol, w, dw, y, J, g, dx, xn):
                continue
            r = _lbs_residual(x, target, Bf[f], W, lo, ext, w, dw, False, y)
            dup = -1
            for j in range(count):
                d2 = 0.0
                for a in range(3):
                    d2 += (roots[p, j, a] - x[a]) ** 2
                if d2 < dedup * dedup:
                    dup = j
                    break
            # duplicates keep the more accurate copy, so rigid roots stay exact
            slot = count if dup < 0 else dup
            if dup < 0 or r < res[dup]:
                for a in range(3):
                    roots[p, slot, a] = x[a]
                res[slot] = r
            if dup < 0:
                count += 1
        counts[p] = count


def skinning_weights(x: np.ndarray, grid: SkinningGrid) -> np.ndarray:
    """Interpolated weights; points outside the grid box use the nearest face value."""
    pts = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))
    out = np.empty((pts.shape[0], grid.n_bones))
    if pts.shape[0]:
        _skinning_weights(pts, grid.weights, grid.bbox_min, grid.bbox_max - grid.bbox_min, out)
    return out[0] if np.ndim(x) == 1 else out


def forward_lbs(x: np.ndarray, pose: SkeletonPose, grid: SkinningGrid) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    w = skinning_weights(pts, grid)
    B = pose.bone_transforms
    moved = np.einsum("bij,pj->pbi", B[:, :3, :3], pts) + B[None, :, :3, 3]
    out = np.einsum("pb,pbi->pi", w, moved)
    return out[0] if np.ndim(x) == 1 else out


def inverse_lbs(
    x_posed: np.ndarray,
    poses: PoseBatch,
    pose_idx: np.ndarray,
    grid: SkinningGrid,
    skeleton: Skeleton,
    config: ArticulationConfig = ArticulationConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """All converged canonical roots per posed point: ``(roots (P, n_b, 3), counts (P,))``."""
    xp = np.ascontiguousarray(np.asarray(x_posed, dtype=np.float64).reshape(-1, 3))
    idx = np.ascontiguousarray(np.broadcast_to(np.asarray(pose_idx, dtype=np.int64), (xp.shape[0],)))
    roots = np.zeros((xp.shape[0], skeleton.n_bones, 3))
    counts = np.zeros(xp.shape[0], dtype=np.int64)
    if xp.shape[0]:
        _inverse_lbs(
            xp, idx, poses.forward, poses.inverse, poses.heads, poses.tails, skeleton.radii,
            config.init_cutoff, grid.weights, grid.bbox_min, grid.bbox_max - grid.bbox_min,
            config.max_iter, config.root_tol, config.dedup_tol, roots, counts,
        )
    return roots, counts


# --------------------------------------------------------------------------
# posed field


@dataclass
class PosedCache:
    field_cache: FieldCache
    point_ids: np.ndarray  # posed-point index of each selected root


class PosedField:
    """Canonical field seen through the skeleton: ``f'(x') = f(x*)``."""

    def __init__(self, field: CanonicalField, skeleton: Skeleton, skinning: SkinningGrid,
                 config: ArticulationConfig = ArticulationConfig()):
        self.field = field
        self.skeleton = skeleton
        self.skinning = skinning
        self.config = config
        self.posed_queries = 0
        self.canonical_queries = 0

    def reset_counters(self) -> None:
        self.posed_queries = 0
        self.canonical_queries = 0

    def inverse(self, x_posed, poses: PoseBatch, pose_idx=0):
        return inverse_lbs(x_posed, poses, pose_idx, self.skinning, self.skeleton, self.config)

    def query(self, x_posed: np.ndarray, poses: PoseBatch, pose_idx=0):
        """Density, colour and a backward cache for posed points.

        Points without an in-box root get density 0 and black.
        """
        xp = np.asarray(x_posed, dtype=np.float64).reshape(-1, 3)
        n = xp.shape[0]
        dtype = self.field.dtype
        sigma = np.zeros(n, dtype=dtype)
        color = np.zeros((n, 3), dtype=dtype)
        self.posed_queries += n
        roots, counts = self.inverse(xp, poses, pose_idx)
        valid = np.arange(roots.shape[1])[None, :] < counts[:, None]
        pid, slot = np.nonzero(valid)
        cand = roots[pid, slot]
        inside = self.field.contains(cand)
        pid, cand = pid[inside], cand[inside]
        self.canonical_queries += cand.shape[0]
        s, c, cache = self.field.forward(cand)
        # highest density per point; ties resolved by root order
        order = np.lexsort((-s, pid))
        first = np.ones(order.shape[0], dtype=bool)
        first[1:] = pid[order][1:] != pid[order][:-1]
        chosen = order[first]
        sel_pid = pid[chosen]
        sigma[sel_pid] = s[chosen]
        color[sel_pid] = c[chosen]
        return sigma, color, PosedCache(cache.take(chosen), sel_pid)

    def backward(self, cache: PosedCache, dsigma: np.ndarray, dcolor: np.ndarray) -> None:
        """Roots are treated as constants; gradients flow into the canonical field only."""
        ids = cache.point_ids
        self.field.backward(cache.field_cache, np.asarray(dsigma)[ids], np.asarray(dcolor)[ids])


def posed_query(x_posed, pose: SkeletonPose, posed_field: PosedField):
    """Single-pose convenience wrapper returning ``(sigma, color)``."""
    poses = PoseBatch([pose], posed_field.skeleton)
    sigma, color, _ = posed_field.query(x_posed, poses, 0)
    if np.ndim(x_posed) == 1:
        return sigma[0], color[0]
    return sigma, color
