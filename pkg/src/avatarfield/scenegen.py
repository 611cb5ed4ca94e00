"""Analytic capsule figure used as ground truth, and the synthetic dataset writer.

Every bone carries a capsule of constant density that fades to zero over
``softness`` metres at its surface. In a pose each capsule moves rigidly with
its bone, so the posed oracle needs no skinning at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .articulation import Bone, PoseBatch, Skeleton, SkeletonPose, pose_from_rotations, segment_distance
from .errors import DataError
from .renderer import Camera, RenderConfig, look_at, render_image

DEG = math.pi / 180.0


@dataclass
class CapsuleFigure:
    skeleton: Skeleton
    colors: np.ndarray
    amplitudes: np.ndarray
    softness: float = 0.005

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64).reshape(-1)
        nb = self.skeleton.n_bones
        if self.colors.shape[0] != nb or self.amplitudes.shape[0] != nb:
            raise ValueError("need one colour and one amplitude per bone")
        if np.any(self.amplitudes <= 0) or self.softness <= 0:
            raise ValueError("amplitudes and softness must be positive")

    def to_dict(self) -> dict:
        return {
            "skeleton": self.skeleton.to_dict(),
            "colors": self.colors.tolist(),
            "amplitudes": self.amplitudes.tolist(),
            "softness": self.softness,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CapsuleFigure":
        return cls(Skeleton.from_dict(d["skeleton"]), d["colors"], d["amplitudes"], float(d["softness"]))


def default_figure(amplitude: float = 150.0, softness: float = 0.005) -> CapsuleFigure:
    """Ten-bone stick figure in a T pose, y up, facing +z."""
    bones = [
        Bone("torso", -1, (0.0, -0.10, 0.0), (0.0, 0.40, 0.0), 0.16),
        Bone("head", 0, (0.0, 0.58, 0.0), (0.0, 0.72, 0.0), 0.12),
        Bone("l_upper_arm", 0, (0.22, 0.40, 0.0), (0.50, 0.40, 0.0), 0.065),
        Bone("l_forearm", 2, (0.50, 0.40, 0.0), (0.78, 0.40, 0.0), 0.055),
        Bone("r_upper_arm", 0, (-0.22, 0.40, 0.0), (-0.50, 0.40, 0.0), 0.065),
        Bone("r_forearm", 4, (-0.50, 0.40, 0.0), (-0.78, 0.40, 0.0), 0.055),
        Bone("l_thigh", 0, (0.10, -0.18, 0.0), (0.10, -0.55, 0.0), 0.085),
        Bone("l_shin", 6, (0.10, -0.55, 0.0), (0.10, -0.92, 0.0), 0.07),
        Bone("r_thigh", 0, (-0.10, -0.18, 0.0), (-0.10, -0.55, 0.0), 0.085),
        Bone("r_shin", 8, (-0.10, -0.55, 0.0), (-0.10, -0.92, 0.0), 0.07),
    ]
    colors = [
        (0.90, 0.25, 0.20),
        (0.95, 0.80, 0.35),
        (0.25, 0.85, 0.25),
        (0.20, 0.50, 0.95),
        (0.95, 0.55, 0.10),
        (0.70, 0.30, 0.90),
        (0.20, 0.85, 0.85),
        (0.95, 0.95, 0.25),
        (0.95, 0.35, 0.65),
        (0.55, 0.95, 0.55),
    ]
    return CapsuleFigure(Skeleton(bones), colors, [amplitude] * len(bones), softness)


def smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def analytic_query(x: np.ndarray, figure: CapsuleFigure) -> tuple[np.ndarray, np.ndarray]:
    """Canonical oracle density and colour."""
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    sk = figure.skeleton
    dist = segment_distance(pts, sk.heads, sk.tails)
    per_bone = figure.amplitudes * smoothstep((sk.radii - dist) / figure.softness)
    sigma = per_bone.sum(axis=1)
    safe = np.where(sigma > 0, sigma, 1.0)
    color = (per_bone @ figure.colors) / safe[:, None]
    color[sigma <= 0] = 0.0
    if np.ndim(x) == 1:
        return sigma[0], color[0]
    return sigma, color


@numba.njit(cache=True)
def _posed_density(xp, pose_idx, Binv, heads, tails, radii, amps, colors, softness, sigma, color):
    nb = radii.shape[0]
    y = np.empty(3)
    for p in range(xp.shape[0]):
        f = pose_idx[p]
        s_tot = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for b in range(nb):
            for a in range(3):
                y[a] = Binv[f, b, a, 0] * xp[p, 0] + Binv[f, b, a, 1] * xp[p, 1] + Binv[f, b, a, 2] * xp[p, 2] + Binv[f, b, a, 3]
            d0 = tails[b, 0] - heads[b, 0]
            d1 = tails[b, 1] - heads[b, 1]
            d2 = tails[b, 2] - heads[b, 2]
            r0 = y[0] - heads[b, 0]
            r1 = y[1] - heads[b, 1]
            r2 = y[2] - heads[b, 2]
            t = (r0 * d0 + r1 * d1 + r2 * d2) / (d0 * d0 + d1 * d1 + d2 * d2)
            t = min(max(t, 0.0), 1.0)
            e0 = r0 - t * d0
            e1 = r1 - t * d1
            e2 = r2 - t * d2
            dist = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
            u = (radii[b] - dist) / softness
            if u <= 0.0:
                continue
            if u > 1.0:
                u = 1.0
            s = amps[b] * u * u * (3.0 - 2.0 * u)
            s_tot += s
            c0 += s * colors[b, 0]
            c1 += s * colors[b, 1]
            c2 += s * colors[b, 2]
        sigma[p] = s_tot
        if s_tot > 0.0:
            color[p, 0] = c0 / s_tot
            color[p, 1] = c1 / s_tot
            color[p, 2] = c2 / s_tot
        else:
            color[p, 0] = 0.0
            color[p, 1] = 0.0
            color[p, 2] = 0.0


class AnalyticPosedField:
    """Posed oracle: each capsule carried rigidly by its bone transform."""

    def __init__(self, figure: CapsuleFigure):
        self.figure = figure
        self.skeleton = figure.skeleton
        self.posed_queries = 0

    def query(self, x_posed, poses: PoseBatch, pose_idx=0):
        xp = np.ascontiguousarray(np.asarray(x_posed, dtype=np.float64).reshape(-1, 3))
        idx = np.ascontiguousarray(np.broadcast_to(np.asarray(pose_idx, dtype=np.int64), (xp.shape[0],)))
        sigma = np.zeros(xp.shape[0])
        color = np.zeros((xp.shape[0], 3))
        self.posed_queries += xp.shape[0]
        if xp.shape[0]:
            sk = self.skeleton
            _posed_density(
                xp, idx, poses.inverse, sk.heads, sk.tails, sk.radii, self.figure.amplitudes,
                self.figure.colors, self.figure.softness, sigma, color,
            )
        return sigma, color, None

    def backward(self, cache, dsigma, dcolor):
        raise TypeError("the analytic field has no parameters")


def ray_capsule_hit(origins: np.ndarray, dirs: np.ndarray, a: np.ndarray, b: np.ndarray, r: float) -> np.ndarray:
    """Boolean hit test of unit-direction rays (t >= 0) against one capsule."""
    ba = b - a
    oa = origins - a
    baba = ba @ ba
    bard = dirs @ ba
    baoa = oa @ ba
    rdoa = np.einsum("ij,ij->i", dirs, oa)
    oaoa = np.einsum("ij,ij->i", oa, oa)
    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - r * r * baba
    hit = np.zeros(origins.shape[0], dtype=bool)
    disc = qb * qb - qa * qc
    ok = (disc >= 0) & (qa > 1e-12)
    t = np.full(origins.shape[0], -1.0)
    t[ok] = (-qb[ok] - np.sqrt(disc[ok])) / qa[ok]
    y = baoa + t * bard
    side = ok & (y > 0) & (y < baba) & (t >= 0)
    hit |= side
    # the end caps are spheres at a and b
    for c in (a, b):
        oc = origins - c
        bb = np.einsum("ij,ij->i", dirs, oc)
        cc = np.einsum("ij,ij->i", oc, oc) - r * r
        h = bb * bb - cc
        hit |= (h >= 0) & ((-bb + np.sqrt(np.maximum(h, 0.0))) >= 0)
    return hit


def capsule_silhouette(camera: Camera, pose: SkeletonPose, figure: CapsuleFigure) -> np.ndarray:
    """Exact (H, W) mask of pixels whose centre ray hits any posed capsule."""
    origins, dirs = camera.pixel_rays()
    sk = figure.skeleton
    heads = np.einsum("bij,bj->bi", pose.bone_transforms[:, :3, :3], sk.heads) + pose.bone_transforms[:, :3, 3]
    tails = np.einsum("bij,bj->bi", pose.bone_transforms[:, :3, :3], sk.tails) + pose.bone_transforms[:, :3, 3]
    hit = np.zeros(origins.shape[0], dtype=bool)
    for h, t, r in zip(heads, tails, sk.radii):
        hit |= ray_capsule_hit(origins, dirs, h, t, r)
    return hit.reshape(camera.height, camera.width)


# --------------------------------------------------------------------------
# pose and camera scripts


def bone_index(skeleton: Skeleton, name: str) -> int:
    for i, b in enumerate(skeleton.bones):
        if b.name == name:
            return i
    raise KeyError(name)


def make_pose(skeleton: Skeleton, yaw_deg: float = 0.0, **bends) -> SkeletonPose:
    """Pose from named bone rotations (``name=(rx, ry, rz)`` in degrees) and a global yaw."""
    rot = np.zeros((skeleton.n_bones, 3))
    for name, deg in bends.items():
        rot[bone_index(skeleton, name)] = np.asarray(deg, dtype=np.float64) * DEG
    return pose_from_rotations(skeleton, rot, (0.0, yaw_deg * DEG, 0.0))


def default_pose_script(skeleton: Skeleton) -> list[SkeletonPose]:
    """Twelve-frame turntable followed by six frames with limb bends."""
    poses = [make_pose(skeleton, 30.0 * k) for k in range(12)]
    poses += [
        make_pose(skeleton, 0.0, l_forearm=(0, -70, 0), r_forearm=(0, 70, 0)),
        make_pose(skeleton, 30.0, l_shin=(60, 0, 0), r_shin=(60, 0, 0)),
        make_pose(skeleton, -30.0, l_upper_arm=(0, 0, 45), r_forearm=(0, 90, 0)),
        make_pose(skeleton, 45.0, l_thigh=(-45, 0, 0), l_shin=(50, 0, 0)),
        make_pose(skeleton, 60.0, l_upper_arm=(0, 0, -60), r_upper_arm=(0, 0, 60)),
        make_pose(skeleton, -60.0, l_forearm=(0, -45, 0), r_thigh=(-30, 0, 0), r_shin=(40, 0, 0)),
    ]
    return poses


def heldout_view_poses(skeleton: Skeleton) -> list[SkeletonPose]:
    """Rest pose at turntable angles between the training angles."""
    return [make_pose(skeleton, yaw) for yaw in (15.0, 105.0, 195.0, 285.0)]


def novel_bend_pose(skeleton: Skeleton) -> SkeletonPose:
    return make_pose(
        skeleton, 20.0, l_forearm=(0, -45, 0), r_forearm=(0, 30, 0), l_shin=(35, 0, 0), r_thigh=(-25, 0, 0)
    )


def default_camera(width: int = 128, height: int = 128) -> Camera:
    """Frontal pinhole camera framing the figure at three metres."""
    eye = np.array([0.0, -0.05, 3.0])
    focal = 0.5 * height / (1.05 / 3.0)
    return Camera(
        fx=focal, fy=focal, cx=0.5 * width, cy=0.5 * height, width=width, height=height,
        world_to_camera=look_at(eye, np.array([0.0, -0.05, 0.0]), np.array([0.0, 1.0, 0.0])),
    )


# --------------------------------------------------------------------------
# dataset writer


def render_ground_truth(figure: CapsuleFigure, camera: Camera, pose: SkeletonPose, config: RenderConfig,
                        oversample: int = 4):
    """Dense render of the posed oracle with ``oversample`` times the sample count and no skipping."""
    cfg = config.model_copy(update={"n_samples": config.n_samples * oversample})
    poses = PoseBatch([pose], figure.skeleton)
    rgb, alpha, _ = render_image(AnalyticPosedField(figure), camera, pose, cfg, None, poses)
    return rgb, alpha


def generate_dataset(figure: CapsuleFigure, poses: list[SkeletonPose], cameras: list[Camera], out_dir,
                     config: RenderConfig = RenderConfig(), oversample: int = 4, extra: dict | None = None) -> Path:
    """Write frames, masks, pose files and a manifest; returns the dataset root."""
    from .storage import write_manifest, write_png, write_pose

    if len(poses) == 0:
        raise ValueError("need at least one pose")
    if len(cameras) == 1:
        cameras = list(cameras) * len(poses)
    if len(cameras) != len(poses):
        raise ValueError(f"{len(cameras)} cameras for {len(poses)} poses")
    root = Path(out_dir)
    try:
        for sub in ("frames", "masks", "poses"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        for i, (cam, pose) in enumerate(zip(cameras, poses)):
            rgb, alpha = render_ground_truth(figure, cam, pose, config, oversample)
            write_png(root / "frames" / f"{i:04d}.png", rgb)
            write_png(root / "masks" / f"{i:04d}.png", alpha)
            write_pose(root / "poses" / f"{i:04d}", pose)
        write_manifest(root, figure, list(cameras), extra or {})
    except OSError as exc:
        raise DataError(f"cannot write dataset to {root}: {exc.strerror or exc}") from None
    return root
