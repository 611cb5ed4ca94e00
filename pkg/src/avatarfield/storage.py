"""On-disk formats: pose text files, dataset directories and binary checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .articulation import Skeleton, SkeletonPose, SkinningGrid
from .config import RunConfig
from .errors import CheckpointError, DataError
from .renderer import Camera
from .scenegen import CapsuleFigure
from .trainer import FrameSet

DATASET_FORMAT = "avatarfield-dataset"
DATASET_VERSION = 1
CKPT_MAGIC = b"AVFCKPT\x00"
CKPT_VERSION = 1

# --------------------------------------------------------------------------
# pose files


def format_pose(pose: SkeletonPose) -> str:
    """One line per bone then the global transform: 9 row-major rotation entries and 3 translation (m)."""
    lines = [f"# bones {pose.n_bones}"]
    for m in list(pose.bone_transforms) + [pose.global_transform]:
        vals = list(m[:3, :3].ravel()) + list(m[:3, 3])
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def parse_pose(text: str, source: str = "<pose>") -> SkeletonPose:
    rows = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals = [float(v) for v in line.split()]
        except ValueError as exc:
            raise DataError(f"{source}:{ln}: {exc}") from None
        if len(vals) != 12:
            raise DataError(f"{source}:{ln}: expected 12 numbers, got {len(vals)}")
        m = np.eye(4)
        m[:3, :3] = np.reshape(vals[:9], (3, 3))
        m[:3, 3] = vals[9:]
        rows.append(m)
    if len(rows) < 2:
        raise DataError(f"{source}: need at least one bone and the global transform")
    try:
        return SkeletonPose(np.stack(rows[:-1]), rows[-1])
    except ValueError as exc:
        raise DataError(f"{source}: {exc}") from None


def write_pose(path: str | Path, pose: SkeletonPose) -> None:
    Path(path).write_text(format_pose(pose))


def read_pose(path: str | Path) -> SkeletonPose:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read pose file {path}: {exc.strerror}") from None
    return parse_pose(text, str(path))


# --------------------------------------------------------------------------
# images


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    root: Path
    figure: CapsuleFigure
    frames: FrameSet
    manifest: dict


def write_manifest(root: Path, figure: CapsuleFigure, cameras: list[Camera], extra: dict) -> None:
    frames = [
        {
            "image": f"frames/{i:04d}.png",
            "mask": f"masks/{i:04d}.png",
            "pose": f"poses/{i:04d}",
            "camera": cam.to_dict(),
        }
        for i, cam in enumerate(cameras)
    ]
    doc = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "figure": figure.to_dict(), "frames": frames}
    doc.update(extra)
    (root / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read dataset manifest {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed manifest: {exc}") from None
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset format {manifest.get('format')!r} v{manifest.get('version')}")
    figure = CapsuleFigure.from_dict(manifest["figure"])
    images, masks, cameras, poses = [], [], [], []
    for rec in manifest["frames"]:
        img = read_png(root / rec["image"])
        images.append(img[..., :3])
        mask = read_png(root / rec["mask"])
        masks.append(mask if mask.ndim == 2 else mask[..., 0])
        cameras.append(Camera.from_dict(rec["camera"]))
        pose = read_pose(root / rec["pose"])
        if pose.n_bones != figure.skeleton.n_bones:
            raise DataError(f"{root / rec['pose']}: {pose.n_bones} bones, skeleton has {figure.skeleton.n_bones}")
        poses.append(pose)
    if not images:
        raise DataError(f"{path}: dataset has no frames")
    return Dataset(root, figure, FrameSet(np.stack(images), np.stack(masks), cameras, poses), manifest)


# --------------------------------------------------------------------------
# checkpoints
#
# layout: magic, u32 version, u64 header length, JSON header, then raw
# little-endian arrays at the offsets listed in the header


def _model_arrays(model) -> list[tuple[str, np.ndarray]]:
    arrays = [(name, value) for name, value, _ in model.field.parameters()]
    sk = model.skinning
    arrays += [("skinning.weights", sk.weights), ("skinning.bbox_min", sk.bbox_min), ("skinning.bbox_max", sk.bbox_max)]
    occ = model.training_grid
    arrays += [("occupancy.values", occ.values), ("occupancy.mask", occ.mask)]
    if occ.pose_offsets is not None:
        arrays.append(("occupancy.pose_offsets", occ.pose_offsets))
    return arrays


def save_checkpoint(path: str | Path, model, step: int = 0) -> None:
    directory, blobs, offset = [], [], 0
    for name, arr in _model_arrays(model):
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
        data = arr.astype(dt, copy=False).tobytes()
        directory.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "config": json.loads(model.config.model_dump_json()),
        "skeleton": model.skeleton.to_dict(),
        "occupancy_threshold": model.training_grid.threshold,
        "step": int(step),
        "arrays": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    if len(raw) < pos + 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format v{version}, expected v{CKPT_VERSION}")
    pos += 12
    try:
        header = json.loads(raw[pos : pos + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from None
    base = pos + hlen
    arrays = {}
    for rec in header["arrays"]:
        dt = np.dtype(rec["dtype"])
        n = int(np.prod(rec["shape"], dtype=np.int64)) * dt.itemsize
        start = base + rec["offset"]
        if start + n > len(raw):
            raise CheckpointError(f"{path}: truncated array {rec['name']}")
        arrays[rec["name"]] = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=start).reshape(rec["shape"])
    return header, arrays


def load_checkpoint(path: str | Path):
    """Rebuild an ``AvatarModel`` from a checkpoint; returns ``(model, step)``."""
    from .model import AvatarModel

    header, arrays = read_checkpoint(path)
    try:
        config = RunConfig.model_validate(header["config"])
        skeleton = Skeleton.from_dict(header["skeleton"])
        skinning = SkinningGrid(arrays["skinning.weights"], arrays["skinning.bbox_min"], arrays["skinning.bbox_max"])
        model = AvatarModel(config, skeleton, skinning)
        for name, value, _ in model.field.parameters():
            stored = arrays[name]
            if stored.shape != value.shape:
                raise CheckpointError(f"{path}: {name} has shape {stored.shape}, expected {value.shape}")
            value[...] = stored
        occ = model.training_grid
        occ.values = arrays["occupancy.values"].astype(np.float64)
        occ.mask = arrays["occupancy.mask"].astype(bool)
        occ.threshold = float(header["occupancy_threshold"])
        if "occupancy.pose_offsets" in arrays:
            occ.pose_offsets = arrays["occupancy.pose_offsets"].astype(np.int64)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: inconsistent checkpoint: {exc}") from None
    return model, int(header.get("step", 0))
