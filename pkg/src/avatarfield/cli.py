"""Command line entry point: gen-data, train, render, animate, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys
import time
from pathlib import Path

from .config import RunConfig, load_config
from .errors import DataError, NumericError

log = logging.getLogger("avatarfield")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "AVATARFIELD_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avatarfield", description="Articulated radiance-field avatars from posed image sets.")
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="random seed (default: config value)")
    p.add_argument("--profile", choices=["test", "bench"], help="test: fixed seed; bench: fresh seed unless given")
    p.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the synthetic capsule-figure dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)

    t = sub.add_parser("train", help="fit a model to a dataset")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="checkpoint path")
    t.add_argument("--log", type=Path, help="per-step metric log (JSON lines)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--rays", type=int, help="rays per batch")
    t.add_argument("--no-skip", action="store_true", help="disable empty-space skipping")
    reg = t.add_mutually_exclusive_group()
    reg.add_argument("--no-density-reg", action="store_true", help="disable the density regularizer")
    reg.add_argument("--global-sparsity", action="store_true", help="penalize density everywhere instead")

    r = sub.add_parser("render", help="render a view of a trained model")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--out-dir", type=Path, required=True)
    src = r.add_mutually_exclusive_group()
    src.add_argument("--pose", type=Path, help="pose file")
    src.add_argument("--pose-index", type=int, help="frame index in --data")
    r.add_argument("--data", type=Path, help="dataset supplying the camera and indexed poses")
    r.add_argument("--frame", type=int, default=0, help="dataset frame whose camera is used")
    r.add_argument("--no-skip", action="store_true")
    r.add_argument("--metrics", type=Path, help="reference PNG; prints PSNR and SSIM")

    a = sub.add_parser("animate", help="render a sequence of pose files")
    a.add_argument("--checkpoint", type=Path, required=True)
    a.add_argument("--poses", type=Path, nargs="+", required=True, help="pose files or directories of them")
    a.add_argument("--out-dir", type=Path, required=True)
    a.add_argument("--data", type=Path, help="dataset supplying the camera")

    b = sub.add_parser("bench", help="time rendering and training with and without skipping")
    b.add_argument("--checkpoint", type=Path, required=True)
    b.add_argument("--data", type=Path, required=True)
    b.add_argument("--steps", type=int, default=32)
    b.add_argument("--frame", type=int, default=0)
    b.add_argument("--out", type=Path, help="write the JSON report here as well")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    updates: dict = {}
    if args.profile is not None:
        updates["profile"] = args.profile
    profile = args.profile or cfg.profile
    if args.seed is not None:
        updates["seed"] = args.seed
    elif profile == "bench":
        updates["seed"] = secrets.randbits(31)
    if args.command == "train":
        train = {}
        if args.iterations is not None:
            train["iterations"] = args.iterations
        if args.rays is not None:
            train["rays_per_batch"] = args.rays
        if args.no_skip:
            train["skip"] = False
        if args.no_density_reg:
            train["density_reg"] = "none"
        if args.global_sparsity:
            train["density_reg"] = "global"
        if train:
            updates["train"] = train
    if args.command == "gen-data":
        data = {k: getattr(args, k) for k in ("width", "height") if getattr(args, k) is not None}
        if data:
            updates["data"] = data
    return cfg.override(**updates) if updates else cfg


def configure_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    import numba

    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise UsageError(f"{THREADS_ENV}={n} outside 1..{numba.config.NUMBA_NUM_THREADS}")
    numba.set_num_threads(n)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> Path:
    from .scenegen import default_camera, default_figure, default_pose_script, generate_dataset

    parent = out.resolve().parent
    if not parent.is_dir():
        raise DataError(f"output path {out}: parent directory {parent} does not exist")
    fig = default_figure(cfg.data.amplitude, cfg.data.softness)
    poses = default_pose_script(fig.skeleton)
    cam = default_camera(cfg.data.width, cfg.data.height)
    t0 = time.perf_counter()
    root = generate_dataset(fig, poses, [cam], out, cfg.render, cfg.data.gt_oversample, {"seed": cfg.seed})
    log.info("wrote %d frames to %s in %.1fs", len(poses), root, time.perf_counter() - t0)
    return root


def cmd_train(cfg: RunConfig, data: Path, out: Path, log_path: Path | None = None):
    from .model import AvatarModel
    from .storage import load_dataset, save_checkpoint
    from .trainer import Trainer

    ds = load_dataset(data)
    model = AvatarModel(cfg, ds.figure.skeleton)
    trainer = Trainer(model, ds.frames, cfg.train, seed=cfg.seed)
    fh = open(log_path, "w") if log_path is not None else None
    every = max(cfg.train.log_every, 1)

    def report(rec):
        if fh is not None:
            fh.write(json.dumps(rec.as_dict()) + "\n")
        if rec.step % every == 0 or rec.step == cfg.train.iterations - 1:
            log.info("step %d loss %.5f rgb %.5f alpha %.4f hard %.4f density %.5f queries %d %.2fs",
                     rec.step, rec.loss, rec.rgb, rec.alpha, rec.hard, rec.density, rec.posed_queries, rec.seconds)

    t0 = time.perf_counter()
    try:
        trainer.train(callback=report)
    finally:
        if fh is not None:
            fh.close()
    seconds = time.perf_counter() - t0
    save_checkpoint(out, model, trainer.step)
    queries = sum(r.posed_queries for r in trainer.history)
    log.info("trained %d steps in %.1fs, %d posed queries; checkpoint %s", trainer.step, seconds, queries, out)
    return model, trainer


def _camera_for(data: Path | None, frame: int, cfg: RunConfig):
    from .scenegen import default_camera
    from .storage import load_dataset

    if data is None:
        return default_camera(cfg.data.width, cfg.data.height), None
    ds = load_dataset(data)
    if not 0 <= frame < len(ds.frames):
        raise UsageError(f"frame {frame} out of range for dataset with {len(ds.frames)} frames")
    return ds.frames.cameras[frame], ds


def cmd_render(args) -> dict:
    from .metrics import psnr, ssim
    from .storage import load_checkpoint, read_png, read_pose, write_png

    model, _ = load_checkpoint(args.checkpoint)
    camera, ds = _camera_for(args.data, args.frame, model.config)
    if args.pose is not None:
        pose = read_pose(args.pose)
    elif args.pose_index is not None:
        if ds is None:
            raise UsageError("--pose-index needs --data")
        if not 0 <= args.pose_index < len(ds.frames):
            raise UsageError(f"pose index {args.pose_index} out of range")
        pose = ds.frames.poses[args.pose_index]
    else:
        from .articulation import SkeletonPose

        pose = SkeletonPose.identity(model.skeleton.n_bones)
    if pose.n_bones != model.skeleton.n_bones:
        raise DataError(f"pose has {pose.n_bones} bones, model has {model.skeleton.n_bones}")
    rgb, alpha, stats = model.render(camera, pose, skip=not args.no_skip)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_png(args.out_dir / "rgb.png", rgb)
    write_png(args.out_dir / "alpha.png", alpha)
    result = {"rgb": str(args.out_dir / "rgb.png"), "alpha": str(args.out_dir / "alpha.png"),
              "posed_queries": stats.posed_queries, "samples": stats.samples}
    if args.metrics is not None:
        ref = read_png(args.metrics)[..., :3]
        if ref.shape != rgb.shape:
            raise DataError(f"reference {args.metrics} has shape {ref.shape}, render is {rgb.shape}")
        result["psnr"] = psnr(rgb, ref)
        result["ssim"] = ssim(rgb, ref)
    return result


def _pose_files(items: list[Path]) -> list[Path]:
    files = []
    for item in items:
        if item.is_dir():
            files += sorted(p for p in item.iterdir() if p.is_file())
        else:
            files.append(item)
    if not files:
        raise DataError("no pose files given")
    return files


def cmd_animate(args) -> dict:
    from .storage import load_checkpoint, read_pose, write_png

    model, _ = load_checkpoint(args.checkpoint)
    camera, _ = _camera_for(args.data, 0, model.config)
    files = _pose_files(args.poses)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for i, f in enumerate(files):
        rgb, alpha, _ = model.render(camera, read_pose(f))
        write_png(args.out_dir / f"{i:04d}.png", rgb)
    seconds = time.perf_counter() - t0
    return {"frames": len(files), "seconds": seconds, "fps": len(files) / seconds}


def cmd_bench(args) -> dict:
    from .bench import bench_render, bench_train
    from .storage import load_checkpoint, load_dataset

    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if not 0 <= args.frame < len(ds.frames):
        raise UsageError(f"frame {args.frame} out of range")
    render = bench_render(model, ds.frames.cameras[args.frame], ds.frames.poses[args.frame])
    train = bench_train(model, ds.frames, args.steps, seed=model.config.seed)
    return {"render": render, "train": train}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        configure_threads()
        if args.command == "gen-data":
            root = cmd_gen_data(cfg, args.out)
            print(json.dumps({"dataset": str(root)}))
        elif args.command == "train":
            cmd_train(cfg, args.data, args.out, args.log)
            print(json.dumps({"checkpoint": str(args.out)}))
        elif args.command == "render":
            print(json.dumps(cmd_render(args), indent=1))
        elif args.command == "animate":
            print(json.dumps(cmd_animate(args), indent=1))
        elif args.command == "bench":
            report = cmd_bench(args)
            text = json.dumps(report, indent=1)
            if args.out is not None:
                args.out.write_text(text + "\n")
            print(text)
    except UsageError as exc:
        print(f"avatarfield: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"avatarfield: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"avatarfield: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # configuration validation
        print(f"avatarfield: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
