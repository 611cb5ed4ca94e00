import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarfield import cli
from avatarfield.articulation import SkeletonPose
from avatarfield.config import RunConfig, load_config
from avatarfield.errors import CheckpointError, DataError
from avatarfield.model import AvatarModel
from avatarfield.scenegen import default_figure, make_pose
from avatarfield.storage import (
    CKPT_MAGIC,
    format_pose,
    load_checkpoint,
    load_dataset,
    parse_pose,
    read_checkpoint,
    read_png,
    save_checkpoint,
    write_png,
    write_pose,
)

SMALL = {
    "render": {"n_samples": 32},
    "occupancy": {"resolution": 16},
    "train": {"iterations": 3, "rays_per_batch": 64, "density_points": 128},
    "data": {"width": 16, "height": 16, "gt_oversample": 1},
}

# pose files


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3), st.floats(-180, 180))
def test_pose_round_trip(bend, yaw):
    sk = default_figure().skeleton
    pose = make_pose(sk, yaw, l_forearm=tuple(bend))
    back = parse_pose(format_pose(pose))
    np.testing.assert_array_equal(back.bone_transforms, pose.bone_transforms)
    np.testing.assert_array_equal(back.global_transform, pose.global_transform)


@pytest.mark.parametrize("text", ["", "1 2 3\n", "# bones 1\n" + " ".join(["x"] * 12) + "\n",
                                  "# bones 1\n" + " ".join(["2"] * 12) + "\n" + " ".join(["2"] * 12) + "\n"])
def test_pose_parse_errors(text):
    with pytest.raises(DataError):
        parse_pose(text)


def test_pose_file(tmp_path):
    pose = SkeletonPose.identity(3)
    write_pose(tmp_path / "p", pose)
    assert (tmp_path / "p").read_text().startswith("# bones 3\n")


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3))
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png")
    assert back.shape == (5, 7, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


# checkpoints


@pytest.fixture(scope="module")
def small_model():
    cfg = RunConfig().override(**SMALL)
    model = AvatarModel(cfg, default_figure().skeleton)
    rng = np.random.default_rng(1)
    for _, v, _ in model.field.parameters():
        v[...] = rng.normal(scale=0.1, size=v.shape)
    model.training_grid.mask[...] = rng.random(model.training_grid.mask.shape) > 0.5
    return model


def test_checkpoint_round_trip_bitwise(tmp_path, small_model):
    save_checkpoint(tmp_path / "a.ckpt", small_model, step=17)
    model, step = load_checkpoint(tmp_path / "a.ckpt")
    assert step == 17
    for (n1, a, _), (n2, b, _) in zip(small_model.field.parameters(), model.field.parameters()):
        assert n1 == n2 and a.dtype == b.dtype and np.array_equal(a, b)
    assert np.array_equal(model.skinning.weights, small_model.skinning.weights)
    assert np.array_equal(model.training_grid.mask, small_model.training_grid.mask)
    save_checkpoint(tmp_path / "b.ckpt", model, step=17)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_header(tmp_path, small_model):
    save_checkpoint(tmp_path / "a.ckpt", small_model)
    header, arrays = read_checkpoint(tmp_path / "a.ckpt")
    assert header["config"]["render"]["n_samples"] == 32
    assert "grid.tables" in arrays and arrays["grid.tables"].dtype == np.float32


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(32))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_checkpoint_version_mismatch(tmp_path, small_model):
    save_checkpoint(tmp_path / "a.ckpt", small_model)
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    raw[len(CKPT_MAGIC)] = 9
    (tmp_path / "a.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="v9"):
        load_checkpoint(tmp_path / "a.ckpt")


def test_checkpoint_truncated(tmp_path, small_model):
    save_checkpoint(tmp_path / "a.ckpt", small_model)
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "a.ckpt")


def test_checkpoint_missing(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.ckpt")


# configuration


def test_config_file_and_override(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"seed": 4, "train": {"iterations": 9}}))
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.seed == 4 and cfg.train.iterations == 9 and cfg.train.lr_grid == 1e-2
    assert cfg.override(train={"rays_per_batch": 8}).train.iterations == 9


def test_config_rejects_unknown_key(tmp_path):
    (tmp_path / "c.yaml").write_text("train:\n  itertions: 3\n")
    with pytest.raises(ValueError):
        load_config(tmp_path / "c.yaml")


# command line


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.yaml").write_text(yaml.safe_dump(SMALL))
    assert cli.main(["--config", str(root / "small.yaml"), "gen-data", "--out", str(root / "data")]) == 0
    return root


def run(workspace, *argv):
    return cli.main(["--config", str(workspace / "small.yaml"), *argv])


def test_gen_data_default_size(workspace):
    ds = load_dataset(workspace / "data")
    assert len(ds.frames) == 18
    assert ds.frames.images.shape == (18, 16, 16, 3)


def test_gen_data_manifest_stable(workspace, tmp_path):
    assert run(workspace, "gen-data", "--out", str(tmp_path / "again")) == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (workspace / "data" / "manifest.json").read_bytes()


def test_gen_data_missing_parent(workspace, tmp_path, capsys):
    missing = tmp_path / "no" / "such" / "dir"
    assert run(workspace, "gen-data", "--out", str(missing)) == cli.EXIT_DATA
    assert str(missing.parent) in capsys.readouterr().err


def test_usage_errors(capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE


def test_dump_config(capsys):
    assert cli.main(["--seed", "11", "--dump-config"]) == 0
    doc = yaml.safe_load(capsys.readouterr().out)
    assert doc["seed"] == 11 and doc["train"]["rays_per_batch"] == RunConfig().train.rays_per_batch


def test_bench_profile_draws_seed(capsys):
    cli.main(["--profile", "bench", "--dump-config"])
    a = yaml.safe_load(capsys.readouterr().out)["seed"]
    cli.main(["--profile", "bench", "--seed", "3", "--dump-config"])
    assert yaml.safe_load(capsys.readouterr().out)["seed"] == 3
    assert isinstance(a, int)


def test_bad_thread_env(workspace, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "lots")
    assert run(workspace, "gen-data", "--out", "/tmp/unused") == cli.EXIT_USAGE


def test_missing_dataset(workspace, tmp_path):
    assert run(workspace, "train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m.ckpt")) == cli.EXIT_DATA


def test_train_zero_iterations(workspace, tmp_path):
    out = tmp_path / "m.ckpt"
    assert run(workspace, "train", "--data", str(workspace / "data"), "--out", str(out), "--iterations", "0") == 0
    model, step = load_checkpoint(out)
    assert step == 0
    fresh = AvatarModel(model.config, model.skeleton)
    assert np.array_equal(model.field.grid.tables, fresh.field.grid.tables)


def test_train_log_and_no_skip_queries(workspace, tmp_path):
    totals = {}
    for flag in ([], ["--no-skip"]):
        log = tmp_path / f"log{len(flag)}.jsonl"
        argv = ["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "m.ckpt"), "--log", str(log),
                "--no-density-reg", *flag]
        assert run(workspace, *argv) == 0
        recs = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(recs) == 3 and {"loss", "posed_queries", "seconds"} <= set(recs[0])
        totals[bool(flag)] = sum(r["posed_queries"] for r in recs)
    assert totals[True] > totals[False]


def test_render_identity_pose_file_matches_default(workspace, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert run(workspace, "train", "--data", str(workspace / "data"), "--out", str(ckpt)) == 0
    write_pose(tmp_path / "identity", SkeletonPose.identity(default_figure().skeleton.n_bones))
    assert cli.main(["render", "--checkpoint", str(ckpt), "--out-dir", str(tmp_path / "a")]) == 0
    assert cli.main(["render", "--checkpoint", str(ckpt), "--out-dir", str(tmp_path / "b"),
                     "--pose", str(tmp_path / "identity")]) == 0
    assert (tmp_path / "a" / "rgb.png").read_bytes() == (tmp_path / "b" / "rgb.png").read_bytes()
    capsys.readouterr()
    assert cli.main(["render", "--checkpoint", str(ckpt), "--out-dir", str(tmp_path / "c"), "--data",
                     str(workspace / "data"), "--pose-index", "3", "--frame", "3",
                     "--metrics", str(workspace / "data" / "frames" / "0003.png")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 < report["psnr"] <= 99.0 and -1.0 <= report["ssim"] <= 1.0


def test_render_bad_checkpoint(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    assert cli.main(["render", "--checkpoint", str(tmp_path / "bad.ckpt"), "--out-dir", str(tmp_path)]) == cli.EXIT_DATA


def test_animate(workspace, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert run(workspace, "train", "--data", str(workspace / "data"), "--out", str(ckpt), "--iterations", "1") == 0
    capsys.readouterr()
    assert cli.main(["animate", "--checkpoint", str(ckpt), "--poses", str(workspace / "data" / "poses"),
                     "--out-dir", str(tmp_path / "anim"), "--data", str(workspace / "data")]) == 0
    assert json.loads(capsys.readouterr().out)["frames"] == 18
    assert len(list((tmp_path / "anim").glob("*.png"))) == 18


def test_numeric_failure_exit_code(workspace, tmp_path, monkeypatch):
    from avatarfield import trainer

    monkeypatch.setattr(trainer, "loss_rgb", lambda *a, **k: (float("nan"), np.zeros((64, 3))))
    argv = ["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "m.ckpt")]
    assert run(workspace, *argv) == cli.EXIT_NUMERIC
