import math

import numpy as np
import pytest

from avatarfield.articulation import PoseBatch, SkeletonPose, rigid, rotvec_matrix
from avatarfield.occupancy import (
    InferenceGridCache,
    OccupancyConfig,
    OccupancyGrid,
    build_inference_grid,
    default_threshold,
    dilate,
    dilate_mask,
    from_normalized,
    to_normalized,
    update_training_grid,
)
from avatarfield.scenegen import AnalyticPosedField, default_figure, make_pose

BOX = ((-1.1, -1.1, -1.1), (1.1, 1.1, 1.1))


class FuncField:
    """Posed field defined by a density function of posed position."""

    def __init__(self, skeleton, density):
        self.skeleton = skeleton
        self.density = density
        self.posed_queries = 0

    def query(self, x, poses, pose_idx=0):
        self.posed_queries += len(x)
        return self.density(np.asarray(x)), np.zeros((len(x), 3)), None


def pose_with_global(sk, rotvec, t):
    g = rigid(rotvec_matrix(rotvec), t)
    return SkeletonPose(np.tile(g, (sk.n_bones, 1, 1)), g)


# normalized space


def test_normalized_identity():
    x = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(to_normalized(x, SkeletonPose.identity(2)), x)


def test_normalized_translation():
    sk = default_figure().skeleton
    pose = pose_with_global(sk, (0, 0, 0), (0.3, -0.2, 1.0))
    x = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(to_normalized(x, pose), x - [0.3, -0.2, 1.0], atol=1e-15)


def test_normalized_round_trip():
    sk = default_figure().skeleton
    pose = pose_with_global(sk, (0.3, -1.2, 0.5), (0.3, -0.2, 1.0))
    x = np.random.default_rng(1).normal(size=(100, 3))
    r, t = pose.global_transform[:3, :3], pose.global_transform[:3, 3]
    np.testing.assert_allclose(to_normalized(x, pose), (x - t) @ r, atol=1e-14)
    np.testing.assert_allclose(from_normalized(to_normalized(x, pose), pose), x, atol=1e-12)


# dilation


def test_dilate_zero_is_identity():
    m = np.random.default_rng(2).random((8, 8, 8)) > 0.8
    np.testing.assert_array_equal(dilate_mask(m, 0), m)


def test_dilate_single_cell():
    m = np.zeros((7, 7, 7), dtype=bool)
    m[3, 3, 3] = True
    out = dilate_mask(m, 1)
    assert out.sum() == 27 and out[2:5, 2:5, 2:5].all()


def test_dilate_full_fixed_point():
    m = np.ones((5, 5, 5), dtype=bool)
    np.testing.assert_array_equal(dilate_mask(m, 2), m)


def test_dilate_superset_and_negative_radius():
    g = OccupancyGrid.empty(16, *BOX)
    g.mask = np.random.default_rng(3).random((16, 16, 16)) > 0.95
    d = dilate(g, 1)
    assert np.all(d.mask[g.mask])
    with pytest.raises(ValueError):
        dilate_mask(g.mask, -1)


# grid basics


def test_threshold_formula():
    g = OccupancyGrid.empty(64, *BOX)
    diag = math.sqrt(3) * 2.2 / 64
    assert g.threshold == pytest.approx(-math.log(0.99) / diag, rel=1e-12)
    assert default_threshold(1.0) == pytest.approx(-math.log(0.99))


def test_default_resolution_is_64():
    assert OccupancyConfig().resolution == 64


def test_outside_box_unoccupied():
    g = OccupancyGrid.empty(8, *BOX)
    g.mask[...] = True
    assert not g.is_occupied(np.array([1.2, 0.0, 0.0]))
    assert g.is_occupied(np.array([1.0, 0.0, 0.0]))


def test_is_occupied_matches_index_arithmetic():
    rng = np.random.default_rng(4)
    g = OccupancyGrid.empty(64, *BOX)
    g.mask = rng.random((64, 64, 64)) > 0.7
    x = rng.uniform(-1.3, 1.3, (100_000, 3))
    got = g.is_occupied(x)
    expected = np.zeros(len(x), dtype=bool)
    h = 2.2 / 64
    for p in range(len(x)):
        i = [int(math.floor((x[p, a] + 1.1) / h)) for a in range(3)]
        if all(0 <= v < 64 for v in i):
            expected[p] = g.mask[i[0], i[1], i[2]]
    np.testing.assert_array_equal(got, expected)


# inference grids


def test_zero_density_empty_mask():
    sk = default_figure().skeleton
    f = FuncField(sk, lambda x: np.zeros(len(x)))
    g = build_inference_grid(SkeletonPose.identity(sk.n_bones), f, OccupancyConfig(resolution=16), *BOX)
    assert not g.mask.any()


def test_sphere_mask_plus_shell():
    sk = default_figure().skeleton
    centre, radius = np.array([0.2, -0.1, 0.05]), 0.35
    f = FuncField(sk, lambda x: np.where(np.linalg.norm(x - centre, axis=1) < radius, 50.0, 0.0))
    res = 20
    g = build_inference_grid(SkeletonPose.identity(sk.n_bones), f, OccupancyConfig(resolution=res), *BOX)
    h = 2.2 / res
    inside = np.zeros((res,) * 3, dtype=bool)
    for i in range(res):
        for j in range(res):
            for k in range(res):
                c = -1.1 + h * (np.array([i, j, k]) + 0.5)
                inside[i, j, k] = np.linalg.norm(c - centre) < radius
    expected = np.zeros_like(inside)
    for i, j, k in np.argwhere(inside):
        expected[max(i - 1, 0) : i + 2, max(j - 1, 0) : j + 2, max(k - 1, 0) : k + 2] = True
    np.testing.assert_array_equal(g.mask, expected)


def test_inference_grid_in_normalized_space():
    sk = default_figure().skeleton
    centre = np.array([0.5, 0.0, 0.0])
    f = FuncField(sk, lambda x: np.where(np.linalg.norm(x - centre, axis=1) < 0.2, 50.0, 0.0))
    pose = pose_with_global(sk, (0, math.pi / 2, 0), (0, 0, 0))
    g = build_inference_grid(pose, f, OccupancyConfig(resolution=22), *BOX)
    # the posed sphere at +x appears at +z in normalized space (rotation by -90 deg about y)
    assert g.is_occupied(to_normalized(centre, pose))
    assert g.is_occupied(np.array([0.0, 0.0, 0.5]))
    assert not g.is_occupied(np.array([0.5, 0.0, 0.0]))


def test_inference_cache_reuses_grids():
    sk = default_figure().skeleton
    f = FuncField(sk, lambda x: np.zeros(len(x)))
    cache = InferenceGridCache(OccupancyConfig(resolution=8), *BOX)
    pose = SkeletonPose.identity(sk.n_bones)
    a = cache.get(pose, f)
    n = f.posed_queries
    assert cache.get(SkeletonPose.identity(sk.n_bones), f) is a and f.posed_queries == n


def test_analytic_conservative_mask():
    fig = default_figure()
    pose = make_pose(fig.skeleton, 30.0, l_forearm=(0, -60, 0))
    field = AnalyticPosedField(fig)
    g = build_inference_grid(pose, field, OccupancyConfig(), *BOX)
    rng = np.random.default_rng(5)
    x_n = rng.uniform(-1.1, 1.1, (200_000, 3))
    # concentrate half the points near the body
    x_n[:100_000] = rng.uniform(-0.9, 0.9, (100_000, 3)) * [1, 1, 0.25]
    batch = PoseBatch([pose], fig.skeleton)
    sigma, _, _ = field.query(from_normalized(x_n, pose), batch, 0)
    dense = sigma > g.threshold
    assert dense.sum() > 1000
    assert np.all(g.is_occupied(x_n[dense]))


# training grid


def test_decay_one_zero_density_unchanged():
    sk = default_figure().skeleton
    f = FuncField(sk, lambda x: np.zeros(len(x)))
    g = OccupancyGrid.empty(8, *BOX)
    g.values = np.random.default_rng(6).random((8, 8, 8))
    before = g.values.copy()
    update_training_grid(g, f, PoseBatch([SkeletonPose.identity(sk.n_bones)], sk), 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(g.values, before)


def test_decay_zero_fresh_clamped():
    sk = default_figure().skeleton
    f = FuncField(sk, lambda x: np.where(x[:, 0] > 0, 7.0, 0.3))
    g = OccupancyGrid.empty(8, *BOX)
    g.values[...] = 0.9
    update_training_grid(g, f, PoseBatch([SkeletonPose.identity(sk.n_bones)], sk), 0.0, np.random.default_rng(0))
    assert np.all(g.values[4:] == 1.0) and np.all(g.values[:4] == 0.3)


def test_union_over_poses():
    fig = default_figure()
    sk = fig.skeleton
    poses = [make_pose(sk, 0.0, l_upper_arm=(0, 0, 60)), make_pose(sk, 0.0, l_upper_arm=(0, 0, -60))]
    batch = PoseBatch(poses, sk)
    field = AnalyticPosedField(fig)
    g = OccupancyGrid.empty(32, *BOX)
    rng = np.random.default_rng(7)
    for k in range(len(poses)):
        update_training_grid(g, field, batch, 0.95, rng, update_count=k)
    centres = g.cell_centers()
    for p in range(len(poses)):
        sigma, _, _ = field.query(from_normalized(centres, poses[p]), batch, p)
        body = sigma >= 0.99 * fig.amplitudes.min()
        assert body.sum() > 50
        assert np.all(g.is_occupied(centres[body]))


def test_body_cell_survives_100_updates():
    fig = default_figure()
    sk = fig.skeleton
    poses = [make_pose(sk, 0.0), make_pose(sk, 0.0, l_forearm=(0, -90, 0))]
    batch = PoseBatch(poses, sk)
    field = AnalyticPosedField(fig)
    g = OccupancyGrid.empty(16, *BOX)
    rng = np.random.default_rng(8)
    # the torso centre is inside the body in every pose
    torso = np.array([0.0, 0.15, 0.0])
    for k in range(100):
        update_training_grid(g, field, batch, 0.95, rng, update_count=k)
        assert g.is_occupied(torso)
    # the rest-pose forearm tip is occupied in pose 0 only and stays masked
    assert g.is_occupied(np.array([0.7, 0.4, 0.0]))
