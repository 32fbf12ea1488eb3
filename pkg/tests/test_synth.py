import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rsvo import synth
from rsvo.epipolar import gs_essential, rs_sampson_signed, sampson_signed
from rsvo.errors import InsufficientVisibility, TooFewWaypoints
from rsvo.geometry import InstantaneousMotion


def test_collinear_waypoints_stay_on_line():
    wp = [[0.0, 1.0, 0.0], [1.0, 1.0, 2.0], [2.0, 1.0, 4.0], [3.0, 1.0, 6.0], [5.0, 1.0, 10.0]]
    poses = synth.spline_trajectory(wp, 40, np.random.default_rng(0), orientation_noise_deg=0.0)
    c = synth.camera_centers(poses)
    d = np.array([1.0, 0.0, 2.0]) / np.sqrt(5.0)
    rel = c - np.array([0.0, 1.0, 0.0])
    off = rel - np.outer(rel @ d, d)
    assert np.abs(off).max() < 1e-9
    assert np.allclose(c[0], wp[0], atol=1e-12)
    assert np.allclose(c[-1], wp[-1], atol=1e-9)


def test_closed_loop_nearly_returns_to_start():
    cfg = synth.SceneConfig()
    poses = synth.spline_trajectory(cfg.trajectory_waypoints, cfg.n_frames, np.random.default_rng(3))
    c = synth.camera_centers(poses)
    wp = np.asarray(cfg.trajectory_waypoints)
    spacing = np.linalg.norm(np.diff(wp, axis=0), axis=1).min()
    assert np.linalg.norm(c[0] - c[-1]) < spacing
    assert np.allclose(c[0], [2.0, 2.0, 2.0], atol=1e-12)
    assert np.allclose(poses[0].rotation, np.eye(3), atol=1e-9)


def test_trajectory_is_seed_deterministic():
    wp = synth.SceneConfig().trajectory_waypoints
    a = synth.spline_trajectory(wp, 30, np.random.default_rng(11))
    b = synth.spline_trajectory(wp, 30, np.random.default_rng(11))
    for p, q in zip(a, b):
        assert np.array_equal(p.as_matrix(), q.as_matrix())


def test_too_few_waypoints():
    with pytest.raises(TooFewWaypoints):
        synth.spline_trajectory([[0, 0, 0], [1, 0, 0], [2, 0, 1]], 10, np.random.default_rng(0))
    # a closed loop of three distinct points is also too short
    with pytest.raises(TooFewWaypoints):
        synth.spline_trajectory([[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 0]], 10,
                                np.random.default_rng(0))


def test_landmarks_inside_volume_and_deterministic(scene):
    cfg = scene.config
    lo, hi = synth.landmark_volume(cfg, synth.camera_centers(scene.poses))
    assert np.all(scene.landmarks >= lo) and np.all(scene.landmarks <= hi)
    again = synth.build_scene(cfg, 0)
    assert np.array_equal(again.landmarks, scene.landmarks)
    other = synth.build_scene(cfg, 1)
    assert not np.array_equal(other.landmarks, scene.landmarks)


def test_median_visible_count_on_default_config(scene):
    K = scene.intrinsics
    cfg = scene.config
    zero = InstantaneousMotion.zero()
    counts = [synth.visible_rs(scene.landmarks, p, zero, K, cfg.min_depth)[1].sum() for p in scene.poses]
    assert np.median(counts) >= 2 * cfg.max_features


def test_zero_level_motion_is_zero():
    lvl = synth.DistortionLevel.from_index(1)
    m = synth.draw_frame_motion(lvl, np.random.default_rng(0))
    assert np.all(m.w == 0) and np.all(m.v == 0)


def test_motion_norms_bounded_at_top_level():
    lvl = synth.DistortionLevel.from_index(6)
    rng = np.random.default_rng(5)
    draws = [synth.draw_frame_motion(lvl, rng) for _ in range(10000)]
    w = np.array([np.linalg.norm(d.w) for d in draws])
    v = np.array([np.linalg.norm(d.v) for d in draws])
    assert w.max() <= np.radians(100.0) and v.max() <= 50.0
    # the box actually fills a good part of the ball
    assert w.max() > 0.8 * np.radians(100.0)


def test_motion_draw_deterministic():
    lvl = synth.DistortionLevel.from_index(4)
    a = synth.draw_frame_motion(lvl, synth.derive_rng(7, 0, 2, 13))
    b = synth.draw_frame_motion(lvl, synth.derive_rng(7, 0, 2, 13))
    assert np.array_equal(a.w, b.w) and np.array_equal(a.v, b.v)


def test_distortion_levels():
    assert synth.DistortionLevel.from_index(6) == synth.DistortionLevel(50.0, 100.0)
    for bad in (0, 7):
        with pytest.raises(ValueError):
            synth.DistortionLevel.from_index(bad)
    with pytest.raises(ValueError):
        synth.DistortionLevel(-1.0, 0.0)


def test_level_one_pair_equals_gs_projection(scene):
    ds = synth.generate_pair(scene, synth.DistortionLevel.from_index(1), 10)
    K = scene.intrinsics
    X = scene.landmarks[ds.point_ids]
    for pose, cols in ((scene.poses[10], slice(0, 2)), (scene.poses[11], slice(2, 4))):
        m = pose.apply(X) @ K.K.T
        assert np.allclose(ds.points[:, cols], m[:, :2] / m[:, 2:], rtol=0, atol=1e-9)
    F = K.K_inv.T @ gs_essential(ds.true_relative_pose.rotation, ds.true_relative_pose.translation) @ K.K_inv
    assert np.abs(sampson_signed(F, ds.points)).max() < 1e-9


@pytest.mark.parametrize("level", [2, 4, 6])
def test_pair_consistent_with_ground_truth(scene, level):
    ds = synth.generate_pair(scene, synth.DistortionLevel.from_index(level), 40)
    assert 0 < len(ds.points) <= scene.config.max_features
    r = rs_sampson_signed(ds.true_unit_state, ds.points, scene.intrinsics)
    assert np.abs(r).max() < 1e-4
    assert ds.true_scale == pytest.approx(np.linalg.norm(ds.true_relative_pose.translation))
    rel = scene.poses[41] @ scene.poses[40].inverse()
    assert np.allclose(rel.as_matrix(), ds.true_relative_pose.as_matrix())


def test_insufficient_visibility(scene):
    cfg = synth.SceneConfig(n_landmarks=10, sample_size=20, n_frames=5)
    sc = synth.build_scene(cfg, 0)
    with pytest.raises(InsufficientVisibility):
        synth.generate_pair(sc, synth.DistortionLevel.from_index(1), 0)


def test_pairs_independent_of_generation_order(scene):
    lvl = synth.DistortionLevel.from_index(5)
    a = [synth.generate_pair(scene, lvl, k, "gaussian", 1.0).points for k in (3, 9, 20)]
    b = [synth.generate_pair(scene, lvl, k, "gaussian", 1.0).points for k in (20, 9, 3)][::-1]
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_noise_zero_sigma_unchanged():
    pts = np.random.default_rng(0).uniform(0, 500, (50, 4))
    for model in ("gaussian", "laplacian", "none"):
        assert np.array_equal(synth.add_noise(pts, model, 0.0, np.random.default_rng(1)), pts)
    with pytest.raises(ValueError):
        synth.add_noise(pts, "gaussian", -1.0, np.random.default_rng(1))
    with pytest.raises(ValueError):
        synth.add_noise(pts, "cauchy", 1.0, np.random.default_rng(1))


@pytest.mark.parametrize("model", ["gaussian", "laplacian"])
def test_noise_standard_deviation(model):
    pts = np.zeros((250000, 4))
    noisy = synth.add_noise(pts, model, 1.5, np.random.default_rng(2))
    assert abs(noisy.std() / 1.5 - 1.0) < 0.01
    assert abs(noisy.mean()) < 0.01


@given(st.integers(0, 2**31 - 1), st.integers(1, 400), st.integers(1, 120))
def test_bucketing_balanced(seed, n, max_features):
    rng = np.random.default_rng(seed)
    # clustered points so some cells run dry early
    uv = np.column_stack([rng.beta(0.5, 2.0, n) * 1280, rng.beta(2.0, 0.7, n) * 720])
    ids = rng.permutation(10 * n)[:n]
    sel = synth.bucket_select(uv, ids, 720, 1280, 6, 10, max_features)
    assert len(sel) == min(n, max_features)
    assert len(set(sel.tolist())) == len(sel)
    cell = (np.clip((uv[:, 1] * 6 / 720).astype(int), 0, 5) * 10
            + np.clip((uv[:, 0] * 10 / 1280).astype(int), 0, 9))
    avail = np.bincount(cell, minlength=60)
    got = np.bincount(cell[sel], minlength=60)
    top = got.max()
    # cells that still had points never fall more than one round behind
    assert np.all(got >= np.minimum(avail, top - 1))
    # within a cell the lowest ids are taken first
    for c in np.flatnonzero(got):
        members = np.sort(ids[cell == c])
        assert np.array_equal(np.sort(ids[sel][cell[sel] == c]), members[:got[c]])
    # each round visits a cell at most once
    first_round = cell[sel[:np.count_nonzero(avail)]]
    assert len(set(first_round.tolist())) == len(first_round)


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_writers_round_trip_exactly(tmp_path, scene):
    ds = synth.generate_pair(scene, synth.DistortionLevel.from_index(3), 12, "laplacian", 1.0)
    synth.write_correspondences(tmp_path / "c.csv", ds.points, ds.point_ids)
    rows = _read_csv(tmp_path / "c.csv")
    assert rows[0] == synth.CORR_HEADER
    back = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.array_equal(back, ds.points)
    assert [int(r[0]) for r in rows[1:]] == ds.point_ids.tolist()

    synth.write_ground_truth(tmp_path / "g.csv", ds)
    rows = _read_csv(tmp_path / "g.csv")
    assert rows[0] == synth.GT_HEADER
    assert [float(v) for v in rows[1]] == [float(v) for v in synth.gt_row(ds)]

    synth.write_poses(tmp_path / "p.csv", scene.poses)
    rows = _read_csv(tmp_path / "p.csv")
    assert rows[0] == synth.POSE_HEADER and len(rows) == len(scene.poses) + 1
    assert np.array_equal(np.array([float(v) for v in rows[5][5:]]), scene.poses[4].translation)


def test_write_run_byte_identical(tmp_path):
    cfg = synth.SceneConfig(n_frames=20, rng_seed=9)
    trees = []
    for name in ("a", "b"):
        out = tmp_path / name
        synth.write_run(out, synth.build_scene(cfg, 0), 6, 4, "gaussian", 1.0)
        trees.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert trees[0] == trees[1]
    assert "meta.json" in trees[0] and "intrinsics.txt" in trees[0]
    assert sum(n.endswith("_corr.csv") for n in trees[0]) == 4


def test_scene_config_validation():
    with pytest.raises(ValueError):
        synth.SceneConfig(n_frames=1)
    with pytest.raises(ValueError):
        synth.SceneConfig(max_features=0)
    with pytest.raises(KeyError):
        synth.SceneConfig.from_dict({"n_frames": 10, "bogus": 1})
    cfg = synth.SceneConfig(n_frames=17)
    assert synth.SceneConfig.from_dict(cfg.to_dict()) == cfg
    K = cfg.intrinsics
    assert (K.fx, K.cx, K.cy, K.tau) == (1000.0, 640.0, 360.0, 5e-5)


def test_pair_indices():
    assert synth.pair_indices(250, None) == list(range(249))
    idx = synth.pair_indices(250, 50)
    assert len(idx) == 50 and idx[0] == 0 and idx[-1] < 249
    assert len(set(idx)) == 50


def test_trajectory_tied_velocity_reproduces_motion():
    cfg = synth.SceneConfig(tie_velocity_to_trajectory=True, n_frames=60)
    sc = synth.build_scene(cfg, 0)
    m = synth.frame_motion(sc, synth.DistortionLevel.from_index(6), 10)
    rel = sc.poses[11] @ sc.poses[10].inverse()
    assert np.allclose(m.v / cfg.frame_rate, rel.translation)
    # the driving speed of a ~80 m loop over 12 s is a few m/s
    assert 1.0 < np.linalg.norm(m.v) < 20.0
