"""Synthetic rolling-shutter two-view benchmark.

A closed spline trajectory runs through a uniform landmark field; every
frame gets an instantaneous motion drawn from a distortion level, landmarks
are projected with the rolling-shutter model, bucketed, and optionally
perturbed with Gaussian or Laplacian tracking noise.

Randomness is keyed by ``numpy.random.SeedSequence(seed, spawn_key=...)`` so
any (run, frame, pair) item can be regenerated on its own.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .epipolar import NominalState, as_points, to_correspondences
from .errors import InsufficientVisibility, TooFewWaypoints
from .geometry import (CameraIntrinsics, InstantaneousMotion, RigidTransform, UnitQuaternion,
                       project_rs_many)

# (v_max m/s, w_max deg/s); index 0 is the undistorted level ("Lev 1").
DISTORTION_LEVELS = ((0.0, 0.0), (10.0, 20.0), (20.0, 40.0), (30.0, 60.0), (40.0, 80.0), (50.0, 100.0))

_KIND_TRAJECTORY = 0
_KIND_LANDMARKS = 1
_KIND_MOTION = 2
_KIND_NOISE = 3


def _default_waypoints():
    # Closed loop of roughly 80 m in the x-z plane through [2, 2, 2], with
    # gentle height changes; the first tangent points along +z.
    a, b = 15.0, 10.0
    angles = np.linspace(np.pi, -np.pi, 13)[:-1]
    heights = 2.0 + 0.5 * np.sin(2 * np.arange(12) * np.pi / 6)
    pts = [[2.0 + a + a * np.cos(th), h, 2.0 + b * np.sin(th)] for th, h in zip(angles, heights)]
    pts.append(pts[0])
    return [list(map(float, p)) for p in pts]


@dataclass
class SceneConfig:
    n_frames: int = 250
    frame_rate: float = 5.0
    n_landmarks: int = 12000
    n_rows: int = 720
    n_cols: int = 1280
    focal: float = 1000.0
    tau: float = 5e-5
    max_features: int = 500
    bucket_rows: int = 6
    bucket_cols: int = 10
    trajectory_waypoints: list = field(default_factory=_default_waypoints)
    landmark_margin: float = 15.0
    landmark_height: float = 6.0
    min_depth: float = 1.0
    orientation_noise_deg: float = 0.5
    sample_size: int = 20
    tie_velocity_to_trajectory: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("n_frames", "n_landmarks", "max_features", "bucket_rows", "bucket_cols",
                     "n_rows", "n_cols", "sample_size"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if not (self.frame_rate > 0 and self.focal > 0 and self.tau > 0):
            raise ValueError("frame_rate, focal and tau must be positive")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.n_cols / 2.0, self.n_rows / 2.0, 0.0,
                                self.tau, self.n_rows, self.n_cols)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(", ".join(sorted(unknown)))
        return cls(**d)


@dataclass(frozen=True)
class DistortionLevel:
    v_max: float
    w_max: float  # deg/s

    def __post_init__(self):
        if self.v_max < 0 or self.w_max < 0:
            raise ValueError("distortion bounds must be non-negative")

    @classmethod
    def from_index(cls, level: int) -> DistortionLevel:
        """Level 1..6 as in the benchmark tables."""
        if not 1 <= level <= len(DISTORTION_LEVELS):
            raise ValueError(f"level must be in 1..{len(DISTORTION_LEVELS)}")
        return cls(*DISTORTION_LEVELS[level - 1])


@dataclass
class FramePairDataset:
    points: np.ndarray              # (N, 4) c_prev, r_prev, c_cur, r_cur
    point_ids: np.ndarray
    true_relative_pose: RigidTransform
    true_motion_prev: InstantaneousMotion
    true_motion_cur: InstantaneousMotion
    true_scale: float
    frame_prev: int = 0

    @property
    def correspondences(self):
        return to_correspondences(self.points)

    @property
    def true_state(self) -> NominalState:
        """Ground truth with metric translation and velocities."""
        return NominalState(self.true_relative_pose.quaternion, self.true_relative_pose.translation,
                            self.true_motion_prev, self.true_motion_cur)

    @property
    def true_unit_state(self) -> NominalState:
        """Ground truth in the estimator's gauge (unit translation)."""
        s = self.true_scale
        return NominalState(self.true_relative_pose.quaternion, self.true_relative_pose.translation / s,
                            InstantaneousMotion(self.true_motion_prev.w, self.true_motion_prev.v / s),
                            InstantaneousMotion(self.true_motion_cur.w, self.true_motion_cur.v / s))


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# Trajectory and landmarks
# ---------------------------------------------------------------------------

def _catmull_rom(P: np.ndarray, closed: bool, samples_per_segment: int = 400) -> np.ndarray:
    n = len(P)
    if closed:
        ext = np.vstack([P[-1], P, P[0], P[1]])
        n_seg = n
    else:
        ext = np.vstack([2 * P[0] - P[1], P, 2 * P[-1] - P[-2]])
        n_seg = n - 1
    u = np.linspace(0.0, 1.0, samples_per_segment, endpoint=False)[:, None]
    u2, u3 = u * u, u * u * u
    out = []
    for i in range(n_seg):
        p0, p1, p2, p3 = ext[i], ext[i + 1], ext[i + 2], ext[i + 3]
        seg = 0.5 * ((2 * p1) + (-p0 + p2) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u2
                     + (-p0 + 3 * p1 - 3 * p2 + p3) * u3)
        out.append(seg)
    out.append(P[0:1] if closed else P[-1:])
    return np.vstack(out)


def _rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def spline_trajectory(waypoints, n_frames: int, rng: np.random.Generator,
                      orientation_noise_deg: float = 0.5) -> list[RigidTransform]:
    """World-to-camera poses sampled at equal arc length along a Catmull-Rom spline.

    A waypoint list whose last entry repeats the first is treated as a closed
    loop. The optical axis follows the horizontal direction of travel; every
    frame after the first gets an independent small orientation perturbation.
    """
    P = np.asarray(waypoints, dtype=float).reshape(-1, 3)
    closed = len(P) > 1 and np.allclose(P[0], P[-1], atol=1e-9)
    if closed:
        P = P[:-1]
    if len(P) < 4:
        raise TooFewWaypoints(f"need at least 4 distinct waypoints, got {len(P)}")
    dense = _catmull_rom(P, closed)
    seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    length = arc[-1]
    s = np.arange(n_frames) * (length / n_frames if closed else length / (n_frames - 1))
    centers = np.column_stack([np.interp(s, arc, dense[:, k]) for k in range(3)])
    ds = max(length * 1e-4, 1e-9)
    ahead = np.column_stack([np.interp(s + ds, arc, dense[:, k], period=length if closed else None)
                             for k in range(3)])
    behind = np.column_stack([np.interp(s - ds, arc, dense[:, k], period=length if closed else None)
                              for k in range(3)])
    tangent = ahead - behind
    sigma = np.radians(orientation_noise_deg)
    noise = rng.normal(0.0, sigma, size=(n_frames, 3)) if sigma > 0 else np.zeros((n_frames, 3))
    poses = []
    for k in range(n_frames):
        dx, dz = tangent[k, 0], tangent[k, 2]
        yaw = np.arctan2(dx, dz) if np.hypot(dx, dz) > 1e-12 else 0.0
        R_c2w = _rot_y(yaw)
        if k > 0:
            R_c2w = R_c2w @ UnitQuaternion.from_rotvec(noise[k]).to_matrix()
        R = R_c2w.T
        poses.append(RigidTransform(R, -R @ centers[k]))
    return poses


def camera_centers(poses) -> np.ndarray:
    return np.array([-p.rotation.T @ p.translation for p in poses])


def landmark_volume(config: SceneConfig, centers: np.ndarray):
    lo = centers.min(axis=0)
    hi = centers.max(axis=0)
    m = config.landmark_margin
    h = config.landmark_height
    lo = np.array([lo[0] - m, lo[1] - h, lo[2] - m])
    hi = np.array([hi[0] + m, hi[1] + h, hi[2] + m])
    return lo, hi


def sample_landmarks(config: SceneConfig, rng: np.random.Generator, centers: np.ndarray) -> np.ndarray:
    lo, hi = landmark_volume(config, centers)
    return rng.uniform(lo, hi, size=(config.n_landmarks, 3))


# ---------------------------------------------------------------------------
# Motion, projection, bucketing
# ---------------------------------------------------------------------------

def draw_frame_motion(level: DistortionLevel, rng: np.random.Generator) -> InstantaneousMotion:
    """Per-component uniform velocities; the vector norms never exceed the level bounds."""
    u = rng.uniform(-1.0, 1.0, size=6)
    w = u[:3] * np.radians(level.w_max) / np.sqrt(3.0)
    v = u[3:] * level.v_max / np.sqrt(3.0)
    return InstantaneousMotion(w, v)


def trajectory_motion(poses, k: int, frame_rate: float) -> InstantaneousMotion:
    """Camera-frame velocities from finite differences of the trajectory at frame ``k``."""
    j = k + 1 if k + 1 < len(poses) else k - 1
    rel = poses[j] @ poses[k].inverse() if j > k else poses[k] @ poses[j].inverse()
    dt = 1.0 / frame_rate
    rv = UnitQuaternion.from_matrix(rel.rotation)
    angle = 2 * np.arctan2(np.linalg.norm([rv.x, rv.y, rv.z]), rv.w)
    axis = np.array([rv.x, rv.y, rv.z])
    n = np.linalg.norm(axis)
    w = axis / n * angle / dt if n > 1e-15 else np.zeros(3)
    return InstantaneousMotion(w, rel.translation / dt)


def bucket_select(uv: np.ndarray, ids: np.ndarray, n_rows: int, n_cols: int,
                  grid_rows: int, grid_cols: int, max_features: int) -> np.ndarray:
    """Round-robin over grid cells, lowest landmark id first within each cell.

    Returns positions into ``uv``/``ids`` in selection order.
    """
    cr = np.clip((uv[:, 1] * grid_rows / n_rows).astype(int), 0, grid_rows - 1)
    cc = np.clip((uv[:, 0] * grid_cols / n_cols).astype(int), 0, grid_cols - 1)
    cell = cr * grid_cols + cc
    order = np.lexsort((ids, cell))
    cells_sorted = cell[order]
    starts = np.searchsorted(cells_sorted, np.arange(grid_rows * grid_cols), side="left")
    ends = np.searchsorted(cells_sorted, np.arange(grid_rows * grid_cols), side="right")
    counts = ends - starts
    chosen = []
    depth = 0
    while len(chosen) < max_features and depth < counts.max(initial=0):
        for c in np.flatnonzero(counts > depth):
            chosen.append(order[starts[c] + depth])
            if len(chosen) >= max_features:
                break
        depth += 1
    return np.array(chosen, dtype=int)


def _in_image(uv, ok, K: CameraIntrinsics):
    return ok & (uv[:, 0] >= 0) & (uv[:, 0] < K.n_cols) & (uv[:, 1] >= 0) & (uv[:, 1] < K.n_rows)


def visible_rs(landmarks, pose: RigidTransform, motion: InstantaneousMotion, K: CameraIntrinsics,
               min_depth: float = 0.0):
    X = pose.apply(landmarks)
    uv, ok = project_rs_many(X, motion, K)
    ok &= X[:, 2] > min_depth
    return uv, _in_image(uv, ok, K)


def generate_frame_pair(poses, landmarks, k: int, motion_prev: InstantaneousMotion,
                        motion_cur: InstantaneousMotion, K: CameraIntrinsics,
                        config: SceneConfig) -> FramePairDataset:
    """Correspondences between frames ``k`` and ``k + 1``."""
    pose_prev, pose_cur = poses[k], poses[k + 1]
    uv_p, ok_p = visible_rs(landmarks, pose_prev, motion_prev, K, config.min_depth)
    uv_c, ok_c = visible_rs(landmarks, pose_cur, motion_cur, K, config.min_depth)
    both = np.flatnonzero(ok_p & ok_c)
    if len(both) < config.sample_size:
        raise InsufficientVisibility(
            f"only {len(both)} landmarks visible in frames {k} and {k + 1}")
    sel = bucket_select(uv_p[both], both, K.n_rows, K.n_cols, config.bucket_rows,
                        config.bucket_cols, config.max_features)
    idx = both[sel]
    pts = np.column_stack([uv_p[idx], uv_c[idx]])
    rel = pose_cur @ pose_prev.inverse()
    return FramePairDataset(pts, idx, rel, motion_prev, motion_cur,
                            float(np.linalg.norm(rel.translation)), k)


def add_noise(pts, model: str, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. per-coordinate tracking noise with standard deviation ``sigma``."""
    pts = as_points(pts)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0 or model in (None, "none"):
        return pts.copy()
    if model == "gaussian":
        noise = rng.normal(0.0, sigma, size=pts.shape)
    elif model == "laplacian":
        noise = rng.laplace(0.0, sigma / np.sqrt(2.0), size=pts.shape)
    else:
        raise ValueError(f"unknown noise model {model!r}")
    return pts + noise


# ---------------------------------------------------------------------------
# Whole runs
# ---------------------------------------------------------------------------

@dataclass
class RunScene:
    poses: list
    landmarks: np.ndarray
    config: SceneConfig
    run: int

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.config.intrinsics


def build_scene(config: SceneConfig, run: int) -> RunScene:
    poses = spline_trajectory(config.trajectory_waypoints, config.n_frames,
                              derive_rng(config.rng_seed, run, _KIND_TRAJECTORY),
                              config.orientation_noise_deg)
    landmarks = sample_landmarks(config, derive_rng(config.rng_seed, run, _KIND_LANDMARKS),
                                 camera_centers(poses))
    return RunScene(poses, landmarks, config, run)


def frame_motion(scene: RunScene, level: DistortionLevel, frame: int) -> InstantaneousMotion:
    cfg = scene.config
    if cfg.tie_velocity_to_trajectory:
        return trajectory_motion(scene.poses, frame, cfg.frame_rate)
    return draw_frame_motion(level, derive_rng(cfg.rng_seed, scene.run, _KIND_MOTION, frame))


def pair_indices(n_frames: int, pairs_per_run: int | None) -> list[int]:
    """First-frame indices of the evaluated pairs, spread evenly over the trajectory."""
    n_pairs = n_frames - 1
    if pairs_per_run is None or pairs_per_run >= n_pairs:
        return list(range(n_pairs))
    return [int(i * n_pairs // pairs_per_run) for i in range(pairs_per_run)]


def generate_pair(scene: RunScene, level: DistortionLevel, k: int, noise: str = "none",
                  sigma: float = 0.0) -> FramePairDataset:
    cfg = scene.config
    K = cfg.intrinsics
    ds = generate_frame_pair(scene.poses, scene.landmarks, k, frame_motion(scene, level, k),
                             frame_motion(scene, level, k + 1), K, cfg)
    if noise not in (None, "none") and sigma > 0:
        ds.points = add_noise(ds.points, noise, sigma,
                              derive_rng(cfg.rng_seed, scene.run, _KIND_NOISE, k))
    return ds


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

CORR_HEADER = ["point_id", "u_prev", "v_prev", "u_cur", "v_cur"]
GT_HEADER = (["qw", "qx", "qy", "qz", "tx", "ty", "tz"]
             + [f"{a}{c}_{f}" for f in ("prev", "cur") for a in ("w", "v") for c in "xyz"]
             + ["scale"])
POSE_HEADER = ["frame", "qw", "qx", "qy", "qz", "tx", "ty", "tz"]


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_intrinsics(path: Path, K: CameraIntrinsics):
    lines = [f"fx={fmt(K.fx)}", f"fy={fmt(K.fy)}", f"cx={fmt(K.cx)}", f"cy={fmt(K.cy)}",
             f"skew={fmt(K.skew)}", f"tau={fmt(K.tau)}", f"n_rows={K.n_rows}", f"n_cols={K.n_cols}"]
    Path(path).write_text("\n".join(lines) + "\n")


def write_correspondences(path: Path, pts: np.ndarray, ids=None):
    pts = as_points(pts)
    ids = np.arange(len(pts)) if ids is None else np.asarray(ids)
    rows = [",".join(CORR_HEADER)]
    rows += [",".join([str(int(i))] + [fmt(v) for v in p]) for i, p in zip(ids, pts)]
    Path(path).write_text("\n".join(rows) + "\n")


def gt_row(ds: FramePairDataset) -> list[float]:
    q = ds.true_relative_pose.quaternion
    return ([q.w, q.x, q.y, q.z, *ds.true_relative_pose.translation,
             *ds.true_motion_prev.w, *ds.true_motion_prev.v,
             *ds.true_motion_cur.w, *ds.true_motion_cur.v, ds.true_scale])


def write_ground_truth(path: Path, ds: FramePairDataset):
    Path(path).write_text(",".join(GT_HEADER) + "\n" + ",".join(fmt(v) for v in gt_row(ds)) + "\n")


def write_poses(path: Path, poses):
    rows = [",".join(POSE_HEADER)]
    for k, p in enumerate(poses):
        q = p.quaternion
        rows.append(",".join([str(k)] + [fmt(v) for v in (q.w, q.x, q.y, q.z, *p.translation)]))
    Path(path).write_text("\n".join(rows) + "\n")


def write_run(out_dir: Path, scene: RunScene, level_index: int, pairs_per_run: int | None,
              noise: str = "none", sigma: float = 0.0) -> list[str]:
    """Serialise one run at one level; returns the list of skipped pairs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    level = DistortionLevel.from_index(level_index)
    skipped = []
    written = []
    for k in pair_indices(scene.config.n_frames, pairs_per_run):
        try:
            ds = generate_pair(scene, level, k, noise, sigma)
        except InsufficientVisibility as exc:
            skipped.append(f"{k}: {exc}")
            continue
        write_correspondences(out_dir / f"pair_{k:04d}_corr.csv", ds.points, ds.point_ids)
        write_ground_truth(out_dir / f"pair_{k:04d}_gt.csv", ds)
        written.append(k)
    write_intrinsics(out_dir / "intrinsics.txt", scene.intrinsics)
    write_poses(out_dir / "poses.csv", scene.poses)
    meta = {
        "config": scene.config.to_dict(),
        "seed": scene.config.rng_seed,
        "run": scene.run,
        "level": level_index,
        "distortion": {"v_max": level.v_max, "w_max_deg": level.w_max},
        "noise": {"model": noise, "sigma": sigma},
        "pairs": written,
        "skipped": skipped,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return skipped
