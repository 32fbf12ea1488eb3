"""Pose error metrics, trajectory concatenation and the Monte Carlo benchmark.

Work is split into (level, run) items: each item builds its scene once and
evaluates every selected frame pair with every requested method. Items are
independent, so they can go to a process pool; results are sorted before
aggregation, which makes the output independent of scheduling.
"""
from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import synth
from .errors import RsvoError
from .geometry import RigidTransform
from .ransac import RansacConfig, mrsvo_estimate, mrsvo_single, mvo_estimate, mvo_plain
from .refiner import LmConfig

METHODS = ("mvo", "mvo_plain", "mrsvo", "mrsvo_single")
_METHOD_CODE = {m: i for i, m in enumerate(METHODS)}
_KIND_RANSAC = 4

DESK_RUNS, DESK_PAIRS = 20, 50
FULL_RUNS, FULL_FRAMES = 100, 250
FULL_PAIRS = None  # every consecutive pair of the trajectory


@dataclass(frozen=True)
class PoseError:
    rotation_error: float     # degrees
    translation_error: float  # metres

    def __post_init__(self):
        if self.rotation_error < 0 or self.translation_error < 0:
            raise ValueError("pose errors are non-negative")


def rotation_angle_deg(R) -> float:
    c = (np.trace(np.asarray(R)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def pose_error(gt: RigidTransform, est: RigidTransform, true_scale: float) -> PoseError:
    """Error of ``est`` (unit translation) against ``gt`` after injecting the true scale."""
    scaled = RigidTransform(est.rotation, est.translation * true_scale)
    d = gt @ scaled.inverse()
    return PoseError(rotation_angle_deg(d.rotation), float(np.linalg.norm(d.translation)))


def concat_trajectory(relatives) -> list[RigidTransform]:
    """Fold ``(relative pose, scale)`` pairs into camera poses, starting at the identity.

    Each relative maps the earlier camera frame into the later one and carries
    a unit (or arbitrary) translation that is rescaled by its ``scale``.
    """
    poses = [RigidTransform.identity()]
    for rel, scale in relatives:
        if not scale > 0:
            raise ValueError("scales must be positive")
        step = RigidTransform(rel.rotation, rel.translation * scale)
        poses.append(poses[-1] @ step.inverse())
    return poses


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    scene: synth.SceneConfig = field(default_factory=synth.SceneConfig)
    levels: tuple = (1, 2, 3, 4, 5, 6)
    noise: str = "none"
    sigma: float = 0.0
    methods: tuple = ("mvo", "mrsvo")
    runs: int = DESK_RUNS
    pairs_per_run: int | None = DESK_PAIRS
    ransac: RansacConfig = field(default_factory=RansacConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    seed: int = 0

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods: {sorted(bad)}")
        if self.noise not in ("none", "gaussian", "laplacian"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        for lev in self.levels:
            synth.DistortionLevel.from_index(lev)

    @classmethod
    def full_scale(cls, **kw) -> BenchConfig:
        scene = replace(kw.pop("scene", synth.SceneConfig()), n_frames=FULL_FRAMES)
        return cls(scene=scene, runs=FULL_RUNS, pairs_per_run=FULL_PAIRS, **kw)


@dataclass(frozen=True)
class PairRecord:
    level: int
    run: int
    pair: int
    method: str
    ok: bool
    rotation_error: float = math.nan
    translation_error: float = math.nan
    inlier_ratio: float = math.nan
    iterations: int = 0
    lm_iterations: int = 0
    error: str = ""
    wall_time: float = 0.0

    @property
    def key(self):
        return (self.level, self.run, self.pair, _METHOD_CODE[self.method])


@dataclass(frozen=True)
class LevelStats:
    level: int
    method: str
    rot_mean_deg: float
    rot_std_deg: float
    trans_mean_m: float
    trans_std_m: float
    inlier_ratio_mean: float
    failures: int
    pairs: int  # successful pairs entering the statistics


@dataclass
class BenchmarkResult:
    config: BenchConfig
    stats: list
    records: list

    def stat(self, level: int, method: str) -> LevelStats:
        for s in self.stats:
            if s.level == level and s.method == method:
                return s
        raise KeyError((level, method))


def _seed_for(seed: int, level: int, run: int, pair: int) -> int:
    return int(synth.derive_rng(seed, _KIND_RANSAC, level, run, pair).integers(2 ** 63))


def _estimate(method: str, pts, K, cfg: BenchConfig, rseed: int):
    rc = replace(cfg.ransac, rng_seed=rseed)
    if method == "mrsvo":
        return mrsvo_estimate(pts, K, rc, cfg.lm)
    if method == "mvo":
        return mvo_estimate(pts, K, rc)
    if method == "mvo_plain":
        return mvo_plain(pts, K, rc.inlier_threshold)
    return mrsvo_single(pts, K, rc.inlier_threshold, cfg.lm)


def evaluate_item(cfg: BenchConfig, level: int, run: int) -> list[PairRecord]:
    scene_cfg = replace(cfg.scene, rng_seed=cfg.seed)
    scene = synth.build_scene(scene_cfg, run)
    dist = synth.DistortionLevel.from_index(level)
    K = scene_cfg.intrinsics
    out = []
    for k in synth.pair_indices(scene_cfg.n_frames, cfg.pairs_per_run):
        try:
            ds = synth.generate_pair(scene, dist, k, cfg.noise, cfg.sigma)
        except RsvoError as exc:
            out += [PairRecord(level, run, k, m, False, error=type(exc).__name__) for m in cfg.methods]
            continue
        rseed = _seed_for(cfg.seed, level, run, k)
        for m in cfg.methods:
            t0 = time.perf_counter()
            try:
                res = _estimate(m, ds.points, K, cfg, rseed)
            except RsvoError as exc:
                out.append(PairRecord(level, run, k, m, False, error=type(exc).__name__,
                                      wall_time=time.perf_counter() - t0))
                continue
            err = pose_error(ds.true_relative_pose, res.state.pose, ds.true_scale)
            out.append(PairRecord(level, run, k, m, True, err.rotation_error,
                                  err.translation_error, res.inlier_ratio, res.iterations,
                                  res.lm_iterations, wall_time=time.perf_counter() - t0))
    return out


def _item(args):
    return evaluate_item(*args)


def aggregate(records, levels, methods) -> list[LevelStats]:
    stats = []
    for lev in levels:
        for m in methods:
            sel = [r for r in records if r.level == lev and r.method == m]
            ok = [r for r in sel if r.ok]
            rot = np.array([r.rotation_error for r in ok])
            tr = np.array([r.translation_error for r in ok])
            inl = np.array([r.inlier_ratio for r in ok])
            if len(ok):
                s = LevelStats(lev, m, float(rot.mean()), float(rot.std()), float(tr.mean()),
                               float(tr.std()), float(inl.mean()), len(sel) - len(ok), len(ok))
            else:
                s = LevelStats(lev, m, math.nan, math.nan, math.nan, math.nan, math.nan,
                               len(sel), 0)
            stats.append(s)
    return stats


def run_benchmark(cfg: BenchConfig, jobs: int | None = None) -> BenchmarkResult:
    items = [(cfg, lev, run) for lev in cfg.levels for run in range(cfg.runs)]
    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1 or len(items) <= 1:
        parts = [_item(it) for it in items]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
            parts = list(pool.map(_item, items))
    records = sorted((r for p in parts for r in p), key=lambda r: r.key)
    return BenchmarkResult(cfg, aggregate(records, cfg.levels, cfg.methods), records)


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

AGGREGATE_HEADER = ["level", "method", "rot_mean_deg", "rot_std_deg", "trans_mean_m",
                    "trans_std_m", "inlier_ratio_mean", "failures", "pairs"]
RECORD_HEADER = ["level", "run", "pair", "method", "ok", "rotation_error_deg",
                 "translation_error_m", "inlier_ratio", "iterations", "lm_iterations", "error"]
TIMING_HEADER = ["level", "run", "pair", "method", "wall_time_s"]
BOX_HEADER = ["level", "method", "metric", "median", "q1", "q3", "whisker_low",
              "whisker_high", "n_outliers", "outliers"]

_fmt = synth.fmt


def write_aggregate(path, stats):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for s in stats:
            w.writerow([s.level, s.method, _fmt(s.rot_mean_deg), _fmt(s.rot_std_deg),
                        _fmt(s.trans_mean_m), _fmt(s.trans_std_m), _fmt(s.inlier_ratio_mean),
                        s.failures, s.pairs])


def write_records(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for r in records:
            w.writerow([r.level, r.run, r.pair, r.method, int(r.ok), _fmt(r.rotation_error),
                        _fmt(r.translation_error), _fmt(r.inlier_ratio), r.iterations,
                        r.lm_iterations, r.error])


def write_timings(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TIMING_HEADER)
        for r in records:
            w.writerow([r.level, r.run, r.pair, r.method, f"{r.wall_time:.6f}"])


def read_records(path) -> list[PairRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [PairRecord(int(r["level"]), int(r["run"]), int(r["pair"]), r["method"], r["ok"] == "1",
                       float(r["rotation_error_deg"]), float(r["translation_error_m"]),
                       float(r["inlier_ratio"]), int(r["iterations"]), int(r["lm_iterations"]),
                       r["error"]) for r in rows]


def box_stats(values) -> dict:
    """Median, quartiles, 1.5 IQR whiskers (clipped to the data) and the outliers."""
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        return {"median": math.nan, "q1": math.nan, "q3": math.nan, "whisker_low": math.nan,
                "whisker_high": math.nan, "outliers": []}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    return {"median": float(med), "q1": float(q1), "q3": float(q3),
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
            "outliers": [float(x) for x in v if x < inside.min() or x > inside.max()]}


def write_boxplot(path, records, levels, methods):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BOX_HEADER)
        for lev in levels:
            for m in methods:
                ok = [r for r in records if r.level == lev and r.method == m and r.ok]
                for metric, vals in (("rotation_deg", [r.rotation_error for r in ok]),
                                     ("translation_m", [r.translation_error for r in ok])):
                    b = box_stats(vals)
                    w.writerow([lev, m, metric, _fmt(b["median"]), _fmt(b["q1"]), _fmt(b["q3"]),
                                _fmt(b["whisker_low"]), _fmt(b["whisker_high"]),
                                len(b["outliers"]), ";".join(_fmt(x) for x in b["outliers"])])


def write_benchmark(out_dir, result: BenchmarkResult) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    paths = {"aggregate": out / "aggregate.csv", "records": out / "records.csv",
             "boxplot": out / "boxplot.csv", "timings": out / "timings.csv"}
    write_aggregate(paths["aggregate"], result.stats)
    write_records(paths["records"], result.records)
    write_boxplot(paths["boxplot"], result.records, cfg.levels, cfg.methods)
    write_timings(paths["timings"], result.records)
    return paths
