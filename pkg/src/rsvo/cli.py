"""Command-line front end: ``rsvo {synth,estimate,bench,traj}``.

Exit codes: 0 success, 2 configuration or schema problem, 3 numerical or
estimation failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys
from dataclasses import asdict, fields, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import evalbench, synth
from .epipolar import NominalState
from .errors import ConfigParseError, IoError, RsvoError, SchemaError, TooFewPoints
from .geometry import CameraIntrinsics, RigidTransform, UnitQuaternion
from .ransac import RansacConfig, mrsvo_estimate, mvo_estimate
from .refiner import LmConfig

CONFIG_SECTIONS = ("scene", "ransac", "lm", "bench", "synth")
INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "skew", "tau", "n_rows", "n_cols")
REQUIRED_INTRINSICS = ("fx", "fy", "cx", "cy", "tau")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _dataclass_from(cls, section: str, values: dict, base=None):
    if not isinstance(values, dict):
        raise ConfigParseError(f"section '{section}' must be an object")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigParseError(f"unknown field '{section}.{key}'")
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(f"invalid value in section '{section}': {exc}") from exc


def load_config(path: str | None) -> dict:
    """Parse a JSON config into ``{section: object}``; every section is optional."""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigParseError(f"{path}: top level must be an object")
        for key in raw:
            if key not in CONFIG_SECTIONS:
                raise ConfigParseError(f"{path}: unknown section '{key}'")
    scene = _dataclass_from(synth.SceneConfig, "scene", raw.get("scene", {}))
    ransac = _dataclass_from(RansacConfig, "ransac", raw.get("ransac", {}))
    lm = _dataclass_from(LmConfig, "lm", raw.get("lm", {}))
    bench = raw.get("bench", {})
    if not isinstance(bench, dict):
        raise ConfigParseError("section 'bench' must be an object")
    for key in bench:
        if key not in ("levels", "runs", "pairs_per_run", "methods", "noise", "sigma"):
            raise ConfigParseError(f"unknown field 'bench.{key}'")
    syn = raw.get("synth", {})
    if not isinstance(syn, dict):
        raise ConfigParseError("section 'synth' must be an object")
    for key in syn:
        if key not in ("levels", "runs", "pairs_per_run", "noise", "sigma"):
            raise ConfigParseError(f"unknown field 'synth.{key}'")
    return {"scene": scene, "ransac": ransac, "lm": lm, "bench": bench, "synth": syn}


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
           else _dt.datetime.now(_dt.timezone.utc))
    return now.isoformat(timespec="seconds")


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_manifest(path: Path, command: str, config: dict, seed: int, inputs, outputs, started: str):
    manifest = {
        "tool": "rsvo", "version": tool_version(), "command": command,
        "config": _jsonable(config), "seed": seed,
        "inputs": [str(p) for p in inputs], "outputs": [str(p) for p in outputs],
        "started": started, "finished": _timestamp(),
    }
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_text(path: Path, text: str):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# File readers
# ---------------------------------------------------------------------------

def read_intrinsics(path) -> CameraIntrinsics:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read intrinsics {path}: {exc}") from exc
    vals = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{path}:{no}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in INTRINSIC_KEYS:
            raise SchemaError(f"{path}:{no}: unknown key '{key}'")
        try:
            vals[key] = int(val) if key in ("n_rows", "n_cols") else float(val)
        except ValueError as exc:
            raise SchemaError(f"{path}:{no}: bad value for '{key}'") from exc
    missing = [k for k in REQUIRED_INTRINSICS if k not in vals]
    if missing:
        raise SchemaError(f"{path}: missing {', '.join(missing)}")
    try:
        return CameraIntrinsics(**vals)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def read_correspondences(path):
    """``(point_ids, (N, 4) points)`` from a correspondence CSV."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise IoError(f"cannot read correspondences {path}: {exc}") from exc
    if not rows or [h.strip() for h in rows[0]] != synth.CORR_HEADER:
        raise SchemaError(f"{path}: header must be {','.join(synth.CORR_HEADER)}")
    ids, pts = [], []
    for no, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(synth.CORR_HEADER):
            raise SchemaError(f"{path}:{no}: expected {len(synth.CORR_HEADER)} columns, got {len(row)}")
        try:
            ids.append(int(row[0]))
            pts.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise SchemaError(f"{path}:{no}: non-numeric value") from exc
    pts = np.array(pts, dtype=float).reshape(-1, 4)
    if not np.all(np.isfinite(pts)):
        raise SchemaError(f"{path}: non-finite coordinates")
    return np.array(ids, dtype=np.int64), pts


def read_relatives(path, method: str | None = None) -> list[RigidTransform]:
    """Relative poses from an ``estimate`` JSON result or a pose CSV (``qw..tz`` columns)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
            results = doc["results"]
            if method is None:
                method = "mrsvo" if "mrsvo" in results else next(iter(results))
            res = results[method]
            return [RigidTransform.from_quaternion(UnitQuaternion.from_array(res["quaternion"]),
                                                   res["translation"])]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: not an estimate result ({exc})") from exc
    rows = list(csv.DictReader(text.splitlines()))
    need = ["qw", "qx", "qy", "qz", "tx", "ty", "tz"]
    if not rows or any(k not in rows[0] for k in need):
        raise SchemaError(f"{path}: needs columns {','.join(need)}")
    try:
        return [RigidTransform.from_quaternion(UnitQuaternion.from_array([float(r[k]) for k in need[:4]]),
                                               [float(r[k]) for k in need[4:]]) for r in rows]
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad pose row ({exc})") from exc


def read_scales(path) -> list[float]:
    try:
        lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise IoError(f"cannot read scales {path}: {exc}") from exc
    if lines and lines[0] == "scale":
        lines = lines[1:]
    try:
        return [float(v) for v in lines]
    except ValueError as exc:
        raise SchemaError(f"{path}: scales must be one number per line") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _levels(arg_level, section: dict) -> tuple:
    if arg_level is not None:
        return (arg_level,)
    return tuple(section.get("levels", range(1, len(synth.DISTORTION_LEVELS) + 1)))


def _noise(args, section: dict):
    noise = args.noise or section.get("noise", "none")
    sigma = args.sigma if args.sigma is not None else section.get("sigma", 1.0 if noise != "none" else 0.0)
    return noise, float(sigma)


def cmd_synth(args) -> int:
    started = _timestamp()
    cfg = load_config(args.config)
    scene_cfg = replace(cfg["scene"], rng_seed=args.seed)
    syn = cfg["synth"]
    levels = _levels(args.level, syn)
    runs = args.runs if args.runs is not None else int(syn.get("runs", 1))
    pairs = args.pairs if args.pairs is not None else syn.get("pairs_per_run", evalbench.DESK_PAIRS)
    noise, sigma = _noise(args, syn)
    out = Path(args.out)
    outputs = []
    try:
        for lev in levels:
            for run in range(runs):
                scene = synth.build_scene(scene_cfg, run)
                d = out / f"level_{lev}" / f"run_{run:03d}"
                synth.write_run(d, scene, lev, pairs, noise, sigma)
                outputs.append(d)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    write_manifest(out / "manifest.json", "synth",
                   {"scene": scene_cfg, "levels": levels, "runs": runs, "pairs_per_run": pairs,
                    "noise": noise, "sigma": sigma}, args.seed, [args.config or ""], outputs, started)
    print(f"wrote {len(levels)} level(s) x {runs} run(s) to {out}")
    return 0


def result_to_dict(res, point_ids) -> dict:
    s: NominalState = res.state
    return {
        "method": res.method,
        "quaternion": s.q_gs.as_array(), "translation": s.t_gs,
        "w_prev": s.motion_prev.w, "v_prev": s.motion_prev.v,
        "w_cur": s.motion_cur.w, "v_cur": s.motion_cur.v,
        "inlier_ratio": res.inlier_ratio, "n_inliers": res.n_inliers,
        "n_points": len(res.inlier_mask),
        "point_ids": point_ids, "inlier_mask": [bool(b) for b in res.inlier_mask],
        "residuals": res.per_point_residual,
        "iterations": res.iterations, "lm_iterations": res.lm_iterations,
        "low_parallax": res.low_parallax,
    }


def cmd_estimate(args) -> int:
    started = _timestamp()
    cfg = load_config(args.config)
    K = read_intrinsics(args.intrinsics)
    ids, pts = read_correspondences(args.correspondences)
    methods = ("mvo", "mrsvo") if args.method == "both" else (args.method,)
    rc = replace(cfg["ransac"], rng_seed=args.seed)
    need = max(rc.sample_size, 8) if "mrsvo" in methods else 8
    if len(pts) < need:
        raise TooFewPoints(f"{args.correspondences}: {len(pts)} correspondences, need {need}")
    results = {}
    for m in methods:
        res = mrsvo_estimate(pts, K, rc, cfg["lm"]) if m == "mrsvo" else mvo_estimate(pts, K, rc)
        results[m] = result_to_dict(res, ids)
        print(f"{m:6s} inlier_ratio={res.inlier_ratio:.4f} ({res.n_inliers}/{len(pts)})")
    doc = {"results": results}
    if len(methods) == 2:
        diff = results["mrsvo"]["inlier_ratio"] - results["mvo"]["inlier_ratio"]
        doc["comparison"] = {"inlier_ratio_mvo": results["mvo"]["inlier_ratio"],
                             "inlier_ratio_mrsvo": results["mrsvo"]["inlier_ratio"],
                             "mrsvo_minus_mvo": diff}
        print(f"mrsvo - mvo inlier ratio: {100 * diff:+.1f} points")
    out = Path(args.out)
    _write_text(out, json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    write_manifest(out.with_name(out.name + ".manifest.json"), "estimate",
                   {"ransac": rc, "lm": cfg["lm"], "intrinsics": K, "methods": methods},
                   args.seed, [args.correspondences, args.intrinsics], [out], started)
    return 0


def bench_config(args, cfg: dict) -> evalbench.BenchConfig:
    b = cfg["bench"]
    noise, sigma = _noise(args, b)
    if args.method is not None:
        methods = ("mvo", "mrsvo") if args.method == "both" else (args.method,)
    else:
        methods = tuple(b.get("methods", ("mvo", "mrsvo")))
    if args.full_scale:
        runs, pairs = evalbench.FULL_RUNS, evalbench.FULL_PAIRS
    else:
        runs = int(b.get("runs", evalbench.DESK_RUNS))
        pairs = b.get("pairs_per_run", evalbench.DESK_PAIRS)
    scene = cfg["scene"]
    if args.full_scale:
        scene = replace(scene, n_frames=evalbench.FULL_FRAMES)
    try:
        return evalbench.BenchConfig(scene=scene, levels=_levels(args.level, b), noise=noise,
                                     sigma=sigma, methods=methods, runs=runs, pairs_per_run=pairs,
                                     ransac=cfg["ransac"], lm=cfg["lm"], seed=args.seed)
    except ValueError as exc:
        raise ConfigParseError(str(exc)) from exc


def cmd_bench(args) -> int:
    started = _timestamp()
    cfg = load_config(args.config)
    bc = bench_config(args, cfg)
    result = evalbench.run_benchmark(bc, jobs=args.jobs)
    try:
        paths = evalbench.write_benchmark(args.out, result)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    for s in result.stats:
        print(f"level {s.level} {s.method:12s} rot {s.rot_mean_deg:.3f} deg  "
              f"trans {s.trans_mean_m:.4f} m  inliers {s.inlier_ratio_mean:.3f}  "
              f"failures {s.failures}/{s.failures + s.pairs}")
    write_manifest(Path(args.out) / "manifest.json", "bench", bc, args.seed,
                   [args.config or ""], list(paths.values()), started)
    return 0


def cmd_traj(args) -> int:
    started = _timestamp()
    rels = []
    for p in args.relatives:
        rels += read_relatives(p, args.method if args.method != "both" else None)
    scales = read_scales(args.scales)
    if len(scales) != len(rels):
        raise SchemaError(f"{len(rels)} relative poses but {len(scales)} scales")
    if any(not s > 0 for s in scales):
        raise SchemaError("scales must be positive")
    poses = evalbench.concat_trajectory(list(zip(rels, scales)))
    out = Path(args.out)
    rows = [",".join(synth.POSE_HEADER)]
    for k, P in enumerate(poses):
        q = P.quaternion
        rows.append(",".join([str(k)] + [synth.fmt(v) for v in (q.w, q.x, q.y, q.z, *P.translation)]))
    _write_text(out, "\n".join(rows) + "\n")
    write_manifest(out.with_name(out.name + ".manifest.json"), "traj", {"method": args.method},
                   args.seed, [*args.relatives, args.scales], [out], started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsvo", description="Rolling-shutter monocular visual odometry")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=0, help="master seed")

    def noise(sp):
        sp.add_argument("--level", type=int, choices=range(1, 7), help="distortion level 1..6")
        sp.add_argument("--noise", choices=("none", "gaussian", "laplacian"))
        sp.add_argument("--sigma", type=float, help="noise standard deviation (px)")

    s = sub.add_parser("synth", help="generate synthetic datasets")
    common(s)
    noise(s)
    s.add_argument("--runs", type=int)
    s.add_argument("--pairs", type=int, help="frame pairs per run")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("estimate", help="estimate one frame pair from a correspondence CSV")
    common(e)
    e.add_argument("correspondences")
    e.add_argument("--intrinsics", required=True)
    e.add_argument("--method", choices=("mvo", "mrsvo", "both"), default="both")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("bench", help="Monte Carlo benchmark")
    common(b)
    noise(b)
    b.add_argument("--method", choices=("mvo", "mrsvo", "both"))
    b.add_argument("--jobs", type=int, default=None)
    b.add_argument("--full-scale", action="store_true")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("traj", help="concatenate relative poses into a trajectory")
    t.add_argument("relatives", nargs="+", help="estimate JSON files or pose CSVs, in order")
    t.add_argument("--scales", required=True)
    t.add_argument("--method", choices=("mvo", "mrsvo", "both"), default="mrsvo")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_traj)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RsvoError as exc:
        print(f"rsvo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"rsvo {args.command}: IoError: {exc}", file=sys.stderr)
        return IoError.exit_code


if __name__ == "__main__":
    sys.exit(main())
