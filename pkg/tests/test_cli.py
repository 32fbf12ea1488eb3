import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from rsvo import cli, synth
from rsvo.geometry import RigidTransform, UnitQuaternion


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out", str(out), "--pairs", "2", "--seed", "4"]) == 0
    return out


def test_synth_default_writes_six_levels(dataset):
    levels = sorted(p.name for p in dataset.iterdir() if p.is_dir())
    assert levels == [f"level_{k}" for k in range(1, 7)]
    run = dataset / "level_3" / "run_000"
    names = sorted(p.name for p in run.iterdir())
    assert "intrinsics.txt" in names and "poses.csv" in names and "meta.json" in names
    assert sum(n.endswith("_corr.csv") for n in names) == 2
    meta = json.loads((run / "meta.json").read_text())
    assert meta["level"] == 3 and meta["seed"] == 4
    assert meta["distortion"] == {"v_max": 20.0, "w_max_deg": 40.0}
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 4
    assert manifest["config"]["scene"]["n_frames"] == 250


def test_synth_rerun_byte_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    out = tmp_path / "d"
    argv = ["synth", "--out", str(out), "--level", "6", "--pairs", "3", "--noise", "gaussian"]
    assert cli.main(argv) == 0
    first = _tree(out)
    shutil.rmtree(out)
    assert cli.main(argv) == 0
    assert _tree(out) == first
    assert json.loads(first["manifest.json"])["started"].startswith("2023-11-14")


def test_synth_seed_changes_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["synth", "--out", str(a), "--level", "2", "--pairs", "1", "--seed", "1"]) == 0
    assert cli.main(["synth", "--out", str(b), "--level", "2", "--pairs", "1", "--seed", "2"]) == 0
    ta, tb = _tree(a), _tree(b)
    key = "level_2/run_000/pair_0000_corr.csv"
    assert ta[key] != tb[key]


@pytest.mark.parametrize("text, needle", [
    ('{"scene": {"n_frames": 10,}}', ":1:"),
    ('{\n  "scene": {\n    "n_frames": 10\n  },\n  "ransac": {"iters": 3}\n}', "ransac.iters"),
    ('{"colour": {}}', "colour"),
    ('{"scene": {"n_frames": 1}}', "scene"),
    ('[1, 2]', "top level"),
])
def test_malformed_config(tmp_path, capsys, text, needle):
    cfg = tmp_path / "bad.json"
    cfg.write_text(text)
    code = cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o"), "--pairs", "1"])
    assert code == 2
    err = capsys.readouterr().err
    assert "ConfigParseError" in err and needle in err


def test_config_line_number_reported(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "scene": {\n    "n_frames": 10\n  }\n  "lm": {}\n}')
    with pytest.raises(cli.ConfigParseError, match=r"bad\.json:5:"):
        cli.load_config(str(cfg))


def test_estimate_level_one_pair(dataset, tmp_path):
    run = dataset / "level_1" / "run_000"
    out = tmp_path / "est.json"
    code = cli.main(["estimate", str(run / "pair_0000_corr.csv"), "--intrinsics",
                     str(run / "intrinsics.txt"), "--out", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    for m in ("mvo", "mrsvo"):
        r = doc["results"][m]
        assert r["inlier_ratio"] == 1.0
        assert len(r["quaternion"]) == 4 and len(r["translation"]) == 3
        assert np.linalg.norm(r["translation"]) == pytest.approx(1.0)
        for k in ("w_prev", "v_prev", "w_cur", "v_cur"):
            assert len(r[k]) == 3
        assert len(r["inlier_mask"]) == len(r["residuals"]) == r["n_points"]
    assert doc["comparison"]["mrsvo_minus_mvo"] == pytest.approx(0.0)
    assert (tmp_path / "est.json.manifest.json").exists()


def test_estimate_deterministic(dataset, tmp_path):
    run = dataset / "level_6" / "run_000"
    outs = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        assert cli.main(["estimate", str(run / "pair_0000_corr.csv"), "--intrinsics",
                         str(run / "intrinsics.txt"), "--method", "mrsvo", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_estimate_too_few_points(dataset, tmp_path, capsys):
    run = dataset / "level_1" / "run_000"
    lines = (run / "pair_0000_corr.csv").read_text().splitlines()
    short = tmp_path / "short.csv"
    short.write_text("\n".join(lines[:6]) + "\n")
    code = cli.main(["estimate", str(short), "--intrinsics", str(run / "intrinsics.txt"),
                     "--method", "mvo", "--out", str(tmp_path / "o.json")])
    assert code == 2
    assert "TooFewPoints" in capsys.readouterr().err


def test_estimate_schema_errors(dataset, tmp_path):
    run = dataset / "level_1" / "run_000"
    bad = tmp_path / "bad.csv"
    bad.write_text("id,u0,v0,u1,v1\n0,1,2,3,4\n")
    with pytest.raises(cli.SchemaError):
        cli.read_correspondences(bad)
    bad.write_text("point_id,u_prev,v_prev,u_cur,v_cur\n0,1,2,3\n")
    with pytest.raises(cli.SchemaError):
        cli.read_correspondences(bad)
    code = cli.main(["estimate", str(bad), "--intrinsics", str(run / "intrinsics.txt"),
                     "--out", str(tmp_path / "o.json")])
    assert code == 2
    intr = tmp_path / "k.txt"
    intr.write_text("fx=1000\nfy=1000\ncx=640\n")
    with pytest.raises(cli.SchemaError, match="cy, tau"):
        cli.read_intrinsics(intr)


def test_intrinsics_round_trip(dataset):
    K = cli.read_intrinsics(dataset / "level_1" / "run_000" / "intrinsics.txt")
    assert K == synth.SceneConfig().intrinsics


def test_missing_input_is_io_error(tmp_path):
    code = cli.main(["estimate", str(tmp_path / "nope.csv"), "--intrinsics",
                     str(tmp_path / "nope.txt"), "--out", str(tmp_path / "o.json")])
    assert code == 4


def _write_relatives(path, rels):
    rows = ["qw,qx,qy,qz,tx,ty,tz"]
    for r in rels:
        q = r.quaternion
        rows.append(",".join(synth.fmt(v) for v in (q.w, q.x, q.y, q.z, *r.translation)))
    path.write_text("\n".join(rows) + "\n")


def test_traj_identity_is_constant(tmp_path):
    _write_relatives(tmp_path / "rel.csv", [RigidTransform.identity()] * 4)
    (tmp_path / "s.txt").write_text("scale\n1\n1\n1\n1\n")
    out = tmp_path / "traj.csv"
    assert cli.main(["traj", str(tmp_path / "rel.csv"), "--scales", str(tmp_path / "s.txt"),
                     "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == ",".join(synth.POSE_HEADER) and len(rows) == 6
    for k, r in enumerate(rows[1:]):
        assert [float(v) for v in r.split(",")] == [k, 1, 0, 0, 0, 0, 0, 0]


def test_traj_length_mismatch(tmp_path, capsys):
    _write_relatives(tmp_path / "rel.csv", [RigidTransform.identity()] * 3)
    (tmp_path / "s.txt").write_text("1\n1\n")
    code = cli.main(["traj", str(tmp_path / "rel.csv"), "--scales", str(tmp_path / "s.txt"),
                     "--out", str(tmp_path / "t.csv")])
    assert code == 2
    assert "SchemaError" in capsys.readouterr().err


def test_traj_closes_synth_loop(dataset, tmp_path):
    rows = (dataset / "level_1" / "run_000" / "poses.csv").read_text().splitlines()[1:]
    T = []
    for r in rows:
        v = [float(x) for x in r.split(",")[1:]]
        T.append(RigidTransform.from_quaternion(UnitQuaternion.from_array(v[:4]), v[4:]))
    rels, scales = [], []
    for a, b in zip(T, T[1:]):
        rel = b @ a.inverse()
        s = np.linalg.norm(rel.translation)
        rels.append(RigidTransform(rel.rotation, rel.translation / s))
        scales.append(s)
    _write_relatives(tmp_path / "rel.csv", rels)
    (tmp_path / "s.txt").write_text("\n".join(synth.fmt(s) for s in scales) + "\n")
    out = tmp_path / "traj.csv"
    assert cli.main(["traj", str(tmp_path / "rel.csv"), "--scales", str(tmp_path / "s.txt"),
                     "--out", str(out)]) == 0
    got = np.array([[float(x) for x in r.split(",")[5:]] for r in out.read_text().splitlines()[1:]])
    want = np.array([(T[0] @ T[k].inverse()).translation for k in range(len(T))])
    per_frame = np.abs(got - want).max(axis=1) / np.maximum(np.arange(len(T)), 1)
    assert per_frame.max() < 1e-6
    # last camera lies within one step of the start of the loop
    assert np.linalg.norm(got[-1] - got[0]) < 2 * max(scales)


def test_traj_from_estimate_json(dataset, tmp_path):
    run = dataset / "level_1" / "run_000"
    est = tmp_path / "e.json"
    assert cli.main(["estimate", str(run / "pair_0000_corr.csv"), "--intrinsics",
                     str(run / "intrinsics.txt"), "--out", str(est)]) == 0
    (tmp_path / "s.txt").write_text("0.5\n")
    out = tmp_path / "t.csv"
    assert cli.main(["traj", str(est), "--scales", str(tmp_path / "s.txt"), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3


def test_bench_structural(tmp_path, capsys):
    cfg = tmp_path / "b.json"
    cfg.write_text(json.dumps({"scene": {"n_frames": 8}, "bench": {"runs": 1, "pairs_per_run": 1}}))
    out = tmp_path / "bench"
    assert cli.main(["bench", "--config", str(cfg), "--out", str(out), "--jobs", "1"]) == 0
    lines = (out / "aggregate.csv").read_text().splitlines()
    assert lines[0] == "level,method,rot_mean_deg,rot_std_deg,trans_mean_m,trans_std_m,inlier_ratio_mean,failures,pairs"
    keys = [tuple(line.split(",")[:2]) for line in lines[1:]]
    assert keys == [(str(lev), m) for lev in range(1, 7) for m in ("mvo", "mrsvo")]
    for name in ("records.csv", "boxplot.csv", "timings.csv", "manifest.json"):
        assert (out / name).exists()


def test_bench_full_scale_flag():
    args = cli.build_parser().parse_args(["bench", "--full-scale", "--out", "x"])
    bc = cli.bench_config(args, cli.load_config(None))
    assert (bc.runs, bc.scene.n_frames, bc.pairs_per_run) == (100, 250, None)
    args = cli.build_parser().parse_args(["bench", "--out", "x"])
    bc = cli.bench_config(args, cli.load_config(None))
    assert (bc.runs, bc.pairs_per_run, bc.levels) == (20, 50, (1, 2, 3, 4, 5, 6))


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "rsvo.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth", "estimate", "bench", "traj"):
        assert cmd in res.stdout
