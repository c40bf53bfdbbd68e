import json

import numpy as np
import pytest

from conftest import unit_rows
from pcloop import cli
from pcloop import io as pio
from pcloop.config import build_settings, parse_config
from pcloop.evaluation import parse_labels
from pcloop.geometry import PointCloud, RigidTransform, compose, transform_error
from pcloop.loopclosure import parse_score_log
from pcloop.records import Trajectory
from pcloop.synthetic import SceneSpec, gen_loop_pair, gen_room, gen_scene, random_transform


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def report_matrix(out):
    return np.array([[float(v) for v in ln.split()] for ln in out.splitlines()[2:6]])


@pytest.fixture(scope="module")
def room_ply(tmp_path_factory):
    path = tmp_path_factory.mktemp("clouds") / "room.ply"
    pio.write_ply(path, gen_room(noise=0.002, seed=1), precision="double")
    return path


def test_register_pair_with_itself(room_ply, capsys):
    code, out, _ = run(["register-pair", room_ply, room_ply], capsys)
    assert code == 0
    assert out.splitlines()[0] == "overlap=1.0 ron=1.0"
    assert out.splitlines()[1] == "decision=accepted"
    assert np.abs(report_matrix(out) - np.eye(4)).max() < 1e-9


def test_register_pair_descriptor_files(tmp_path, capsys):
    rng = np.random.default_rng(0)
    pio.write_descriptors(tmp_path / "a.l3dd", PointCloud(rng.normal(size=(50, 3))), unit_rows(rng, 50, 16))
    code, out, _ = run(["register-pair", tmp_path / "a.l3dd", tmp_path / "a.l3dd", "--out", tmp_path / "r.txt"], capsys)
    assert code == 0 and out.startswith("overlap=1.0 ron=1.0")
    assert (tmp_path / "r.txt").read_text() == out


def test_register_pair_planted(tmp_path, capsys):
    cloud = gen_scene(SceneSpec(seed=10))
    T = random_transform(np.random.default_rng(0), np.pi, 1.0)
    P, Pp, T_gt = gen_loop_pair(cloud, T, 0.6, 0.005, 0)
    pio.write_ply(tmp_path / "q.ply", P, precision="double")
    pio.write_ply(tmp_path / "c.ply", Pp, precision="double")
    code, out, _ = run(["register-pair", tmp_path / "q.ply", tmp_path / "c.ply"], capsys)
    assert code == 0
    assert float(out.split()[1].split("=")[1]) > 0.2
    rot, trans = transform_error(RigidTransform.from_matrix(report_matrix(out)), T_gt)
    assert np.degrees(rot) < 2.0 and trans < 0.05


def test_register_pair_unrelated(room_ply, tmp_path, capsys):
    other = tmp_path / "spheres.ply"
    pio.write_ply(other, gen_scene(SceneSpec(n_planes=0, n_spheres=6, n_boxes=0, sphere_radius=(0.1, 0.2), seed=3)))
    code, out, _ = run(["register-pair", room_ply, other], capsys)
    assert code == 2 or "decision=rejected_" in out


def test_register_pair_no_consensus_exit_code(tmp_path, capsys):
    rng = np.random.default_rng(1)
    D = unit_rows(rng, 20, 8)
    pio.write_descriptors(tmp_path / "a.l3dd", PointCloud(rng.uniform(-5, 5, size=(20, 3))), D)
    pio.write_descriptors(tmp_path / "b.l3dd", PointCloud(rng.uniform(-5, 5, size=(20, 3))), D)
    (tmp_path / "c.cfg").write_text("max_iterations = 2000\n")
    code, out, err = run(["register-pair", tmp_path / "a.l3dd", tmp_path / "b.l3dd", "--config", tmp_path / "c.cfg"], capsys)
    assert code == 2
    assert "decision=rejected_registration" in out and "no consensus" in err


def test_missing_input_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.ply"
    code, _, err = run(["register-pair", missing, missing], capsys)
    assert code == 1 and str(missing) in err
    code, _, err = run(["detect-loops", "--manifest", tmp_path / "m.json", "--out", tmp_path], capsys)
    assert code == 1 and "m.json" in err


def test_manifest_with_missing_cloud(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps({"keyframes": [{"id": 0, "cloud": "clouds/000000.ply"}]}))
    code, _, err = run(["detect-loops", "--manifest", tmp_path / "m.json", "--out", tmp_path / "o"], capsys)
    assert code == 1 and "000000.ply" in err


def test_bad_config(tmp_path, room_ply, capsys):
    (tmp_path / "c.cfg").write_text("tau_o = 2\n")
    code, _, err = run(["register-pair", room_ply, room_ply, "--config", tmp_path / "c.cfg"], capsys)
    assert code == 1 and "tau_o" in err


@pytest.fixture(scope="module")
def sequence(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq")
    assert cli.main(["gen-synthetic", "--out", str(out), "--frames", "30", "--loops", "1", "--min-gap", "10", "--seed", "2"]) == 0
    (out / "run.cfg").write_text("exclusion_window = 10\n")
    return out


def test_gen_synthetic_layout(sequence):
    m = json.loads((sequence / "manifest.json").read_text())
    assert len(m["keyframes"]) == 30
    assert all((sequence / e["cloud"]).exists() and (sequence / e["descriptors"]).exists() for e in m["keyframes"])
    assert len(parse_labels((sequence / "labels.csv").read_text())) == 30 * 29 // 2
    assert len((sequence / "planted_loops.csv").read_text().splitlines()) == 2
    assert len(pio.read_trajectory(sequence / "trajectory.txt").poses) == 30


def test_detect_loops_finds_the_planted_loop(sequence, tmp_path, capsys):
    code, out, _ = run(
        ["detect-loops", "--manifest", sequence / "manifest.json", "--config", sequence / "run.cfg", "--backend", "external", "--out", tmp_path],
        capsys,
    )
    assert code == 0 and "queries=30" in out
    planted = (sequence / "planted_loops.csv").read_text().splitlines()[1].split(",")
    found = (tmp_path / "loops.csv").read_text().splitlines()[1:]
    assert [ln.split(",")[:2] for ln in found] == [[planted[1], planted[0]]]
    scores = parse_score_log((tmp_path / "scores.csv").read_text())
    assert len(scores) == sum(range(1, 21))


def test_detect_loops_setting2_stride(sequence, tmp_path, capsys):
    code, out, _ = run(
        ["detect-loops", "--manifest", sequence / "manifest.json", "--mode", "setting2", "--stride", "20", "--backend", "external", "--out", tmp_path],
        capsys,
    )
    assert code == 0
    assert "queries=2 scored_pairs=1" in out


def test_eval_pr(sequence, tmp_path, capsys):
    assert cli.main(["detect-loops", "--manifest", str(sequence / "manifest.json"), "--config", str(sequence / "run.cfg"),
                     "--backend", "external", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    code, out, _ = run(["eval-pr", "--scores", tmp_path / "scores.csv", "--labels", sequence / "labels.csv", "--out", tmp_path / "pr.csv"], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "threshold,precision,recall"
    assert lines[-1] == "auc=1.0"
    assert (tmp_path / "pr.csv").read_text() == out


def test_eval_ate(tmp_path, capsys):
    rng = np.random.default_rng(3)
    poses = [RigidTransform.from_translation(rng.normal(size=3)) for _ in range(10)]
    gt = Trajectory(np.arange(10) * 0.1, poses)
    W = RigidTransform.from_translation([5.0, -2.0, 1.0])
    pio.write_trajectory(tmp_path / "gt.txt", gt)
    pio.write_trajectory(tmp_path / "est.txt", Trajectory(gt.timestamps, [compose(W, p) for p in poses]))
    code, out, _ = run(["eval-ate", "--est", tmp_path / "est.txt", "--gt", tmp_path / "gt.txt"], capsys)
    assert code == 0
    assert float(out.splitlines()[0].split("=")[1]) < 1e-9
    S = np.array([float(v) for v in out.splitlines()[1].split()]).reshape(4, 4)
    assert np.allclose(S[:3, 3], [-5.0, 2.0, -1.0], atol=1e-9)
    pio.write_trajectory(tmp_path / "short.txt", Trajectory(gt.timestamps[:2], poses[:2]))
    code, _, err = run(["eval-ate", "--est", tmp_path / "short.txt", "--gt", tmp_path / "gt.txt"], capsys)
    assert code == 1 and "associations" in err


def test_extract_fpfh(room_ply, tmp_path, capsys):
    code, out, _ = run(["extract-fpfh", room_ply, "--out", tmp_path / "r.l3dd"], capsys)
    assert code == 0
    pts, D = pio.read_descriptors(tmp_path / "r.l3dd")
    assert D.dim == 33 and len(pts) == len(D)


# ------------------------------------------------------------------------ config


def test_parse_config():
    vals = parse_config("# defaults\nn = 0.5\ntau_o=0.2  # stricter\n\nmax_iterations = 1000\nsigma = 12.5\n")
    assert vals == {"fraction": 0.5, "tau_o": 0.2, "max_iterations": 1000, "sigma": 12.5}
    s = build_settings(vals, seed=7)
    assert s.sampling.fraction == 0.5 and s.loop.tau_o == 0.2 and s.ransac.max_iterations == 1000
    assert s.loop.positional_prior.sigma == 12.5
    assert s.seed == 7 and s.ransac.seed == 7


@pytest.mark.parametrize("text", ["tau_o 0.2\n", "bogus = 1\n", "stride = two\n"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_build_settings_errors(tmp_path):
    for bad in ({"mode": "setting3"}, {"stride": 0}, {"profile": "space"}):
        with pytest.raises(ValueError):
            build_settings(bad)
    (tmp_path / "s.txt").write_text("1.0\n2.0\n")
    s = build_settings({"sigma_file": str(tmp_path / "s.txt"), "profile": "lidar"})
    assert s.loop.positional_prior.sigma == (1.0, 2.0)
    assert s.sampling.patch_radius == 2.5
