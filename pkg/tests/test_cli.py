import filecmp

import pytest

from crowdgen.cli import EXIT_BAD_INPUT, EXIT_MISSING, EXIT_OK, main
from crowdgen.fixtures import corridor_fixture
from crowdgen.trajectory import parse_trajectory_file, write_trajectory_file

from conftest import TINY_TRAINING

TINY_SETS = [arg for k, v in TINY_TRAINING.items() for arg in ("--set", f"{k}={v}")]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Raw files, a prepared dataset and tiny checkpoints produced through the command line."""
    root = tmp_path_factory.mktemp("cli")
    fx = corridor_fixture(1, n_scenarios=2, frames=250)
    raw = []
    for i, sc in enumerate(fx.scenarios):
        raw.append(root / f"rec{i}.txt")
        write_trajectory_file(sc, raw[-1])
    assert main(["prepare", *map(str, raw), "--out", str(root / "data"), "--scene", "corridor"]) == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--checkpoints", str(root / "ck"), *TINY_SETS]) == EXIT_OK
    return root


def test_prepare_writes_layout_and_tracks(workspace):
    data = workspace / "data"
    for name in ("scene.cfg", "segmentation.pgm"):
        assert (data / name).is_file()
    tracks = sorted((data / "trajectories").glob("*.traj"))
    assert len(tracks) == 2
    assert parse_trajectory_file(tracks[0], "generic").fps == 5.0


def gen_args(workspace, out, *extra):
    return ["generate", "--data", str(workspace / "data"), "--checkpoints", str(workspace / "ck"),
            "--duration-frames", "120", "--seed", "4", "--output", str(out), *extra]


def test_generate_is_byte_identical(workspace):
    a, b = workspace / "a.traj", workspace / "b.traj"
    assert main(gen_args(workspace, a)) == EXIT_OK
    assert main(gen_args(workspace, b, "-v")) == EXIT_OK
    assert filecmp.cmp(a, b, shallow=False)
    assert parse_trajectory_file(a, "generic").total_frames == 120


def test_train_is_byte_identical(workspace):
    again = workspace / "ck2"
    assert main(["train", "--data", str(workspace / "data"), "--checkpoints", str(again), *TINY_SETS]) == EXIT_OK
    for name in ("vocab.txt", "emitter.ckpt", "simulator.ckpt", "prior.ckpt", "losses_emitter.csv"):
        assert filecmp.cmp(workspace / "ck" / name, again / name, shallow=False), name


def test_set_overrides_and_config_file(workspace):
    cfg = workspace / "run.cfg"
    cfg.write_text(f"engine=se-orca\nduration_frames=60\nlayout={workspace / 'data' / 'scene.cfg'}\n")
    out = workspace / "orca.traj"
    assert main(["generate", "--config", str(cfg), "--set", "seed=3", "--output", str(out)]) == EXIT_OK
    assert parse_trajectory_file(out, "generic").total_frames == 60


def test_evaluate_prints_csv_and_table(workspace, capsys):
    gt = next((workspace / "data" / "trajectories").glob("*.traj"))
    gen = workspace / "a.traj"
    if not gen.exists():
        main(gen_args(workspace, gen))
    capsys.readouterr()
    assert main(["evaluate", "--gt", str(gt), "--gen", str(gen), "--oracle"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "dens,freq,cov,pop,kinem,dtw,div,col"
    assert len(lines[1].split(",")) == 8
    assert any(l.startswith("Col") for l in lines)
    assert "oracle collisions: ok" in lines


def test_evaluate_generates_repetitions(workspace, capsys):
    gt = next((workspace / "data" / "trajectories").glob("*.traj"))
    args = ["evaluate", "--gt", str(gt), "--data", str(workspace / "data"), "--engine", "se-orca", "--reps", "2"]
    assert main(args) == EXIT_OK
    assert capsys.readouterr().out.startswith("dens,")


def test_render_writes_svg(workspace):
    out = workspace / "a.svg"
    scen = workspace / "a.traj"
    if not scen.exists():
        main(gen_args(workspace, scen))
    assert main(["render", str(scen), "--layout", str(workspace / "data" / "scene.cfg"), "--out", str(out)]) == EXIT_OK
    n = len(parse_trajectory_file(scen, "generic"))
    assert out.read_text().count("<polyline ") == n


def test_exit_codes(workspace, tmp_path):
    assert main(gen_args(workspace, tmp_path / "x.traj", "--checkpoints", str(tmp_path / "nowhere"))) == EXIT_MISSING
    assert main(gen_args(workspace, tmp_path / "x.traj", "--ablate", "no-gravity")) == EXIT_BAD_INPUT
    assert main(["evaluate", "--gt", str(tmp_path / "missing.traj"), "--gen", str(tmp_path / "x")]) == EXIT_MISSING
    assert main(["prepare", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "d")]) == EXIT_MISSING
    bad = tmp_path / "bad.txt"
    bad.write_text("this is not a trajectory\n")
    assert main(["prepare", str(bad), "--out", str(tmp_path / "d")]) == EXIT_BAD_INPUT
    assert main(["train", "--checkpoints", str(tmp_path / "ck")]) == EXIT_BAD_INPUT
    assert main(["frobnicate"]) == EXIT_BAD_INPUT
