import json
import subprocess
import sys

import numpy as np
import pytest

from concept_probe import prt
from concept_probe.cli import main
from concept_probe.datasets import hash_tree, load_excerpt_dir
from concept_probe.midi_roll import Note, NoteSequence, write_smf
from concept_probe.model import Classifier, ModelConfig


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_random_datasets_layout(tmp_path, capsys):
    code, out, _ = run(capsys, "dataset", "--random", "--count", "10", "--excerpts", "30", "--out", str(tmp_path / "r"))
    assert code == 0
    dirs = sorted(p for p in (tmp_path / "r").iterdir())
    assert len(dirs) == 10
    for d in dirs:
        assert len(list(d.glob("*.mid"))) == 30 and len(list(d.glob("*.prt"))) == 30
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["excerpt_length"] == 20.0 and manifest["source"] == "synthetic:random"
    assert len(json.loads(out)["random_sets"]) == 10


def test_concept_dataset_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "dataset", "--concept", "alberti", "--excerpts", "30", "--seed", "4", "--out", str(tmp_path / name))[0] == 0
    assert len(list((tmp_path / "a").glob("*.mid"))) == 30
    assert hash_tree(tmp_path / "a") == hash_tree(tmp_path / "b")
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["concept"] == "alberti"


def test_seed_env_overrides(tmp_path, capsys, monkeypatch):
    run(capsys, "dataset", "--concept", "alberti", "--excerpts", "3", "--seed", "4", "--out", str(tmp_path / "a"))
    monkeypatch.setenv("CONCEPT_PROBE_SEED", "4")
    run(capsys, "dataset", "--concept", "alberti", "--excerpts", "3", "--seed", "99", "--out", str(tmp_path / "b"))
    monkeypatch.setenv("CONCEPT_PROBE_SEED", "5")
    run(capsys, "dataset", "--concept", "alberti", "--excerpts", "3", "--out", str(tmp_path / "c"))
    assert hash_tree(tmp_path / "a") == hash_tree(tmp_path / "b") != hash_tree(tmp_path / "c")


def test_exit_codes(tmp_path, capsys):
    assert run(capsys, "dataset", "--concept", "fugue", "--out", str(tmp_path / "x"))[0] == 2
    assert run(capsys, "nonsense")[0] == 2
    bad = tmp_path / "bad.mid"
    bad.write_bytes(b"MThd\x00\x00")
    code, _, err = run(capsys, "roll", str(bad), "--out", str(tmp_path / "r"))
    assert code == 3
    event = json.loads(err.splitlines()[0])
    assert event["event"] == "error" and event["exit_code"] == 3
    assert run(capsys, "roll", str(tmp_path / "missing.mid"), "--out", str(tmp_path / "r"))[0] == 3
    (tmp_path / "cfg.json").write_text('{"explain": {"variant": "5d"}}')
    assert run(capsys, "pipeline", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "run"))[0] == 2


def test_numeric_failure_exit_code(tmp_path, capsys):
    model = Classifier(ModelConfig(channels=(2,), input_shape=(88, 40), seed=0), ["a", "b"])
    model.save(tmp_path / "m")
    same = tmp_path / "same"
    same.mkdir()
    for i in range(4):
        prt.save(same / f"{i}.prt", np.full((88, 40), 0.5, np.float32))
    code, _, _ = run(capsys, "cav", "--model", str(tmp_path / "m"), "--concept", str(same), "--random", str(same), "--out", str(tmp_path / "v.prt"))
    assert code == 4


def test_roll_segments_midi(tmp_path, capsys):
    midi = tmp_path / "piece.mid"
    midi.write_bytes(write_smf(NoteSequence([Note(60, 0.0, 1.0, 100), Note(62, 30.0, 1.0, 80)])))
    code, out, _ = run(capsys, "roll", str(midi), "--out", str(tmp_path / "rolls"))
    assert code == 0 and json.loads(out)["excerpts"] == 2
    x, ids, manifest = load_excerpt_dir(tmp_path / "rolls")
    assert x.shape == (2, 88, 400) and ids == ["0000", "0001"]
    assert x[0, 60 - 21, :20].max() == pytest.approx(100 / 127)
    assert x[1, 62 - 21, 200:220].max() == pytest.approx(80 / 127)


def test_render_command(tmp_path, capsys):
    grid = np.zeros((88, 40), np.float32)
    grid[0, :2] = 1.0
    prt.save(tmp_path / "ex.prt", grid)
    prt.save(tmp_path / "hm.prt", np.random.default_rng(0).uniform(size=(88, 40)), {"peak": 1.0})
    code, out, _ = run(capsys, "render", "--roll", str(tmp_path / "ex.prt"), "--heatmap", str(tmp_path / "hm.prt"), "--thresholds", "0.4,0.6", "--out", str(tmp_path / "r"))
    assert code == 0
    assert sorted(json.loads(out)["files"]) == sorted(["ex_t40.svg", "ex_t40.png", "ex_t60.svg", "ex_t60.png", "ex.mid"])
    prt.save(tmp_path / "small.prt", np.zeros((88, 10), np.float32))
    assert run(capsys, "render", "--roll", str(tmp_path / "ex.prt"), "--heatmap", str(tmp_path / "small.prt"), "--out", str(tmp_path / "r"))[0] == 3
    assert run(capsys, "render", "--roll", str(tmp_path / "ex.prt"), "--thresholds", "1.5", "--out", str(tmp_path / "r"))[0] == 2


def test_ntd_command(tmp_path, capsys):
    x = np.random.default_rng(0).uniform(size=(4, 3, 5, 6)).astype(np.float32)
    prt.save(tmp_path / "x.prt", x)
    for variant, ranks in (("4d", "4,3,5,6"), ("3d", "2,2,2,3"), ("2d", "3")):
        code, out, _ = run(capsys, "ntd", "--input", str(tmp_path / "x.prt"), "--ranks", ranks, "--variant", variant, "--out", str(tmp_path / variant))
        assert code == 0
        summary = json.loads(out)
        manifest = json.loads((tmp_path / variant / "manifest.json").read_text())
        assert manifest["variant"] == variant and manifest["loss_history"]
        if variant == "4d":
            assert summary["relative_error"] < 1e-6
    assert run(capsys, "ntd", "--input", str(tmp_path / "x.prt"), "--ranks", "9,1,1,1", "--out", str(tmp_path / "bad"))[0] == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "concept_probe.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "pipeline" in proc.stdout
