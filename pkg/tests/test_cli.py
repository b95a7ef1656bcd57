"""CLI tests: subcommand wiring, config snapshots, exit codes, and a small
end-to-end pipeline (synth -> curate -> train -> track -> eval)."""

import hashlib
import json
from pathlib import Path

import pytest

from siamfc.cli import main


def run(*argv):
    return main(list(argv))


def tree_hash(root) -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, capfd_unsupported=None):
    """One small pipeline shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    synth_dir = root / "data"
    assert run("synth", "--out", str(synth_dir), "--seed", "70", "--sequences", "3",
               "--frames", "10") == 0
    store = root / "store"
    assert run("curate", "--annotations", str(synth_dir), "--out", str(store)) == 0
    train_dir = root / "train"
    assert run("train", "--data", str(store), "--out", str(train_dir), "--preset", "tiny",
               "--epochs", "1", "--pairs-per-epoch", "16", "--seed", "3") == 0
    return root, synth_dir, store, train_dir / "model.sfcm"


class TestSynth:
    def test_rerun_identical_tree(self, tmp_path):
        out = tmp_path / "d"
        assert run("synth", "--out", str(out), "--seed", "7",
                   "--sequences", "2", "--frames", "3") == 0
        first = tree_hash(out)
        assert run("synth", "--out", str(out), "--seed", "7",
                   "--sequences", "2", "--frames", "3") == 0
        assert tree_hash(out) == first
        # and a separate out dir differs only by the snapshot's own out= line
        assert run("synth", "--out", str(tmp_path / "e"), "--seed", "7",
                   "--sequences", "2", "--frames", "3") == 0
        assert _tree_hash_excluding(out, "synth_config.toml") == \
            _tree_hash_excluding(tmp_path / "e", "synth_config.toml")

    def test_writes_config_snapshot(self, tmp_path):
        assert run("synth", "--out", str(tmp_path), "--seed", "1", "--sequences", "1",
                   "--frames", "2") == 0
        snapshot = (tmp_path / "synth_config.toml").read_text()
        assert "[synth]" in snapshot and "sequences = 1" in snapshot
        assert "seed = 1" in snapshot

    def test_snapshot_rerun_reproduces(self, tmp_path):
        assert run("synth", "--out", str(tmp_path / "a"), "--seed", "5", "--sequences", "2",
                   "--frames", "3") == 0
        assert run("synth", "--config", str(tmp_path / "a" / "synth_config.toml"),
                   "--out", str(tmp_path / "b")) == 0
        ha = tree_hash(tmp_path / "a")
        hb = tree_hash(tmp_path / "b")
        # trees identical apart from the differing out= line in the snapshots
        assert _tree_hash_excluding(tmp_path / "a", "synth_config.toml") == \
            _tree_hash_excluding(tmp_path / "b", "synth_config.toml")
        assert ha != hb  # snapshots embed their own out dir


class TestTrackAndEval:
    def test_track_writes_predictions_and_reports_fps(self, pipeline, capsys, tmp_path):
        root, synth_dir, store, model = pipeline
        seq_dir = sorted(synth_dir.iterdir())[0]
        out = tmp_path / "track"
        assert run("track", "--model", str(model), "--frames",
                   str(seq_dir / "annotation.json"), "--out", str(out), "--scales", "3") == 0
        captured = capsys.readouterr().out
        assert "fps" in captured
        preds = [json.loads(l) for l in open(out / "predictions.jsonl")]
        assert len(preds) == 10
        assert {"frame_index", "x", "y", "w", "h"} <= set(preds[0])

    def test_track_scales_3_vs_5_both_run(self, pipeline, tmp_path):
        root, synth_dir, store, model = pipeline
        seq_dir = sorted(synth_dir.iterdir())[0]
        for scales in ("3", "5"):
            out = tmp_path / f"s{scales}"
            assert run("track", "--model", str(model), "--frames",
                       str(seq_dir / "annotation.json"), "--out", str(out),
                       "--scales", scales) == 0

    def test_track_overlays(self, pipeline, tmp_path):
        root, synth_dir, store, model = pipeline
        seq_dir = sorted(synth_dir.iterdir())[0]
        out = tmp_path / "ov"
        assert run("track", "--model", str(model), "--frames",
                   str(seq_dir / "annotation.json"), "--out", str(out), "--scales", "3",
                   "--overlays") == 0
        assert len(list((out / "overlays").glob("*.png"))) == 10

    def test_eval_ope_from_predictions(self, pipeline, tmp_path):
        root, synth_dir, store, model = pipeline
        seq_dir = sorted(synth_dir.iterdir())[0]
        track_out = tmp_path / "track"
        assert run("track", "--model", str(model), "--frames",
                   str(seq_dir / "annotation.json"), "--out", str(track_out),
                   "--scales", "3") == 0
        eval_out = tmp_path / "eval"
        assert run("eval", "--mode", "ope", "--predictions",
                   str(track_out / "predictions.jsonl"), "--ground-truth",
                   str(seq_dir / "annotation.json"), "--out", str(eval_out)) == 0
        metrics = json.loads((eval_out / "metrics.json").read_text())
        assert "auc" in metrics["aggregate"]
        assert (eval_out / "metrics_curve.csv").exists()

    def test_eval_vot_live_model(self, pipeline, tmp_path):
        root, synth_dir, store, model = pipeline
        seq_dir = sorted(synth_dir.iterdir())[0]
        out = tmp_path / "vot"
        assert run("eval", "--mode", "vot", "--model", str(model), "--ground-truth",
                   str(seq_dir / "annotation.json"), "--out", str(out),
                   "--scales", "3") == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert "accuracy" in metrics["aggregate"]
        assert "failures" in metrics["aggregate"]


class TestErrors:
    def test_unknown_subcommand_usage_exit(self):
        assert run("frobnicate") == 2

    def test_unknown_flag_usage_exit(self):
        assert run("synth", "--no-such-flag") == 2

    def test_missing_model_io_exit(self, tmp_path):
        code = run("track", "--model", str(tmp_path / "nope.sfcm"), "--frames",
                   str(tmp_path), "--out", str(tmp_path / "o"), "--init-box", "1,1,5,5")
        assert code == 3

    def test_missing_required_config_exit(self, tmp_path):
        assert run("train", "--out", str(tmp_path)) == 4

    def test_bad_init_box_usage_exit(self, pipeline, tmp_path):
        root, synth_dir, store, model = pipeline
        seq_dir = sorted(synth_dir.iterdir())[0]
        code = run("track", "--model", str(model), "--frames",
                   str(seq_dir / "annotation.json"), "--out", str(tmp_path),
                   "--init-box", "not-a-box")
        assert code == 2

    def test_error_line_is_single_and_prefixed(self, tmp_path, capsys):
        run("train", "--out", str(tmp_path))
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        assert err[0].startswith("error: config: ")


def _tree_hash_excluding(root, *skip) -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file() and path.name not in skip:
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()
