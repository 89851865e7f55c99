import json
from pathlib import Path

import numpy as np
import pytest

from safepool.cli import main
from safepool.store import write_tensor

SCHEMA_PATH = Path(__file__).resolve().parents[1] / "schemas" / "result.schema.json"


def check_schema(out_dir):
    jsonschema = pytest.importorskip("jsonschema")
    doc = json.loads((Path(out_dir) / "result.json").read_text())
    jsonschema.validate(doc, json.loads(SCHEMA_PATH.read_text()))
    return doc


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("clidata") / "set"
    code = main([
        "gen-synth", "--classes", "4", "--pool-per-class", "8",
        "--test-per-class", "6", "--height", "5", "--width", "5",
        "--channels", "32", "--embed-dim", "16", "--parts", "8",
        "--noise", "0.5", "--seed", "11", "--out", str(out),
    ])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(cli_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("clitrain") / "run"
    code = main([
        "train", "--manifest", str(cli_dataset / "manifest.json"),
        "--k", "4", "--folds", "1,2", "--iterations", "200",
        "--eval-every", "50", "--lr", "1e-4", "--wd", "0.0",
        "--out", str(out),
    ])
    assert code == 0
    return out


class TestGenSynth:
    def test_result_document(self, cli_dataset):
        doc = check_schema(cli_dataset)
        assert doc["kind"] == "gen-synth"
        assert doc["classes"] == 4
        assert 0.0 <= doc["zero_shot_accuracy"] <= 1.0

    def test_idempotent_regeneration(self, cli_dataset, tmp_path):
        out2 = tmp_path / "again"
        main([
            "gen-synth", "--classes", "4", "--pool-per-class", "8",
            "--test-per-class", "6", "--height", "5", "--width", "5",
            "--channels", "32", "--embed-dim", "16", "--parts", "8",
            "--noise", "0.5", "--seed", "11", "--out", str(out2),
        ])
        a = json.loads((cli_dataset / "result.json").read_text())
        b = json.loads((out2 / "result.json").read_text())
        assert a["zero_shot_accuracy"] == b["zero_shot_accuracy"]


class TestTrain:
    def test_result_document(self, trained_dir):
        doc = check_schema(trained_dir)
        assert doc["kind"] == "train"
        assert [f["fold"] for f in doc["folds"]] == [1, 2]
        assert doc["mean_test_accuracy"] == pytest.approx(
            np.mean([f["test_accuracy"] for f in doc["folds"]]))

    def test_checkpoints_written(self, trained_dir):
        for fold in (1, 2):
            ckpt = trained_dir / f"fold{fold}" / "attnpool_f"
            assert (ckpt / "meta.json").exists()
            assert (trained_dir / f"fold{fold}" / "report.json").exists()

    def test_zero_iterations_keeps_zero_shot(self, cli_dataset, tmp_path):
        out = tmp_path / "noop"
        code = main([
            "train", "--manifest", str(cli_dataset / "manifest.json"),
            "--k", "2", "--folds", "1", "--iterations", "0",
            "--out", str(out),
        ])
        assert code == 0
        doc = check_schema(out)
        gen = json.loads((cli_dataset / "result.json").read_text())
        assert doc["folds"][0]["test_accuracy"] == pytest.approx(
            gen["zero_shot_accuracy"])


class TestEval:
    def test_zero_shot_matches_pinned(self, cli_dataset, tmp_path):
        out = tmp_path / "zs"
        code = main([
            "eval", "--manifest", str(cli_dataset / "manifest.json"),
            "--zero-shot", "--out", str(out),
        ])
        assert code == 0
        doc = check_schema(out)
        gen = json.loads((cli_dataset / "result.json").read_text())
        assert doc["accuracy"] == pytest.approx(gen["zero_shot_accuracy"])
        assert Path(doc["predictions_csv"]).exists()

    def test_checkpoint_eval(self, cli_dataset, trained_dir, tmp_path):
        out = tmp_path / "ck"
        code = main([
            "eval", "--manifest", str(cli_dataset / "manifest.json"),
            "--checkpoint", str(trained_dir / "fold1" / "attnpool_f"),
            "--out", str(out),
        ])
        assert code == 0
        doc = check_schema(out)
        train_doc = json.loads((trained_dir / "result.json").read_text())
        assert doc["accuracy"] == pytest.approx(
            train_doc["folds"][0]["test_accuracy"])

    def test_requires_checkpoint_or_zero_shot(self, cli_dataset, tmp_path):
        code = main([
            "eval", "--manifest", str(cli_dataset / "manifest.json"),
            "--out", str(tmp_path / "bad"),
        ])
        assert code == 2


class TestCache:
    def test_end_to_end(self, cli_dataset, trained_dir, tmp_path):
        out = tmp_path / "cache"
        code = main([
            "cache", "--manifest", str(cli_dataset / "manifest.json"),
            "--train-dir", str(trained_dir), "--k", "4",
            "--folds", "1,2", "--out", str(out),
        ])
        assert code == 0
        doc = check_schema(out)
        assert doc["mode"] == "blended"
        for fold in doc["folds"]:
            assert fold["alpha"] in (0.5, 1.0, 2.0, 5.0)
            assert fold["gamma"] in (1.0, 3.0, 5.5, 10.0)
            assert (out / f"fold{fold['fold']}" / "cache"
                    / "keys.tf").exists()


class TestCorrespond:
    def test_self_match(self, tmp_path):
        rng = np.random.default_rng(0)
        grid = rng.standard_normal((4, 4, 8))
        src = tmp_path / "src.tf"
        write_tensor(src, grid)
        out = tmp_path / "match"
        code = main([
            "correspond", "--source", str(src), "--target", str(src),
            "--point", "2,1", "--out", str(out),
        ])
        assert code == 0
        doc = check_schema(out)
        assert doc["match"] == {"x": 2, "y": 1}
        assert (out / "heatmap.pgm").exists()
        assert (out / "heatmap.csv").exists()

    def test_upsample_flag(self, tmp_path):
        rng = np.random.default_rng(1)
        src = tmp_path / "s.tf"
        write_tensor(src, rng.standard_normal((3, 3, 4)))
        code = main([
            "correspond", "--source", str(src), "--target", str(src),
            "--point", "5,5", "--upsample", "9", "9",
            "--out", str(tmp_path / "up"),
        ])
        assert code == 0
        doc = check_schema(tmp_path / "up")
        assert doc["match"] == {"x": 5, "y": 5}

    def test_rank_mismatch_is_data_error(self, tmp_path):
        bad = tmp_path / "flat.tf"
        write_tensor(bad, np.ones((4, 4)))
        code = main([
            "correspond", "--source", str(bad), "--target", str(bad),
            "--point", "0,0", "--out", str(tmp_path / "x"),
        ])
        assert code == 3


class TestReport:
    def test_aggregates(self, cli_dataset, trained_dir, tmp_path):
        out = tmp_path / "rep"
        code = main([
            "report", "--results-dir", str(trained_dir), "--out", str(out),
        ])
        assert code == 0
        doc = check_schema(out)
        kinds = {e["kind"] for e in doc["results"]}
        assert "train" in kinds

    def test_empty_dir_is_data_error(self, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        code = main([
            "report", "--results-dir", str(empty),
            "--out", str(tmp_path / "r"),
        ])
        assert code == 3


class TestErrorCodes:
    def test_missing_manifest(self, tmp_path):
        code = main([
            "eval", "--manifest", str(tmp_path / "nope.json"),
            "--zero-shot", "--out", str(tmp_path / "o"),
        ])
        assert code == 3

    def test_bad_fold_list(self, cli_dataset, tmp_path):
        code = main([
            "train", "--manifest", str(cli_dataset / "manifest.json"),
            "--k", "2", "--folds", "a,b", "--iterations", "0",
            "--out", str(tmp_path / "o"),
        ])
        assert code == 2

    def test_oversized_k(self, cli_dataset, tmp_path):
        code = main([
            "train", "--manifest", str(cli_dataset / "manifest.json"),
            "--k", "50", "--folds", "1", "--iterations", "0",
            "--out", str(tmp_path / "o"),
        ])
        assert code in (2, 3)
