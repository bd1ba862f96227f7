import json
import os

import numpy as np
import pytest

from relreid.cli import main
from relreid.dataio import read_embeddings, write_embeddings


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> extract -> eval, shared across the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    config = str(root / "c.json")
    ckpt = str(root / "m.ckpt")
    with open(config, "w") as fh:
        json.dump({"channels": 32, "embed_dim": 8, "n_k": 3, "n_m": 2,
                   "epochs": 2, "lr": 3e-4}, fh)
    assert main(["synth", "--ids", "4", "--eval-ids", "3", "--imgs", "4",
                 "--channels", "32", "--seed", "7", "--out", data]) == 0
    assert main(["train", "--config", config, "--data", f"{data}/manifest.jsonl",
                 "--out", ckpt]) == 0
    return root, data, config, ckpt


class TestPipeline:
    def test_smoke_exit_codes(self, pipeline):
        root, data, config, ckpt = pipeline
        assert os.path.exists(ckpt)
        assert os.path.exists(ckpt + ".history.json")

    def test_extract_and_eval(self, pipeline, capsys):
        root, data, config, ckpt = pipeline
        q, g = str(root / "q.ride"), str(root / "g.ride")
        report = str(root / "report.json")
        manifest = f"{data}/manifest.jsonl"
        assert main(["extract", "--checkpoint", ckpt, "--data", manifest,
                     "--split", "query", "--out", q]) == 0
        assert main(["extract", "--checkpoint", ckpt, "--data", manifest,
                     "--split", "gallery", "--out", g]) == 0
        matrix, meta = read_embeddings(q)
        assert matrix.shape[1] == 7 * 8
        assert meta["split"] == "query"
        assert meta["config"]["embed_dim"] == 8  # config closure

        assert main(["eval", "--query-emb", q, "--gallery-emb", g,
                     "--out", report]) == 0
        out = capsys.readouterr().out
        assert "mAP" in out
        doc = json.load(open(report))
        assert {"config", "mAP", "cmc", "n_valid_queries"} <= set(doc)
        assert 0.0 <= doc["mAP"] <= 1.0

    def test_eval_dim_mismatch_exits_2(self, pipeline, tmp_path):
        root, data, config, ckpt = pipeline
        q = str(root / "q.ride")
        bad = str(tmp_path / "bad.ride")
        write_embeddings(bad, np.zeros((2, 5), dtype=np.float32),
                         {"ids": ["a", "b"], "person_ids": [1, 2],
                          "camera_ids": [0, 0], "split": "gallery"})
        assert main(["eval", "--query-emb", q, "--gallery-emb", bad]) == 2

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "max rel err" in out
        assert "FAIL" not in out


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag_is_usage_error(self):
        assert main(["synth", "--out", "/tmp/x"]) == 1

    def test_no_subcommand_prints_help(self):
        assert main([]) == 1

    def test_bad_config_is_data_error(self, tmp_path):
        config = tmp_path / "c.json"
        config.write_text('{"nonsense": 1}')
        data = tmp_path / "missing.jsonl"
        assert main(["train", "--config", str(config), "--data", str(data),
                     "--out", str(tmp_path / "m.ckpt")]) == 2

    def test_missing_manifest_is_data_error(self, tmp_path):
        config = tmp_path / "c.json"
        config.write_text("{}")
        assert main(["train", "--config", str(config),
                     "--data", str(tmp_path / "none.jsonl"),
                     "--out", str(tmp_path / "m.ckpt")]) == 2

    def test_synth_collision_is_data_error(self, tmp_path):
        out = str(tmp_path / "d")
        args = ["synth", "--ids", "2", "--eval-ids", "0", "--imgs", "2",
                "--channels", "8", "--out", out]
        assert main(args) == 0
        assert main(args) == 2
        assert main(args + ["--overwrite"]) == 0


class TestAblateCommand:
    def test_emits_table_and_json(self, tmp_path, capsys, monkeypatch):
        # shrink the grid so the CLI test stays quick
        import relreid.evaluation as evaluation

        small = evaluation.default_grid()[:2]
        monkeypatch.setattr(evaluation, "default_grid", lambda: small)
        data = str(tmp_path / "data")
        config = str(tmp_path / "c.json")
        with open(config, "w") as fh:
            json.dump({"channels": 16, "embed_dim": 4, "n_k": 2, "n_m": 2,
                       "epochs": 1, "lr": 3e-4}, fh)
        assert main(["synth", "--ids", "3", "--eval-ids", "2", "--imgs", "2",
                     "--channels", "16", "--out", data]) == 0
        table = str(tmp_path / "table.txt")
        assert main(["ablate", "--config", config,
                     "--data", f"{data}/manifest.jsonl", "--out", table]) == 0
        text = open(table).read()
        assert "F-dim" in text
        doc = json.load(open(table + ".json"))
        assert len(doc["rows"]) == 2
