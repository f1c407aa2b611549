import json


import pytest

from qrewrite import dataio
from qrewrite.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    """A small arranged dataset shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli-data")
    assert run("gen-data", "--out", root, "--hops", "1,2", "--train", "30",
               "--valid", "6", "--test", "6", "--entities", "30", "--seed", "3") == 0
    for split in ("train", "valid", "test"):
        src = root / f"{split}.jsonl"
        dst = root / f"{split}.arr.jsonl"
        assert run("arrange", "--in", src, "--out", dst) == 0
        dst.replace(src)
    return root


@pytest.fixture(scope="module")
def train_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-run")
    cfg = out / "config.json"
    cfg.write_text(json.dumps({
        "d_model": 16, "n_heads": 2, "d_ff": 24,
        "n_enc_layers": 1, "n_dec_layers": 1,
        "lr_alpha": 1e-3, "warmup_steps": 10, "batch_size": 8,
        "epochs_per_main_complexity": 1, "curriculum": "adaptive",
        "val_max_examples": 4, "seed": 5,
    }))
    assert run("train", "--config", cfg, "--data", data_dir, "--out", out) == 0
    return out


class TestGenData:
    def test_outputs_present(self, data_dir):
        for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt",
                     "manifest-gen-data.json"):
            assert (data_dir / name).exists()

    def test_counts(self, data_dir):
        assert len(dataio.read_records(data_dir / "train.jsonl")) == 60
        assert len(dataio.read_records(data_dir / "test.jsonl")) == 12

    def test_regeneration_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("gen-data", "--out", out, "--hops", "1", "--train", "5",
                       "--valid", "2", "--test", "2", "--entities", "20",
                       "--seed", "9") == 0
        for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestArrange:
    def test_bad_record_skipped_with_summary(self, tmp_path, capsys):
        rec = {
            "id": "broken", "hops": 2, "answer": "a",
            "question": "q ?",
            "documents": [
                {"title": "t", "text": "alpha beta", "is_answer_doc": True,
                 "entities": ["alpha"]},
                {"title": "u", "text": "gamma delta", "is_answer_doc": False,
                 "entities": ["gamma"]},
            ],
        }
        src = tmp_path / "in.jsonl"
        dst = tmp_path / "out.jsonl"
        dataio.write_records(src, [rec])
        assert run("arrange", "--in", src, "--out", dst) == 0
        assert dataio.read_records(dst) == []
        assert "skipped 1" in capsys.readouterr().out

    def test_empty_input(self, tmp_path, capsys):
        src = tmp_path / "in.jsonl"
        src.write_text("")
        dst = tmp_path / "out.jsonl"
        assert run("arrange", "--in", src, "--out", dst) == 0
        assert "arranged 0" in capsys.readouterr().out

    def test_missing_file_is_data_error(self, tmp_path):
        assert run("arrange", "--in", tmp_path / "nope.jsonl",
                   "--out", tmp_path / "o.jsonl") == 2


class TestTrain:
    def test_artifacts(self, train_dir):
        for name in ("checkpoint-H1.bin", "checkpoint-H2.bin",
                     "checkpoint-final.bin", "metrics.jsonl",
                     "manifest-train.json"):
            assert (train_dir / name).exists()

    def test_metrics_log_structure(self, train_dir):
        records = dataio.read_records(train_dir / "metrics.jsonl")
        validations = [r for r in records if r["event"] == "validation"]
        assert validations
        for r in validations:
            assert {"step", "H", "train_loss", "val_loss",
                    "rouge_l", "exact_match"} <= set(r)

    def test_unknown_config_key_is_error(self, data_dir, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"learning_rate": 1e-3}))
        assert run("train", "--config", cfg, "--data", data_dir,
                   "--out", tmp_path) == 2

    def test_vocab_size_mismatch_is_error(self, data_dir, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"vocab_size": 5}))
        assert run("train", "--config", cfg, "--data", data_dir,
                   "--out", tmp_path) == 2


class TestGenerate:
    def test_predictions_aligned(self, data_dir, train_dir, tmp_path):
        out = tmp_path / "pred.jsonl"
        assert run("generate", "--checkpoint", train_dir / "checkpoint-final.bin",
                   "--data", data_dir / "test.jsonl",
                   "--vocab", data_dir / "vocab.txt", "--out", out) == 0
        preds = dataio.read_records(out)
        golds = dataio.read_records(data_dir / "test.jsonl")
        assert [p["id"] for p in preds] == [g["id"] for g in golds]
        assert all("intermediates" not in p for p in preds)

    def test_emit_intermediates(self, data_dir, train_dir, tmp_path):
        out = tmp_path / "pred.jsonl"
        assert run("generate", "--checkpoint", train_dir / "checkpoint-final.bin",
                   "--data", data_dir / "test.jsonl",
                   "--vocab", data_dir / "vocab.txt", "--out", out,
                   "--emit-intermediates") == 0
        for p in dataio.read_records(out):
            assert len(p["intermediates"]) == p["hops"] - 1

    def test_wrong_vocab_rejected(self, data_dir, train_dir, tmp_path):
        other = tmp_path / "other-vocab.txt"
        vocab_lines = (data_dir / "vocab.txt").read_text().splitlines()
        other.write_text("\n".join(vocab_lines + ["extra_token"]) + "\n")
        assert run("generate", "--checkpoint", train_dir / "checkpoint-final.bin",
                   "--data", data_dir / "test.jsonl",
                   "--vocab", other, "--out", tmp_path / "p.jsonl") == 2

    def test_ablate_flags_accepted(self, data_dir, train_dir, tmp_path):
        for mode in ("sa", "ca"):
            assert run("generate", "--checkpoint", train_dir / "checkpoint-final.bin",
                       "--data", data_dir / "test.jsonl",
                       "--vocab", data_dir / "vocab.txt",
                       "--out", tmp_path / f"p-{mode}.jsonl",
                       "--ablate", mode) == 0


class TestEvaluate:
    def _gold_as_predictions(self, golds):
        return [
            {"id": g["id"], "hops": g["hops"], "prediction": g["question"]}
            for g in golds
        ]

    def test_perfect_predictions(self, data_dir, tmp_path, capsys):
        golds = dataio.read_records(data_dir / "test.jsonl")
        pred = tmp_path / "pred.jsonl"
        dataio.write_records(pred, self._gold_as_predictions(golds))
        report = tmp_path / "report.jsonl"
        assert run("evaluate", "--pred", pred, "--gold", data_dir / "test.jsonl",
                   "--out", report) == 0
        lines = dataio.read_records(report)
        summary = lines[-1]
        assert summary["type"] == "summary"
        assert summary["overall"]["rouge_l"] == pytest.approx(1.0)
        assert summary["overall"]["exact_match"] == pytest.approx(1.0)

    def test_hop_grouping_sums_to_total(self, data_dir, tmp_path):
        golds = dataio.read_records(data_dir / "test.jsonl")
        pred = tmp_path / "pred.jsonl"
        dataio.write_records(pred, self._gold_as_predictions(golds))
        report = tmp_path / "report.jsonl"
        run("evaluate", "--pred", pred, "--gold", data_dir / "test.jsonl",
            "--out", report)
        summary = dataio.read_records(report)[-1]
        assert sum(v["count"] for v in summary["per_hop"].values()) == len(golds)

    def test_id_mismatch_is_alignment_error(self, data_dir, tmp_path):
        golds = dataio.read_records(data_dir / "test.jsonl")
        preds = self._gold_as_predictions(golds)[:-1]
        pred = tmp_path / "pred.jsonl"
        dataio.write_records(pred, preds)
        assert run("evaluate", "--pred", pred, "--gold", data_dir / "test.jsonl",
                   "--out", tmp_path / "r.jsonl") == 2


class TestExitCodes:
    def test_usage_error(self):
        assert run("train") == 1
        assert run("no-such-command") == 1

    def test_grad_check_wrong_precision_is_usage_error(self):
        assert run("grad-check", "--precision", "f32") == 1


class TestDeterminism:
    def test_train_twice_byte_identical(self, data_dir, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "d_model": 16, "n_heads": 2, "d_ff": 24,
            "n_enc_layers": 1, "n_dec_layers": 1,
            "lr_alpha": 1e-3, "warmup_steps": 5, "batch_size": 8,
            "epochs_per_main_complexity": 1, "val_max_examples": 4, "seed": 13,
        }))
        outs = []
        for name in ("run-a", "run-b"):
            out = tmp_path / name
            assert run("train", "--config", cfg, "--data", data_dir,
                       "--out", out) == 0
            outs.append(out)
        a, b = outs
        for name in ("metrics.jsonl", "checkpoint-H1.bin", "checkpoint-H2.bin",
                     "checkpoint-final.bin"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
