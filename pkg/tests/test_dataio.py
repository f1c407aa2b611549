import json

import numpy as np
import pytest

from qrewrite import dataio
from qrewrite.errors import CompatibilityError, ConfigError, DataFormatError
from qrewrite.model import ModelConfig, QuestionRewriter, StepInput


def sample_record(hops=2):
    docs = [
        {"title": "film_3", "text": "person_7 directed film_3 .",
         "is_answer_doc": True, "entities": ["person_7", "film_3"]},
        {"title": "person_9", "text": "person_9 starred in film_3 .",
         "is_answer_doc": False, "entities": ["film_3", "person_9"]},
    ][:hops]
    return {
        "id": "r1",
        "hops": hops,
        "answer": "person_7",
        "question": "who directed the film starring person_9 ?",
        "documents": docs,
        "reference_intermediates": ["who directed film_3 ?"] if hops > 1 else [],
    }


class TestRecords:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "d.jsonl"
        recs = [sample_record(), {**sample_record(), "id": "r2"}]
        dataio.write_records(path, recs)
        assert dataio.read_records(path) == recs

    def test_invalid_json_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a"}\nnot json\n')
        with pytest.raises(DataFormatError, match="2"):
            dataio.read_records(path)

    def test_hops_document_mismatch(self):
        rec = sample_record()
        rec["hops"] = 3
        with pytest.raises(DataFormatError, match="hops"):
            dataio.validate_record(rec)

    def test_arrange_record_and_materialize(self):
        rec = dataio.arrange_record(sample_record())
        assert rec["arrangement"]["order"] == [0, 1]
        assert rec["arrangement"]["bridges"] == [["film_3"]]
        ex = dataio.arranged_example(rec)
        assert ex.hops == 2
        assert ex.documents[0].is_answer_doc
        assert ex.bridges == [frozenset({"film_3"})]
        assert ex.gold_question[0] == "who"

    def test_unarranged_record_rejected(self):
        with pytest.raises(DataFormatError, match="arrange"):
            dataio.arranged_example(sample_record())

    def test_empty_file_roundtrip(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        dataio.write_records(path, [])
        assert dataio.read_records(path) == []


class TestCheckpoints:
    def _model(self, dtype=np.float64):
        cfg = ModelConfig(vocab_size=12, d_model=8, n_heads=2, d_ff=16,
                          n_enc_layers=1, n_dec_layers=1, max_len=16)
        return QuestionRewriter(cfg, rng=np.random.default_rng(3), dtype=dtype)

    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_roundtrip_bit_exact(self, tmp_path, dtype):
        m = self._model(dtype)
        path = tmp_path / "ck.bin"
        dataio.save_checkpoint(path, m, vocab_sha256="ab" * 32)
        cfg, vhash, arrays, trainer = dataio.load_checkpoint(path)
        assert cfg == m.cfg
        assert vhash == "ab" * 32
        assert trainer is None
        for name, arr in arrays.items():
            assert arr.dtype.itemsize == np.dtype(dtype).itemsize
            np.testing.assert_array_equal(arr, m.params[name].data)

    def test_forward_identical_after_roundtrip(self, tmp_path):
        m = self._model()
        path = tmp_path / "ck.bin"
        dataio.save_checkpoint(path, m, vocab_sha256="00" * 32)
        m2 = dataio.load_model(path)
        steps = [StepInput([3, 4, 5], 1)]
        a = m.rewrite_forward(steps, 1, 2, gold_final=[6, 7]).final_logits.data
        b = m2.rewrite_forward(steps, 1, 2, gold_final=[6, 7]).final_logits.data
        np.testing.assert_array_equal(a, b)

    def test_save_is_deterministic(self, tmp_path):
        m = self._model()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        dataio.save_checkpoint(p1, m, vocab_sha256="00" * 32)
        dataio.save_checkpoint(p2, m, vocab_sha256="00" * 32)
        assert p1.read_bytes() == p2.read_bytes()

    def test_vocab_hash_mismatch(self, tmp_path):
        m = self._model()
        path = tmp_path / "ck.bin"
        dataio.save_checkpoint(path, m, vocab_sha256="11" * 32)
        with pytest.raises(CompatibilityError):
            dataio.load_model(path, expect_vocab_sha256="22" * 32)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataFormatError, match="magic"):
            dataio.load_checkpoint(path)

    def test_trainer_state_roundtrip(self, tmp_path):
        m = self._model()
        path = tmp_path / "ck.bin"
        state = {
            "step": 42,
            "tensors": [("m.emb", np.ones((3, 2))), ("v.emb", np.zeros(4))],
        }
        dataio.save_checkpoint(path, m, vocab_sha256="00" * 32, trainer_state=state)
        _, _, _, trainer = dataio.load_checkpoint(path)
        assert trainer["step"] == 42
        names = [n for n, _ in trainer["tensors"]]
        assert names == ["m.emb", "v.emb"]
        np.testing.assert_array_equal(trainer["tensors"][0][1], np.ones((3, 2)))

    def test_mode_overrides_on_load(self, tmp_path):
        m = self._model()
        path = tmp_path / "ck.bin"
        dataio.save_checkpoint(path, m, vocab_sha256="00" * 32)
        m2 = dataio.load_model(path, mode_overrides={"mode_accumulated_sa": False})
        assert not m2.cfg.mode_accumulated_sa
        assert m2.cfg.mode_accumulated_ca


class TestConfigFile:
    def test_split_and_unknown_keys(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"d_model": 32, "lr_alpha": 1e-3}))
        model_kw, train_kw = dataio.load_config(path)
        assert model_kw == {"d_model": 32}
        assert train_kw == {"lr_alpha": 1e-3}
        path.write_text(json.dumps({"d_modle": 32}))
        with pytest.raises(ConfigError, match="d_modle"):
            dataio.load_config(path)

    def test_non_object_config(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            dataio.load_config(path)


class TestManifest:
    def test_manifest_contents(self, tmp_path):
        data = tmp_path / "in.jsonl"
        dataio.write_records(data, [sample_record()])
        path = dataio.write_manifest(
            tmp_path, "train", {"k": 1}, 7, {"data": data}, ["out.bin"]
        )
        manifest = json.loads(path.read_text())
        assert manifest["command"] == "train"
        assert manifest["seed"] == 7
        assert manifest["inputs"]["data"] == dataio.sha256_file(data)
        assert manifest["outputs"] == ["out.bin"]
