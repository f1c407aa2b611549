"""Persistent formats: dataset records, checkpoints, configs, manifests.

Dataset, prediction and report files are line-delimited JSON; the order of
records is preserved and files are streamable.  Checkpoints are a small
binary format: magic "E2QR", version, a JSON header naming the tensors, and
raw little-endian buffers, so that save -> load -> forward is bit-exact at
the stored precision.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .docgraph import ArrangedExample, Document, arrange
from .errors import CompatibilityError, ConfigError, DataFormatError
from .model import ModelConfig, QuestionRewriter
from .training import CurriculumConfig

CHECKPOINT_MAGIC = b"E2QR"
CHECKPOINT_VERSION = 1

_RECORD_KEYS = {"id", "hops", "answer", "question", "documents"}
_DOC_KEYS = {"title", "text", "is_answer_doc", "entities"}


# ---------------------------------------------------------------------------
# dataset records


def json_line(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def write_records(path: str | Path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json_line(rec) + "\n")
            n += 1
    return n


def read_records(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON ({exc})")
    return records


def validate_record(rec: dict) -> None:
    missing = _RECORD_KEYS - set(rec)
    if missing:
        raise DataFormatError(
            f"record {rec.get('id', '?')!r} missing keys {sorted(missing)}"
        )
    docs = rec["documents"]
    if not isinstance(docs, list) or not docs:
        raise DataFormatError(f"record {rec['id']!r} has no documents")
    for d in docs:
        if _DOC_KEYS - set(d):
            raise DataFormatError(
                f"record {rec['id']!r}: document missing {sorted(_DOC_KEYS - set(d))}"
            )
    if rec["hops"] != len(docs):
        raise DataFormatError(
            f"record {rec['id']!r}: hops={rec['hops']} but {len(docs)} documents"
        )


def record_documents(rec: dict) -> list[Document]:
    return [
        Document(
            i,
            d["title"].split(),
            d["text"].split(),
            bool(d["is_answer_doc"]),
            frozenset(d["entities"]),
        )
        for i, d in enumerate(rec["documents"])
    ]


def arrange_record(rec: dict) -> dict:
    """Return a copy of the record augmented with its arrangement."""
    validate_record(rec)
    arranged = arrange(record_documents(rec), rec["answer"].split())
    out = dict(rec)
    out["arrangement"] = {
        "order": [d.doc_id for d in arranged.documents],
        "bridges": [sorted(b) for b in arranged.bridges],
    }
    return out


def arranged_example(rec: dict) -> ArrangedExample:
    """Materialize an arranged record for the model pipeline."""
    validate_record(rec)
    if "arrangement" not in rec:
        raise DataFormatError(
            f"record {rec['id']!r} is not arranged; run the arrange command first"
        )
    docs = record_documents(rec)
    order = rec["arrangement"]["order"]
    if sorted(order) != list(range(len(docs))):
        raise DataFormatError(f"record {rec['id']!r}: bad arrangement order {order}")
    bridges = [frozenset(b) for b in rec["arrangement"]["bridges"]]
    if len(bridges) != len(docs) - 1:
        raise DataFormatError(
            f"record {rec['id']!r}: {len(bridges)} bridge sets for {len(docs)} docs"
        )
    return ArrangedExample(
        answer=rec["answer"].split(),
        documents=[docs[i] for i in order],
        bridges=bridges,
        gold_question=rec["question"].split(),
        hops=len(docs),
        example_id=rec["id"],
        reference_intermediates=[
            q.split() for q in rec.get("reference_intermediates", [])
        ],
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str | Path,
    model: QuestionRewriter,
    vocab_sha256: str,
    trainer_state: dict | None = None,
) -> None:
    float_size = model.dtype.itemsize
    names = list(model.params)
    header = {
        "config": model.cfg.to_dict(),
        "vocab_sha256": vocab_sha256,
        "tensors": [
            {"name": n, "shape": list(model.params[n].data.shape)} for n in names
        ],
    }
    extra_buffers: list[np.ndarray] = []
    if trainer_state is not None:
        header["trainer"] = {
            "step": trainer_state["step"],
            "tensors": [
                {"name": n, "shape": list(a.shape)}
                for n, a in trainer_state["tensors"]
            ],
        }
        extra_buffers = [a for _, a in trainer_state["tensors"]]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    dtype = np.dtype(f"<f{float_size}")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HBB", CHECKPOINT_VERSION, float_size,
                             1 if trainer_state else 0))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype=dtype).tobytes())
        for arr in extra_buffers:
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, str, dict[str, np.ndarray], dict | None]:
    """Returns (config, vocab hash, parameter arrays, trainer state or None)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    version, float_size, has_trainer = struct.unpack("<HBB", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    if float_size not in (4, 8):
        raise DataFormatError(f"{path}: bad float size {float_size}")
    (blob_len,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + blob_len].decode("utf-8"))
    dtype = np.dtype(f"<f{float_size}")
    offset = 12 + blob_len
    arrays: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * float_size
        arrays[spec["name"]] = np.frombuffer(raw[offset:end], dtype=dtype).reshape(shape).copy()
        offset = end
    trainer = None
    if has_trainer:
        tensors = []
        for spec in header["trainer"]["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + count * float_size
            tensors.append(
                (spec["name"], np.frombuffer(raw[offset:end], dtype=dtype).reshape(shape).copy())
            )
            offset = end
        trainer = {"step": header["trainer"]["step"], "tensors": tensors}
    cfg = ModelConfig.from_dict(header["config"])
    return cfg, header["vocab_sha256"], arrays, trainer


def load_model(
    path: str | Path,
    expect_vocab_sha256: str | None = None,
    dtype=None,
    mode_overrides: dict | None = None,
) -> QuestionRewriter:
    cfg, vhash, arrays, _ = load_checkpoint(path)
    if expect_vocab_sha256 is not None and vhash != expect_vocab_sha256:
        raise CompatibilityError(
            f"checkpoint was trained with vocabulary {vhash[:12]}..., "
            f"got {expect_vocab_sha256[:12]}..."
        )
    if mode_overrides:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), **mode_overrides})
    stored = np.dtype(f"<f{next(iter(arrays.values())).itemsize}") if arrays else np.float64
    model = QuestionRewriter(cfg, dtype=dtype or stored)
    model.load_param_arrays(arrays)
    return model


# ---------------------------------------------------------------------------
# configuration files


MODEL_KEYS = set(ModelConfig(vocab_size=1).to_dict())
TRAIN_KEYS = set(CurriculumConfig().to_dict())


def load_config(path: str | Path) -> tuple[dict, dict]:
    """Flat key-value file split into model and trainer overrides.

    Unknown keys are errors so that experiment typos surface immediately.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a flat JSON object")
    model_kw, train_kw = {}, {}
    for key, value in data.items():
        if key in MODEL_KEYS:
            model_kw[key] = value
        elif key in TRAIN_KEYS:
            train_kw[key] = value
        else:
            known = sorted(MODEL_KEYS | TRAIN_KEYS)
            raise ConfigError(f"{path}: unknown config key {key!r}; known keys: {known}")
    return model_kw, train_kw


# ---------------------------------------------------------------------------
# manifests


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(
    out_dir: str | Path,
    command: str,
    config_snapshot: dict,
    seed: int | None,
    inputs: dict[str, str | Path],
    outputs: Sequence[str],
) -> Path:
    manifest = {
        "command": command,
        "config": config_snapshot,
        "seed": seed,
        "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items())},
        "outputs": sorted(outputs),
    }
    path = Path(out_dir) / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
