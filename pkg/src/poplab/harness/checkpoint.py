"""Self-describing model checkpoints.

One JSON document per checkpoint: format version, training provenance
(stage name + parent checkpoint hash), the model configuration, and
every parameter array with explicit dtype/shape, base64-encoded in
little-endian byte order. A sha256 over the canonical serialization is
stored alongside and re-verified on load, so a checkpoint can neither
be silently truncated nor bit-rotted.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from ..errors import CheckpointVersionError, ContractViolation, PopError

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    format_version: int
    stage: str
    parent_hash: str | None
    model_config: dict
    seed_record: dict
    params: dict[str, np.ndarray]
    content_hash: str = ""
    extra: dict = field(default_factory=dict)


def _encode_params(params: dict[str, np.ndarray]) -> dict:
    out = {}
    for name, arr in params.items():
        a = np.asarray(arr, dtype=np.float64)
        out[name] = {
            "dtype": "float64",
            "shape": list(a.shape),
            "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii"),
        }
    return out


def _decode_params(blob: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, rec in blob.items():
        if rec.get("dtype") != "float64":
            raise ContractViolation(
                f"parameter {name!r} has unsupported dtype {rec.get('dtype')!r}"
            )
        raw = base64.b64decode(rec["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        out[name] = arr.reshape(rec["shape"]).copy()
    return out


def _payload_dict(ckpt: Checkpoint) -> dict:
    return {
        "format_version": ckpt.format_version,
        "stage": ckpt.stage,
        "parent_hash": ckpt.parent_hash,
        "model_config": ckpt.model_config,
        "seed_record": ckpt.seed_record,
        "extra": ckpt.extra,
        "params": _encode_params(ckpt.params),
    }


def _hash_payload(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def make_checkpoint(params: dict[str, np.ndarray], meta: dict) -> Checkpoint:
    """Assemble an in-memory checkpoint; ``meta`` wants keys
    stage / parent_hash / model_config / seed_record (extra is free-form)."""
    ckpt = Checkpoint(
        format_version=CHECKPOINT_VERSION,
        stage=meta.get("stage", "teacher"),
        parent_hash=meta.get("parent_hash"),
        model_config=meta.get("model_config", {}),
        seed_record=meta.get("seed_record", {}),
        params={k: np.asarray(v, dtype=np.float64) for k, v in params.items()},
        extra=meta.get("extra", {}),
    )
    ckpt.content_hash = _hash_payload(_payload_dict(ckpt))
    return ckpt


def save_checkpoint(params, meta: dict | Checkpoint, path: str) -> Checkpoint:
    """Write atomically (temp file + rename); returns the Checkpoint."""
    if isinstance(meta, Checkpoint):
        ckpt = meta
    else:
        ckpt = make_checkpoint(params, meta)
    payload = _payload_dict(ckpt)
    doc = dict(payload)
    doc["content_hash"] = ckpt.content_hash
    blob = json.dumps(doc, separators=(",", ":"))
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return ckpt


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise PopError(f"unreadable checkpoint {path!r}: {e}") from e

    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(found=version,
                                     supported=CHECKPOINT_VERSION)

    ckpt = Checkpoint(
        format_version=version,
        stage=doc["stage"],
        parent_hash=doc.get("parent_hash"),
        model_config=doc.get("model_config", {}),
        seed_record=doc.get("seed_record", {}),
        params=_decode_params(doc.get("params", {})),
        extra=doc.get("extra", {}),
    )
    ckpt.content_hash = _hash_payload(_payload_dict(ckpt))
    stored = doc.get("content_hash")
    if stored != ckpt.content_hash:
        raise PopError(
            f"checkpoint {path!r} failed its integrity check "
            f"(stored {stored!r}, recomputed {ckpt.content_hash!r})"
        )
    return ckpt
