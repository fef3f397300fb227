"""Binary checkpoint format.

Layout::

    b"IMITLAB-CKPT\\n"            magic
    <u64 little-endian>          header length in bytes
    <header>                     UTF-8 JSON, keys sorted
    <payload>                    float64 little-endian arrays, back to back

The header carries the format version, architecture, dims, vocabulary,
training step, seed, an index of ``{name, shape, offset}`` entries and the
SHA-256 of the payload. Optimizer moments are stored as arrays named
``opt.m/<param>`` and ``opt.v/<param>``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .core.optim import OptimizerState
from .envs import Vocabulary
from .policy import PolicyModel, SeqNet

MAGIC = b"IMITLAB-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: SeqNet
    step: int = 0
    seed: int = 0
    optimizer: OptimizerState | None = None
    extra: dict = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    arrays: list[tuple[str, np.ndarray]] = sorted(model.state_dict().items())
    opt_meta = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt_meta = {
            "base_rate": o.base_rate, "warmup_steps": o.warmup_steps, "beta1": o.beta1,
            "beta2": o.beta2, "eps": o.eps, "weight_decay": o.weight_decay,
            "step_count": o.step_count,
        }
        arrays += [(f"opt.m/{k}", v) for k, v in sorted(o.m.items())]
        arrays += [(f"opt.v/{k}", v) for k, v in sorted(o.v.items())]

    index, chunks, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    vocab = getattr(model, "vocab", None)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": model.arch,
        "kind": "policy" if isinstance(model, PolicyModel) else "scalar",
        "dims": model.dims(),
        "vocab": None if vocab is None else {
            "tokens": list(vocab.tokens), "pad_id": vocab.pad_id,
            "bos_id": vocab.bos_id, "eos_id": vocab.eos_id,
        },
        "model_seed": model.seed,
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "optimizer": opt_meta,
        "extra": ckpt.extra,
        "arrays": index,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def decode(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError("truncated checkpoint: missing header length")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + hlen:
        raise CheckpointError("truncated checkpoint: header cut short")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}; "
                              f"this build reads version {FORMAT_VERSION}")
    if header.get("architecture") != SeqNet.arch:
        raise CheckpointError(f"unknown architecture {header.get('architecture')!r}")
    payload = blob[pos + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"truncated checkpoint: payload has {len(payload)} bytes, "
                              f"header promises {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch")

    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        raw = payload[entry["offset"]:entry["offset"] + 8 * n]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)

    d = header["dims"]
    common = dict(embed_dim=d["embed_dim"], hidden_dim=d["hidden_dim"], n_layers=d["n_layers"],
                  max_context=d["max_context"], seed=header["model_seed"])
    if header["kind"] == "policy":
        v = header["vocab"]
        vocab = Vocabulary(tuple(v["tokens"]), v["pad_id"], v["bos_id"], v["eos_id"])
        model: SeqNet = PolicyModel(vocab, **common)
    else:
        model = SeqNet(d["vocab_size"], d["out_dim"], **common)
    model.load_state_dict({k: a for k, a in arrays.items() if not k.startswith("opt.")})

    opt = None
    if header["optimizer"] is not None:
        opt = OptimizerState(**header["optimizer"])
        opt.m = {k[len("opt.m/"):]: a for k, a in arrays.items() if k.startswith("opt.m/")}
        opt.v = {k[len("opt.v/"):]: a for k, a in arrays.items() if k.startswith("opt.v/")}
    return Checkpoint(model, header["step"], header["seed"], opt, header["extra"])


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    """Write atomically: a partial file never replaces an existing one."""
    blob = encode(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
