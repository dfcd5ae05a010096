"""Binary checkpoint format.

Layout (little-endian)::

    b"IATL"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 n_records
    n_records x { u32 name_len, name, u32 rank, rank x u64 extent, float64 data }

The header carries the model config, training config, optimizer
hyperparameters, PRNG state, step and vocabulary hash. Tensor records are
``param.<name>``, ``opt.m.<name>`` and ``opt.v.<name>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import ModelConfig
from .errors import DataError

MAGIC = b"IATL"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_state: object = None  # training.OptimizerState
    rng_state: dict | None = None
    step: int = 0
    train_config: dict = field(default_factory=dict)
    vocab_hash: str = ""


def _to_json(obj):
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, dict):
        return {k: _to_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_json(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _from_json(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_json(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_json(v) for v in obj]
    return obj


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")  # keeps rank 0, unlike ascontiguousarray
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    for n in arr.shape:
        fh.write(struct.pack("<Q", n))
    fh.write(arr.tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opt = ckpt.opt_state
    header = {
        "config": ckpt.config.to_dict(),
        "train_config": ckpt.train_config,
        "optimizer": opt.hyper() if opt is not None else None,
        "rng_state": _to_json(ckpt.rng_state),
        "step": ckpt.step,
        "vocab_hash": ckpt.vocab_hash,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    records = [(f"param.{k}", v) for k, v in ckpt.params.items()]
    if opt is not None:
        records += [(f"opt.m.{k}", v) for k, v in opt.m.items()]
        records += [(f"opt.v.{k}", v) for k, v in opt.v.items()]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_tensor(fh, name, arr)
    tmp.replace(path)
    return path


def _read(fh, fmt: str):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise DataError("truncated checkpoint")
    return struct.unpack(fmt, buf)


def load_checkpoint(path, vocab_hash: str | None = None) -> Checkpoint:
    """Read a checkpoint; with ``vocab_hash`` given, refuse a mismatched vocabulary."""
    from .training import OptimizerState

    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc.strerror}") from None
    with fh:
        if fh.read(4) != MAGIC:
            raise DataError(f"{path} is not an IATL checkpoint")
        version, hlen = _read(fh, "<II")
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (count,) = _read(fh, "<I")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = _read(fh, "<I")
            name = fh.read(nlen).decode("utf-8")
            (rank,) = _read(fh, "<I")
            shape = _read(fh, f"<{rank}Q") if rank else ()
            n = int(np.prod(shape)) if rank else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise DataError(f"truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    stored_hash = header.get("vocab_hash", "")
    if vocab_hash is not None and stored_hash and stored_hash != vocab_hash:
        raise DataError(f"vocabulary hash mismatch: checkpoint {stored_hash[:12]}, given {vocab_hash[:12]}")
    opt = None
    if header.get("optimizer") is not None:
        h = header["optimizer"]
        opt = OptimizerState(lr=h["lr"], betas=tuple(h["betas"]), eps=h["eps"],
                             weight_decay=h["weight_decay"], step=h["step"])
    params = {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            params[name[6:]] = arr
        elif name.startswith("opt.m.") and opt is not None:
            opt.m[name[6:]] = arr
        elif name.startswith("opt.v.") and opt is not None:
            opt.v[name[6:]] = arr
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        opt_state=opt,
        rng_state=_from_json(header.get("rng_state")),
        step=int(header.get("step", 0)),
        train_config=header.get("train_config") or {},
        vocab_hash=stored_hash,
    )
