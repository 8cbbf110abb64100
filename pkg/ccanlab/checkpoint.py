# ccanlab/checkpoint.py
"""
Checkpoint files.

    CCANLAB-CHECKPOINT 1\n
    <header byte length, decimal>\n
    <header: compact JSON, sorted keys, UTF-8>\n
    <payload: little-endian float32 arrays in manifest order>

The header carries the run config, the vocab token list, the training step,
the validation score and the parameter manifest (name, shape, byte offset,
byte count). Payload length must equal the manifest total.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ccanlab.common import DataError
from ccanlab.config import RunConfig
from ccanlab.model import NATModel
from ccanlab.tensor import get_default_dtype

logger = logging.getLogger(__name__)

MAGIC = b"CCANLAB-CHECKPOINT 1"
PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: RunConfig
    vocab: List[str]
    params: Dict[str, np.ndarray]
    step: int = 0
    val_score: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def manifest(self) -> List[Dict[str, Any]]:
        entries, offset = [], 0
        for name, value in self.params.items():
            nbytes = int(value.size) * PAYLOAD_DTYPE.itemsize
            entries.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": nbytes})
            offset += nbytes
        return entries

    def build_model(self) -> NATModel:
        """Instantiate the model described by the config and load the stored values into it."""
        model = NATModel(self.config.model)
        load_into(model, self.params)
        model.eval()
        return model


def state_of(model: NATModel) -> Dict[str, np.ndarray]:
    return {name: p.data.astype(PAYLOAD_DTYPE) for name, p in model.named_parameters().items()}


def load_into(model: NATModel, params: Dict[str, np.ndarray]) -> None:
    expected = model.named_parameters()
    missing = sorted(set(expected) - set(params))
    unexpected = sorted(set(params) - set(expected))
    if missing or unexpected:
        raise DataError(f"checkpoint does not match model: missing {missing or 'none'}, "
                        f"unexpected {unexpected or 'none'}")
    for name, p in expected.items():
        value = params[name]
        if value.shape != p.shape:
            raise DataError(f"checkpoint parameter {name} has shape {value.shape}, model expects {p.shape}")
        p.data = value.astype(get_default_dtype())
        p.zero_grad()


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    header = {
        "config": checkpoint.config.to_dict(),
        "dtype": PAYLOAD_DTYPE.str,
        "extra": checkpoint.extra,
        "params": checkpoint.manifest(),
        "step": int(checkpoint.step),
        "val_score": None if checkpoint.val_score is None else float(checkpoint.val_score),
        "vocab": list(checkpoint.vocab),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(str(len(header_bytes)).encode("ascii") + b"\n")
        f.write(header_bytes + b"\n")
        for value in checkpoint.params.values():
            f.write(np.ascontiguousarray(value, dtype=PAYLOAD_DTYPE).tobytes())
    os.replace(tmp, path)
    logger.debug(f"Saved checkpoint step {checkpoint.step} to {path}")


def save_model(model: NATModel, config: RunConfig, vocab: Sequence[str], path: str, step: int = 0,
               val_score: Optional[float] = None) -> Checkpoint:
    checkpoint = Checkpoint(config=config, vocab=list(vocab), params=state_of(model), step=step,
                            val_score=val_score)
    save_checkpoint(checkpoint, path)
    return checkpoint


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")

    magic, sep, rest = blob.partition(b"\n")
    if magic != MAGIC or not sep:
        raise DataError(f"{path} is not a ccanlab checkpoint")
    length_line, sep, rest = rest.partition(b"\n")
    if not sep or not length_line.isdigit():
        raise DataError(f"{path}: bad header length line")
    length = int(length_line)
    if len(rest) < length + 1 or rest[length:length + 1] != b"\n":
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: header is not valid JSON ({e})")
    payload = rest[length + 1:]

    if header.get("dtype") != PAYLOAD_DTYPE.str:
        raise DataError(f"{path}: unsupported payload dtype {header.get('dtype')!r}")
    manifest = header.get("params", [])
    expected = sum(entry["nbytes"] for entry in manifest)
    if len(payload) != expected:
        raise DataError(f"{path}: payload has {len(payload)} bytes, manifest declares {expected}")

    params: Dict[str, np.ndarray] = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize != entry["nbytes"]:
            raise DataError(f"{path}: parameter {entry['name']} size disagrees with its shape {shape}")
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        params[entry["name"]] = np.frombuffer(chunk, dtype=PAYLOAD_DTYPE).reshape(shape).copy()

    return Checkpoint(config=RunConfig.from_dict(header["config"]), vocab=list(header["vocab"]), params=params,
                      step=int(header.get("step", 0)), val_score=header.get("val_score"),
                      extra=header.get("extra", {}))


def average_checkpoints(paths: Sequence[str]) -> Checkpoint:
    """Element-wise mean of the parameters of checkpoints sharing one manifest; config and vocab come from the first."""
    if not paths:
        raise DataError("no checkpoints to average")
    loaded = [load_checkpoint(p) for p in paths]
    first = loaded[0]
    for path, other in zip(paths[1:], loaded[1:]):
        if [(e["name"], e["shape"]) for e in other.manifest()] != [(e["name"], e["shape"]) for e in first.manifest()]:
            raise DataError(f"checkpoint {path} has a different parameter manifest than {paths[0]}")
        if other.vocab != first.vocab:
            raise DataError(f"checkpoint {path} has a different vocabulary than {paths[0]}")
    params = {
        name: np.mean([c.params[name].astype(np.float64) for c in loaded], axis=0).astype(PAYLOAD_DTYPE)
        for name in first.params
    }
    scores = [c.val_score for c in loaded if c.val_score is not None]
    logger.info(f"Averaged {len(loaded)} checkpoints")
    return Checkpoint(config=first.config, vocab=first.vocab, params=params,
                      step=max(c.step for c in loaded),
                      val_score=float(np.mean(scores)) if scores else None,
                      extra={"averaged_from": [os.path.basename(p) for p in paths]})
