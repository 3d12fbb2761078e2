"""Binary checkpoint format.

Layout (little-endian)::

    magic      4 bytes   b"DLRA"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON
    n_tensors  u32
    per tensor:
        name_len u32, name (UTF-8)
        dtype    u8   (0 = float64, 1 = float32)
        rows     u32
        cols     u32
        data     rows*cols*itemsize bytes, row-major

The JSON block carries the model config, the trainable registry, the kind of
checkpoint (``full`` or ``adapter``), the base digest and optional training
state (step, RNG state, data order).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ToyModel, build_base, param_digest, with_base_weights
from .training import TrainState

MAGIC = b"DLRA"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_OPTIM_PREFIX = "optim."


def write_dlra(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    chunks += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise FormatError(f"tensor {name!r} is not 2-D: {arr.shape}")
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode()
        chunks += [
            struct.pack("<I", len(raw)), raw,
            struct.pack("<BII", _DTYPE_TAGS[dt], *arr.shape),
            np.ascontiguousarray(arr, dtype=dt).tobytes(),
        ]
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_dlra(path) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes; not a DLRA checkpoint", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    n = r.u32("metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(n, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata block ({exc})", at) from None
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode()
        at = r.pos
        tag, rows, cols = struct.unpack("<BII", r.take(9, f"header of {name!r}"))
        if tag not in _TAG_DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name!r}", at)
        dt = _TAG_DTYPES[tag]
        raw = r.take(rows * cols * dt.itemsize, f"data of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(rows, cols).astype(dt.newbyteorder("="))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after the last tensor", r.pos)
    return meta, tensors


def _state_meta(state: TrainState | None) -> dict | None:
    if state is None:
        return None
    return {"step": state.step, "rng_state": state.rng_state, "order": state.order,
            "cursor": state.cursor}


def _state_from(meta: dict, tensors: dict) -> TrainState | None:
    s = meta.get("train_state")
    if s is None:
        return None
    moments = {k[len(_OPTIM_PREFIX):]: v for k, v in tensors.items() if k.startswith(_OPTIM_PREFIX)}
    return TrainState(step=s["step"], rng_state=s["rng_state"], moments=moments,
                      order=list(s["order"]), cursor=s["cursor"])


def save_checkpoint(model: ToyModel, path, state: TrainState | None = None,
                    adapter_only: bool = False, extra: dict | None = None) -> None:
    """Write a full checkpoint, or with ``adapter_only`` just the parameters
    added at injection (adapters, lambda, group-norm gains)."""
    names = [n for n in model.params if not adapter_only or n not in model.base_names]
    tensors = {n: model.params[n] for n in names}
    if state is not None:
        tensors.update({_OPTIM_PREFIX + k: v for k, v in state.moments.items()})
    meta = {
        "kind": "adapter" if adapter_only else "full",
        "config": model.config.to_dict(),
        "trainable": sorted(model.trainable),
        "base_names": sorted(model.base_names),
        "injected": model.injected,
        "base_digest": model.base_digest(),
        "train_state": _state_meta(state),
        "extra": extra or {},
    }
    write_dlra(path, meta, tensors)


def load_checkpoint(path, base: ToyModel | None = None, with_state: bool = False):
    """Rebuild a model from a checkpoint.

    Adapter-only checkpoints are applied onto ``base`` (which must match the
    recorded base digest); when ``base`` is omitted it is rebuilt from the
    stored config's seed.
    """
    meta, tensors = read_dlra(path)
    try:
        config = ModelConfig.from_dict(meta["config"])
        trainable = set(meta["trainable"])
        base_names = set(meta["base_names"])
        kind = meta["kind"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"metadata is missing a field ({exc})") from None
    params = {k: v for k, v in tensors.items() if not k.startswith(_OPTIM_PREFIX)}
    if kind == "adapter":
        if base is None:
            base = build_base(ModelConfig.from_dict({**meta["config"], "variant": "baseline",
                                                     "placement": None, "group_norm": False}))
        base = with_base_weights(config, base)
        if base.base_digest() != meta["base_digest"]:
            raise FormatError("adapter checkpoint was trained on a different base model")
        params = {**base.params, **params}
    elif kind != "full":
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    missing = base_names - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks base tensors {sorted(missing)[:3]}")
    model = ToyModel(config, params, trainable, base_names, injected=meta.get("injected", False))
    if with_state:
        return model, _state_from(meta, tensors)
    return model


def read_meta(path) -> dict:
    return read_dlra(path)[0]


def checkpoint_digest(model: ToyModel) -> str:
    return param_digest({n: model.params[n] for n in sorted(model.params)})
