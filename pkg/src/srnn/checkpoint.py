"""Binary checkpoint container.

Layout (all little-endian)::

    b"SRNN" | version u32 | count u32
    per tensor: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | f32 payload
    crc32 u32 over every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .model import (BaseCnnConfig, ScaleClassifier, SrnnHalfGru, SrnnVanilla, _as_params,
                    required_tensors)

MAGIC = b"SRNN"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or foreign checkpoint."""


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 12
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", body, pos)
            dims = struct.unpack_from(f"<{rank}I", body, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise CheckpointError(f"{name}: payload runs past end of file")
            out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes before CRC")
    return out


def save(tensors: dict[str, np.ndarray], path):
    Path(path).write_bytes(encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# models <-> tensors

def _stage_count(state: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}cnn.stage{n}.weight" in state:
        n += 1
    return n


def infer_config(state: dict, prefix: str = ""):
    n = _stage_count(state, prefix)
    if n == 0:
        return None
    w0 = state[f"{prefix}cnn.stage0.weight"]
    chans = tuple(int(state[f"{prefix}cnn.stage{i}.weight"].shape[0]) for i in range(n))
    return BaseCnnConfig(channels=chans, in_channels=int(w0.shape[1]), kernel=int(w0.shape[-1]))


def missing_tensors(state: dict, head: str, prefix: str = "") -> list[str]:
    """Canonical names ``head`` needs that ``state`` lacks (without prefix)."""
    cfg = infer_config(state, prefix) or BaseCnnConfig(channels=(1,))
    return [k for k in required_tensors(cfg, head) if prefix + k not in state]


def infer_head(state: dict, prefix: str = "") -> str:
    if f"{prefix}gate.Wz" in state or f"{prefix}gate.Uz" in state or f"{prefix}gate.bias" in state:
        return "srnn_halfgru"
    if f"{prefix}srnn.U" in state:
        return "srnn_vanilla"
    return "single"


def model_from_state(state: dict, prefix: str = "", head: str | None = None, dtype=np.float32):
    """Rebuild a model from checkpoint tensors.

    Raises :class:`CheckpointError` listing absent tensors when ``state``
    cannot supply ``head`` (inferred from the tensors when omitted).
    """
    head = head or infer_head(state, prefix)
    if head in ("ens_logit", "ens_prob"):
        head = "single"
    missing = missing_tensors(state, head, prefix)
    if missing:
        raise CheckpointError("missing tensors: " + ", ".join(missing))
    cfg = infer_config(state, prefix)
    cls = {"single": ScaleClassifier, "srnn_vanilla": SrnnVanilla, "srnn_halfgru": SrnnHalfGru}[head]
    names = required_tensors(cfg, head)
    params = _as_params({k: state[prefix + k] for k in names}, dtype)
    return cls(cfg, int(state[prefix + "fc.weight"].shape[0]), params)


def model_state(model, base=None) -> dict[str, np.ndarray]:
    """Tensors for ``model``; a pretrained ``base`` is stored under ``base.``."""
    out = {k: np.asarray(v, dtype=np.float32) for k, v in model.state_dict().items()}
    if base is not None:
        out.update({f"base.{k}": np.asarray(v, dtype=np.float32) for k, v in base.state_dict().items()})
    return out


def checkpoint_save(model, path, base=None):
    save(model_state(model, base), path)


def checkpoint_load(path, head: str | None = None, dtype=np.float32):
    return model_from_state(load(path), head=head, dtype=dtype)


def base_from_state(state: dict, dtype=np.float32):
    """The pretrained base classifier stored alongside an SRNN, or the model's own CNN."""
    prefix = "base." if "base.fc.weight" in state else ""
    return model_from_state(state, prefix, "single", dtype)
