"""Adam optimiser and the binary ``GDAE`` checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from .autodiff import NonFiniteError

MAGIC = b"GDAE"
VERSION = 1


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              t: int | None = None) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    ``t`` defaults to ``state.t + 1``. Parameters without an entry in
    ``grads`` are treated as having zero gradient. A non-finite gradient
    aborts the step before anything is modified.
    """
    step = state.t + 1 if t is None else int(t)
    if step < 1:
        raise ValueError("step count must be >= 1")
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient for parameters: {', '.join(sorted(bad))}")
    for name, g in grads.items():
        if name in params and g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = step


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors as little-endian float32, in the given order."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    """Read a ``GDAE`` file back into float64 arrays."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a GDAE checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).astype(np.float64)
        pos += 4 * size
        out[name] = arr.reshape(dims)
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out
