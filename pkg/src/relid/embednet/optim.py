"""Adam with bias correction, global-norm clipping, and RNET checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from relid._binio import FormatError, Reader, f64, read_bytes, write_bytes
from relid.embednet.autograd import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """Return updated parameter arrays; ``state`` is advanced in place."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total
    return total


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, clip: float | None = 5.0):
        self.params = params
        self.lr = lr
        self.clip = clip
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = clip_global_norm(grads, self.clip) if self.clip else 0.0
        values = {k: p.value for k, p in self.params.items()}
        new = adam_step(values, grads, self.state, self.lr)
        for k, p in self.params.items():
            p.value = new[k]
        return norm


_MAGIC = b"RNET"


def checkpoint_bytes(values: dict[str, np.ndarray]) -> bytes:
    """Named-tensor table; float64 so that checkpoints restore exactly."""
    parts = [_MAGIC, struct.pack("<HI", 1, len(values))]
    for name in sorted(values):
        arr = np.asarray(values[name], dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(f64(arr))
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes, what: str = "checkpoint") -> dict[str, np.ndarray]:
    r = Reader(data, what)
    r.magic(_MAGIC)
    version, count = r.unpack("HI")
    if version != 1:
        raise FormatError(f"{what}: unsupported version {version}")
    out = {}
    for _ in range(count):
        n = r.unpack("H")
        name = r.take(n).decode("utf-8")
        ndim = r.unpack("B")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        out[name] = r.array(shape, "<f8")
    r.done()
    return out


def save_checkpoint(values, path) -> None:
    write_bytes(path, checkpoint_bytes(values))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return checkpoint_from_bytes(read_bytes(path), str(path))
