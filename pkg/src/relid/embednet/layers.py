"""Layers built on the autodiff core.

Shape conventions: recurrent layers are time-major, (T, B, dim); the TDNN and
pooling layers take batch-major (B, T, dim). Nothing is padded, so the TDNN
shortens sequences by its context span.
"""

from __future__ import annotations

import numpy as np

from relid.embednet import autograd as ag
from relid.embednet.autograd import Tensor

STATS_VAR_FLOOR = 1e-10


class Module:
    """Holds named parameters and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value) -> Tensor:
        t = ag.parameter(value)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value) -> None:
        """A non-trainable array that is saved with the parameters."""
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def set_buffer(self, name: str, value) -> None:
        if name not in self._buffers:
            raise KeyError(name)
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def _named_buffers(self, prefix: str = "") -> dict[str, tuple["Module", str]]:
        out = {prefix + k: (self, k) for k in self._buffers}
        for name, child in self._children.items():
            out.update(child._named_buffers(f"{prefix}{name}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.value.copy() for k, t in self.named_parameters().items()}
        out.update({k: m._buffers[b].copy() for k, (m, b) in self._named_buffers().items()})
        return out

    def load_state_dict(self, values: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self._named_buffers()
        expected = set(params) | set(buffers)
        missing = sorted(expected - set(values))
        extra = sorted(set(values) - expected)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={missing} unexpected={extra}")
        for name, t in params.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}: {v.shape} vs {t.shape}")
            t.value = v.copy()
        for name, (m, b) in buffers.items():
            m._buffers[b] = np.asarray(values[name], dtype=np.float64).copy()


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng, zero: bool = False):
        super().__init__()
        self.w = self.add_param("w", np.zeros((n_in, n_out)) if zero else _uniform(rng, n_in, (n_in, n_out)))
        self.b = self.add_param("b", np.zeros(n_out) if zero else _uniform(rng, n_in, (n_out,)))

    def __call__(self, x) -> Tensor:
        return ag.matmul(x, self.w) + self.b


class LSTM(Module):
    """Peephole-free LSTM; gate order in the fused weights is i, f, g, o."""

    def __init__(self, n_in: int, hidden: int, rng):
        super().__init__()
        self.hidden = hidden
        fan = n_in + hidden
        self.w = self.add_param("w", _uniform(rng, fan, (n_in, 4 * hidden)))
        self.u = self.add_param("u", _uniform(rng, fan, (hidden, 4 * hidden)))
        b = _uniform(rng, fan, (4 * hidden,))
        b[hidden:2 * hidden] += 1.0
        self.b = self.add_param("b", b)

    def step(self, xw_t: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """One step given the precomputed input projection ``x W + b``."""
        H = self.hidden
        z = xw_t + ag.matmul(h, self.u)
        i = ag.sigmoid(z[:, :H])
        f = ag.sigmoid(z[:, H:2 * H])
        g = ag.tanh(z[:, 2 * H:3 * H])
        o = ag.sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        return o * ag.tanh(c), c

    def __call__(self, xs: Tensor, reverse: bool = False) -> Tensor:
        T, B, _ = xs.shape
        xw = ag.unstack(ag.matmul(xs, self.w) + self.b)
        h = ag.Tensor(np.zeros((B, self.hidden)))
        c = ag.Tensor(np.zeros((B, self.hidden)))
        out = [None] * T
        for t in (range(T - 1, -1, -1) if reverse else range(T)):
            h, c = self.step(xw[t], h, c)
            out[t] = h
        return ag.stack(out, axis=0)


def lstm_step(cell: LSTM, state: tuple[Tensor, Tensor], x: Tensor) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != cell.w.shape[0]:
        raise ValueError("input dimension does not match the LSTM cell")
    h, c = state
    return cell.step(ag.matmul(x, cell.w) + cell.b, h, c)


class GRU(Module):
    """Update/reset-gate GRU: h' = z * h + (1 - z) * n with n = tanh(W x + U (r * h) + b)."""

    def __init__(self, n_in: int, hidden: int, rng):
        super().__init__()
        self.hidden = hidden
        fan = n_in + hidden
        self.w = self.add_param("w", _uniform(rng, fan, (n_in, 3 * hidden)))
        self.u = self.add_param("u", _uniform(rng, fan, (hidden, 2 * hidden)))
        self.un = self.add_param("un", _uniform(rng, fan, (hidden, hidden)))
        self.b = self.add_param("b", _uniform(rng, fan, (3 * hidden,)))

    def step(self, xw_t: Tensor, h: Tensor) -> Tensor:
        H = self.hidden
        zr = ag.sigmoid(xw_t[:, :2 * H] + ag.matmul(h, self.u))
        z, r = zr[:, :H], zr[:, H:]
        n = ag.tanh(xw_t[:, 2 * H:] + ag.matmul(r * h, self.un))
        return z * h + (1.0 - z) * n

    def final_state(self, xs: Tensor) -> Tensor:
        """Run forward over (T, B, in) and return only the last state."""
        xw = ag.unstack(ag.matmul(xs, self.w) + self.b)
        h = ag.Tensor(np.zeros((xs.shape[1], self.hidden)))
        for x_t in xw:
            h = self.step(x_t, h)
        return h

    def __call__(self, xs: Tensor, reverse: bool = False, h0: Tensor | None = None) -> Tensor:
        T, B, _ = xs.shape
        xw = ag.unstack(ag.matmul(xs, self.w) + self.b)
        h = h0 if h0 is not None else ag.Tensor(np.zeros((B, self.hidden)))
        out = [None] * T
        for t in (range(T - 1, -1, -1) if reverse else range(T)):
            h = self.step(xw[t], h)
            out[t] = h
        return ag.stack(out, axis=0)


def gru_step(cell: GRU, h_prev: Tensor, x: Tensor) -> Tensor:
    if x.shape[-1] != cell.w.shape[0]:
        raise ValueError("input dimension does not match the GRU cell")
    return cell.step(ag.matmul(x, cell.w) + cell.b, h_prev)


def bidirectional(run_fwd, run_bwd, seq: Tensor) -> Tensor:
    """[forward states ; backward states] per time step; the backward runner
    sees the sequence reversed and its output is re-reversed."""
    fwd = run_fwd(seq)
    rev = ag.getitem(seq, slice(None, None, -1))
    bwd = ag.getitem(run_bwd(rev), slice(None, None, -1))
    return ag.concat([fwd, bwd], axis=-1)


class BiRecurrent(Module):
    def __init__(self, cell_cls, n_in: int, hidden: int, rng):
        super().__init__()
        self.fwd = self.add_module("fwd", cell_cls(n_in, hidden, rng))
        self.bwd = self.add_module("bwd", cell_cls(n_in, hidden, rng))
        self.out_dim = 2 * hidden

    def __call__(self, xs: Tensor) -> Tensor:
        return bidirectional(self.fwd, self.bwd, xs)


class Attention(Module):
    """Additive attention pooling over time; holds W_e (K x K), b_e and u_e."""

    def __init__(self, dim: int, rng):
        super().__init__()
        self.w_e = self.add_param("w_e", _uniform(rng, dim, (dim, dim)))
        self.b_e = self.add_param("b_e", _uniform(rng, dim, (dim,)))
        self.u_e = self.add_param("u_e", _uniform(rng, dim, (dim,)))

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        return attention_pool(h, self.w_e, self.b_e, self.u_e)


def attention_pool(h: Tensor, w_e: Tensor, b_e: Tensor, u_e: Tensor) -> tuple[Tensor, Tensor]:
    """h is (T, B, K) or (T, K). Returns the pooled embedding and the weights over T.

    u_t = tanh(W_e h_t + b_e); a = softmax_t(u_t . u_e); e = sum_t a_t h_t.
    """
    h = ag.as_tensor(h)
    if h.shape[0] == 0:
        raise ValueError("attention over an empty sequence")
    u = ag.tanh(ag.matmul(h, ag.transpose(ag.as_tensor(w_e), (1, 0))) + b_e)
    scores = ag.matmul(u, ag.reshape(ag.as_tensor(u_e), (-1, 1)))[..., 0]
    a = ag.softmax(scores, axis=0)
    e = ag.sum(ag.reshape(a, a.shape + (1,)) * h, axis=0)
    return e, a


def tdnn_layer(w: Tensor, b: Tensor, x: Tensor, offsets) -> Tensor:
    """ReLU(affine over frames at the given offsets); x is (B, T, D),
    output is (B, T - span + 1, out)."""
    offsets = sorted(offsets)
    span = offsets[-1] - offsets[0] + 1
    T = x.shape[1]
    if T < span:
        raise ValueError(f"sequence of {T} frames is shorter than the context span {span}")
    n = T - span + 1
    lo = offsets[0]
    parts = [x[:, o - lo:o - lo + n, :] for o in offsets]
    spliced = ag.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    return ag.relu(ag.matmul(spliced, w) + b)


class TDNN(Module):
    def __init__(self, n_in: int, n_out: int, offsets, rng):
        super().__init__()
        self.offsets = tuple(sorted(offsets))
        fan = n_in * len(self.offsets)
        self.w = self.add_param("w", _uniform(rng, fan, (fan, n_out)))
        self.b = self.add_param("b", _uniform(rng, fan, (n_out,)))

    @property
    def span(self) -> int:
        return self.offsets[-1] - self.offsets[0] + 1

    def __call__(self, x: Tensor) -> Tensor:
        return tdnn_layer(self.w, self.b, x, self.offsets)


def stats_pooling(x: Tensor, axis: int = 1) -> Tensor:
    """Concatenated mean and standard deviation over ``axis``; the variance is
    floored before the square root."""
    x = ag.as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("statistics pooling over an empty sequence")
    mu = ag.mean(x, axis=axis, keepdims=True)
    var = ag.mean(ag.square(x - mu), axis=axis)
    std = ag.sqrt(ag.floor_at(var, STATS_VAR_FLOOR))
    mu = ag.sum(mu, axis=axis)
    return ag.concat([mu, std], axis=-1)
