import numpy as np
import pytest

from oracles import finite_difference
from relid._binio import FormatError
from relid.embednet import autograd as ag
from relid.embednet import (
    GRU,
    LSTM,
    TDNN,
    Adam,
    AdamState,
    Attention,
    BiRecurrent,
    Dense,
    adam_step,
    attention_pool,
    gru_step,
    load_checkpoint,
    lstm_step,
    save_checkpoint,
    softmax_xent,
    softmax_xent_value,
    stats_pooling,
)
from relid.embednet.gradcheck import check_gradients, relative_error

TOL = 1e-4


def grad_check(fn, *arrays, seed=0):
    """Backprop vs central differences of sum(fn(*inputs) * R) for every input."""
    rng = np.random.default_rng(seed)
    out_shape = fn(*[ag.Tensor(a) for a in arrays]).shape
    R = rng.normal(size=out_shape)

    def scalar(*vals):
        return float((fn(*[ag.Tensor(v) for v in vals]).value * R).sum())

    params = [ag.parameter(a.copy()) for a in arrays]
    loss = ag.sum(fn(*params) * ag.Tensor(R))
    loss.backward()
    for k, a in enumerate(arrays):
        def f(x, k=k):
            vals = list(arrays)
            vals[k] = x
            return scalar(*vals)
        num = finite_difference(f, a)
        got = params[k].grad if params[k].grad is not None else np.zeros_like(a)
        assert relative_error(got, num) < TOL, f"input {k}"


def rnd(*shape, seed=0, lo=None):
    x = np.random.default_rng(seed).normal(size=shape)
    if lo is not None:
        # keep away from kinks and domain edges
        x = np.sign(x) * (np.abs(x) + lo)
    return x


# -- primitives ---------------------------------------------------------------------------

@pytest.mark.parametrize("name,fn,shapes", [
    ("add", lambda a, b: a + b, [(3, 4), (4,)]),
    ("sub", lambda a, b: a - b, [(2, 3), (2, 3)]),
    ("mul", lambda a, b: a * b, [(3, 1), (3, 5)]),
    ("matmul", ag.matmul, [(4, 3), (3, 2)]),
    ("batched_matmul", ag.matmul, [(2, 4, 3), (3, 5)]),
    ("tanh", ag.tanh, [(3, 4)]),
    ("sigmoid", ag.sigmoid, [(3, 4)]),
    ("exp", ag.exp, [(5,)]),
    ("square", ag.square, [(2, 3)]),
    ("sum_axis", lambda a: ag.sum(a, axis=1), [(3, 4)]),
    ("mean_keep", lambda a: ag.mean(a, axis=0, keepdims=True), [(3, 4)]),
    ("reshape", lambda a: ag.reshape(a, (6, 2)), [(3, 4)]),
    ("transpose", lambda a: ag.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    ("getitem_slice", lambda a: a[1:, ::2], [(4, 5)]),
    ("getitem_fancy", lambda a: a[np.array([0, 2, 2])], [(3, 4)]),
    ("reverse", lambda a: ag.getitem(a, slice(None, None, -1)), [(5, 2)]),
    ("concat", lambda a, b: ag.concat([a, b], axis=-1), [(3, 2), (3, 4)]),
    ("stack", lambda a, b: ag.stack([a, b], axis=1), [(3, 2), (3, 2)]),
    ("unstack", lambda a: ag.unstack(a, axis=1)[2] * 2.0, [(3, 4)]),
    ("softmax", lambda a: ag.softmax(a, axis=0), [(5, 3)]),
    ("log_softmax", ag.log_softmax, [(4, 6)]),
    ("scale", lambda a: ag.scale(a, -2.5), [(3,)]),
])
def test_primitive_gradients(name, fn, shapes):
    grad_check(fn, *[rnd(*s, seed=i) for i, s in enumerate(shapes)])


def test_domain_restricted_primitives():
    pos = np.abs(rnd(3, 4)) + 0.5
    grad_check(ag.log, pos)
    grad_check(ag.sqrt, pos)
    grad_check(ag.relu, rnd(3, 4, lo=0.1))
    grad_check(lambda a: ag.floor_at(a, 0.0), rnd(3, 4, lo=0.1))


def test_relu_and_floor_values():
    x = ag.Tensor([-1.0, 0.5])
    np.testing.assert_array_equal(ag.relu(x).value, [0.0, 0.5])
    np.testing.assert_array_equal(ag.floor_at(x, 0.1).value, [0.1, 0.5])


def test_shared_subexpression_accumulates():
    x = ag.parameter(np.array([1.5, -2.0]))
    y = x * x + x
    ag.sum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.value + 1)


def test_softmax_xent_matches_closed_form():
    logits = rnd(4, 3)
    labels = np.array([0, 2, 1, 2])
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expect = -logp[np.arange(4), labels].mean()
    t = ag.parameter(logits)
    loss = softmax_xent(t, labels)
    assert float(loss.value) == pytest.approx(expect, abs=1e-14)
    loss.backward()
    num = finite_difference(lambda v: float(softmax_xent(ag.Tensor(v), labels).value), logits)
    assert relative_error(t.grad, num) < TOL
    v, g = softmax_xent_value(logits[0], 0)
    assert v == pytest.approx(-logp[0, 0])
    np.testing.assert_allclose(g, np.exp(logp[0]) - np.eye(3)[0])
    with pytest.raises(ValueError):
        softmax_xent(t, [0, 1, 3, 0])
    with pytest.raises(ValueError):
        softmax_xent_value(logits[0], 5)


def test_zero_logits_give_log_l():
    assert float(softmax_xent(ag.Tensor(np.zeros((3, 5))), [0, 1, 4]).value) == pytest.approx(np.log(5), abs=1e-15)


# -- layers -------------------------------------------------------------------------------

def module_check(module, loss_fn):
    errs = check_gradients(loss_fn, module.named_parameters(), eps=1e-6)
    assert max(errs.values()) < TOL, errs


def test_lstm_step_matches_equations():
    rng = np.random.default_rng(1)
    cell = LSTM(3, 4, rng)
    x, h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    h2, c2 = lstm_step(cell, (ag.Tensor(h), ag.Tensor(c)), ag.Tensor(x))
    z = x @ cell.w.value + h @ cell.u.value + cell.b.value
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[:, :4]), sig(z[:, 4:8]), np.tanh(z[:, 8:12]), sig(z[:, 12:])
    c_ref = f * c + i * g
    np.testing.assert_allclose(c2.value, c_ref, rtol=1e-12)
    np.testing.assert_allclose(h2.value, o * np.tanh(c_ref), rtol=1e-12)
    with pytest.raises(ValueError):
        lstm_step(cell, (ag.Tensor(h), ag.Tensor(c)), ag.Tensor(rng.normal(size=(2, 5))))


def test_gru_step_matches_equations():
    rng = np.random.default_rng(2)
    cell = GRU(3, 4, rng)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    h2 = gru_step(cell, ag.Tensor(h), ag.Tensor(x))
    sig = lambda v: 1 / (1 + np.exp(-v))
    xw = x @ cell.w.value + cell.b.value
    zr = sig(xw[:, :8] + h @ cell.u.value)
    z, r = zr[:, :4], zr[:, 4:]
    n = np.tanh(xw[:, 8:] + (r * h) @ cell.un.value)
    np.testing.assert_allclose(h2.value, z * h + (1 - z) * n, rtol=1e-12)


@pytest.mark.parametrize("cell_cls", [LSTM, GRU])
def test_recurrent_gradients(cell_cls):
    rng = np.random.default_rng(3)
    layer = BiRecurrent(cell_cls, 5, 3, rng)
    xs = ag.Tensor(rng.normal(size=(12, 2, 5)))
    R = rng.normal(size=(12, 2, 6))
    module_check(layer, lambda: ag.sum(layer(xs) * ag.Tensor(R)))


def test_bidirectional_backward_half_is_reverse_run():
    rng = np.random.default_rng(4)
    layer = BiRecurrent(GRU, 2, 3, rng)
    x = rng.normal(size=(6, 1, 2))
    out = layer(ag.Tensor(x)).value
    ref = layer.bwd(ag.Tensor(x[::-1])).value[::-1]
    np.testing.assert_allclose(out[:, :, 3:], ref, rtol=1e-12)
    np.testing.assert_allclose(out[:, :, :3], layer.fwd(ag.Tensor(x)).value, rtol=1e-12)


def test_attention_matches_formula_and_gradients():
    rng = np.random.default_rng(5)
    att = Attention(4, rng)
    h = rng.normal(size=(7, 4))
    e, a = att(ag.Tensor(h))
    u = np.tanh(h @ att.w_e.value.T + att.b_e.value)
    s = u @ att.u_e.value
    w = np.exp(s - s.max())
    w /= w.sum()
    np.testing.assert_allclose(a.value, w, rtol=1e-12)
    np.testing.assert_allclose(e.value, w @ h, rtol=1e-12)
    R = rng.normal(size=4)
    module_check(att, lambda: ag.sum(att(ag.Tensor(h))[0] * ag.Tensor(R)))
    grad_check(lambda hh, we, be, ue: attention_pool(hh, we, be, ue)[0],
               h, att.w_e.value, att.b_e.value, att.u_e.value)


def test_attention_batched_weights_sum_to_one():
    rng = np.random.default_rng(6)
    e, a = Attention(3, rng)(ag.Tensor(rng.normal(size=(5, 2, 3))))
    assert e.shape == (2, 3)
    np.testing.assert_allclose(a.value.sum(axis=0), 1.0)
    with pytest.raises(ValueError):
        attention_pool(ag.Tensor(np.zeros((0, 3))), *[ag.Tensor(np.zeros(s)) for s in [(3, 3), 3, 3]])


def test_tdnn_matches_loop_and_gradients():
    rng = np.random.default_rng(7)
    layer = TDNN(3, 4, (-2, 0, 2), rng)
    x = rng.normal(size=(2, 12, 3))
    out = layer(ag.Tensor(x)).value
    assert out.shape == (2, 8, 4) and layer.span == 5
    for b in range(2):
        for t in range(8):
            spliced = np.concatenate([x[b, t + 2 + o] for o in (-2, 0, 2)])
            np.testing.assert_allclose(out[b, t], np.maximum(spliced @ layer.w.value + layer.b.value, 0), rtol=1e-12)
    R = rng.normal(size=out.shape)
    module_check(layer, lambda: ag.sum(layer(ag.Tensor(x)) * ag.Tensor(R)))
    with pytest.raises(ValueError):
        layer(ag.Tensor(np.zeros((1, 4, 3))))


def test_stats_pooling_matches_numpy_and_gradients():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 9, 4))
    out = stats_pooling(ag.Tensor(x)).value
    np.testing.assert_allclose(out, np.concatenate([x.mean(axis=1), x.std(axis=1)], axis=-1), rtol=1e-12)
    grad_check(stats_pooling, x)
    # constant input: the floored variance keeps everything finite
    const = stats_pooling(ag.Tensor(np.ones((1, 5, 2))))
    assert np.all(np.isfinite(const.value))


def test_dense_zero_init_and_gradients():
    rng = np.random.default_rng(9)
    d = Dense(4, 3, rng, zero=True)
    assert np.all(d(ag.Tensor(rng.normal(size=(2, 4)))).value == 0)
    d = Dense(4, 3, rng)
    x = ag.Tensor(rng.normal(size=(5, 4)))
    module_check(d, lambda: softmax_xent(d(x), [0, 1, 2, 0, 1]))


# -- optimiser and checkpoints -----------------------------------------------------------------

def test_adam_first_step_is_signed_lr():
    # with bias correction, step 1 moves each coordinate by lr * g / (|g| + eps)
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 0.0])}
    out = adam_step(p, g, AdamState(), lr=0.01)
    np.testing.assert_allclose(out["w"], p["w"] - 0.01 * g["w"] / (np.abs(g["w"]) + 1e-8), rtol=1e-12)


def test_adam_second_step_oracle():
    state = AdamState()
    p = {"w": np.array([1.0])}
    p = adam_step(p, {"w": np.array([2.0])}, state, lr=0.1)
    p = adam_step(p, {"w": np.array([-1.0])}, state, lr=0.1)
    m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0
    v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
    m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
    expect = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p["w"][0] == pytest.approx(expect, rel=1e-12)


def test_adam_clips_global_norm():
    w = ag.parameter(np.zeros(2))
    opt = Adam({"w": w}, lr=1.0, clip=5.0)
    w.grad = np.array([30.0, 40.0])
    norm = opt.step()
    assert norm == pytest.approx(50.0)
    np.testing.assert_allclose(w.value, -1.0, rtol=1e-6)


def test_adam_minimises_quadratic():
    w = ag.parameter(np.array([3.0, -2.0]))
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        ag.sum(ag.square(w - ag.Tensor([1.0, 1.0]))).backward()
        opt.step()
    np.testing.assert_allclose(w.value, [1.0, 1.0], atol=1e-2)


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(10)
    layer = BiRecurrent(LSTM, 3, 2, rng)
    save_checkpoint(layer.state_dict(), tmp_path / "m.rnet")
    other = BiRecurrent(LSTM, 3, 2, np.random.default_rng(99))
    other.load_state_dict(load_checkpoint(tmp_path / "m.rnet"))
    for k, v in layer.state_dict().items():
        np.testing.assert_array_equal(other.state_dict()[k], v)


def test_checkpoint_errors(tmp_path):
    rng = np.random.default_rng(11)
    layer = Dense(3, 2, rng)
    with pytest.raises(ValueError):
        layer.load_state_dict({"w": np.zeros((3, 2))})
    with pytest.raises(ValueError):
        layer.load_state_dict({"w": np.zeros((2, 2)), "b": np.zeros(2)})
    save_checkpoint(layer.state_dict(), tmp_path / "d.rnet")
    data = (tmp_path / "d.rnet").read_bytes()
    (tmp_path / "t.rnet").write_bytes(data[:-5])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.rnet")
    (tmp_path / "m.rnet").write_bytes(b"XNET" + data[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.rnet")
