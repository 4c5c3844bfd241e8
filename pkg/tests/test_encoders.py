"""Tests for the LSTM and DNN unimodal encoders."""

import numpy as np
import pytest

from bimha.encoders import (
    DnnParams,
    LstmParams,
    dnn_encode,
    init_dnn,
    init_lstm,
    lstm_encode,
)
from bimha.tensor import ShapeError, Tape, Tensor, backward, tsum

from fd import numeric_grad, rel_err


def zero_lstm(d_in=3, hidden=4, out=2):
    z = lambda *s: Tensor(np.zeros(s), requires_grad=True)
    return LstmParams(z(d_in, 4 * hidden), z(hidden, 4 * hidden), z(4 * hidden),
                      z(hidden, out), z(out))


def test_zero_weight_lstm_outputs_zero():
    params = zero_lstm()
    out = lstm_encode(np.zeros((5, 3)), params)
    np.testing.assert_array_equal(out.data, np.zeros(2))


def _single_cell_reference(x, params):
    """Hand-coded one-step LSTM cell from zero state + ReLU projection."""
    H = params.hidden

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    gates = x @ params.w_ih.data + params.b.data
    i = sig(gates[0:H])
    f = sig(gates[H:2 * H])
    g = np.tanh(gates[2 * H:3 * H])
    o = sig(gates[3 * H:4 * H])
    c = i * g  # forget gate hits the zero initial cell
    h = o * np.tanh(c)
    return np.maximum(h @ params.w_out.data + params.b_out.data, 0.0)


def test_single_step_matches_cell_oracle():
    rng = np.random.default_rng(101)
    params = init_lstm(rng, d_in=3, hidden=4, out=2)
    x = rng.normal(size=3)
    out = lstm_encode(x[None, :], params)
    np.testing.assert_allclose(out.data, _single_cell_reference(x, params), atol=1e-12)


def test_lstm_deterministic():
    rng = np.random.default_rng(103)
    params = init_lstm(rng, d_in=5, hidden=3, out=4)
    seq = rng.normal(size=(7, 5))
    a = lstm_encode(seq, params).data
    b = lstm_encode(seq, params).data
    np.testing.assert_array_equal(a, b)


def test_lstm_consumes_exactly_given_steps():
    rng = np.random.default_rng(107)
    params = init_lstm(rng, d_in=4, hidden=3, out=2)
    seq = rng.normal(size=(6, 4))
    junk = np.concatenate([seq, rng.normal(size=(3, 4))], axis=0)
    np.testing.assert_array_equal(lstm_encode(seq, params).data,
                                  lstm_encode(junk, params, steps=6).data)


def test_lstm_batch_matches_single():
    rng = np.random.default_rng(109)
    params = init_lstm(rng, d_in=4, hidden=5, out=3)
    seqs = rng.normal(size=(3, 6, 4))
    batch = lstm_encode(seqs, params).data
    for b in range(3):
        np.testing.assert_allclose(batch[b], lstm_encode(seqs[b], params).data, atol=1e-12)


def test_lstm_dim_mismatch():
    params = init_lstm(np.random.default_rng(0), d_in=4, hidden=3, out=2)
    with pytest.raises(ShapeError, match="input dim"):
        lstm_encode(np.zeros((5, 7)), params)


def test_lstm_gradients_match_finite_differences():
    rng = np.random.default_rng(113)
    params = init_lstm(rng, d_in=3, hidden=4, out=2)
    seq = rng.normal(size=(5, 3))
    weights = rng.normal(size=2)

    named = {"w_ih": params.w_ih, "w_hh": params.w_hh, "b": params.b,
             "w_out": params.w_out, "b_out": params.b_out}
    with Tape():
        loss = tsum(lstm_encode(seq, params) * Tensor(weights))
    backward(loss)

    for name, p in named.items():
        def f(x, p=p):
            orig = p.data
            p.data = x
            try:
                return float((lstm_encode(seq, params).data * weights).sum())
            finally:
                p.data = orig

        num = numeric_grad(f, p.data.copy())
        assert rel_err(p.grad, num) < 1e-6, name


def test_zero_weight_dnn_outputs_zero():
    z = lambda *s: Tensor(np.zeros(s), requires_grad=True)
    params = DnnParams(z(3, 4), z(4), z(4, 4), z(4), z(4, 4), z(4))
    np.testing.assert_array_equal(dnn_encode(np.ones(3), params).data, np.zeros(4))


def test_dnn_identity_chain():
    one = lambda: Tensor(np.ones((1, 1)), requires_grad=True)
    zero = lambda: Tensor(np.zeros(1), requires_grad=True)
    params = DnnParams(one(), zero(), one(), zero(), one(), zero())
    np.testing.assert_array_equal(dnn_encode(np.array([2.0]), params).data, [2.0])


def test_dnn_matches_straight_line_reference():
    rng = np.random.default_rng(127)
    params = init_dnn(rng, d_in=5, hidden=4)
    x = rng.normal(size=5)
    ref = x
    for w, b in ((params.w1, params.b1), (params.w2, params.b2), (params.w3, params.b3)):
        ref = np.maximum(ref @ w.data + b.data, 0.0)
    np.testing.assert_allclose(dnn_encode(x, params).data, ref, atol=1e-12)


def test_dnn_output_dim_is_hidden():
    rng = np.random.default_rng(131)
    params = init_dnn(rng, d_in=7, hidden=3)
    assert dnn_encode(rng.normal(size=7), params).shape == (3,)
    assert dnn_encode(rng.normal(size=(9, 7)), params).shape == (9, 3)


def test_dnn_gradients():
    rng = np.random.default_rng(137)
    params = init_dnn(rng, d_in=3, hidden=4)
    x = rng.normal(size=(2, 3))
    with Tape():
        loss = tsum(dnn_encode(x, params))
    backward(loss)
    for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
        p = getattr(params, name)

        def f(v, p=p):
            orig = p.data
            p.data = v
            try:
                return float(dnn_encode(x, params).data.sum())
            finally:
                p.data = orig

        num = numeric_grad(f, p.data.copy())
        assert rel_err(p.grad, num) < 1e-6, name


def test_dropout_only_in_training_mode():
    rng = np.random.default_rng(139)
    params = init_dnn(rng, d_in=4, hidden=8)
    x = rng.normal(size=(6, 4))
    eval_a = dnn_encode(x, params, drop=0.5, training=False).data
    eval_b = dnn_encode(x, params, drop=0.5, training=False).data
    np.testing.assert_array_equal(eval_a, eval_b)
    train = dnn_encode(x, params, drop=0.5, training=True, rng=np.random.default_rng(1)).data
    assert (train == 0).sum() > (eval_a == 0).sum()  # some units dropped
