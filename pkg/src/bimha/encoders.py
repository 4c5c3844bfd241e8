"""Unimodal encoders: an LSTM for token sequences, three-layer DNNs for
per-utterance acoustic/visual vectors.

Both encoders accept a single sample (rank reduced by one) or a batch;
internally everything runs batched. Padding rows are fed through the LSTM
like any other step (no masking).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    dropout,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    slice_axis,
    tanh,
)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    """Uniform fan-scaled weight init; biases are zeroed separately."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
    return Tensor(w, requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class LstmParams:
    """Single-layer unidirectional LSTM plus a ReLU output projection.

    Gate blocks are packed [input, forget, cell, output] along the last
    axis of ``w_ih``/``w_hh``/``b``.
    """

    w_ih: Tensor   # [d_in, 4*hidden]
    w_hh: Tensor   # [hidden, 4*hidden]
    b: Tensor      # [4*hidden]
    w_out: Tensor  # [hidden, out]
    b_out: Tensor  # [out]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_ih.shape[0]


def init_lstm(rng: np.random.Generator, d_in: int, hidden: int, out: int,
              dtype=np.float64) -> LstmParams:
    return LstmParams(
        w_ih=glorot(rng, d_in, 4 * hidden, dtype),
        w_hh=glorot(rng, hidden, 4 * hidden, dtype),
        b=zeros_param(4 * hidden, dtype),
        w_out=glorot(rng, hidden, out, dtype),
        b_out=zeros_param(out, dtype),
    )


def lstm_encode(seq, params: LstmParams, drop: float = 0.0, training: bool = False,
                rng: np.random.Generator | None = None, steps: int | None = None) -> Tensor:
    """Run the LSTM over ``steps`` timesteps and project the final hidden state.

    ``seq`` is [L, d_in] for one sample or [B, L, d_in] for a batch; it is
    treated as a constant (gradients flow to parameters only). Dropout at
    rate ``drop`` hits the projection input in training mode.
    """
    x = seq.data if isinstance(seq, Tensor) else np.asarray(seq)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"lstm_encode: expected [L, d] or [B, L, d], got {x.shape}")
    if x.shape[2] != params.d_in:
        raise ShapeError(f"lstm_encode: input dim {x.shape[2]} != params dim {params.d_in}")
    L = x.shape[1] if steps is None else steps
    if not (1 <= L <= x.shape[1]):
        raise ShapeError(f"lstm_encode: steps={L} out of range for length {x.shape[1]}")

    B = x.shape[0]
    H = params.hidden
    dtype = params.w_ih.data.dtype
    h = Tensor(np.zeros((B, H), dtype=dtype))
    c = Tensor(np.zeros((B, H), dtype=dtype))
    for t in range(L):
        xt = Tensor(np.ascontiguousarray(x[:, t, :], dtype=dtype))
        gates = linear(xt, params.w_ih, params.b)
        gates = add(gates, matmul(h, params.w_hh))
        i = sigmoid(slice_axis(gates, 1, 0, H))
        f = sigmoid(slice_axis(gates, 1, H, 2 * H))
        g = tanh(slice_axis(gates, 1, 2 * H, 3 * H))
        o = sigmoid(slice_axis(gates, 1, 3 * H, 4 * H))
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))

    h = dropout(h, drop, training, rng)
    out = relu(linear(h, params.w_out, params.b_out))
    if single:
        out = reshape(out, (out.shape[1],))
    return out


@dataclass
class DnnParams:
    """Three affine layers of equal width, ReLU after each."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]


def init_dnn(rng: np.random.Generator, d_in: int, hidden: int, dtype=np.float64) -> DnnParams:
    return DnnParams(
        w1=glorot(rng, d_in, hidden, dtype), b1=zeros_param(hidden, dtype),
        w2=glorot(rng, hidden, hidden, dtype), b2=zeros_param(hidden, dtype),
        w3=glorot(rng, hidden, hidden, dtype), b3=zeros_param(hidden, dtype),
    )


def dnn_encode(x, params: DnnParams, drop: float = 0.0, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    """Three affine+ReLU layers with dropout after each ReLU in training."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.shape[-1] != params.d_in:
        raise ShapeError(f"dnn_encode: input dim {t.shape[-1]} != params dim {params.d_in}")
    for w, b in ((params.w1, params.b1), (params.w2, params.b2), (params.w3, params.b3)):
        t = dropout(relu(linear(t, w, b)), drop, training, rng)
    return t
