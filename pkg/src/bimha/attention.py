"""Inter-bimodal attention: a generic multi-head attention and the
bimodal-query variant used by the fusion network.

In the bimodal variant the three pairwise features act as a 3-token
sequence. Every head projects all tokens with one shared key map and one
shared value map, and the *same* query projection serves all three query
streams; the per-head outputs of each stream are concatenated and passed
through one shared output matrix. Because the residual merge adds the
attention outputs back onto the stacked tokens, the projection width
``d_m`` must equal the token width ``d``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fusion import BimodalFeature
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    reshape,
    scale,
    scale_rows,
    slice_axis,
    softmax,
    transpose,
    tsum,
)


@dataclass
class MhaParams:
    """Generic multi-head attention parameters.

    One (w_q, w_x, w_y) triple per head, each mapping token width d to the
    projection width d_m; w_o maps the concatenated heads back to d_m.
    """

    heads: list[tuple[Tensor, Tensor, Tensor]]
    w_o: Tensor  # [n_heads * d_m, d_m]


@dataclass
class BmhaParams:
    """Bimodal multi-head attention parameters.

    Per head: shared query projection w_q, key projection w_d1, value
    projection w_d2 (each [d, d_m]); one w_o [n_heads * d_m, d_m] shared
    by every query stream.
    """

    heads: list[tuple[Tensor, Tensor, Tensor]]  # (w_q, w_d1, w_d2)
    w_o: Tensor

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def d_m(self) -> int:
        return self.heads[0][0].shape[1]


@dataclass
class AttentionRecord:
    """Per-sample, per-head, per-query attention weights.

    ``weights[n, i, s, j]`` is the weight query token s places on key
    token j in head i; each (n, i, s) row sums to 1.
    """

    tokens: tuple[str, ...]
    weights: np.ndarray  # [N, n_heads, S, S]

    def mean_received(self) -> np.ndarray:
        """Per-sample mean attention received by each key token, averaged
        over heads and query streams: [N, S]."""
        return self.weights.mean(axis=(1, 2))


def mha(q_tokens, x_tokens, y_tokens, params: MhaParams) -> Tensor:
    """Scaled dot-product multi-head attention over token matrices.

    ``q_tokens`` is [q, d]; ``x_tokens`` (keys) and ``y_tokens`` (values)
    are [k, d] with equal token counts.
    """
    q_tokens, x_tokens, y_tokens = (t if isinstance(t, Tensor) else Tensor(t)
                                    for t in (q_tokens, x_tokens, y_tokens))
    for name, t in (("query", q_tokens), ("key", x_tokens), ("value", y_tokens)):
        if t.ndim != 2:
            raise ShapeError(f"mha: {name} tokens must be [n, d], got {t.shape}")
    if x_tokens.shape[0] != y_tokens.shape[0]:
        raise ShapeError(
            f"mha: key/value token counts differ: {x_tokens.shape} vs {y_tokens.shape}")
    outs = []
    for w_q, w_x, w_y in params.heads:
        d_m = w_q.shape[1]
        qb = matmul(q_tokens, w_q)
        xb = matmul(x_tokens, w_x)
        yb = matmul(y_tokens, w_y)
        scores = scale(matmul(qb, transpose(xb)), 1.0 / np.sqrt(d_m))
        outs.append(matmul(softmax(scores, axis=1), yb))
    return matmul(concat(outs, axis=1), params.w_o)


def _promote(tokens: Sequence[Tensor]) -> tuple[list[Tensor], bool]:
    ranks = {t.ndim for t in tokens}
    if ranks == {1}:
        return [reshape(t, (1, t.shape[0])) for t in tokens], True
    if ranks == {2}:
        return list(tokens), False
    raise ShapeError(f"attention tokens must all be [d] or all [B, d]")


def bmha_attend(tokens: Sequence[Tensor], params: BmhaParams,
                labels: Sequence[str] | None = None) -> tuple[list[Tensor], AttentionRecord]:
    """Bimodal multi-head attention over an arbitrary token set (>= 2).

    Every token is both a query stream and a key/value; returns one output
    per token plus the full attention record.
    """
    if len(tokens) < 2:
        raise ShapeError(f"bmha needs at least 2 tokens, got {len(tokens)}")
    toks, single = _promote(list(tokens))
    d = toks[0].shape[1]
    B = toks[0].shape[0]
    for t in toks[1:]:
        if t.shape != (B, d):
            raise ShapeError(f"bmha: token shapes differ: {(B, d)} vs {t.shape}")
    d_m = params.d_m
    if labels is None:
        labels = tuple(f"tok{i}" for i in range(len(toks)))

    S = len(toks)
    n_heads = params.n_heads
    alphas = np.empty((B, n_heads, S, S), dtype=np.float64)
    per_token_heads: list[list[Tensor]] = [[] for _ in range(S)]
    inv_sqrt = 1.0 / np.sqrt(d_m)

    for hi, (w_q, w_d1, w_d2) in enumerate(params.heads):
        if w_q.shape != (d, d_m):
            raise ShapeError(
                f"bmha head {hi}: query projection {w_q.shape} incompatible with tokens [{B}, {d}]")
        queries = [matmul(t, w_q) for t in toks]
        keys = [matmul(t, w_d1) for t in toks]
        values = [matmul(t, w_d2) for t in toks]
        for s in range(S):
            cols = [reshape(tsum(mul(queries[s], keys[j]), axis=1), (B, 1)) for j in range(S)]
            att = softmax(scale(concat(cols, axis=1), inv_sqrt), axis=1)
            alphas[:, hi, s, :] = att.data
            mixed = None
            for j in range(S):
                w_j = reshape(slice_axis(att, 1, j, j + 1), (B,))
                term = scale_rows(values[j], w_j)
                mixed = term if mixed is None else add(mixed, term)
            per_token_heads[s].append(mixed)

    outputs = [matmul(concat(heads, axis=1), params.w_o) for heads in per_token_heads]
    if single:
        outputs = [reshape(o, (o.shape[1],)) for o in outputs]
    record = AttentionRecord(tokens=tuple(labels), weights=alphas)
    return outputs, record


def bmha_forward(f: BimodalFeature, params: BmhaParams
                 ) -> tuple[Tensor, Tensor, Tensor, AttentionRecord]:
    """Three-token bimodal attention over (av, at, vt) pairwise features."""
    tokens = [f.av, f.at, f.vt]
    d = tokens[0].shape[-1]
    if params.d_m != d:
        raise ShapeError(
            f"bmha: projection width d_m={params.d_m} must equal token width d={d} "
            "(required by the residual merge)")
    (b_av, b_at, b_vt), record = bmha_attend(tokens, params, labels=("av", "at", "vt"))
    return b_av, b_at, b_vt, record


def residual_merge(outputs: Sequence[Tensor], stacked: Tensor) -> Tensor:
    """Concatenate the attention outputs and add the pre-attention stack."""
    axis = 0 if outputs[0].ndim == 1 else 1
    joined = concat(list(outputs), axis=axis)
    if joined.shape != stacked.shape:
        raise ShapeError(
            f"residual_merge: attention stack {joined.shape} does not match features {stacked.shape}")
    return add(joined, stacked)
