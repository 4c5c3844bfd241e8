"""Inter-modal fusion: pairwise outer products of unimodal embeddings and
their projection to a common dimension.

Each modality pair (acoustic-visual, acoustic-textual, visual-textual) is
fused by a plain outer product, flattened row-major with the first operand
as the row index. A private affine+ReLU layer maps each flattened product
to the common width ``d``; a single shared layer (one parameter matrix for
all three branches) then produces the final pairwise features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    batch_outer,
    flatten,
    linear,
    outer,
    relu,
)

PAIR_LABELS = ("av", "at", "vt")


@dataclass
class UnimodalEmbedding:
    """Encoded per-utterance features; [d] vectors or [B, d] batches."""

    t: Tensor
    a: Tensor
    v: Tensor


@dataclass
class BimodalOuter:
    """Flattened pairwise outer products z_av, z_at, z_vt."""

    av: Tensor
    at: Tensor
    vt: Tensor


@dataclass
class BimodalFeature:
    """Pairwise features after both projections, each of width d."""

    av: Tensor
    at: Tensor
    vt: Tensor


@dataclass
class PairwiseParams:
    """Private per-pair projections plus the shared second layer."""

    private: dict[str, tuple[Tensor, Tensor]]  # pair label -> (w [d_in, d], b [d])
    w_shared: Tensor                           # [d, d]
    b_shared: Tensor                           # [d]
    shared_activation: str = "relu"            # "relu" | "linear"


def pair_outer(first: Tensor, second: Tensor) -> Tensor:
    """Outer product flattened row-major: [m] x [n] -> [m*n], batched for
    [B, m] x [B, n] -> [B, m*n]."""
    if first.ndim == 1 and second.ndim == 1:
        return flatten(outer(first, second))
    if first.ndim == 2 and second.ndim == 2:
        return batch_outer(first, second)
    raise ShapeError(f"pair_outer: mixed ranks {first.shape} and {second.shape}")


def bimodal_outer(e: UnimodalEmbedding) -> BimodalOuter:
    """All three pairwise products; the first operand indexes the rows."""
    return BimodalOuter(
        av=pair_outer(e.a, e.v),
        at=pair_outer(e.a, e.t),
        vt=pair_outer(e.v, e.t),
    )


def private_project(z: BimodalOuter, params: PairwiseParams) -> dict[str, Tensor]:
    """Per-pair affine+ReLU to the common width d."""
    out = {}
    for label in PAIR_LABELS:
        if label not in params.private:
            continue
        w, b = params.private[label]
        out[label] = relu(linear(getattr(z, label), w, b))
    return out


def shared_project(z_bar: Tensor, params: PairwiseParams) -> Tensor:
    """Shared second layer; the same parameters serve every pair."""
    h = linear(z_bar, params.w_shared, params.b_shared)
    if params.shared_activation == "relu":
        h = relu(h)
    elif params.shared_activation != "linear":
        raise ValueError(f"unknown shared activation {params.shared_activation!r}")
    return h


def fuse_pairs(e: UnimodalEmbedding, params: PairwiseParams) -> BimodalFeature:
    """Full inter-modal stage: outer products -> private -> shared."""
    z = bimodal_outer(e)
    zbar = private_project(z, params)
    fused = {label: shared_project(v, params) for label, v in zbar.items()}
    return BimodalFeature(av=fused.get("av"), at=fused.get("at"), vt=fused.get("vt"))


def pair_dims(d_t1: int, d_a1: int, d_v1: int) -> dict[str, int]:
    """Flattened widths of the three pairwise products."""
    return {"av": d_a1 * d_v1, "at": d_a1 * d_t1, "vt": d_v1 * d_t1}
