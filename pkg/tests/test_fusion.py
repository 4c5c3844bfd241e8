"""Tests for the pairwise outer-product fusion stage."""

import numpy as np
import pytest

from bimha.fusion import (
    BimodalOuter,
    PairwiseParams,
    UnimodalEmbedding,
    bimodal_outer,
    fuse_pairs,
    pair_dims,
    private_project,
    shared_project,
)
from bimha.tensor import Tape, Tensor, backward, tsum

from fd import numeric_grad, rel_err


def embedding(t, a, v):
    return UnimodalEmbedding(t=Tensor(t), a=Tensor(a), v=Tensor(v))


def test_outer_flattening_order():
    e = embedding(t=[9.0], a=[1.0, 2.0], v=[1.0, 0.0, -1.0])
    z = bimodal_outer(e)
    np.testing.assert_array_equal(z.av.data, [1.0, 0.0, -1.0, 2.0, 0.0, -2.0])


def test_zero_acoustic_annihilates_its_pairs():
    rng = np.random.default_rng(211)
    e = embedding(t=rng.normal(size=4), a=np.zeros(3), v=rng.normal(size=5))
    z = bimodal_outer(e)
    np.testing.assert_array_equal(z.av.data, np.zeros(15))
    np.testing.assert_array_equal(z.at.data, np.zeros(12))
    assert np.any(z.vt.data != 0)


def test_outer_matches_double_loops():
    rng = np.random.default_rng(223)
    t, a, v = rng.normal(size=5), rng.normal(size=3), rng.normal(size=4)
    z = bimodal_outer(embedding(t, a, v))
    for flat, (x, y) in ((z.av, (a, v)), (z.at, (a, t)), (z.vt, (v, t))):
        ref = np.zeros((len(x), len(y)))
        for i in range(len(x)):
            for j in range(len(y)):
                ref[i, j] = x[i] * y[j]
        np.testing.assert_allclose(flat.data, ref.reshape(-1), atol=1e-15)


def test_dimension_law():
    dims = pair_dims(d_t1=64, d_a1=16, d_v1=128)
    assert dims == {"av": 2048, "at": 1024, "vt": 8192}
    rng = np.random.default_rng(227)
    e = embedding(rng.normal(size=64), rng.normal(size=16), rng.normal(size=128))
    z = bimodal_outer(e)
    assert z.av.shape == (2048,) and z.at.shape == (1024,) and z.vt.shape == (8192,)


def test_swapping_operands_transposes():
    rng = np.random.default_rng(229)
    a, v = rng.normal(size=3), rng.normal(size=5)
    e = embedding(t=rng.normal(size=2), a=a, v=v)
    z_av = bimodal_outer(e).av.data.reshape(3, 5)
    e_swapped = embedding(t=rng.normal(size=2), a=v, v=a)
    z_va = bimodal_outer(e_swapped).av.data.reshape(5, 3)
    np.testing.assert_allclose(z_av, z_va.T, atol=1e-15)


def test_batched_outer_matches_per_sample():
    rng = np.random.default_rng(233)
    t, a, v = rng.normal(size=(4, 5)), rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    z = bimodal_outer(embedding(t, a, v))
    for i in range(4):
        zi = bimodal_outer(embedding(t[i], a[i], v[i]))
        np.testing.assert_allclose(z.at.data[i], zi.at.data, atol=1e-15)


def _params(rng, d_in_by_pair, d, activation="relu"):
    private = {
        label: (Tensor(rng.normal(size=(din, d)) * 0.3, requires_grad=True),
                Tensor(rng.normal(size=d) * 0.1, requires_grad=True))
        for label, din in d_in_by_pair.items()
    }
    return PairwiseParams(
        private=private,
        w_shared=Tensor(rng.normal(size=(d, d)) * 0.3, requires_grad=True),
        b_shared=Tensor(rng.normal(size=d) * 0.1, requires_grad=True),
        shared_activation=activation,
    )


def test_private_zero_params_give_zero():
    dims = {"av": 6, "at": 8, "vt": 12}
    private = {k: (Tensor(np.zeros((v, 4)), requires_grad=True),
                   Tensor(np.zeros(4), requires_grad=True)) for k, v in dims.items()}
    params = PairwiseParams(private, Tensor(np.zeros((4, 4))), Tensor(np.zeros(4)))
    rng = np.random.default_rng(239)
    z = BimodalOuter(Tensor(rng.normal(size=6)), Tensor(rng.normal(size=8)),
                     Tensor(rng.normal(size=12)))
    out = private_project(z, params)
    for v in out.values():
        np.testing.assert_array_equal(v.data, np.zeros(4))


def test_private_relu_clamps_negative_preactivations():
    params = PairwiseParams(
        private={"av": (Tensor(np.zeros((3, 2))), Tensor(np.full(2, -5.0)))},
        w_shared=Tensor(np.eye(2)), b_shared=Tensor(np.zeros(2)))
    z = BimodalOuter(Tensor(np.ones(3)), Tensor(np.zeros(0)), Tensor(np.zeros(0)))
    out = private_project(z, params)
    np.testing.assert_array_equal(out["av"].data, np.zeros(2))


def test_private_matches_affine_relu_oracle():
    rng = np.random.default_rng(241)
    dims = {"av": 6, "at": 10, "vt": 15}
    params = _params(rng, dims, d=4)
    z = BimodalOuter(*(Tensor(rng.normal(size=dims[k])) for k in ("av", "at", "vt")))
    out = private_project(z, params)
    for label in dims:
        w, b = params.private[label]
        ref = np.maximum(getattr(z, label).data @ w.data + b.data, 0.0)
        np.testing.assert_allclose(out[label].data, ref, atol=1e-12)


def test_shared_layer_is_shared():
    rng = np.random.default_rng(251)
    params = _params(rng, {"av": 4, "at": 4, "vt": 4}, d=3)
    x = Tensor(rng.normal(size=3))
    np.testing.assert_array_equal(shared_project(x, params).data,
                                  shared_project(x, params).data)


def test_shared_identity_passthrough():
    params = PairwiseParams(private={}, w_shared=Tensor(np.eye(3)),
                            b_shared=Tensor(np.zeros(3)))
    x = np.array([0.5, 0.0, 2.0])  # non-negative, relu transparent
    np.testing.assert_array_equal(shared_project(Tensor(x), params).data, x)


def test_shared_linear_activation_option():
    params = PairwiseParams(private={}, w_shared=Tensor(np.eye(2)),
                            b_shared=Tensor(np.zeros(2)), shared_activation="linear")
    x = np.array([-1.0, 2.0])
    np.testing.assert_array_equal(shared_project(Tensor(x), params).data, x)


def test_shared_gradient_accumulates_over_branches():
    rng = np.random.default_rng(257)
    e = embedding(t=rng.normal(size=3), a=rng.normal(size=2), v=rng.normal(size=2))
    params = _params(rng, {"av": 4, "at": 6, "vt": 6}, d=3)

    def loss_value():
        f = fuse_pairs(e, params)
        return float(sum(x.data.sum() for x in (f.av, f.at, f.vt)))

    with Tape():
        f = fuse_pairs(e, params)
        loss = tsum(f.av) + tsum(f.at) + tsum(f.vt)
    backward(loss)

    def f_of_theta(v):
        orig = params.w_shared.data
        params.w_shared.data = v
        try:
            return loss_value()
        finally:
            params.w_shared.data = orig

    num = numeric_grad(f_of_theta, params.w_shared.data.copy())
    assert rel_err(params.w_shared.grad, num) < 1e-6
    # single-branch gradient would differ: zeroing two branches changes it
    assert np.any(np.abs(params.w_shared.grad) > 1e-12)
