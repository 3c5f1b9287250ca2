import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eqdense import tensor as T
from eqdense.errors import ContractError, DimensionError, UninitializedStateError, UnsupportedSizeError
from eqdense.groups import elements, get_tables
from eqdense.layers import (
    BatchNormState,
    GFeatureMap,
    GFilterBank,
    expand_filters,
    gconv,
    group_batchnorm,
    group_pool,
    lift_conv,
    transform_feature_map,
)
from eqdense.tensor import Tensor

from oracles import gconv_oracle, lift_oracle, numeric_grad, rel_error, transform_square

S = {"trivial": 1, "C4": 4, "D4": 8}


def _bank(rng, o, c, s_in, k, kind, dtype=np.float64):
    return GFilterBank(Tensor(rng.standard_normal((o, c, s_in, k, k)).astype(dtype)), kind)


@pytest.mark.parametrize("kind", ["trivial", "C4", "D4"])
def test_lift_matches_oracle(kind, rng):
    x = rng.standard_normal((2, 2, 6, 6))
    bank = _bank(rng, 3, 2, 1, 3, kind)
    out = lift_conv(Tensor(x), bank)
    np.testing.assert_allclose(out.tensor.data, lift_oracle(x, bank.weights.data, kind), atol=1e-10)


@pytest.mark.parametrize("kind", ["C4", "D4"])
def test_gconv_matches_oracle(kind, rng):
    f = rng.standard_normal((1, 2, S[kind], 5, 5))
    bank = _bank(rng, 2, 2, S[kind], 3, kind)
    out = gconv(GFeatureMap(Tensor(f), kind), bank)
    np.testing.assert_allclose(out.tensor.data, gconv_oracle(f, bank.weights.data, kind), atol=1e-10)


def test_gconv_one_by_one_mixes_orientations(rng):
    f = rng.standard_normal((1, 1, 8, 3, 3))
    bank = _bank(rng, 1, 1, 8, 1, "D4")
    np.testing.assert_allclose(gconv(GFeatureMap(Tensor(f), "D4"), bank).tensor.data,
                               gconv_oracle(f, bank.weights.data, "D4"), atol=1e-10)


def test_expand_filters_blocks(rng):
    bank = _bank(rng, 2, 3, 8, 3, "D4")
    big = expand_filters(bank).data
    t = get_tables("D4")
    w = bank.weights.data
    assert big.shape == (16, 24, 3, 3)
    for s in t.elements:
        for tt in t.elements:
            src = t.compose[t.inverse[s.index], tt.index]
            block = big[1 * 8 + s.index, 2 * 8 + tt.index]
            np.testing.assert_array_equal(block, transform_square(w[1, 2, src], s.matrix))


def test_expand_filters_gradient(rng):
    w = rng.standard_normal((2, 1, 4, 3, 3))
    t = Tensor(w.copy(), requires_grad=True)
    R = rng.standard_normal((8, 4, 3, 3))
    T.backward(T.sum(T.mul(expand_filters(GFilterBank(t, "C4")), R)))
    num = numeric_grad(lambda: float((expand_filters(GFilterBank(Tensor(w), "C4")).data * R).sum()), w)
    assert rel_error(t.grad, num) < 1e-6


@pytest.mark.parametrize("kind", ["C4", "D4"])
def test_lift_equivariance_every_element(kind, rng):
    x = rng.standard_normal((2, 3, 9, 9))
    bank = _bank(rng, 2, 3, 1, 3, kind)
    base = lift_conv(Tensor(x), bank).tensor.data
    for g in elements(kind):
        moved = lift_conv(Tensor(transform_feature_map(x, g)), bank).tensor.data
        np.testing.assert_allclose(moved, transform_feature_map(base, g), atol=1e-12)


@pytest.mark.parametrize("kind", ["C4", "D4"])
def test_gconv_equivariance_every_element(kind, rng):
    f = rng.standard_normal((2, 2, S[kind], 7, 7))
    bank = _bank(rng, 3, 2, S[kind], 3, kind)
    base = gconv(GFeatureMap(Tensor(f), kind), bank).tensor.data
    for g in elements(kind):
        moved = gconv(GFeatureMap(Tensor(transform_feature_map(f, g)), kind), bank).tensor.data
        np.testing.assert_allclose(moved, transform_feature_map(base, g), atol=1e-12)


@given(seed=st.integers(0, 10_000), c=st.integers(1, 3), k=st.sampled_from([1, 3, 5]),
       kind=st.sampled_from(["C4", "D4"]), g=st.integers(0, 7))
def test_gconv_equivariance_property(seed, c, k, kind, g):
    r = np.random.default_rng(seed)
    el = elements(kind)[g % S[kind]]
    f = r.standard_normal((1, c, S[kind], k + 3, k + 3))
    bank = _bank(r, 2, c, S[kind], k, kind)
    base = gconv(GFeatureMap(Tensor(f), kind), bank).tensor.data
    moved = gconv(GFeatureMap(Tensor(transform_feature_map(f, el)), kind), bank).tensor.data
    np.testing.assert_allclose(moved, transform_feature_map(base, el), atol=1e-10)


def test_trivial_lift_is_plain_conv(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    bank = _bank(rng, 3, 2, 1, 3, "trivial")
    out = lift_conv(Tensor(x), bank).tensor.data
    ref = T.conv2d_valid(Tensor(x), Tensor(bank.weights.data[:, :, 0])).data
    np.testing.assert_allclose(out[:, :, 0], ref, atol=1e-12)


def test_group_pool_invariance(rng):
    f = rng.standard_normal((1, 2, 8, 4, 4))
    pooled = group_pool(GFeatureMap(Tensor(f), "D4")).data
    for g in elements("D4"):
        moved = group_pool(GFeatureMap(Tensor(transform_feature_map(f, g)), "D4")).data
        np.testing.assert_allclose(moved, transform_feature_map(pooled, g), atol=1e-12)
    with pytest.raises(ContractError):
        group_pool(GFeatureMap(Tensor(np.zeros((1, 1, 1, 2, 2))), "trivial"))


def test_batchnorm_pools_over_orientations(rng):
    f = rng.standard_normal((3, 2, 4, 5, 5)) * 3 + 1
    state = BatchNormState()
    out = group_batchnorm(GFeatureMap(Tensor(f), "C4"), Tensor(np.ones(2)), Tensor(np.zeros(2)), state)
    o = out.tensor.data
    np.testing.assert_allclose(o.mean(axis=(0, 2, 3, 4)), 0, atol=1e-10)
    np.testing.assert_allclose(o.var(axis=(0, 2, 3, 4)), 1, atol=1e-4)
    # running stats start from the first batch, variance unbiased
    m = f.size // 2
    np.testing.assert_allclose(state.running_mean, f.mean(axis=(0, 2, 3, 4)))
    np.testing.assert_allclose(state.running_var, f.var(axis=(0, 2, 3, 4)) * m / (m - 1))
    assert state.steps == 1


def test_batchnorm_equivariance_and_eval(rng):
    f = rng.standard_normal((2, 2, 8, 5, 5))
    gamma, beta = Tensor(rng.standard_normal(2)), Tensor(rng.standard_normal(2))
    state = BatchNormState()
    with pytest.raises(UninitializedStateError):
        group_batchnorm(GFeatureMap(Tensor(f), "D4"), gamma, beta, state, mode="eval")
    first = group_batchnorm(GFeatureMap(Tensor(f), "D4"), gamma, beta, state).tensor.data
    for mode in ("train", "eval"):
        ref = group_batchnorm(GFeatureMap(Tensor(f), "D4"), gamma, beta, state, mode, update_state=False).tensor.data
        for g in elements("D4"):
            moved = group_batchnorm(GFeatureMap(Tensor(transform_feature_map(f, g)), "D4"), gamma, beta,
                                    state, mode, update_state=False).tensor.data
            np.testing.assert_allclose(moved, transform_feature_map(ref, g), atol=1e-10)
        if mode == "train":
            np.testing.assert_array_equal(ref, first)
    assert state.steps == 1


def test_batchnorm_momentum():
    state = BatchNormState()
    state.update(np.array([1.0]), np.array([2.0]), 3)
    state.update(np.array([3.0]), np.array([4.0]), 3)
    np.testing.assert_allclose(state.running_mean, [0.9 * 1 + 0.1 * 3])
    np.testing.assert_allclose(state.running_var, [0.9 * 3 + 0.1 * 6])


def test_layer_gradients_through_lift_gconv_pool(rng):
    x = rng.standard_normal((1, 1, 7, 7))
    w1 = rng.standard_normal((2, 1, 1, 3, 3))
    w2 = rng.standard_normal((1, 2, 4, 3, 3))

    def loss(xt, a, b):
        h = lift_conv(xt, GFilterBank(a, "C4"))
        h = gconv(h, GFilterBank(b, "C4"))
        return T.sum(T.mul(group_pool(h), group_pool(h)))

    ts = [Tensor(v.copy(), requires_grad=True) for v in (x, w1, w2)]
    T.backward(loss(*ts))
    for arr, t in zip((x, w1, w2), ts):
        num = numeric_grad(lambda: float(loss(Tensor(x), Tensor(w1), Tensor(w2)).data), arr)
        assert rel_error(t.grad, num) < 1e-6


def test_contract_errors(rng):
    with pytest.raises(DimensionError):
        GFeatureMap(Tensor(np.zeros((1, 1, 3, 2, 2))), "D4")
    with pytest.raises(DimensionError):
        GFilterBank(Tensor(np.zeros((1, 1, 3, 3, 3))), "D4")
    with pytest.raises(ContractError):
        lift_conv(Tensor(np.zeros((1, 1, 5, 5))), _bank(rng, 1, 1, 8, 3, "D4"))
    with pytest.raises(ContractError):
        gconv(GFeatureMap(Tensor(np.zeros((1, 1, 4, 5, 5))), "C4"), _bank(rng, 1, 1, 8, 3, "D4"))
    with pytest.raises(UnsupportedSizeError):
        lift_conv(Tensor(np.zeros((1, 1, 5, 5))), _bank(rng, 1, 1, 1, 2, "D4"))
