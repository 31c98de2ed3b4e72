import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miniweave import lora
from miniweave import tensor as T
from miniweave.nn import Linear, Module


class Tiny(Module):
    def __init__(self):
        rng = np.random.default_rng(0)
        self.query = Linear(8, 8, rng=rng)
        self.value = Linear(8, 8, rng=rng)
        self.assign_names()

    def __call__(self, x):
        return self.value(T.silu(self.query(x)))


def test_hand_example():
    ad = lora.LoraAdapter(2, 2, rank=1, dropout=0.0)
    ad.A.data = np.array([[1.0, 0.0]], dtype=np.float32)
    ad.B.data = np.array([[1.0], [0.0]], dtype=np.float32)
    out = lora.apply(T.Tensor(np.array([2.0, 3.0])), np.eye(2), ad)
    np.testing.assert_array_equal(out.data, [4.0, 3.0])


@pytest.mark.parametrize("scale", [0.0, 1.0])
def test_fresh_or_zero_scale_is_identity(scale):
    rng = np.random.default_rng(1)
    w, x = rng.standard_normal((6, 8)), rng.standard_normal((3, 8))
    ad = lora.LoraAdapter(8, 6, rank=2, scale=scale, seed=4)
    if scale == 0.0:
        ad.B.data = rng.standard_normal(ad.B.shape).astype(np.float32)
    assert np.array_equal(lora.apply(T.Tensor(x), w, ad).data, T.linear(T.Tensor(x), T.Tensor(w)).data)


@pytest.mark.parametrize("rank", [0, 5])
def test_rank_bounds(rank):
    with pytest.raises(lora.LoraConfigError):
        lora.LoraAdapter(8, 8, rank=rank)


def test_shape_mismatch():
    with pytest.raises(lora.LoraConfigError):
        lora.apply(T.Tensor(np.ones(8)), np.ones((6, 4)), lora.LoraAdapter(8, 6, rank=2))


def test_attach_detach_round_trip():
    m = Tiny()
    x = T.Tensor(np.random.default_rng(2).standard_normal((4, 8)))
    base = m(x).data
    ads = lora.attach(m, "value", rank=2, seed=3)
    assert list(ads) == ["value"] and np.array_equal(m(x).data, base)
    ads["value"].B.data += 0.5
    assert not np.array_equal(m(x).data, base)
    lora.detach(m)
    assert np.array_equal(m(x).data, base)
    assert lora.adapters_of(m) == {}


def test_selector_without_match():
    with pytest.raises(lora.LoraConfigError):
        lora.attach(Tiny(), "*.to_v")


def test_base_weight_frozen():
    m = Tiny()
    ads = lora.attach(m, "value", rank=2)
    ads["value"].B.data += 0.1
    x = T.Tensor(np.random.default_rng(0).standard_normal((4, 8)))
    T.sum_(m(x)).backward()
    assert m.value.weight.grad is None and m.value.bias.grad is None
    assert ads["value"].A.grad is not None and ads["value"].B.grad is not None


def test_dropout_only_in_training():
    ad = lora.LoraAdapter(8, 8, rank=2, dropout=0.5, seed=0)
    ad.B.data = np.ones_like(ad.B.data)
    x = T.Tensor(np.ones((4, 8)))
    a, b = ad(x).data, ad(x).data
    assert np.array_equal(a, b)
    ad.train()
    assert not np.array_equal(ad(x).data, a)


@settings(max_examples=25, deadline=None)
@given(d=st.integers(2, 10), k=st.integers(2, 10), seed=st.integers(0, 2**16))
def test_merge_matches_apply(d, k, seed):
    rng = np.random.default_rng(seed)
    r = max(1, min(d, k) // 2)
    ad = lora.LoraAdapter(k, d, rank=r, scale=0.7, dropout=0.0, seed=seed)
    ad.B.data = rng.standard_normal(ad.B.shape).astype(np.float32)
    w = rng.standard_normal((d, k)).astype(np.float32)
    x = rng.standard_normal((3, k)).astype(np.float32)
    merged = x @ lora.merge(ad, w).T
    np.testing.assert_allclose(lora.apply(T.Tensor(x), w, ad).data, merged, atol=1e-5)
