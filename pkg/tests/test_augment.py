import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import dct_oracle
from stgcl.augment import (MASK_VALUE, AugmentError, AugmentSpec, augment_batch, dct, edge_mask, idct,
                           input_mask, input_smooth, smoothing_scales, temporal_shift)


@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_dct_matches_definition_and_inverts(length, seed):
    x = np.random.default_rng(seed).normal(size=(length, 3))
    np.testing.assert_allclose(dct(x), dct_oracle(x), atol=1e-10)
    np.testing.assert_allclose(idct(dct(x)), x, atol=1e-10)


def test_dct_is_orthonormal():
    x = np.random.default_rng(0).normal(size=24)
    assert np.linalg.norm(dct(x)) == pytest.approx(np.linalg.norm(x))


def test_edge_mask_rate_and_identity(rng):
    a = rng.uniform(0.1, 1.0, (200, 200))
    np.testing.assert_array_equal(edge_mask(a, 0.0, rng), a)
    masked = edge_mask(a, 0.3, rng)
    assert ((masked == 0) | (masked == a)).all()
    assert (masked == 0).mean() == pytest.approx(0.3, abs=0.01)


def test_input_mask_uses_minus_one(rng):
    x = rng.normal(size=(100, 100))
    out = input_mask(x, 0.5, rng)
    assert set(np.unique(out[out != x])) == {MASK_VALUE}
    np.testing.assert_array_equal(input_mask(x, 0.0, rng), x)


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
       st.floats(0, 1))
def test_temporal_shift_is_convex(x, nxt, alpha):
    out = temporal_shift(x, nxt, alpha)
    lo, hi = np.minimum(x, nxt), np.maximum(x, nxt)
    assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


def test_temporal_shift_alpha_one_is_identity(rng):
    x, nxt = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    np.testing.assert_array_equal(temporal_shift(x, nxt, 1.0), x)
    with pytest.raises(AugmentError):
        temporal_shift(x, nxt[:3], 0.5)


@given(st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_smoothing_scales_stay_in_range(r_is, seed):
    r = np.random.default_rng(seed)
    a = r.uniform(0, 1, (5, 5)) * (r.random((5, 5)) < 0.5)
    norm = (a + np.eye(5)) / (a + np.eye(5)).sum(axis=1, keepdims=True)
    m = smoothing_scales(24, 4, 5, r_is, r, norm)
    assert m.shape == (20, 5)
    assert (m >= r_is - 1e-12).all() and (m <= 1 + 1e-12).all()


def test_input_smooth_keeps_low_frequencies(rng):
    full = rng.normal(size=(24, 3))
    out = input_smooth(full, e_is=5, r_is=0.2, rng=rng)
    np.testing.assert_allclose(dct(out)[:5], dct(full)[:5], atol=1e-12)
    assert np.linalg.norm(dct(out)[5:]) < np.linalg.norm(dct(full)[5:])
    np.testing.assert_allclose(input_smooth(full, 5, 1.0, rng), full, atol=1e-12)
    assert input_smooth(full, 5, 0.5, rng, history=12).shape == (12, 3)


def test_spec_validation():
    with pytest.raises(AugmentError):
        AugmentSpec("rotate")
    with pytest.raises(AugmentError):
        AugmentSpec("input_mask", r_im=1.5)


def test_augment_batch_changes_only_the_target_channel(small_data):
    ds, graph = small_data
    batch = ds.instances("train").gather(np.arange(8))
    specs = [AugmentSpec("input_mask", r_im=0.3), AugmentSpec("temporal_shift"),
             AugmentSpec("input_smooth", e_is=6), AugmentSpec("edge_mask", r_em=0.5)]
    x, adj = augment_batch(batch, specs, graph.adjacency, graph.normalized, seed=0, epoch=0, batch_no=0)
    np.testing.assert_array_equal(x[..., 1], batch.x[..., 1])
    assert not np.array_equal(x[..., 0], batch.x[..., 0])
    assert adj.shape == graph.adjacency.shape and (adj <= graph.adjacency).all()


def test_augment_batch_is_keyed_by_instance(small_data):
    ds, graph = small_data
    inst = ds.instances("train")
    spec = [AugmentSpec("input_mask", r_im=0.3)]
    whole, _ = augment_batch(inst.gather([3, 7]), spec, graph.adjacency, graph.normalized, 1, 2, 0)
    alone, _ = augment_batch(inst.gather([7]), spec, graph.adjacency, graph.normalized, 1, 2, 5)
    np.testing.assert_array_equal(whole[1], alone[0])
    other, _ = augment_batch(inst.gather([7]), spec, graph.adjacency, graph.normalized, 1, 2, 5, view=1)
    assert not np.array_equal(other, alone)


def test_identity_settings_return_the_input(small_data):
    ds, graph = small_data
    batch = ds.instances("train").gather(np.arange(6))
    for spec in (AugmentSpec("input_mask", r_im=0.0), AugmentSpec("edge_mask", r_em=0.0),
                 AugmentSpec("temporal_shift", r_ts=1.0), AugmentSpec("input_smooth", r_is=1.0)):
        x, adj = augment_batch(batch, [spec], graph.adjacency, graph.normalized, 0, 0, 0)
        np.testing.assert_allclose(x, batch.x, atol=1e-9)
        if adj is not None:
            np.testing.assert_array_equal(adj, graph.adjacency)
