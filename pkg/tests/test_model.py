import numpy as np
import pytest

from stgcl.data import ZScore
from stgcl.model import (EncoderConfig, ModelError, ModelParams, decode, encode, load_checkpoint,
                         parameter_count, project, readout, save_checkpoint)
from stgcl.tensor import Tape, Tensor

CFG = EncoderConfig(hidden=8, decoder_hidden=16)


def _inputs(rng, m=3, n=5):
    x = rng.normal(size=(m, CFG.history, n, 2))
    return x, np.full((n, n), 1.0 / n)


def test_shapes(rng):
    params = ModelParams.init(CFG, seed=0)
    x, adj = _inputs(rng)
    with Tape("eval"):
        h = encode(x, adj, params)
        y = decode(h, params, ZScore(10.0, 2.0))
        g = project(readout(h), params, "proj_graph")
        z = project(h, params, "proj_node")
    assert h.shape == (3, 5, 8)
    assert y.shape == (3, CFG.horizon, 5, 1)
    assert g.shape == (3, 8)
    assert z.shape == (3, 5, 8)
    assert (h.data >= 0).all()


def test_parameter_count_by_hand():
    d, hid, layers, hops = 8, 16, 4, 3
    per_layer = 2 * (2 * d * d + d) + (d * d + d) + hops * d * d + d
    heads = 2 * (2 * (d * d + d) + 2 * d)
    expected = 2 * d + d + layers * per_layer + (d * hid + hid) + (hid * 12 + 12) + heads
    assert parameter_count(CFG) == expected == ModelParams.init(CFG).count()


def test_init_is_seeded_and_bounded():
    a, b, c = ModelParams.init(CFG, 1), ModelParams.init(CFG, 1), ModelParams.init(CFG, 2)
    np.testing.assert_array_equal(a["enc.0.filter.w"].data, b["enc.0.filter.w"].data)
    assert not np.array_equal(a["enc.0.filter.w"].data, c["enc.0.filter.w"].data)
    assert np.abs(a["dec.1.w"].data).max() <= 1 / np.sqrt(8)
    assert np.abs(a["dec.1.b"].data).max() <= 1 / np.sqrt(8)


def test_receptive_field_must_cover_history():
    with pytest.raises(ModelError):
        EncoderConfig(dilations=(1, 2))
    assert EncoderConfig.graph_wavenet().receptive_field == 13


def test_disconnected_nodes_do_not_interact(rng):
    params = ModelParams.init(CFG, 0)
    x, _ = _inputs(rng)
    ident = np.eye(5)
    with Tape("eval"):
        base = encode(x, ident, params).data
        x2 = x.copy()
        x2[:, :, 2, 0] += 5.0
        moved = encode(x2, ident, params).data
    changed = np.abs(moved - base).max(axis=(0, 2)) > 0
    assert changed.tolist() == [False, False, True, False, False]


def test_graph_mixing_spreads_information(rng):
    params = ModelParams.init(CFG, 0)
    x, adj = _inputs(rng)
    x2 = x.copy()
    x2[:, :, 2, 0] += 5.0
    with Tape("eval"):
        delta = np.abs(encode(x2, adj, params).data - encode(x, adj, params).data)
    assert (delta.max(axis=(0, 2)) > 0).all()


def test_eval_is_deterministic_and_train_uses_dropout(rng):
    params = ModelParams.init(CFG, 0)
    x, adj = _inputs(rng)
    with Tape("eval"):
        a = encode(x, adj, params).data
    with Tape("eval"):
        b = encode(x, adj, params).data
    np.testing.assert_array_equal(a, b)
    with Tape("train", seed=0, key=(0,)):
        c = encode(x, adj, params).data
    assert not np.array_equal(a, c)


def test_decoder_returns_original_scale():
    params = ModelParams.init(CFG, 0)
    params["dec.2.w"].data[:] = 0.0
    params["dec.2.b"].data[:] = 0.0
    with Tape("eval"):
        y = decode(Tensor(np.ones((2, 4, 8))), params, ZScore(42.0, 3.0))
    np.testing.assert_allclose(y.data, 42.0)


def test_input_shape_errors(rng):
    params = ModelParams.init(CFG, 0)
    with pytest.raises(ModelError):
        encode(np.zeros((2, 11, 5, 2)), np.eye(5), params)
    with pytest.raises(ModelError):
        encode(np.zeros((2, 12, 5, 2)), np.eye(4), params)
    with pytest.raises(ModelError):
        project(Tensor(np.ones((2, 8))), params, "proj_other")


def test_checkpoint_round_trip(tmp_path, rng):
    params = ModelParams.init(CFG, 3)
    params.bn["proj_graph.bn"]["mean"][:] = 0.25
    save_checkpoint(tmp_path / "m.stgc", params, {"note": "x"})
    loaded, echo = load_checkpoint(tmp_path / "m.stgc")
    assert echo["note"] == "x" and echo["model"] == CFG.to_dict()
    assert loaded.config == CFG
    for k, v in params.snapshot().items():
        np.testing.assert_array_equal(loaded.snapshot()[k], v)
    x, adj = _inputs(rng)
    with Tape("eval"):
        np.testing.assert_array_equal(encode(x, adj, loaded).data, encode(x, adj, params).data)


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(tmp_path / "m.stgc", ModelParams.init(CFG, 0))
    raw = (tmp_path / "m.stgc").read_bytes()
    (tmp_path / "magic.stgc").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ModelError, match="magic"):
        load_checkpoint(tmp_path / "magic.stgc")
    (tmp_path / "cut.stgc").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "cut.stgc")


def test_restore_by_prefix():
    a, b = ModelParams.init(CFG, 0), ModelParams.init(CFG, 1)
    b.restore(a.snapshot(), prefixes=("enc.",))
    np.testing.assert_array_equal(b["enc.1.gate.w"].data, a["enc.1.gate.w"].data)
    assert not np.array_equal(b["dec.1.w"].data, a["dec.1.w"].data)
