import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caid import tensor as T
from caid.networks import (
    Decoder, Encoder, EncoderSpec, build_model, ema_update, extract_all_features, extract_features,
)
from caid.nn import Linear, Module
from caid.rng import Stream
from caid.tensor import Tensor


def _linears(seq):
    return [m for m in seq.layers if isinstance(m, Linear)]


def test_same_seed_identical_params():
    a = build_model("moco_v2", seed=3).state_dict()
    b = build_model("moco_v2", seed=3).state_dict()
    c = build_model("moco_v2", seed=4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        build_model("byol")


def test_heads_per_method():
    moco = build_model("moco_v2")
    barlow = build_model("barlow_twins")
    simsiam = build_model("simsiam")
    assert [l.weight.shape for l in _linears(moco.projector)] == [(128, 128), (64, 128)]
    assert len(_linears(barlow.projector)) == 3 and not barlow.has_predictor
    assert len(_linears(simsiam.projector)) == 3 and simsiam.has_predictor
    assert [l.weight.shape for l in _linears(simsiam.predictor)] == [(16, 64), (64, 16)]
    assert hasattr(moco, "momentum_encoder") and not hasattr(barlow, "momentum_encoder")


def test_layer5_feature_dim():
    model = build_model("barlow_twins").eval()
    taps = model.encoder(Tensor(np.zeros((1, 1, 32, 32), np.float32)))
    assert len(taps) == 5
    assert T.global_avg_pool(taps[-1]).shape == (1, 128)
    assert [t.shape[1] for t in taps] == [16, 16, 32, 64, 128]


def test_zero_init_final_bn_scale():
    enc = build_model("simsiam").encoder
    for stage in enc.stages:
        for block in stage.layers:
            assert not np.any(block.bn2.weight.data)


def test_param_count_is_pure_function_of_spec():
    counts = {
        (m, s): sum(p.size for p in build_model(m, seed=s).encoder.parameters())
        for m in ("moco_v2", "simsiam") for s in (0, 1)
    }
    assert len(set(counts.values())) == 1
    wide = EncoderSpec(stage_channels=(16, 32, 64, 256))
    assert sum(p.size for p in build_model("moco_v2", wide).encoder.parameters()) > counts[("moco_v2", 0)]


def test_decoder_output_shape():
    model = build_model("moco_v2")
    for n in (1, 3):
        x = Tensor(np.random.default_rng(0).random((n, 1, 32, 32)).astype(np.float32))
        assert model.decoder(model.encoder(x)).shape == (n, 1, 32, 32)


def test_ema_examples():
    a, b = Module(), Module()
    a.w = Tensor(np.array([4.0]), requires_grad=True, dtype=np.float64)
    b.w = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    ema_update(a, b, 0.5)
    assert b.w.data[0] == 3.0
    ema_update(a, b, 1.0)
    assert b.w.data[0] == 3.0
    ema_update(a, b, 0.0)
    assert b.w.data[0] == 4.0


def test_ema_errors():
    a, b = Module(), Module()
    a.w = Tensor(np.zeros(2), requires_grad=True)
    b.w = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        ema_update(a, b, 0.5)
    with pytest.raises(ValueError):
        ema_update(a, a, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_ema_contraction(m, seed):
    rng = np.random.default_rng(seed)
    a, b = Module(), Module()
    a.w = Tensor(rng.standard_normal(5), requires_grad=True, dtype=np.float64)
    b.w = Tensor(rng.standard_normal(5), requires_grad=True, dtype=np.float64)
    before = b.w.data - a.w.data
    ema_update(a, b, m)
    np.testing.assert_allclose(np.abs(b.w.data - a.w.data), m * np.abs(before), atol=1e-12)


def test_momentum_params_get_no_gradient():
    model = build_model("moco_v2")
    x = Tensor(np.random.default_rng(0).random((2, 1, 32, 32)).astype(np.float32))
    loss = T.mean_square(model.embed(x)) + T.mean_square(model.momentum_projector(
        T.global_avg_pool(model.momentum_encoder(x)[-1])))
    loss.backward()
    assert all(p.grad is None or not np.any(p.grad) for p in model.momentum_encoder.parameters())
    assert all(not p.requires_grad for p in model.momentum_projector.parameters())
    assert any(p.grad is not None for p in model.encoder.parameters())


def test_extract_features_constant_stem():
    spec = EncoderSpec()
    enc = Encoder(spec, Stream(0))
    c, v = 0.01, 0.5
    enc.stem.weight.data[:] = c
    # stride-2 3x3 conv with padding 1 on a 32x32 constant image: the first
    # output row/column sees padding, giving 15*15 interior taps of 9 pixels,
    # 2*15 edge taps of 6 and one corner tap of 4
    expected = c * v * (15 * 15 * 9 + 2 * 15 * 6 + 4) / 256 / math.sqrt(1 + 1e-5)
    feats = extract_features(enc, np.full((2, 32, 32), v, np.float32), 1)
    assert feats.shape == (2, 16)
    np.testing.assert_allclose(feats, expected, rtol=1e-5)


def test_extract_features_identical_rows_and_width():
    model = build_model("moco_v2", seed=1)
    img = np.random.default_rng(0).random((32, 32)).astype(np.float32)
    feats = extract_features(model.encoder, np.stack([img, img]), 5)
    assert feats.shape == (2, 128)
    assert np.array_equal(feats[0], feats[1])


def test_extract_features_invalid_layer():
    with pytest.raises(ValueError):
        extract_features(build_model("moco_v2").encoder, np.zeros((1, 32, 32)), 6)


def test_eval_forward_batch_invariant():
    model = build_model("barlow_twins", seed=2)
    # give batch norm non-trivial running stats
    model.train()
    rng = np.random.default_rng(0)
    model.encoder(Tensor(rng.random((8, 1, 32, 32)).astype(np.float32)))
    imgs = rng.random((5, 32, 32)).astype(np.float32)
    batch = extract_all_features(model.encoder, imgs)
    for i in range(5):
        single = extract_all_features(model.encoder, imgs[i : i + 1])
        for layer in range(5):
            np.testing.assert_allclose(single[layer][0], batch[layer][i], atol=1e-6)


def test_eval_forward_deterministic():
    model = build_model("simsiam", seed=5)
    imgs = np.random.default_rng(1).random((3, 32, 32)).astype(np.float32)
    a = extract_all_features(model.encoder, imgs)
    b = extract_all_features(model.encoder, imgs)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_decoder_uses_every_stage():
    enc = Encoder(EncoderSpec(), Stream(0))
    dec = Decoder(EncoderSpec(), Stream(1))
    x = Tensor(np.random.default_rng(0).random((2, 1, 32, 32)).astype(np.float32))
    taps = [Tensor(t.data, requires_grad=True) for t in enc(x)]
    T.mean_square(dec(taps)).backward()
    assert all(t.grad is not None and np.any(t.grad) for t in taps)
