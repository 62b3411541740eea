import math

import numpy as np
import pytest

from caid import objectives as obj
from caid.checkpoint import dumps
from caid.data import Dataset, SyntheticConfig, generate_synthetic
from caid.networks import build_model
from caid.pretrain import RunConfig, pretrain, split_indices, split_info_nce
from caid.tensor import Tensor


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticConfig(n=48), seed=0)


def cfg(**kw):
    base = dict(epochs_warmup=1, epochs_joint=1, batch_size=8, queue_size=64)
    base.update(kw)
    return RunConfig(**base)


def test_split_indices_partition():
    train, val = split_indices(103, 0.1, 4)
    assert len(val) == 10 and len(train) == 93
    assert sorted(np.concatenate([train, val]).tolist()) == list(range(103))
    assert np.array_equal(split_indices(103, 0.1, 4)[1], val)


def test_split_info_nce_uniform_keys():
    q = np.tile([1.0, 0.0], (5, 1))
    k = np.tile([0.6, 0.8], (5, 1))
    assert abs(split_info_nce(q, k, 0.2) - math.log(5)) < 1e-12


def test_split_info_nce_matches_queue_form():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((4, 3))
    k = rng.standard_normal((4, 3))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    rows = [
        float(obj.info_nce(Tensor(q[i], dtype=np.float64), Tensor(k[i], dtype=np.float64),
                           np.delete(k, i, axis=0), 0.5).data)
        for i in range(4)
    ]
    assert abs(split_info_nce(q, k, 0.5) - np.mean(rows)) < 1e-9


def test_history_and_best_selection(small):
    res = pretrain(cfg(), small)
    assert [h.phase for h in res.history] == ["warmup", "joint"]
    assert all(res.best.val_loss <= np.float32(h.val_loss) for h in res.history)
    assert res.last.epoch == 1
    assert any(k.startswith("decoder.") for k in res.best.tensors)
    assert len(res.step_id_losses) == 2 * (43 // 8)


def test_discrimination_loss_decreases():
    ds = generate_synthetic(SyntheticConfig(n=64), seed=1)
    res = pretrain(cfg(method="barlow_twins", epochs_warmup=2, epochs_joint=0, batch_size=16), ds)
    steps = res.step_id_losses
    half = len(steps) // 2
    assert np.mean(steps[half:]) < np.mean(steps[:half])


def test_rerun_is_bit_identical(small):
    a = pretrain(cfg(), small)
    b = pretrain(cfg(), small)
    assert dumps(a.best) == dumps(b.best)
    assert dumps(a.last) == dumps(b.last)
    assert a.step_id_losses == b.step_id_losses


def test_zero_lambda_reproduces_plain_losses(small):
    plain = pretrain(cfg(epochs_warmup=2, epochs_joint=0), small)
    zero = pretrain(cfg(lambda_ca=0.0), small)
    assert plain.step_id_losses == zero.step_id_losses


@pytest.mark.parametrize("method", ["barlow_twins", "simsiam"])
def test_warmup_leaves_decoder_untouched(small, method):
    res = pretrain(cfg(method=method, epochs_joint=0), small)
    fresh = build_model(method, seed=0).decoder.state_dict()
    trained = res.model.decoder.state_dict()
    assert all(np.array_equal(fresh[k], trained[k]) for k in fresh)
    assert not any(k.startswith("decoder.") for k in res.best.tensors)


def test_config_round_trip_and_errors(small):
    c = cfg(lambda_ca=3.0)
    assert RunConfig.from_dict(c.to_dict()) == c
    assert c.digest() != cfg().digest()
    with pytest.raises(ValueError, match="unknown RunConfig"):
        RunConfig.from_dict({"epochs": 3})
    with pytest.raises(ValueError):
        RunConfig(method="byol")
    with pytest.raises(ValueError):
        RunConfig(lambda_ca=-1.0)
    with pytest.raises(ValueError, match="batch size"):
        pretrain(cfg(batch_size=64), small)
    with pytest.raises(ValueError, match="empty"):
        pretrain(cfg(), Dataset([]))
