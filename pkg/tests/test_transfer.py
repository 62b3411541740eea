import hashlib
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caid.checkpoint import Checkpoint
from caid.data import Dataset, ImageSample, SyntheticConfig, generate_synthetic
from caid.networks import EncoderSpec, build_model
from caid.pretrain import model_tensors
from caid.rng import Stream
from caid.transfer import (
    Classifier, DownstreamAugment, DownstreamTask, EvalResult, Segmenter, TransferError, auc, dice,
    evaluate, finetune, finetune_classification, initialise, mean_auc, read_results_csv, subset_labels,
    write_results_csv,
)


def auc_pairs(scores, labels):
    """Direct count over every positive/negative pair."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def dice_count(a, b, s=1e-6):
    inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
    return (2 * inter + s) / (int(a.sum()) + int(b.sum()) + s)


def digest(module):
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_matches_pair_count():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 30))
        labels = rng.random(n) < 0.5
        labels[0], labels[1] = True, False
        scores = rng.integers(0, 6, n).astype(float)  # plenty of ties
        assert auc(scores, labels) == auc_pairs(scores, labels)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal(20)
    labels = np.arange(20) % 2
    assert auc(scores, labels) == auc(np.exp(3 * scores) + 1, labels)


def test_auc_single_class_error_and_skip():
    with pytest.raises(TransferError):
        auc([0.1, 0.2], [1, 1])
    scores = np.array([[0.1, 0.3], [0.9, 0.2]])
    labels = np.array([[0, 1], [1, 1]])
    mean, skipped = mean_auc(scores, labels)
    assert mean == 1.0 and skipped == [1]


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[0, :] = True
    b = np.zeros((4, 4), bool)
    b[0, :2] = True
    b[1, :2] = True
    assert abs(dice(a, a) - 1.0) < 1e-6
    assert dice(a, ~a) < 1e-6
    assert abs(dice(a, b) - 0.5) < 1e-6
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(TransferError):
        dice(np.zeros((2, 2)), np.zeros((3, 3)))


def test_dice_matches_count():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a, b = rng.random((6, 6)) < 0.4, rng.random((6, 6)) < 0.4
        assert abs(dice(a, b) - dice_count(a, b)) < 1e-9
        assert dice(a, b) == dice(b, a)


# ---------------------------------------------------------------------------
# Results and subsets
# ---------------------------------------------------------------------------


def test_eval_result_stats_and_csv(tmp_path):
    r = EvalResult("caid", "auc")
    for s, v in enumerate([0.7, 0.8, 0.9]):
        r.add(s, v)
    assert r.mean == pytest.approx(0.8)
    assert r.std == pytest.approx(0.1)
    with pytest.raises(TransferError):
        r.add(3, 1.2)
    write_results_csv([r], tmp_path / "r.csv")
    (back,) = read_results_csv(tmp_path / "r.csv")
    assert back.values == r.values and back.seeds == [0, 1, 2]
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "arm,seed,metric,value"


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SyntheticConfig(n=200), seed=0)


def test_subset_examples(synth):
    assert subset_labels(synth, 1.0, 0) is synth
    sub = subset_labels(synth, 0.25, 3)
    assert len(sub) == 50
    assert [s.id for s in sub.samples] == [s.id for s in subset_labels(synth, 0.25, 3).samples]
    with pytest.raises(TransferError):
        subset_labels(synth, 0.01, 0, batch_size=16)
    with pytest.raises(TransferError):
        subset_labels(synth, 0.0, 0)


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def test_decoder_transfer_by_hash():
    spec = EncoderSpec()
    caid = build_model("moco_v2", spec, seed=5)
    with_dec = Checkpoint(model_tensors(caid, include_decoder=True))
    without = Checkpoint(model_tensors(caid, include_decoder=False))

    seg = Segmenter(spec, Stream(1))
    fresh_decoder = digest(seg.decoder)
    assert initialise(seg, with_dec) == {"encoder": True, "decoder": True}
    assert digest(seg.decoder) == digest(caid.decoder)
    assert digest(seg.encoder) == digest(caid.encoder)

    seg2 = Segmenter(spec, Stream(1))
    assert initialise(seg2, without) == {"encoder": True, "decoder": False}
    assert digest(seg2.decoder) == fresh_decoder


def test_classifier_head_stays_fresh():
    spec = EncoderSpec()
    ckpt = Checkpoint(model_tensors(build_model("simsiam", spec, seed=2), include_decoder=False))
    clf = Classifier(spec, 4, Stream(0))
    head = digest(clf.head)
    initialise(clf, ckpt)
    assert digest(clf.head) == head


def test_architecture_mismatch():
    ckpt = Checkpoint(model_tensors(build_model("moco_v2", EncoderSpec(stage_channels=(16, 32, 64, 256))), False))
    with pytest.raises(TransferError, match="mismatch"):
        initialise(Classifier(EncoderSpec(), 4, Stream(0)), ckpt)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def leaked_dataset(n=60, seed=0):
    """Each label lights up its own quadrant, so the image is the label."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        labels = (rng.random(4) < 0.5).astype(np.float32)
        img = np.zeros((32, 32), np.float32)
        for k in range(4):
            if labels[k]:
                r, c = divmod(k, 2)
                img[16 * r : 16 * r + 16, 16 * c : 16 * c + 16] = 1.0
        samples.append(ImageSample(f"s{i}", img, labels, (img > 0).astype(np.float32)))
    return Dataset(samples, ["a", "b", "c", "d"])


def test_leaked_labels_reach_near_perfect_auc():
    train, test = leaked_dataset(80, 0), leaked_dataset(40, 1)
    no_aug = DownstreamAugment(crop_min=32, p_flip=0.0, max_rotation=0.0, scale_range=(1.0, 1.0),
                               shift_range=(0.0, 0.0), warp_alpha=0.0)
    task = DownstreamTask(epochs=8, lr=1e-3, augment=no_aug)
    out = finetune(None, task, train, test, seed=0)
    assert out.test_metric > 0.95


def test_all_background_prediction_scores_zero_dice():
    test = leaked_dataset(10, 2)
    seg = Segmenter(EncoderSpec(), Stream(0))
    seg.decoder.head.bias.data[:] = -100.0
    seg.decoder.head.weight.data[:] = 0.0
    nonempty = Dataset([s for s in test.samples if s.mask.any()])
    assert evaluate(seg, nonempty, "segmentation") < 1e-6


def test_finetune_reproducible_and_early_stop_keeps_best(synth):
    task = DownstreamTask(epochs=3, batch_size=16)
    small = synth.subset(np.arange(60))
    a = finetune(None, task, small, small, seed=4)
    b = finetune(None, task, small, small, seed=4)
    assert a.test_metric == b.test_metric
    assert digest(a.model) == digest(b.model)
    assert a.best_val_loss == min(a.val_history)
    assert a.val_history[a.best_epoch] == a.best_val_loss


def test_finetune_three_seeds_contract(synth):
    task = DownstreamTask(epochs=1, test_fraction=0.5)
    res = finetune_classification(None, task, synth.subset(np.arange(80)), seeds=[0, 1, 2])
    assert len(res.values) == 3 and res.arm == "random"
    assert np.isfinite(res.std)
    with pytest.raises(TransferError):
        finetune_classification(None, DownstreamTask(kind="segmentation"), synth, [0])
