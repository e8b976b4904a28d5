import hashlib

import numpy as np
import pytest

from d2fel.ensemble import ConfigError
from d2fel.ndcore import NumericError
from d2fel.store import checkpoint_bytes
from d2fel.synthdata import generate_dataset
from d2fel.training import (PAPER_SCHEDULE, TrainConfig, extract, extract_features, lr_at, new_model,
                            pk_batches, random_erase, train)

TINY = dict(image_hw=(16, 8), stem_width=8, stem_stride=1, stage_widths=(8, 16),
            stage_blocks=(1, 3), stage_strides=(1, 2))


@pytest.fixture(scope="module")
def ten_ids():
    ds = generate_dataset(10, 1, 2, 4, seed=0, image_hw=(16, 8))
    labels = ds.manifest.column("identity")
    return ds, labels


def _cfg(**kw):
    base = dict(epochs=2, warmup_epochs=0, milestones=(), depth=2, trunk=TINY, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("epoch,lr", [(0, 1.75e-6), (10, 1.75e-4), (30, 1.75e-5), (55, 1.75e-6),
                                      (5, 8.8375e-5)])
def test_paper_schedule_values(epoch, lr):
    assert lr_at(PAPER_SCHEDULE, epoch) == pytest.approx(lr, rel=1e-12)


def test_schedule_shape():
    lrs = [lr_at(PAPER_SCHEDULE, e) for e in np.arange(0, 10, 0.5)]
    assert all(b > a for a, b in zip(lrs, lrs[1:]))
    # constant between milestones, one decade per milestone
    assert lr_at(PAPER_SCHEDULE, 29.9) == lr_at(PAPER_SCHEDULE, 10)
    assert lr_at(PAPER_SCHEDULE, 30) == pytest.approx(0.1 * lr_at(PAPER_SCHEDULE, 29))
    assert lr_at(PAPER_SCHEDULE, 149) == lr_at(PAPER_SCHEDULE, 55)
    with pytest.raises(ValueError):
        lr_at(PAPER_SCHEDULE, -1)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(ConfigError):
        TrainConfig(milestones=(20, 20))
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "learning_rate": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(P=1)


def test_config_round_trip_and_digest():
    cfg = _cfg(patterns=["00", "11"])
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.digest() == cfg.digest()
    assert _cfg(seed=1).digest() != cfg.digest()
    assert cfg.pattern_set().strings() == ["00", "11"]
    with pytest.raises(ConfigError):
        _cfg(patterns=["0"]).pattern_set()


# ---------------------------------------------------------------------------
# batching and augmentation
# ---------------------------------------------------------------------------

def test_pk_batches_layout():
    labels = np.repeat(np.arange(10), 5)
    batches = pk_batches(labels, 4, 3, np.random.default_rng(0))
    assert batches
    for b in batches:
        assert len(b) == 12
        ids, counts = np.unique(labels[b], return_counts=True)
        assert len(ids) == 4 and np.all(counts == 3)


def test_pk_batches_top_up_small_identities():
    labels = np.array([0, 1, 1, 1, 2, 2])
    for b in pk_batches(labels, 3, 4, np.random.default_rng(1)):
        assert np.all(np.unique(labels[b], return_counts=True)[1] == 4)


def test_random_erase():
    x = np.random.default_rng(0).standard_normal((20, 3, 16, 8))
    rng = np.random.default_rng(1)
    assert random_erase(x, 0.0, rng) is x
    out = random_erase(x, 1.0, rng)
    assert out.shape == x.shape
    assert all(not np.array_equal(a, b) for a, b in zip(out, x))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_loss_decreases_over_two_epochs(ten_ids):
    ds, labels = ten_ids
    wins = 0
    for seed in range(5):
        cfg = _cfg(seed=seed)
        report = train(new_model(cfg, 10), ds.images, labels, cfg)
        assert len(report.epoch_losses) == 2
        wins += report.epoch_losses[1] < report.epoch_losses[0]
    assert wins >= 4


def test_depth_zero_is_single_head_training(ten_ids):
    ds, labels = ten_ids
    cfg = _cfg(depth=0)
    model = new_model(cfg, 10)
    assert model.m == 1
    report = train(model, ds.images, labels, cfg)
    assert np.isfinite(report.epoch_losses).all()


def test_training_is_deterministic(ten_ids):
    ds, labels = ten_ids
    digests = []
    for _ in range(2):
        cfg = _cfg(seed=3)
        model = new_model(cfg, 10)
        train(model, ds.images, labels, cfg)
        digests.append(hashlib.sha256(checkpoint_bytes(model, cfg.digest(), cfg.epochs)).hexdigest())
    assert digests[0] == digests[1]


def test_nan_loss_is_reported(ten_ids):
    ds, labels = ten_ids
    cfg = _cfg()
    images = ds.images.copy()
    images[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="epoch 0, head"):
        train(new_model(cfg, 10), images, labels, cfg)


def test_too_few_identities_for_batch(ten_ids):
    ds, labels = ten_ids
    cfg = _cfg(P=16)
    with pytest.raises(ConfigError):
        train(new_model(cfg, 10), ds.images, labels, cfg)


def test_labels_must_fit_classes(ten_ids):
    ds, labels = ten_ids
    with pytest.raises(ConfigError):
        train(new_model(_cfg(), 5), ds.images, labels, _cfg())


def test_extract_segments_match_heads(ten_ids):
    ds, labels = ten_ids
    cfg = _cfg(depth=3, epochs=1)
    model = new_model(cfg, 10)
    train(model, ds.images, labels, cfg)
    m = ds.manifest
    bank = extract(model, ds.images, labels, m.column("camera"), m.column("domain"), m.column("split"))
    assert bank.dim == 8 * 16 and bank.segments == (16,) * 8
    per_head = extract_features(model, ds.images)
    for k in range(8):
        np.testing.assert_array_equal(bank.segment(k), per_head[k])
    np.testing.assert_array_equal(bank.identity, labels)
