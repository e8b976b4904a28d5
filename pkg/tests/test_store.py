import numpy as np
import pytest

from d2fel.bank import BankFormatError, FeatureBank, normalize_segments
from d2fel.ensemble import ConfigError, TrunkConfig, build
from d2fel.inpattern import enumerate_full_combinatorial
from d2fel.reduce import fit_autoencoder, fit_pca, fit_random_projector
from d2fel.store import (CheckpointError, checkpoint_bytes, load_checkpoint, load_json, load_manifest,
                         load_reducer, pack, save_checkpoint, save_manifest, save_reducer, unpack, write_json)
from d2fel.synthdata import generate_dataset

SMALL = TrunkConfig(image_hw=(16, 8), stem_width=8, stem_stride=1, stage_widths=(8, 16),
                    stage_blocks=(1, 3), stage_strides=(1, 2))


def _model(seed=0):
    model = build(SMALL, enumerate_full_combinatorial(2), seed=seed, num_classes=4)
    # one training-mode pass populates BN statistics
    model.forward_all(np.random.default_rng(seed).standard_normal((6, 3, 16, 8)).astype(np.float32))
    model.eval()
    return model


def _bank(n=7, segments=(3, 2), seed=0):
    rng = np.random.default_rng(seed)
    return FeatureBank(rng.standard_normal((n, sum(segments))).astype(np.float32), rng.integers(0, 9, n),
                       rng.integers(0, 2, n), rng.integers(0, 4, n), rng.integers(0, 3, n), segments)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = _model()
    x = np.random.default_rng(1).standard_normal((3, 3, 16, 8)).astype(np.float32)
    before = model.forward_all(x)
    save_checkpoint(tmp_path / "m.d2ck", model, "abc", 7, {"note": 1})
    loaded, header = load_checkpoint(tmp_path / "m.d2ck")
    loaded.eval()
    after = loaded.forward_all(x)
    for a, b in zip(before, after):
        assert a.tobytes() == b.tobytes()
    assert header["epoch"] == 7 and header["config_digest"] == "abc" and header["extra"] == {"note": 1}
    assert loaded.patterns == model.patterns
    # saving the reloaded model gives the same bytes
    assert checkpoint_bytes(loaded, "abc", 7, {"note": 1}) == (tmp_path / "m.d2ck").read_bytes()


def test_checkpoint_architecture_check(tmp_path):
    model = _model()
    save_checkpoint(tmp_path / "m.d2ck", model)
    arch = model.architecture()
    load_checkpoint(tmp_path / "m.d2ck", expect_architecture=arch)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.d2ck", expect_architecture={**arch, "num_classes": 5})


def test_corrupt_containers():
    raw = pack(b"D2CK", {"a": 1}, {"w": np.arange(4, dtype=np.float32)})
    header, tensors = unpack(raw, b"D2CK")
    assert header == {"a": 1}
    np.testing.assert_array_equal(tensors["w"], np.arange(4))
    with pytest.raises(CheckpointError):
        unpack(raw, b"D2RD")
    with pytest.raises(CheckpointError):
        unpack(raw[:-4], b"D2CK")


# ---------------------------------------------------------------------------
# feature banks
# ---------------------------------------------------------------------------

def test_bank_round_trip_bit_exact(tmp_path):
    bank = _bank()
    bank.save(tmp_path / "b.d2fb")
    again = FeatureBank.load(tmp_path / "b.d2fb")
    assert again.to_bytes() == bank.to_bytes()
    assert again.features.tobytes() == bank.features.tobytes()
    assert again.segments == (3, 2)
    for name in ("identity", "camera", "domain", "split"):
        np.testing.assert_array_equal(getattr(again, name), getattr(bank, name))


def test_bank_layout_header():
    raw = _bank().to_bytes()
    assert raw[:4] == b"D2FB"
    assert int.from_bytes(raw[4:8], "little") == 1          # version
    assert int.from_bytes(raw[8:16], "little") == 7         # rows
    assert int.from_bytes(raw[16:20], "little") == 5        # dim


def test_bank_rejects_garbage():
    raw = _bank().to_bytes()
    with pytest.raises(BankFormatError):
        FeatureBank.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BankFormatError):
        FeatureBank.from_bytes(raw[:-3])


def test_bank_invariants():
    with pytest.raises(ValueError):
        FeatureBank(np.zeros((3, 2), np.float32), [0, 1], [0, 0, 0], [0, 0, 0], [0, 0, 0])
    with pytest.raises(ValueError):
        FeatureBank(np.zeros((1, 4), np.float32), [0], [0], [0], [0], (3, 2))


def test_normalize_segments():
    bank = _bank()
    bank.features[0, :3] = 0.0
    out = normalize_segments(bank)
    for k in range(2):
        norms = np.linalg.norm(out.segment(k), axis=1)
        expected = np.where(np.linalg.norm(bank.segment(k), axis=1) > 0, 1.0, 0.0)
        np.testing.assert_allclose(norms, expected, atol=1e-6)


# ---------------------------------------------------------------------------
# reducers
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["rp", "pca", "ae"])
def test_reducer_round_trip(tmp_path, kind):
    bank = _bank(n=20, segments=(6,))
    if kind == "rp":
        reducer = fit_random_projector(6, 3, seed=2)
    elif kind == "pca":
        reducer = fit_pca(bank, 3)
    else:
        reducer = fit_autoencoder(bank, 3, epochs=3, seed=2)
    save_reducer(tmp_path / "r.d2rd", reducer)
    again = load_reducer(tmp_path / "r.d2rd")
    np.testing.assert_array_equal(again.transform(bank).features, reducer.transform(bank).features)


def test_unknown_reducer_kind(tmp_path):
    (tmp_path / "r.d2rd").write_bytes(pack(b"D2RD", {"kind": "svm"}, {}))
    with pytest.raises(CheckpointError):
        load_reducer(tmp_path / "r.d2rd")


# ---------------------------------------------------------------------------
# manifests and config files
# ---------------------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    ds = generate_dataset(3, 2, 2, 2, seed=4, image_hw=(8, 4))
    save_manifest(tmp_path / "manifest.jsonl", ds.manifest)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == len(ds.manifest) + 1
    again = load_manifest(tmp_path / "manifest.jsonl")
    assert again.records == ds.manifest.records
    assert again.seed == 4


def test_json_helpers(tmp_path):
    write_json(tmp_path / "c.json", {"b": np.float32(1.5), "a": np.arange(2)})
    assert load_json(tmp_path / "c.json") == {"a": [0, 1], "b": 1.5}
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_json(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_json(tmp_path / "list.json")
