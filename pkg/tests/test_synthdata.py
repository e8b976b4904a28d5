import numpy as np
import pytest

from d2fel.ensemble import ConfigError
from d2fel.synthdata import (SPLITS, DomainStyle, _rng, apply_style, draw_camera, draw_domain_styles,
                             draw_identity, generate_dataset, make_protocol, render_content, style_gap)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(6, 3, 2, 2, seed=11, image_hw=(16, 8), style_strength=2.0)


def test_image_count_arithmetic():
    ds = generate_dataset(50, 4, 2, 4, seed=0, image_hw=(8, 4))
    assert len(ds.manifest) == 1600
    assert ds.images.shape == (1600, 3, 8, 4)
    assert ds.images.dtype == np.float32


def test_same_seed_is_byte_identical():
    a = generate_dataset(4, 2, 2, 2, seed=5, image_hw=(16, 8))
    b = generate_dataset(4, 2, 2, 2, seed=5, image_hw=(16, 8))
    assert a.images.tobytes() == b.images.tobytes()
    assert a.manifest == b.manifest
    c = generate_dataset(4, 2, 2, 2, seed=6, image_hw=(16, 8))
    assert a.images.tobytes() != c.images.tobytes()


def test_domain_style_gap():
    ds = generate_dataset(20, 4, 2, 2, seed=0, image_hw=(32, 16), style_strength=2.0)
    gap, spread = style_gap(ds)
    assert gap > 5 * spread


def test_identities_are_domain_private(small):
    m = small.manifest
    ids, doms = m.column("identity"), m.column("domain")
    for d in range(3):
        assert set(ids[doms == d]).isdisjoint(ids[doms != d])


def test_train_and_test_identities_disjoint(small):
    m = small.manifest
    ids, split = m.column("identity"), m.column("split")
    train = set(ids[split == SPLITS.index("train")])
    test = set(ids[split != SPLITS.index("train")])
    assert train.isdisjoint(test)


def test_every_query_has_cross_camera_match(small):
    m = small.manifest
    ids, cams, split = m.column("identity"), m.column("camera"), m.column("split")
    gal = split == SPLITS.index("gallery")
    for i in np.flatnonzero(split == SPLITS.index("query")):
        assert np.any(gal & (ids == ids[i]) & (cams != cams[i]))


def test_leave_one_out_protocol(small):
    m = small.manifest
    pr = make_protocol(m, "leave-one-out", 2)
    doms, split = m.column("domain"), m.column("split")
    assert set(doms[pr.train]) == {0, 1}
    assert np.all(split[pr.train] == SPLITS.index("train"))
    assert set(doms[pr.query]) == set(doms[pr.gallery]) == {2}


def test_single_domain_protocol(small):
    m = small.manifest
    pr = make_protocol(m, "single-domain", 1)
    ids, doms = m.column("identity"), m.column("domain")
    assert set(doms[pr.train]) == {1}
    assert set(ids[pr.train]).isdisjoint(ids[np.concatenate([pr.query, pr.gallery])])


def test_protocol_errors(small):
    with pytest.raises(ValueError):
        make_protocol(small.manifest, "leave-one-out", 7)
    with pytest.raises(ValueError):
        make_protocol(small.manifest, "cross-view", 0)


def test_infeasible_configs():
    with pytest.raises(ConfigError):
        generate_dataset(2, 2, 2, 2, train_fraction=0.5)
    with pytest.raises(ConfigError):
        generate_dataset(6, 2, 1, 2)
    with pytest.raises(ConfigError):
        generate_dataset(6, 2, 2, 1)


def test_style_factorizes_content():
    # restyling domain B's content with domain A's style reproduces A's rendering exactly
    styles = draw_domain_styles(3, 2, 1.0)
    ident = draw_identity(3, 0)
    cam = draw_camera(3, 0, 0)
    content, mask = render_content(ident, cam, _rng(3, 9), (16, 8))
    a1 = apply_style(content, mask, styles[0], _rng(3, 10))
    a2 = apply_style(content, mask, styles[0], _rng(3, 10))
    b = apply_style(content, mask, styles[1], _rng(3, 10))
    np.testing.assert_array_equal(a1, a2)
    assert not np.allclose(a1, b)


def test_styles_have_positive_gains():
    for s in draw_domain_styles(0, 6, 2.0):
        assert min(s.gain) > 0
    with pytest.raises(ValueError):
        DomainStyle(0, (1.0, -1.0, 1.0), (0, 0, 0), 1.0, (0, 0, 0), 0.0, 1.0, 0, 0)


def test_camera_colour_response_off_by_default():
    cam = draw_camera(0, 1, 1)
    assert cam.gain == (1.0, 1.0, 1.0) and cam.bias == (0.0, 0.0, 0.0)
    assert draw_camera(0, 1, 1, strength=1.0).gain != (1.0, 1.0, 1.0)
