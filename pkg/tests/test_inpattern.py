import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2fel.inpattern import (BottleneckBlock, CapacityError, INPattern, PatternSet, bottleneck_forward,
                             enumerate_full_combinatorial, parse_patterns)
from d2fel.ndcore import DimensionError


def test_depth_two_names():
    ps = enumerate_full_combinatorial(2)
    assert ps.strings() == ["00", "01", "10", "11"]
    # "01": IN on the last bottleneck only, "10": on the second-last only
    assert ps[1].applies_at(1) and not ps[1].applies_at(2)
    assert ps[2].applies_at(2) and not ps[2].applies_at(1)


def test_depth_three_has_eight():
    ps = enumerate_full_combinatorial(3)
    assert len(ps) == 8
    assert ps.is_full()
    assert str(ps[0]) == "000"


def test_depth_zero_single_empty_pattern():
    ps = enumerate_full_combinatorial(0)
    assert len(ps) == 1
    assert str(ps[0]) == ""


def test_capacity_guard():
    assert len(enumerate_full_combinatorial(8)) == 256
    with pytest.raises(CapacityError):
        enumerate_full_combinatorial(9)
    with pytest.raises(ValueError):
        enumerate_full_combinatorial(-1)


@given(st.integers(0, 8))
def test_full_set_distinct_and_canonical(depth):
    ps = enumerate_full_combinatorial(depth)
    values = [p.value for p in ps]
    assert values == list(range(2 ** depth))
    assert len({p.mask for p in ps}) == 2 ** depth


@given(st.text(alphabet="01", min_size=0, max_size=8))
def test_string_round_trip(text):
    p = INPattern.from_string(text)
    assert str(p) == text
    assert INPattern.from_int(p.value, p.depth) == p


def test_leftmost_char_is_deepest():
    p = INPattern.from_string("011")
    assert p.applies_at(1) and p.applies_at(2) and not p.applies_at(3)
    assert p.forward_order() == [False, True, True]


def test_bad_pattern_strings():
    with pytest.raises(ValueError):
        INPattern.from_string("012")
    with pytest.raises(ValueError):
        parse_patterns(["01", "1"])


def test_subset_and_uniform_sets():
    ps = PatternSet.from_strings(["01", "11"])
    assert not ps.is_full()
    u = PatternSet.uniform(3, 4)
    assert u.strings() == ["000"] * 4


# ---------------------------------------------------------------------------
# bottleneck block
# ---------------------------------------------------------------------------

def _block(apply_in=False, position="pre_relu", in_ch=8, out_ch=8, stride=1, seed=0):
    return BottleneckBlock(in_ch, out_ch, stride, apply_in=apply_in, in_position=position,
                           rng=np.random.default_rng(seed))


def test_identity_block_is_relu_of_residual():
    b = _block()
    for conv in (b.conv1, b.conv2, b.conv3):
        conv.params["weight"].data[:] = 0.0
    x = np.random.default_rng(1).standard_normal((2, 8, 4, 4))
    np.testing.assert_allclose(bottleneck_forward(b, x), np.maximum(x, 0), atol=1e-6)


def test_in_output_moments_post_relu():
    b = _block(True, "post_relu")
    y = b.forward(np.random.default_rng(2).standard_normal((3, 8, 6, 4)))
    assert np.abs(y.mean(axis=(2, 3))).max() < 1e-5


def test_in_output_moments_pre_relu():
    # the final ReLU sees an instance-normalized activation
    b = _block(True, "pre_relu")
    seen = {}
    relu = b.relu_out.forward

    def spy(s):
        seen["s"] = s
        return relu(s)

    b.relu_out.forward = spy
    b.forward(np.random.default_rng(2).standard_normal((3, 8, 6, 4)))
    s = seen["s"]
    assert np.abs(s.mean(axis=(2, 3))).max() < 1e-5
    np.testing.assert_allclose(s.var(axis=(2, 3)), 1.0, atol=1e-3)


def test_toggling_in_changes_output():
    x = np.random.default_rng(3).standard_normal((2, 8, 4, 4))
    a, b = _block(False), _block(True)
    assert not np.allclose(a.forward(x), b.forward(x))


def _affine_case(seed, position, eps=None):
    rng = np.random.default_rng(seed)
    b = _block(True, position, seed=seed)
    if eps is not None:
        b.inorm.eps = eps
    x = rng.standard_normal((2, 8, 6, 4))
    seen = {}

    def record(s):
        seen["s"] = s
        return s

    b.pre_in_hook = record
    ref = b.forward(x)
    a = rng.uniform(0.5, 3.0, (1, 8, 1, 1))
    c = rng.uniform(-2.0, 2.0, (1, 8, 1, 1))
    b.pre_in_hook = lambda s: a * s + c
    return b.forward(x), ref, seen["s"], a, b.inorm.eps


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["pre_relu", "post_relu"]))
def test_affine_at_pre_in_activation_is_cancelled(seed, position):
    # with eps negligible next to the activation variance, cancellation is exact
    out, ref, _, _, _ = _affine_case(seed, position, eps=1e-12)
    np.testing.assert_allclose(out, ref, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["pre_relu", "post_relu"]))
def test_affine_deviation_is_only_the_eps_term(seed, position):
    # IN_eps(a s + c) = IN_{eps/a^2}(s): the only residue is the eps term
    out, ref, s, a, eps = _affine_case(seed, position)
    var = s.var(axis=(2, 3), keepdims=True)
    xhat = np.abs(s - s.mean(axis=(2, 3), keepdims=True)) / np.sqrt(var + eps)
    ratio = np.abs(1.0 - a * np.sqrt((var + eps) / (a * a * var + eps)))
    np.testing.assert_array_less(np.abs(out - ref), xhat * ratio + 1e-9)


def test_hook_ignored_without_in():
    b = _block(False)
    x = np.random.default_rng(4).standard_normal((1, 8, 4, 4))
    ref = b.forward(x)
    b.pre_in_hook = lambda s: 10 * s
    np.testing.assert_array_equal(b.forward(x), ref)


def test_channel_mismatch():
    with pytest.raises(DimensionError):
        _block().forward(np.zeros((1, 4, 4, 4)))


def test_bad_in_position():
    with pytest.raises(ValueError):
        _block(True, "somewhere")


def test_downsampling_shape():
    b = _block(in_ch=8, out_ch=16, stride=2)
    assert b.forward(np.zeros((2, 8, 8, 4))).shape == (2, 16, 4, 2)
