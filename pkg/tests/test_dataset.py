import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmdnet.dataset import (DEFAULT_REGIMES, DROP, RAW_MODES, ClassRegime, Segment, SplitSpec,
                            SynthSpec, chronological_split, class_scheme, class_weights,
                            cut_segments, make_batches, map_classes, pad_array, pad_segment,
                            set_sizes, split_by_tripleg, synth_dataset, weights_from_counts)
from tmdnet.errors import ValidationError


@pytest.mark.parametrize("name", ["4", "5", "6", "7"])
def test_schemes_total_and_contiguous(name):
    s = class_scheme(name)
    assert set(s.mapping) == set(RAW_MODES)
    ids = {v for v in s.mapping.values() if v is not DROP}
    assert ids == set(range(s.n_classes))


def test_scheme_merges_and_drops():
    six = class_scheme("6")
    assert map_classes("taxi", six) == map_classes("car", six)
    assert map_classes("subway", class_scheme("4")) is DROP
    five = class_scheme("5")
    assert map_classes("subway", five) == map_classes("train", five)
    seven = class_scheme("7")
    assert len({map_classes(m, seven) for m in RAW_MODES}) == 7


def test_unknown_mode():
    with pytest.raises(ValidationError):
        map_classes("boat", class_scheme("7"))


def test_split_sizes_and_determinism():
    legs = list(range(100))
    a = split_by_tripleg(legs, SplitSpec(seed=3))
    assert tuple(map(len, a)) == (64, 16, 20)
    assert a == split_by_tripleg(legs, SplitSpec(seed=3))
    assert set(a[0]) | set(a[1]) | set(a[2]) == set(legs)


def test_split_all_train(caplog):
    tr, va, te = split_by_tripleg(list(range(10)), SplitSpec((1, 0, 0), 0))
    assert len(tr) == 10 and not va and not te
    assert "empty" in caplog.text


def test_split_spec_validation():
    with pytest.raises(ValidationError):
        SplitSpec((0.5, 0.5, 0.5))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.integers(0, 2**32 - 1))
def test_split_sizes_within_one(n, seed):
    sets = split_by_tripleg(list(range(n)), SplitSpec(seed=seed))
    for part, frac in zip(sets, (0.64, 0.16, 0.20)):
        assert abs(len(part) - frac * n) <= 1
    assert sorted(sum(sets, [])) == list(range(n))


def test_set_sizes_small_n():
    assert set_sizes(100, (0.64, 0.16, 0.20)) == (64, 16, 20)
    assert set_sizes(9, (0.64, 0.16, 0.20)) == (6, 1, 2)
    assert set_sizes(10, (1, 0, 0)) == (10, 0, 0)


def test_chronological():
    val, train = chronological_split(list(range(10)))
    assert val == [0, 1] and train == list(range(2, 10))
    assert chronological_split(list(range(10)), 0.0)[0] == []
    val, train = chronological_split(list(range(16310)))
    assert (len(val), len(train)) == (3262, 13048)


def test_cut_segments():
    x = np.arange(2500.0)[None]
    assert [s.true_length for s in cut_segments(x, 1024)] == [1024, 1024, 452]
    assert [s.true_length for s in cut_segments(np.ones((2, 800)))] == [800]
    assert cut_segments(np.ones((1, 5)), min_len=10) == []
    np.testing.assert_array_equal(np.concatenate([s.data for s in cut_segments(x, 1024)], 1), x)


def test_pad_examples():
    x = np.array([[1.0, 2, 3]])
    np.testing.assert_array_equal(pad_array(x, 3, 7, "wrapping"), [[1, 2, 3, 1, 2, 3, 1]])
    np.testing.assert_array_equal(pad_array(x, 3, 6, "reflection"), [[1, 2, 3, 3, 2, 1]])
    np.testing.assert_array_equal(pad_array(x, 3, 5, "zero"), [[1, 2, 3, 0, 0]])


def test_reflection_ping_pong():
    x = np.array([[1.0, 2, 3]])
    np.testing.assert_array_equal(pad_array(x, 3, 11, "reflection"),
                                  [[1, 2, 3, 3, 2, 1, 1, 2, 3, 3, 2]])


def test_pad_too_short_target():
    with pytest.raises(ValidationError):
        pad_segment(Segment(np.ones((1, 4)), 4, 0), 3, "zero")


def test_pad_unknown_mode():
    with pytest.raises(ValidationError):
        pad_array(np.ones((1, 3)), 3, 5, "mirror")


def test_pad_segment_keeps_metadata():
    s = pad_segment(Segment(np.ones((2, 3)), 3, 1, "t"), 8, "wrapping")
    assert (s.true_length, s.class_id, s.tripleg_id, s.length) == (3, 1, "t", 8)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(0, 80), st.integers(0, 2**32 - 1))
def test_pad_properties(length, extra, seed):
    x = np.random.default_rng(seed).normal(size=(2, length))
    target = length + extra
    for mode in ("zero", "reflection", "wrapping"):
        out = pad_array(x, length, target, mode)
        assert out.shape == (2, target)
        np.testing.assert_array_equal(out[:, :length], x)
    wrap = pad_array(x, length, target, "wrapping")
    np.testing.assert_array_equal(wrap, wrap[:, np.arange(target) % length])
    pal = pad_array(x, length, 2 * length, "reflection")
    np.testing.assert_array_equal(pal, pal[:, ::-1])


def segs_of(lengths, classes=None):
    classes = classes or [0] * len(lengths)
    return [Segment(np.full((2, n), float(i)), n, c, i) for i, (n, c) in enumerate(zip(lengths, classes))]


def test_batch_pads_to_longest():
    (b,) = make_batches(segs_of([500, 700, 900]), 3, "zero")
    assert b.data.shape == (3, 2, 900)
    np.testing.assert_array_equal(b.true_lengths, [500, 700, 900])


def test_equal_lengths_need_no_padding():
    segs = segs_of([50, 50])
    (b,) = make_batches(segs, 4, "zero")
    np.testing.assert_array_equal(b.data[1], segs[1].data)


def test_batches_deterministic_and_permutation():
    segs = segs_of(list(range(10, 40)))
    a = make_batches(segs, 7, "wrapping", np.random.default_rng(5))
    b = make_batches(segs, 7, "wrapping", np.random.default_rng(5))
    assert [len(x.labels) for x in a] == [7, 7, 7, 7, 2]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.indices, y.indices)
    assert sorted(np.concatenate([x.indices for x in a]).tolist()) == list(range(30))
    for x in a:
        for row, i in zip(x.data, x.indices):
            assert row[0, 0] == i


def test_empty_batches():
    assert make_batches([], 4, "zero") == []


def test_class_weights_examples():
    np.testing.assert_allclose(weights_from_counts([100, 50]), [0.75, 1.5])
    np.testing.assert_array_equal(weights_from_counts([7, 7, 7]), [1.0, 1.0, 1.0])
    segs = segs_of([10] * 150, [0] * 100 + [1] * 50)
    np.testing.assert_allclose(class_weights(segs, 2), [0.75, 1.5])


def test_class_weights_table_counts():
    counts = np.array([904, 346, 292, 426, 126, 40])
    w = weights_from_counts(counts)
    # mean weight over training samples is 1
    assert (w * counts).sum() / counts.sum() == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_allclose(w / w[0], counts[0] / counts, rtol=1e-12)
    np.testing.assert_allclose(w * counts, np.full(6, counts.sum() / 6), rtol=1e-12)


def test_missing_class_named():
    with pytest.raises(ValidationError, match="class 2"):
        class_weights(segs_of([10, 10], [0, 1]), 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=2, max_size=8))
def test_weighted_counts_equal(counts):
    w = weights_from_counts(counts)
    wc = w * np.asarray(counts)
    np.testing.assert_allclose(wc, wc[0], rtol=1e-9)


def test_synth_deterministic():
    spec = SynthSpec(regimes=DEFAULT_REGIMES[:2], n_per_class=100)
    a, b = synth_dataset(spec, 7), synth_dataset(spec, 7)
    assert len(a) == 200
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)
    assert any(not np.array_equal(x.data, y.data) for x, y in zip(a, synth_dataset(spec, 8)))


def test_synth_lengths_in_range():
    segs = synth_dataset(SynthSpec(n_per_class=30, length_range=(100, 1024)), 0)
    lengths = [s.true_length for s in segs]
    assert min(lengths) >= 100 and max(lengths) <= 1024


def test_synth_noise_free_means():
    segs = synth_dataset(SynthSpec(n_per_class=5, noise=0.0), 1)
    for s in segs:
        assert np.all(s.data[0] == DEFAULT_REGIMES[s.class_id].mean_speed)
        assert not s.data[1].any()


def test_synth_identical_regimes_rejected():
    r = ClassRegime("a", 1.0, 1.0, 0.0)
    with pytest.raises(ValidationError):
        synth_dataset(SynthSpec(regimes=(r, ClassRegime("b", 1.0, 1.0, 0.0))), 0)


def threshold_oracle_accuracy(segs, means):
    cuts = (np.asarray(means[:-1]) + np.asarray(means[1:])) / 2
    pred = np.searchsorted(cuts, [s.data[0].mean() for s in segs])
    return np.mean(pred == np.array([s.class_id for s in segs]))


def test_synth_is_threshold_separable():
    segs = synth_dataset(SynthSpec(n_per_class=200), 0)
    assert threshold_oracle_accuracy(segs, [r.mean_speed for r in DEFAULT_REGIMES]) >= 0.99
