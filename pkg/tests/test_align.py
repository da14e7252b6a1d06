import numpy as np
import pytest

from bonealign.align import (
    BestPair, align, best_pairs, blend_ct_label, blend_ct_slice, filter_set, fractional_ct_index,
    layer_gap_range, longest_filter_set,
)
from bonealign.phantom import PhantomSpec, generate
from bonealign.similarity import SimConfig, sim
from bonealign.stack import ImageStack, Modality


def _label(shape, top, left, h, w):
    m = np.zeros(shape, bool)
    m[top:top + h, left:left + w] = True
    return m


def _shapes(n, shape=(24, 24)):
    # random blobs; filled rectangles would all score 0.5 against each other
    rng = np.random.default_rng(42)
    out = []
    for _ in range(n):
        m = np.zeros(shape, bool)
        m[4:16, 4:16] = rng.random((12, 12)) < 0.6
        out.append(m)
    return out


def _stack(mod, gap, labels, shape=(24, 24)):
    imgs = tuple(np.zeros(shape) for _ in labels)
    return ImageStack(mod, gap, imgs, tuple(labels))


def test_best_pairs_exact_copy():
    labs = _shapes(10)
    mr = _stack(Modality.MR, 1.0, [None, labs[7], None])
    ct = _stack(Modality.CT, 1.0, labs)
    (bp,) = best_pairs(mr, ct)
    assert (bp.mr_index, bp.ct_index, bp.score) == (1, 7, 0.5)
    scores = [sim(labs[7], lab).score for lab in labs]
    assert int(np.argmax(scores)) == 7


def test_best_pairs_omits_empty_and_breaks_ties_low():
    labs = _shapes(4)
    mr = _stack(Modality.MR, 1.0, [np.zeros((24, 24), bool), labs[2]])
    ct = _stack(Modality.CT, 1.0, [labs[0], labs[2], labs[2], labs[3]])
    assert best_pairs(mr, ct) == [BestPair(1, 1, 0.5)]


def test_best_pairs_threads_agree():
    labs = _shapes(6)
    mr = _stack(Modality.MR, 1.0, labs[:4])
    ct = _stack(Modality.CT, 1.0, labs[::-1])
    assert best_pairs(mr, ct, threads=3) == best_pairs(mr, ct)


def test_layer_gap_range_examples():
    a = BestPair(5, 10, 0.5)
    assert layer_gap_range(a, 7, 1.0, 1.0) == (8, [7, 8, 9])
    assert layer_gap_range(a, 3, 1.0, 1.0) == (12, [11, 12, 13])
    assert layer_gap_range(a, 6, 5.0, 2.5)[0] == 8
    assert layer_gap_range(a, 7, 1.0, 1.0, orientation=-1)[0] == 12
    assert layer_gap_range(BestPair(0, 0, 0.5), 0, 1.0, 1.0, ct_count=5)[1] == [0, 1]
    with pytest.raises(ValueError):
        layer_gap_range(a, 7, 0.0, 1.0)


def test_fractional_index():
    a = BestPair(4, 10, 0.5)
    assert fractional_ct_index(a, 5, 3.0, 2.0) == 8.5
    assert fractional_ct_index(a, 3, 3.0, 2.0) == 11.5
    assert fractional_ct_index(a, 4, 3.0, 2.0) == 10.0


def test_filter_set_examples():
    a = BestPair(5, 10, 0.5)
    line = [BestPair(k, 15 - k, 0.4) for k in range(3, 8) if k != 5] + [a]
    assert set(filter_set(line, a, 1.0, 1.0)) == set(line)
    off = [a, BestPair(6, 11, 0.4)]
    assert filter_set(off, a, 1.0, 1.0) == [a]
    assert filter_set([a], a, 1.0, 1.0) == [a]


def test_longest_set_beats_top_anchor():
    top = BestPair(0, 20, 0.5)
    chain = [BestPair(k, 10 - k, 0.3) for k in range(1, 6)]
    anchor, chosen = longest_filter_set([top] + chain, 1.0, 1.0)
    assert anchor in chain
    assert chosen == chain


def _phantom_align(**kw):
    spec = PhantomSpec(canvas=(64, 64), **kw)
    mr, ct, truth = generate(spec)
    return align(mr, ct), truth


def test_align_identical_gaps_recovers_truth():
    res, truth = _phantom_align(seed=3, depth_mr=8, depth_ct=8, gap_mr_mm=3.0, gap_ct_mm=3.0)
    assert len(res) == 8
    for m, frac, _ in res.pairs:
        assert frac == truth.mr_to_ct[m]


def test_align_gap_ratio_two():
    res, truth = _phantom_align(seed=1, depth_mr=6, depth_ct=12, gap_mr_mm=5.0, gap_ct_mm=2.5)
    assert len(res) >= 5
    for m, frac, _ in res.pairs:
        assert frac == truth.mr_to_ct[m]
    assert np.all(np.abs(np.diff(res.ct_fracs)) == 2)


def test_align_single_labeled_slice():
    labs = _shapes(5)
    mr = _stack(Modality.MR, 2.0, [None, labs[3], None])
    ct = _stack(Modality.CT, 1.0, labs)
    res = align(mr, ct)
    assert res.pairs == ((1, 3.0, 0.5),)
    assert res.anchor == BestPair(1, 3, 0.5)


def test_align_no_match_raises():
    labs = _shapes(3)
    mr = _stack(Modality.MR, 1.0, labs)
    ct = _stack(Modality.CT, 1.0, labs)
    with pytest.raises(ValueError):
        align(mr, ct, SimConfig(gamma=0))
    with pytest.raises(ValueError):
        align(mr, ct, orientation=2)


def _ct_values():
    slices = tuple(np.full((4, 4), v) for v in np.linspace(0.0, 1.0, 11))
    return ImageStack(Modality.CT, 1.0, slices)


def test_blend_examples():
    ct = _ct_values()
    s8, s9 = np.asarray(ct.slices[8]), np.asarray(ct.slices[9])
    for mode in ("standard", "paper"):
        assert blend_ct_slice(ct, 8.0, mode) == ct.slices[8]
        assert np.allclose(np.asarray(blend_ct_slice(ct, 8.5, mode)), 0.5 * (s8 + s9), atol=1e-15)
    assert np.allclose(np.asarray(blend_ct_slice(ct, 8.25)), 0.75 * s8 + 0.25 * s9, atol=1e-15)
    assert np.allclose(np.asarray(blend_ct_slice(ct, 8.25, "paper")), 0.25 * s8 + 0.75 * s9, atol=1e-15)


def test_blend_errors():
    ct = _ct_values()
    with pytest.raises(IndexError):
        blend_ct_slice(ct, 10.5)
    with pytest.raises(ValueError):
        blend_ct_slice(ct, 2.0, "cubic")


def test_blend_label():
    a = _label((6, 6), 0, 0, 3, 6)
    b = _label((6, 6), 0, 0, 6, 6)
    ct = ImageStack(Modality.CT, 1.0, (np.zeros((6, 6)),) * 3, (a, b, None))
    assert np.array_equal(np.asarray(blend_ct_label(ct, 0.25)), a)
    assert np.array_equal(np.asarray(blend_ct_label(ct, 0.75)), b)
    assert blend_ct_label(ct, 1.5) is None


def test_align_deterministic_and_monotone():
    mr, ct, _ = generate(PhantomSpec(seed=7, canvas=(64, 64), depth_mr=6, depth_ct=12,
                                     gap_mr_mm=5.0, gap_ct_mm=2.5, label_noise=2))
    a = align(mr, ct)
    assert align(mr, ct) == a == align(mr, ct, threads=4)
    assert np.all(np.diff(a.ct_fracs) < 0)
