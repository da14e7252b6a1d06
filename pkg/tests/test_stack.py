import numpy as np
import pytest

from bonealign.stack import (
    ImageStack, LabelMask, Modality, Slice, bbox_crop_resize, connected_domains, resize_nearest, union_of,
)

from oracles import flood_fill_domains, nearest_resize


def test_slice_rejects_out_of_range():
    with pytest.raises(ValueError):
        Slice(np.full((4, 4), 1.5))
    with pytest.raises(ValueError):
        Slice(np.zeros(5))


def test_slice_is_read_only():
    s = Slice(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        np.asarray(s)[0, 0] = 1.0


def test_label_mask_strictly_binary():
    LabelMask(np.array([[0, 1], [1, 0]]))
    with pytest.raises(ValueError):
        LabelMask(np.array([[0, 0.5], [1, 0]]))


def test_stack_invariants():
    a = np.zeros((4, 4))
    with pytest.raises(ValueError):
        ImageStack(Modality.MR, 5.0, (a, np.zeros((4, 5))))
    with pytest.raises(ValueError):
        ImageStack(Modality.CT, 0.0, (a,))
    with pytest.raises(ValueError):
        ImageStack(Modality.CT, 2.0, (a, a), (np.zeros((4, 4), bool),))
    st = ImageStack("MR", 5.0, (a, a), (None, np.ones((4, 4), bool)))
    assert st.modality is Modality.MR
    assert st.labeled_indices() == [1]
    assert len(st) == 2 and st.shape == (4, 4)


def test_empty_mask_has_no_domains():
    assert connected_domains(np.zeros((8, 8), bool)) == []


def test_single_rectangle():
    m = np.zeros((10, 10), bool)
    m[2:5, 3:8] = True
    (d,) = connected_domains(m)
    assert (d.top, d.left, d.h, d.w, d.area_px, d.rank) == (2, 3, 3, 5, 15, 0)
    assert d.patch.all()


def test_diagonal_pixels_depend_on_connectivity():
    m = np.zeros((4, 4), bool)
    m[1, 1] = m[2, 2] = True
    assert len(connected_domains(m, 8)) == 1
    assert len(connected_domains(m, 4)) == 2
    assert len(flood_fill_domains(m, 8)) == 1
    assert len(flood_fill_domains(m, 4)) == 2


def test_bad_connectivity():
    with pytest.raises(ValueError):
        connected_domains(np.zeros((3, 3), bool), 6)


def test_sorted_by_bbox_area_then_raster():
    m = np.zeros((12, 12), bool)
    m[0:2, 8:10] = True      # 2x2 at (0, 8)
    m[5:7, 0:2] = True       # 2x2 at (5, 0)
    m[9:12, 5:9] = True      # 3x4
    doms = connected_domains(m)
    assert [(d.top, d.left) for d in doms] == [(9, 5), (0, 8), (5, 0)]
    assert [d.rank for d in doms] == [0, 1, 2]


def test_patch_excludes_intruding_region():
    # an L shape whose box contains a separate pixel
    m = np.zeros((6, 6), bool)
    m[0:5, 0] = True
    m[4, 0:5] = True
    m[1, 3] = True
    big = connected_domains(m)[0]
    assert big.area_px == 9
    assert (1, 3) not in big.pixel_set


@pytest.mark.parametrize("seed", range(20))
def test_domains_match_flood_fill(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((rng.integers(1, 20), rng.integers(1, 20))) < 0.4
    for conn in (4, 8):
        got = connected_domains(m, conn)
        ref = flood_fill_domains(m, conn)
        assert [(d.pixel_set, d.top, d.left, d.h, d.w) for d in got] == ref


def test_union_roundtrip():
    rng = np.random.default_rng(3)
    m = rng.random((15, 15)) < 0.3
    assert np.array_equal(union_of(connected_domains(m), m.shape), m)


def test_bbox_crop_resize_examples():
    m = np.zeros((5, 5), bool)
    m[1:3, 1:3] = True
    d = connected_domains(m)[0]
    assert np.array_equal(np.asarray(bbox_crop_resize(d, 2, 2)), np.ones((2, 2), bool))
    assert np.array_equal(np.asarray(bbox_crop_resize(d, 4, 4)), np.ones((4, 4), bool))
    p = np.zeros((3, 3), bool)
    p[1, 1] = True
    single = connected_domains(p)[0]
    assert np.asarray(bbox_crop_resize(single, 3, 3)).all()
    with pytest.raises(ValueError):
        bbox_crop_resize(single, 0, 3)


@pytest.mark.parametrize("seed", range(10))
def test_resize_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    patch = rng.random((rng.integers(1, 9), rng.integers(1, 9))) < 0.5
    th, tw = rng.integers(1, 17, size=2)
    assert np.array_equal(resize_nearest(patch, th, tw), nearest_resize(patch, th, tw))
