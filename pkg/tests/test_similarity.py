import math

import numpy as np
import pytest

from bonealign.similarity import SimConfig, aspect_gate, dsc, mutual_information, ncc, round_half_away, sim
from bonealign.stack import connected_domains

from oracles import mutual_information_loops


def _rect(shape, top, left, h, w):
    m = np.zeros(shape, bool)
    m[top:top + h, left:left + w] = True
    return m


def _dom(h, w):
    return connected_domains(_rect((h + 2, w + 2), 1, 1, h, w))[0]


def test_round_half_away():
    assert [round_half_away(v) for v in (0.5, 1.5, 2.5, -0.5, -1.5, 0.49)] == [1, 2, 3, -1, -2, 0]


def test_aspect_gate_examples():
    assert aspect_gate(_dom(3, 3), _dom(4, 4), 1)
    assert not aspect_gate(_dom(6, 2), _dom(2, 2), 2)
    assert not aspect_gate(_dom(3, 3), _dom(3, 3), 0)
    # difference 1.5 rounds away from zero to 2
    assert not aspect_gate(_dom(5, 2), _dom(1, 1), 2)
    assert aspect_gate(_dom(5, 2), _dom(1, 1), 3)


def test_sim_identical():
    m = _rect((16, 16), 3, 4, 5, 6)
    r = sim(m, m, SimConfig(gamma=2))
    assert r.score == 0.5 and r.n_matched == 1
    assert r.normalized == 1.0


def test_sim_resizes_into_ct_box():
    r = sim(_rect((20, 20), 2, 2, 4, 4), _rect((20, 20), 5, 5, 8, 8))
    assert r.score == 0.5


def test_sim_gamma_zero_is_empty():
    m = _rect((16, 16), 3, 4, 5, 6)
    r = sim(m, m, SimConfig(gamma=0))
    assert r.score == 0.0 and r.n_matched == 0


def test_sim_pairs_by_rank():
    mr = _rect((30, 30), 1, 1, 10, 10) | _rect((30, 30), 20, 20, 3, 3)
    ct = _rect((30, 30), 5, 5, 10, 10)
    r = sim(mr, ct)
    assert r.matched_pairs == [(0, 0, 0.5)]
    assert sim(mr, ct, SimConfig(strict_count=True)).score == 0.0


def test_sim_hand_overlap():
    # L-shaped MR patch inside a full CT box: 3 of 4 pixels overlap -> 3 / (3 + 4)
    mr = np.zeros((6, 6), bool)
    mr[1, 1] = mr[2, 1] = mr[2, 2] = True
    ct = _rect((6, 6), 2, 2, 2, 2)
    assert sim(mr, ct).score == pytest.approx(3 / 7)


def test_simconfig_validation():
    with pytest.raises(ValueError):
        SimConfig(gamma=-1)
    with pytest.raises(ValueError):
        SimConfig(connectivity=6)


def test_dsc_examples():
    a = _rect((6, 6), 1, 1, 2, 2)
    assert dsc(a, a) == 1.0
    assert dsc(a, _rect((6, 6), 4, 4, 2, 2)) == 0.0
    assert dsc(a, _rect((6, 6), 1, 2, 2, 2)) == 0.5
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        dsc(a, np.zeros((5, 5)))


def test_mi_two_level_image():
    img = np.zeros((8, 8))
    img[:, 4:] = 1.0
    assert mutual_information(img, img, bins=2) == pytest.approx(math.log(2), abs=1e-12)


def test_mi_constant_is_zero():
    rng = np.random.default_rng(0)
    assert mutual_information(np.full((8, 8), 0.3), rng.random((8, 8))) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_mi_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    a[0, 0], b[0, 0] = 1.0, 0.0
    for bins in (2, 8, 32):
        assert mutual_information(a, b, bins) == pytest.approx(mutual_information_loops(a, b, bins), abs=1e-12)


def test_mi_symmetric_and_bins_checked():
    rng = np.random.default_rng(1)
    a, b = rng.random((10, 10)), rng.random((10, 10))
    assert mutual_information(a, b) == pytest.approx(mutual_information(b, a), abs=1e-12)
    with pytest.raises(ValueError):
        mutual_information(a, b, bins=1)


def test_ncc_examples():
    rng = np.random.default_rng(2)
    x = rng.random((12, 12))
    assert ncc(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ncc(x, 0.5 * x + 0.1) == pytest.approx(1.0, abs=1e-12)
    assert ncc(x, 1 - x) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(ValueError):
        ncc(np.full((4, 4), 0.2), x[:4, :4])
