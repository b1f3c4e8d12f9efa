import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partlearn.errors import InvalidArgumentError
from partlearn.geometry import (
    BBox,
    Detection,
    contains_array,
    denormalize_box,
    iou,
    iou_matrix,
    nms,
    nms_indices,
    normalize_box,
    proposal_distance,
)


def pixel_iou(a, b, size=40):
    """IoU by counting covered unit pixels (integer boxes only)."""
    ma = np.zeros((size, size), bool)
    mb = np.zeros((size, size), bool)
    ma[int(a.y_min):int(a.y_max), int(a.x_min):int(a.x_max)] = True
    mb[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = True
    return (ma & mb).sum() / (ma | mb).sum()


int_box = st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(1, 9), st.integers(1, 9)).map(
    lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


def test_bbox_rejects_degenerate():
    with pytest.raises(InvalidArgumentError):
        BBox(5, 0, 5, 3)
    with pytest.raises(InvalidArgumentError):
        BBox(0, 0, float("nan"), 3)


def test_iou_quarter_overlap_is_one_seventh():
    assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_iou_disjoint_and_identical():
    assert iou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) == 0.0
    assert iou(BBox(0, 0, 1, 1), BBox(1, 0, 2, 1)) == 0.0  # touching edges
    b = BBox(0.1, 0.2, 3.3, 4.4)
    assert iou(b, b) == 1.0
    assert proposal_distance(b, b) == 0.0


@settings(max_examples=300, deadline=None)
@given(int_box, int_box)
def test_iou_matches_pixel_counting(a, b):
    assert iou(a, b) == pytest.approx(pixel_iou(a, b), abs=1e-12)
    assert iou(a, b) == iou(b, a)
    assert iou_matrix(a.as_array(), b.as_array())[0, 0] == pytest.approx(iou(a, b), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(int_box, int_box, st.floats(0.1, 10), st.floats(-50, 50))
def test_iou_invariant_to_similarity(a, b, s, t):
    def tr(x):
        return BBox(x.x_min * s + t, x.y_min * s + t, x.x_max * s + t, x.y_max * s + t)

    assert iou(tr(a), tr(b)) == pytest.approx(iou(a, b), abs=1e-9)


def test_normalize_box_example():
    out = normalize_box(BBox(10, 10, 20, 20), (100, 50), (200, 200))
    assert out.as_tuple() == (20.0, 40.0, 40.0, 80.0)


@settings(max_examples=200, deadline=None)
@given(int_box, st.tuples(st.integers(40, 300), st.integers(40, 300)),
       st.tuples(st.floats(1, 500), st.floats(1, 500)))
def test_normalize_round_trip(b, size, frame):
    back = denormalize_box(normalize_box(b, size, frame), size, frame)
    np.testing.assert_allclose(back.as_array(), b.as_array(), rtol=1e-12, atol=1e-9)


def test_normalize_identity_frame():
    b = BBox(3, 4, 10, 12)
    assert normalize_box(b, (50, 60), (50, 60)) == b


def test_normalize_rejects_bad_sizes():
    with pytest.raises(InvalidArgumentError):
        normalize_box(BBox(0, 0, 1, 1), (0, 10), (10, 10))


def test_mirror_is_involution():
    b = BBox(2, 3, 7, 9)
    assert b.mirrored(20) == BBox(13, 3, 18, 9)
    assert b.mirrored(20).mirrored(20) == b


def brute_force_nms(boxes, scores, thr):
    """Characterisation: keep a box iff no already-kept, higher-ranked box overlaps it >= thr."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou(BBox.from_array(boxes[i]), BBox.from_array(boxes[k])) < thr for k in kept):
            kept.append(i)
    return kept


@pytest.mark.parametrize("seed", range(30))
def test_nms_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 25))
    xy = rng.uniform(0, 30, (n, 2))
    wh = rng.uniform(2, 15, (n, 2))
    boxes = np.concatenate([xy, xy + wh], 1)
    scores = np.round(rng.uniform(0, 1, n), 1)  # many ties
    thr = float(rng.choice([0.0, 0.3, 0.5, 1.0]))
    assert nms_indices(boxes, scores, thr) == brute_force_nms(boxes, scores, thr)


def test_nms_ties_keep_input_order():
    dets = [Detection(BBox(0, 0, 10, 10), 0.5, 0), Detection(BBox(1, 0, 11, 10), 0.5, 0)]
    assert nms(dets, 0.3) == [dets[0]]


def test_nms_rejects_bad_threshold():
    with pytest.raises(InvalidArgumentError):
        nms_indices(np.zeros((1, 4)) + [0, 0, 1, 1], np.ones(1), 1.5)


def test_contains_array():
    inner = np.array([[1, 1, 2, 2], [0, 0, 10, 10], [5, 5, 11, 6]], float)
    assert contains_array(np.array([0, 0, 10, 10.0]), inner).tolist() == [True, True, False]
    stacked = contains_array(np.array([[0, 0, 10, 10], [0, 0, 11, 6.0]]), inner)
    assert stacked.tolist() == [[True, True, False], [True, False, True]]


def test_detection_validation():
    with pytest.raises(InvalidArgumentError):
        Detection(BBox(0, 0, 1, 1), float("inf"), 0)
