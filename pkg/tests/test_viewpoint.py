import numpy as np
import pytest

from partlearn.appearance import TrainConfig
from partlearn.errors import InvalidArgumentError
from partlearn.raster import crop, mirror_horizontal
from partlearn.synth import default_archetypes, render_object
from partlearn.viewpoint import (
    VIEWPOINT_ORDER,
    Viewpoint,
    horizontal_asymmetry,
    predict_viewpoint,
    predict_viewpoints,
    split_side_views,
    train_viewpoint_classifier,
    whole_image_features,
)

ARCH = default_archetypes(9)[0]


def object_crop(vp, rng, arch=ARCH):
    r, t = render_object(arch, vp, rng)
    return crop(r, t.objects[0].box)[0]


def side_images(n, seed, arch=ARCH):
    rng = np.random.default_rng(seed)
    truth = [("left", "right")[int(rng.integers(2))] for _ in range(n)]
    return [object_crop(vp, rng, arch) for vp in truth], truth


def purity(left, right, truth):
    """Majority purity; the cluster names themselves are a convention."""
    agree = sum(truth[i] == "left" for i in left) + sum(truth[i] == "right" for i in right)
    return max(agree, len(truth) - agree) / len(truth)


def test_enum_order():
    assert VIEWPOINT_ORDER == ["front", "back", "left", "right"]
    assert Viewpoint("left") is Viewpoint.LEFT


def test_asymmetry_flips_under_mirror():
    r, _ = side_images(1, 3)
    a = horizontal_asymmetry(r[0])
    assert horizontal_asymmetry(mirror_horizontal(r[0])) == pytest.approx(-a, abs=1e-9)


@pytest.mark.parametrize("arch", [0, 4, 8])
def test_split_purity_on_planted_sides(arch):
    images, truth = side_images(30, arch, default_archetypes(9)[arch])
    left, right = split_side_views(images)
    assert sorted(left + right) == list(range(30))
    assert purity(left, right, truth) >= 0.9


def test_cluster_named_left_has_more_left_half_energy():
    images, _ = side_images(20, 4)
    left, right = split_side_views(images)
    asym = np.array([horizontal_asymmetry(r) for r in images])
    assert asym[left].sum() - asym[right].sum() >= 0


@pytest.mark.parametrize("seed", [1, 2])
def test_mirror_pairs_always_split(seed):
    images, _ = side_images(12, seed)
    both = images + [mirror_horizontal(r) for r in images]
    left, right = split_side_views(both, seed=seed)
    side = {i: 0 for i in left} | {i: 1 for i in right}
    assert all(side[i] != side[i + 12] for i in range(12))


def test_split_needs_two_images():
    images, _ = side_images(1, 0)
    with pytest.raises(InvalidArgumentError):
        split_side_views(images)


def test_classifier_learns_viewpoints():
    rng = np.random.default_rng(5)
    feats = {vp: np.array([whole_image_features(object_crop(vp, rng)) for _ in range(15)])
             for vp in VIEWPOINT_ORDER}
    V = train_viewpoint_classifier(feats, TrainConfig(seed=0))
    assert V.stage_tag == "V2" and V.class_count == 4
    hits = total = 0
    for vp in VIEWPOINT_ORDER:
        test = np.array([whole_image_features(object_crop(vp, rng)) for _ in range(8)])
        hits += sum(p == vp for p in predict_viewpoints(V, test))
        total += 8
    assert hits / total >= 0.9
    label, probs = predict_viewpoint(V, test[0])
    assert label in VIEWPOINT_ORDER and probs.sum() == pytest.approx(1.0)


def test_classifier_requires_every_viewpoint():
    with pytest.raises(InvalidArgumentError):
        train_viewpoint_classifier({"front": np.zeros((2, 3))})
