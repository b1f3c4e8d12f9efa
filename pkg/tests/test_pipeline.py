import json

import numpy as np
import pytest

from partlearn.appearance import PartClassifier
from partlearn.errors import (BundleVersionError, CorruptBundleError, InvalidArgumentError, InvalidStateError,
                              ManifestError)
from partlearn.geometry import BBox
from partlearn.location import LocationModel, empty_location_model
from partlearn.mining import MinedSample, MinedSet
from partlearn.pipeline import (
    BUNDLE_VERSION,
    DatasetManifest,
    HardSample,
    ModelBundle,
    StageConfig,
    bundle_from_bytes,
    bundle_to_bytes,
    load_bundle,
    save_bundle,
)
from partlearn.viewpoint import VIEWPOINT_ORDER


def make_bundle(rng, stage="T2", P=2, D=6):
    A = PartClassifier(rng.normal(size=(P + 1, D)), rng.normal(size=P + 1), P, True, "A2")
    if stage == "T1":
        return ModelBundle("T1", [f"p{i}" for i in range(P)], PartClassifier(
            rng.normal(size=(P, D)), rng.normal(size=P), P, False, "A1"))
    V = PartClassifier(rng.normal(size=(4, D)), rng.normal(size=4), 4, False, "V2")
    locs = {}
    for i in range(P):
        for vp in VIEWPOINT_ORDER:
            if i == 1 and vp == "back":
                locs[(i, vp)] = empty_location_model(0.5, (40, 30))
            else:
                xy = rng.uniform(0, 20, (5, 2))
                locs[(i, vp)] = LocationModel(np.hstack([xy, xy + rng.uniform(2, 15, (5, 2))]), 0.5, (40, 30))
    mined = MinedSet([MinedSample("a#0", BBox(1, 2, 3, 4.5), 0, 0.75, 3)],
                     [MinedSample("a#0", BBox(5, 5, 9, 9), -1, 0.0, 7)], ["b#0"])
    return ModelBundle(stage, [f"p{i}" for i in range(P)], A, locs, V, {"front": (40.0, 30.0)},
                       StageConfig().to_dict(), mined)


def test_bundle_round_trip_is_byte_identical(rng, tmp_path):
    b = make_bundle(rng)
    data = bundle_to_bytes(b)
    save_bundle(b, tmp_path / "m.pfb")
    back = load_bundle(tmp_path / "m.pfb")
    assert bundle_to_bytes(back) == data
    assert back.mined == b.mined and back.parts == b.parts
    X = rng.normal(size=(100, 6))
    np.testing.assert_array_equal(back.appearance.predict_proba(X), b.appearance.predict_proba(X))
    q = rng.uniform(0, 30, (100, 2))
    qb = np.hstack([q, q + 5])
    for key, m in b.location_models.items():
        if not m.is_empty:
            np.testing.assert_array_equal(back.location_models[key].scores(qb, (40, 30)), m.scores(qb, (40, 30)))
    assert back.location_models[(1, "back")].is_empty


def test_t1_bundle_round_trip_and_refusal(rng):
    b = make_bundle(rng, "T1")
    back = bundle_from_bytes(bundle_to_bytes(b))
    assert back.stage == "T1" and back.viewpoint is None
    with pytest.raises(InvalidStateError):
        back.location_model(0, "front")


def test_version_mismatch(rng):
    data = bytearray(bundle_to_bytes(make_bundle(rng)))
    data[4:8] = (BUNDLE_VERSION + 1).to_bytes(4, "little")
    with pytest.raises(BundleVersionError):
        bundle_from_bytes(bytes(data))


@pytest.mark.parametrize("mutate", [
    lambda d: d[: len(d) // 2],
    lambda d: d[:-1],
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:40] + bytes([d[40] ^ 0xFF]) + d[41:],
    lambda d: b"",
])
def test_corrupt_and_truncated_bundles(rng, mutate):
    with pytest.raises(CorruptBundleError):
        bundle_from_bytes(mutate(bundle_to_bytes(make_bundle(rng))))


def test_missing_bundle_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_bundle(tmp_path / "none.pfb")


def test_bundle_invariants(rng):
    b = make_bundle(rng)
    with pytest.raises(InvalidArgumentError):
        ModelBundle("T2", b.parts, b.appearance, {}, b.viewpoint)
    with pytest.raises(InvalidArgumentError):
        ModelBundle("T1", b.parts, b.appearance, b.location_models)
    with pytest.raises(InvalidArgumentError):
        ModelBundle("T4", b.parts, b.appearance)


def manifest():
    return DatasetManifest("bike", ["wheel", "saddle"], {"front": ["f0"], "back": ["b0"], "side": ["s0", "s1"]},
                           {"wheel": ["w0"], "saddle": ["sa0"]}, ["side"],
                           [HardSample("h0", BBox(1, 2, 30, 40), "left", [(0, BBox(2, 3, 5, 6))])])


def test_manifest_json_round_trip(tmp_path):
    m = manifest()
    doc = m.to_json()
    again = DatasetManifest.from_json(json.loads(json.dumps(doc)))
    assert again.to_json() == doc
    assert again.hard_domain[0].object_box == BBox(1, 2, 30, 40)


def test_manifest_rejects_bad_schema():
    doc = manifest().to_json()
    doc["schema_version"] = 99
    with pytest.raises(ManifestError):
        DatasetManifest.from_json(doc)


def test_manifest_missing_files(tmp_path):
    m = manifest()
    m.save(tmp_path / "manifest.json")
    with pytest.raises((ManifestError, FileNotFoundError)):
        DatasetManifest.load(tmp_path / "manifest.json")


def test_stage_config_round_trip_and_validation():
    cfg = StageConfig(seed=7, bandwidth=0.4)
    assert StageConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(InvalidArgumentError, match="bogus"):
        StageConfig.from_dict({"bogus": 1})
    with pytest.raises(InvalidArgumentError, match="mining"):
        StageConfig.from_dict({"mining": {"nope": 1}})
