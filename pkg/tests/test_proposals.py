import io

import numpy as np
import pytest

from partlearn.errors import InvalidArgumentError
from partlearn.geometry import iou
from partlearn.proposals import ProposalConfig, generate_proposals, write_proposals_csv
from partlearn.raster import Raster
from partlearn.synth import default_archetypes, render_object


def test_boxes_in_bounds_and_large_enough(rng):
    r, _ = render_object(default_archetypes(9)[2], "left", rng)
    cfg = ProposalConfig()
    ps = generate_proposals(r, cfg)
    b = ps.boxes
    assert len(b) >= 1
    assert np.all(b[:, 0] >= 0) and np.all(b[:, 1] >= 0)
    assert np.all(b[:, 2] <= r.width) and np.all(b[:, 3] <= r.height)
    assert np.all(b[:, 2] - b[:, 0] >= cfg.min_proposal_side)
    assert np.all(b[:, 3] - b[:, 1] >= cfg.min_proposal_side)
    assert len(np.unique(b, axis=0)) == len(b)


def test_truncation_and_determinism(rng):
    r, _ = render_object(default_archetypes(9)[0], "front", rng)
    full = generate_proposals(r)
    few = generate_proposals(r, ProposalConfig(max_proposals=5))
    np.testing.assert_array_equal(few.boxes, full.boxes[:5])
    np.testing.assert_array_equal(generate_proposals(r).boxes, full.boxes)


def test_planted_parts_are_recalled():
    hits = total = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        r, t = render_object(default_archetypes(9)[seed % 9], "right", rng)
        ps = generate_proposals(r).as_bboxes()
        for _, pb in t.objects[0].parts:
            total += 1
            hits += max(iou(pb, b) for b in ps) >= 0.5
    assert hits / total >= 0.9


def test_uniform_image_falls_back_to_full_box():
    r = Raster(np.full((20, 30, 3), 77, np.uint8))
    ps = generate_proposals(r)
    assert (0, 0, 30, 20) in [tuple(b) for b in ps.boxes.tolist()]


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        ProposalConfig(max_proposals=0)


def test_csv_export(rng):
    r, _ = render_object(default_archetypes(9)[0], "front", rng)
    ps = generate_proposals(r, ProposalConfig(max_proposals=3), image_id="img")
    buf = io.StringIO()
    write_proposals_csv([ps], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("image_id")
    assert len(lines) == 1 + len(ps)
