"""Deterministic synthetic scenes with known object, part and viewpoint truth.

Each archetype is an object class: a body shape carrying three parts whose
layout depends on the viewpoint.  Three rendering domains mimic the data the
learner sees: isolated part images and whole objects on uniform backgrounds
(easy, web-like), and cluttered, darker, truncated scenes (hard).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .geometry import BBox
from .raster import Raster, save_image

VIEWPOINTS = ("front", "back", "left", "right")
SHAPES = ("rect", "ellipse", "diamond", "wedge")
PATTERNS = ("solid", "hstripe", "vstripe", "checker", "dots")


@dataclass(frozen=True)
class PartStyle:
    name: str
    shape: str
    color: tuple
    pattern: str
    pattern_color: tuple
    aspect: float  # width / height of the isolated part


@dataclass(frozen=True)
class Placement:
    """Part instance centre and size relative to the object box."""

    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class Archetype:
    name: str
    body_shape: str
    body_color: tuple
    side_aspect: float
    front_aspect: float
    parts: tuple
    layouts: dict  # viewpoint -> tuple (per part) of tuples of Placement

    def aspect(self, viewpoint: str) -> float:
        return self.side_aspect if viewpoint in ("left", "right") else self.front_aspect


@dataclass(frozen=True)
class SceneSpec:
    archetypes: tuple
    noise: float = 3.0
    background: str = "uniform"  # uniform | clutter
    image_size: tuple = (72, 72)
    seed: int = 0

    def __post_init__(self):
        if self.background not in ("uniform", "clutter"):
            raise InvalidArgumentError(f"unknown background mode {self.background!r}")


@dataclass
class ObjectTruth:
    box: BBox
    class_name: str
    viewpoint: str | None = None
    parts: list = field(default_factory=list)  # (part_id, BBox)


@dataclass
class SyntheticTruth:
    image_size: tuple
    objects: list = field(default_factory=list)


# ---------------------------------------------------------------- archetypes

def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def _mirror_layout(layout):
    return tuple(tuple(Placement(1.0 - p.cx, p.cy, p.w, p.h) for p in inst) for inst in layout)


def make_archetype(index: int) -> Archetype:
    """The ``index``-th archetype; fixed for all seeds."""
    rng = np.random.default_rng(7919 + index)
    hue0 = rng.random()
    body_color = _hsv_to_rgb((hue0 + 0.5) % 1.0, 0.25 + 0.15 * rng.random(), 0.55 + 0.2 * rng.random())
    hues = (hue0 + np.array([0.0, 1 / 3, 2 / 3]) + rng.uniform(-0.05, 0.05, 3)) % 1.0
    shapes = list(rng.permutation(["ellipse", "rect", "diamond"]))
    shapes[0] = "wedge" if index % 3 != 2 else shapes[0]
    parts = []
    names = ("head", "leg", "tail")
    for k in range(3):
        color = _hsv_to_rgb(hues[k], 0.75 + 0.2 * rng.random(), 0.75 + 0.2 * rng.random())
        pattern = PATTERNS[(index + 2 * k) % len(PATTERNS)]
        pcolor = tuple(int(np.clip(c * 0.6, 0, 255)) for c in color)
        parts.append(PartStyle(f"{names[k]}", shapes[k], color, pattern, pcolor,
                               float(rng.uniform(0.7, 1.4))))

    def jit(v, a=0.04):
        return float(v + rng.uniform(-a, a))

    hw, hh = jit(0.26), jit(0.32)
    lw, lh = jit(0.2), jit(0.3)
    tw, th = jit(0.2), jit(0.28)
    left = (
        (Placement(jit(0.17), jit(0.25), hw, hh),),
        (Placement(jit(0.27), 0.8, lw, lh), Placement(jit(0.72), 0.8, lw, lh)),
        (Placement(jit(0.86, 0.02), jit(0.35), tw, th),),
    )
    if index % 2 == 0:
        front = (
            (Placement(0.5, 0.17, 0.36, 0.26),),
            (Placement(0.5, 0.84, 0.3, 0.26),),
            (Placement(0.5, 0.5, 0.26, 0.22),),
        )
    else:
        front = (
            (Placement(0.5, 0.17, 0.36, 0.26),),
            (Placement(0.24, 0.84, 0.26, 0.26), Placement(0.76, 0.84, 0.26, 0.26)),
            (Placement(0.5, 0.52, 0.24, 0.2),),
        )
    back = (
        (Placement(0.5, 0.5, 0.26, 0.22),),
        (Placement(0.24, 0.84, 0.26, 0.26), Placement(0.76, 0.84, 0.26, 0.26)),
        (Placement(0.5, 0.17, 0.34, 0.26),),
    )
    layouts = {"left": left, "right": _mirror_layout(left), "front": front, "back": back}
    return Archetype(
        name=f"class{index}",
        body_shape=("ellipse", "rect")[index % 2],
        body_color=body_color,
        side_aspect=float(rng.uniform(1.4, 1.7)),
        front_aspect=float(rng.uniform(0.75, 0.9)),
        parts=tuple(parts),
        layouts=layouts,
    )


def default_archetypes(n: int = 9) -> tuple:
    return tuple(make_archetype(i) for i in range(n))


# ----------------------------------------------------------------- rendering

def _shape_mask(shape: str, box, h: int, w: int, facing_left: bool = True) -> np.ndarray:
    x0, y0, x1, y1 = box
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = xs + 0.5, ys + 0.5
    inside = (cx >= x0) & (cx < x1) & (cy >= y0) & (cy < y1)
    u = (cx - (x0 + x1) / 2) / max((x1 - x0) / 2, 1e-9)
    v = (cy - (y0 + y1) / 2) / max((y1 - y0) / 2, 1e-9)
    if shape == "rect":
        return inside
    if shape == "ellipse":
        return u * u + v * v <= 1.0
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "wedge":
        # triangle with its apex towards the facing side
        t = (u + 1) / 2 if facing_left else (1 - u) / 2
        return inside & (np.abs(v) <= t + 0.15)
    raise InvalidArgumentError(f"unknown shape {shape!r}")


def _pattern_mask(pattern: str, h: int, w: int, origin) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    ys = ys - int(origin[1])
    xs = xs - int(origin[0])
    if pattern == "solid":
        return np.zeros((h, w), bool)
    if pattern == "hstripe":
        return (ys // 2) % 2 == 0
    if pattern == "vstripe":
        return (xs // 2) % 2 == 0
    if pattern == "checker":
        return ((xs // 2) + (ys // 2)) % 2 == 0
    if pattern == "dots":
        return (xs % 4 == 1) & (ys % 4 == 1)
    raise InvalidArgumentError(f"unknown pattern {pattern!r}")


def _paint(canvas, mask, color):
    canvas[mask] = np.asarray(color, dtype=float)


def _tight_box(mask: np.ndarray) -> BBox | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _jitter_color(color, amount, rng):
    return tuple(float(np.clip(c + rng.uniform(-amount, amount), 0, 255)) for c in color)


def _draw_part(canvas, style: PartStyle, box, facing_left, color_shift, rng):
    h, w = canvas.shape[:2]
    mask = _shape_mask(style.shape, box, h, w, facing_left)
    color = _jitter_color(style.color, color_shift, rng)
    pcolor = _jitter_color(style.pattern_color, color_shift, rng)
    _paint(canvas, mask, color)
    _paint(canvas, mask & _pattern_mask(style.pattern, h, w, (box[0], box[1])), pcolor)
    return mask


def _background(h, w, mode, rng, base=None, distractor=None):
    canvas = np.empty((h, w, 3))
    base = base if base is not None else tuple(rng.uniform(30, 230, 3))
    canvas[:] = base
    if mode == "clutter":
        for _ in range(int(rng.integers(6, 11))):
            bw, bh = rng.uniform(6, w * 0.5), rng.uniform(6, h * 0.5)
            x0, y0 = rng.uniform(-bw / 2, w - bw / 2), rng.uniform(-bh / 2, h - bh / 2)
            shape = ("rect", "ellipse")[int(rng.integers(2))]
            _paint(canvas, _shape_mask(shape, (x0, y0, x0 + bw, y0 + bh), h, w), rng.uniform(20, 235, 3))
        if distractor is not None:
            arch, = distractor
            bw = rng.uniform(0.35, 0.6) * w
            bh = bw / arch.side_aspect
            x0, y0 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
            _paint(canvas, _shape_mask(arch.body_shape, (x0, y0, x0 + bw, y0 + bh), h, w),
                   _jitter_color(arch.body_color, 15, rng))
    return canvas


def _finish(canvas, noise, rng, gain=1.0, cast=(0.0, 0.0, 0.0)):
    out = canvas * gain + np.asarray(cast)
    if noise > 0:
        out = out + rng.normal(0.0, noise, out.shape)
    return Raster(np.clip(np.round(out), 0, 255).astype(np.uint8))


def render_object(arch: Archetype, viewpoint: str, rng, image_size=(72, 72), body_width=None,
                  position=None, background="uniform", noise=3.0, color_shift=15.0,
                  squash=(0.75, 1.0), gain=1.0, cast=(0.0, 0.0, 0.0), distractor=False,
                  min_visible=0.0):
    """Render one object; returns ``(Raster, SyntheticTruth)``."""
    if viewpoint not in VIEWPOINTS:
        raise InvalidArgumentError(f"unknown viewpoint {viewpoint!r}")
    w, h = image_size
    aspect = arch.aspect(viewpoint)
    if body_width is None:
        body_width = rng.uniform(0.66, 0.82) * min(w, h * aspect)
    bw = float(body_width)
    bh = bw / aspect
    if bh > h * 0.95 and position is None:
        bh = h * 0.85
        bw = bh * aspect
    if bw < 16 or bh < 16:
        raise InvalidArgumentError("object too small to render parts")
    if position is None:
        if bw > w or bh > h:
            raise InvalidArgumentError(f"object {bw:.0f}x{bh:.0f} does not fit a {w}x{h} image")
        x0 = rng.uniform(2, max(w - bw - 2, 2.001))
        y0 = rng.uniform(2, max(h - bh - 2, 2.001))
    else:
        x0, y0 = position
    canvas = _background(h, w, background, rng, distractor=(arch,) if distractor else None)
    body = _shape_mask(arch.body_shape, (x0, y0, x0 + bw, y0 + bh), h, w)
    _paint(canvas, body, _jitter_color(arch.body_color, color_shift / 2, rng))
    union = body.copy()
    facing_left = viewpoint != "right"
    parts = []
    for pid, (style, instances) in enumerate(zip(arch.parts, arch.layouts[viewpoint])):
        for pl in instances:
            pw = pl.w * bw * rng.uniform(*squash)
            ph = pl.h * bh
            cx, cy = x0 + pl.cx * bw, y0 + pl.cy * bh
            mask = _draw_part(canvas, style, (cx - pw / 2, cy - ph / 2, cx + pw / 2, cy + ph / 2),
                              facing_left, color_shift, rng)
            visible = _tight_box(mask)
            union |= mask
            if visible is not None and visible.area >= min_visible * pw * ph:
                parts.append((pid, visible))
    obj_box = _tight_box(union)
    if obj_box is None:
        raise InvalidArgumentError("object lies entirely outside the image")
    truth = SyntheticTruth((w, h), [ObjectTruth(obj_box, arch.name, viewpoint, parts)])
    return _finish(canvas, noise, rng, gain, cast), truth


def render_part_image(arch: Archetype, part_id: int, rng, image_size=(56, 56), noise=3.0,
                      instances=None, scale=(0.4, 0.6)):
    """An isolated part (or two) on a uniform background.

    ``scale`` bounds the part height as a fraction of the image height.
    """
    w, h = image_size
    style = arch.parts[part_id]
    n = instances if instances is not None else (2 if rng.random() < 0.2 else 1)
    canvas = _background(h, w, "uniform", rng)
    boxes = []
    if n == 1:
        ph = rng.uniform(*scale) * h
        pw = min(ph * style.aspect, 0.8 * w)
        x0, y0 = rng.uniform(3, w - pw - 3), rng.uniform(3, h - ph - 3)
        slots = [(x0, y0, pw, ph)]
    else:
        ph = rng.uniform(0.75 * scale[0], 0.7 * scale[1]) * h
        pw = min(ph * style.aspect, 0.4 * w)
        slots = [(rng.uniform(2, w / 2 - pw - 2), rng.uniform(3, h - ph - 3), pw, ph),
                 (rng.uniform(w / 2 + 2, w - pw - 2), rng.uniform(3, h - ph - 3), pw, ph)]
    for (x0, y0, pw, ph) in slots:
        mask = _draw_part(canvas, style, (x0, y0, x0 + pw, y0 + ph), True, 4.0, rng)
        boxes.append((part_id, _tight_box(mask)))
    truth = SyntheticTruth((w, h), [ObjectTruth(_tight_box_union([b for _, b in boxes]),
                                                arch.name, None, boxes)])
    return _finish(canvas, noise, rng), truth


def _tight_box_union(boxes):
    return BBox(min(b.x_min for b in boxes), min(b.y_min for b in boxes),
                max(b.x_max for b in boxes), max(b.y_max for b in boxes))


def render_hard_object(arch: Archetype, viewpoint: str, rng, image_size=(96, 96), noise=6.0,
                       truncate_prob=0.25, distractor_prob=0.5):
    """A darker, cluttered, possibly truncated scene; part truth is clipped to the image."""
    w, h = image_size
    aspect = arch.aspect(viewpoint)
    bw = rng.uniform(0.42, 0.72) * min(w, h * aspect)
    bh = bw / aspect
    x0 = rng.uniform(2, w - bw - 2)
    y0 = rng.uniform(2, h - bh - 2)
    if rng.random() < truncate_prob:
        cut = rng.uniform(0.15, 0.3)
        side = int(rng.integers(3))
        if side == 0:
            x0 = -cut * bw
        elif side == 1:
            x0 = w - (1 - cut) * bw
        else:
            y0 = h - (1 - cut) * bh
    gain = rng.uniform(0.6, 0.85)
    cast = tuple(rng.uniform(-15, 15, 3))
    raster, truth = render_object(arch, viewpoint, rng, image_size, body_width=bw, position=(x0, y0),
                                  background="clutter", noise=noise, color_shift=25.0,
                                  squash=(0.6, 1.0), gain=gain, cast=cast,
                                  distractor=rng.random() < distractor_prob, min_visible=0.4)
    return raster, truth


def render_scene(spec: SceneSpec, seed: int, archetype_index: int = 0, viewpoint: str | None = None):
    """Render one scene of ``spec``; deterministic in ``(spec, seed)``."""
    rng = np.random.default_rng([spec.seed, seed])
    arch = spec.archetypes[archetype_index]
    vp = viewpoint or VIEWPOINTS[int(rng.integers(4))]
    if spec.background == "uniform":
        return render_object(arch, vp, rng, spec.image_size, noise=spec.noise)
    return render_hard_object(arch, vp, rng, spec.image_size, noise=spec.noise)


# ---------------------------------------------------------------- benchmark

@dataclass(frozen=True)
class BenchmarkCounts:
    part_images: int = 25
    object_images: int = 20  # per viewpoint; the side set gets twice as many
    hard_train: int = 40
    hard_eval: int = 40
    easy_eval: int = 0
    part_scale: tuple = (0.2, 0.35)  # part height / image height in the part sets
    part_image_size: tuple = (72, 72)


@dataclass
class Benchmark:
    manifest: object  # pipeline.DatasetManifest
    ground_truth: dict  # image_id -> SyntheticTruth (evaluation images)
    images: dict  # image_id -> Raster
    side_truth: dict  # side-set image_id -> "left" | "right"
    eval_ids: list
    easy_eval_ids: list
    archetype: Archetype
    train_truth: dict = field(default_factory=dict)  # training object and hard images -> SyntheticTruth


def generate_benchmark(arch: Archetype, counts: BenchmarkCounts = BenchmarkCounts(), seed: int = 0) -> Benchmark:
    """Full training manifest plus held-out hard (and optionally easy) evaluation scenes."""
    from .pipeline import DatasetManifest, HardSample

    rng = np.random.default_rng([seed, 104729, sum(map(ord, arch.name))])
    images: dict = {}
    part_sets = {}
    for pid, style in enumerate(arch.parts):
        ids = []
        for k in range(counts.part_images):
            r, _ = render_part_image(arch, pid, rng, counts.part_image_size, scale=counts.part_scale)
            iid = f"part_{style.name}_{k:03d}"
            images[iid] = r
            ids.append(iid)
        part_sets[style.name] = ids
    object_sets = {"front": [], "back": [], "side": []}
    side_truth = {}
    train_truth: dict = {}
    for vp in ("front", "back"):
        for k in range(counts.object_images):
            r, t = render_object(arch, vp, rng)
            iid = f"obj_{vp}_{k:03d}"
            images[iid] = r
            train_truth[iid] = t
            object_sets[vp].append(iid)
    for k in range(2 * counts.object_images):
        vp = ("left", "right")[int(rng.integers(2))]
        r, t = render_object(arch, vp, rng)
        iid = f"obj_side_{k:03d}"
        images[iid] = r
        train_truth[iid] = t
        object_sets["side"].append(iid)
        side_truth[iid] = vp
    hard = []
    for k in range(counts.hard_train):
        vp = VIEWPOINTS[int(rng.integers(4))]
        r, t = render_hard_object(arch, vp, rng)
        iid = f"hard_{k:03d}"
        images[iid] = r
        train_truth[iid] = t
        o = t.objects[0]
        hard.append(HardSample(iid, o.box, o.viewpoint, list(o.parts)))
    truth, eval_ids = {}, []
    for k in range(counts.hard_eval):
        vp = VIEWPOINTS[int(rng.integers(4))]
        r, t = render_hard_object(arch, vp, rng)
        iid = f"eval_{k:03d}"
        images[iid] = r
        truth[iid] = t
        eval_ids.append(iid)
    easy_ids = []
    for k in range(counts.easy_eval):
        vp = VIEWPOINTS[int(rng.integers(4))]
        r, t = render_object(arch, vp, rng, (96, 96), background="uniform", noise=3.0)
        iid = f"easy_{k:03d}"
        images[iid] = r
        truth[iid] = t
        easy_ids.append(iid)
    manifest = DatasetManifest(
        class_name=arch.name,
        parts=[p.name for p in arch.parts],
        object_sets=object_sets,
        part_sets=part_sets,
        side_sets=["side"],
        hard_domain=hard,
    )
    return Benchmark(manifest, truth, images, side_truth, eval_ids, easy_ids, arch, train_truth)


def truth_to_json(truth: dict) -> dict:
    """Ground-truth JSON document keyed by image id."""
    out = {}
    for iid, t in truth.items():
        out[iid] = {
            "image_size": list(t.image_size),
            "objects": [
                {
                    "box": list(o.box.as_tuple()),
                    "class": o.class_name,
                    "viewpoint": o.viewpoint,
                    "parts": [{"part_id": pid, "box": list(b.as_tuple())} for pid, b in o.parts],
                }
                for o in t.objects
            ],
        }
    return {"schema_version": 1, "images": out}


def truth_from_json(doc: dict) -> dict:
    truth = {}
    for iid, rec in doc["images"].items():
        objs = [
            ObjectTruth(BBox.from_array(o["box"]), o.get("class", ""), o.get("viewpoint"),
                        [(int(p["part_id"]), BBox.from_array(p["box"])) for p in o.get("parts", [])])
            for o in rec["objects"]
        ]
        truth[iid] = SyntheticTruth(tuple(rec.get("image_size", (0, 0))), objs)
    return truth


def write_benchmark(bench: Benchmark, out_dir):
    """Write PPM images, ``manifest.json`` and ``ground_truth.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for iid, r in bench.images.items():
        save_image(r, out / "images" / f"{iid}.ppm")
    bench.manifest.save(out / "manifest.json", image_dir="images")
    doc = truth_to_json(bench.ground_truth)
    doc["side_truth"] = bench.side_truth
    doc["eval_ids"] = bench.eval_ids
    doc["easy_eval_ids"] = bench.easy_eval_ids
    (out / "ground_truth.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
