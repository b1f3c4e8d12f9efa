"""Stage orchestration (T0 to T3), dataset manifests and model bundles."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import tempfile
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .appearance import PartClassifier, TrainConfig, extract_features, extract_features_batch, train_classifier
from .boxfit import SegEnergyConfig, fit_instance_boxes
from .errors import (
    BundleVersionError,
    CorruptBundleError,
    InvalidArgumentError,
    InvalidStateError,
    ManifestError,
)
from .geometry import BBox, normalize_box
from .location import (
    HarvestConfig,
    LocationModel,
    build_location_model,
    empty_location_model,
    harvest_location_training_samples,
)
from .mining import ImageProposals, MinedSample, MinedSet, MiningConfig, mine_part_instances
from .proposals import ProposalConfig, generate_proposals
from .raster import Raster, crop, load_image
from .viewpoint import VIEWPOINT_ORDER, predict_viewpoints, split_side_views, train_viewpoint_classifier

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
BUNDLE_MAGIC = b"PFB1"
BUNDLE_VERSION = 1
STAGES = ("T1", "T2", "T3")


# ---------------------------------------------------------------- manifest

@dataclass
class HardSample:
    image_id: str
    object_box: BBox
    viewpoint: str | None = None
    parts: list | None = None  # [(part_id, BBox)]


@dataclass
class DatasetManifest:
    """Training queries of one object class.

    Image ids are paths relative to ``root`` (the manifest's directory) unless
    ``images`` supplies in-memory rasters for them.
    """
    class_name: str
    parts: list
    object_sets: dict  # viewpoint or side-set name -> image ids
    part_sets: dict  # part name -> image ids
    side_sets: list = field(default_factory=lambda: ["side"])
    hard_domain: list = field(default_factory=list)
    root: Path | None = None
    images: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.parts:
            raise ManifestError("manifest lists no parts")
        missing = [p for p in self.parts if p not in self.part_sets]
        if missing:
            raise ManifestError(f"no image set for parts {missing}")
        for name in self.object_sets:
            if name not in VIEWPOINT_ORDER and name not in self.side_sets:
                raise ManifestError(f"object set {name!r} is neither a viewpoint nor a side set")

    def load_raster(self, image_id: str) -> Raster:
        if self.images is not None and image_id in self.images:
            return self.images[image_id]
        base = self.root if self.root is not None else Path(".")
        return load_image(base / image_id)

    def all_image_ids(self) -> list:
        ids = [i for v in self.object_sets.values() for i in v]
        ids += [i for v in self.part_sets.values() for i in v]
        ids += [h.image_id for h in self.hard_domain]
        return ids

    def check_files(self):
        for iid in self.all_image_ids():
            if self.images is not None and iid in self.images:
                continue
            p = (self.root or Path(".")) / iid
            if not p.is_file():
                raise ManifestError(f"referenced image does not exist: {p}")

    def to_json(self, image_dir: str | None = None) -> dict:
        def path(i):
            return f"{image_dir}/{i}.ppm" if image_dir else i

        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "class_name": self.class_name,
            "parts": list(self.parts),
            "object_sets": {k: [path(i) for i in v] for k, v in self.object_sets.items()},
            "part_sets": {k: [path(i) for i in v] for k, v in self.part_sets.items()},
            "side_sets": list(self.side_sets),
            "hard_domain": [
                {
                    "image": path(h.image_id),
                    "object_box": list(h.object_box.as_tuple()),
                    "viewpoint": h.viewpoint,
                    "parts": None if h.parts is None
                    else [{"part_id": pid, "box": list(b.as_tuple())} for pid, b in h.parts],
                }
                for h in self.hard_domain
            ],
        }

    def save(self, path, image_dir: str | None = None):
        atomic_write_text(path, json.dumps(self.to_json(image_dir), indent=1))

    @classmethod
    def from_json(cls, doc: dict, root: Path | None = None) -> "DatasetManifest":
        version = doc.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise ManifestError(f"unsupported manifest schema_version {version!r}")
        try:
            hard = [
                HardSample(
                    h["image"], BBox.from_array(h["object_box"]), h.get("viewpoint"),
                    None if h.get("parts") is None
                    else [(int(p["part_id"]), BBox.from_array(p["box"])) for p in h["parts"]],
                )
                for h in doc.get("hard_domain", [])
            ]
            return cls(doc["class_name"], list(doc["parts"]), dict(doc["object_sets"]),
                       dict(doc["part_sets"]), list(doc.get("side_sets", ["side"])), hard, root)
        except KeyError as e:
            raise ManifestError(f"manifest is missing field {e.args[0]!r}") from None

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: not valid JSON ({e})") from None
        m = cls.from_json(doc, path.parent)
        if check_files:
            m.check_files()
        return m


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class StageConfig:
    objects_per_viewpoint: int = 100
    images_per_part: int = 25
    proposals: ProposalConfig = ProposalConfig()
    segmentation: SegEnergyConfig = SegEnergyConfig()
    appearance: TrainConfig = TrainConfig()
    viewpoint_training: TrainConfig = TrainConfig()
    harvest: HarvestConfig = HarvestConfig()
    mining: MiningConfig = MiningConfig()
    hard_mining: MiningConfig = MiningConfig()  # T3 mining in the cluttered domain
    bandwidth: float = 0.5
    fit_boxes: bool = True  # False trains the uncropped-image baseline
    warm_start_a3: bool = False
    balanced_background: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.objects_per_viewpoint <= 0 or self.images_per_part <= 0:
            raise InvalidArgumentError("objects_per_viewpoint: caps must be positive")
        if not 0 < self.bandwidth <= 1:
            raise InvalidArgumentError("bandwidth: must lie in (0, 1]")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        # tuples -> lists so that a JSON round trip is stable
        return json.loads(json.dumps(out))

    @classmethod
    def from_dict(cls, doc: dict) -> "StageConfig":
        return _build_dataclass(cls, doc, "")

    def replace(self, **kw) -> "StageConfig":
        return dataclasses.replace(self, **kw)


def _build_dataclass(cls, doc, prefix):
    if not isinstance(doc, dict):
        raise InvalidArgumentError(f"{prefix or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in fields:
            raise InvalidArgumentError(f"unknown config field {prefix + key!r}")
        default = getattr(cls(), key) if key not in kwargs else None
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build_dataclass(type(default), value, prefix + key + ".")
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (InvalidArgumentError, TypeError, ValueError) as e:
        raise InvalidArgumentError(f"{prefix or 'config'}: {e}") from None


# ---------------------------------------------------------------- curated data

@dataclass
class CuratedCrop:
    crop_id: str
    source_id: str
    box: BBox  # extent inside the source image
    raster: Raster = field(repr=False)


@dataclass
class CuratedDataset:
    parts: dict  # part name -> [CuratedCrop]
    objects: dict  # viewpoint -> [CuratedCrop]
    part_names: list

    def crops(self):
        for v in self.parts.values():
            yield from v
        for v in self.objects.values():
            yield from v

    def to_json(self) -> dict:
        def enc(items):
            return [{"crop_id": c.crop_id, "source": c.source_id, "box": list(c.box.as_tuple())} for c in items]

        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "part_names": self.part_names,
            "parts": {k: enc(v) for k, v in self.parts.items()},
            "objects": {k: enc(v) for k, v in self.objects.items()},
        }

    @classmethod
    def from_json(cls, doc: dict, manifest: DatasetManifest) -> "CuratedDataset":
        cache: dict = {}

        def dec(items):
            out = []
            for it in items:
                src = it["source"]
                if src not in cache:
                    cache[src] = manifest.load_raster(src)
                box = BBox.from_array(it["box"])
                out.append(CuratedCrop(it["crop_id"], src, box, crop(cache[src], box)[0]))
            return out

        return cls({k: dec(v) for k, v in doc["parts"].items()},
                   {k: dec(v) for k, v in doc["objects"].items()}, list(doc["part_names"]))


def _parallel_map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


class _BoxFitter:
    def __init__(self, cfg: StageConfig):
        self.cfg = cfg

    def __call__(self, r: Raster) -> list:
        if not self.cfg.fit_boxes:
            return [r.full_box()]
        return fit_instance_boxes(r, self.cfg.segmentation, self.cfg.proposals)


def _curate(manifest, ids, cfg, workers):
    rasters = [manifest.load_raster(i) for i in ids]
    boxes = _parallel_map(_BoxFitter(cfg), rasters, workers)
    out = []
    for iid, r, bs in zip(ids, rasters, boxes):
        for k, b in enumerate(bs):
            c, window = crop(r, b)
            out.append(CuratedCrop(f"{iid}#{k}", iid, window, c))
    return out


def stage_t0(manifest: DatasetManifest, cfg: StageConfig = StageConfig(), workers: int = 1) -> CuratedDataset:
    """Cap every query set, fit instance boxes and split side views into left/right."""
    parts = {}
    for name in manifest.parts:
        ids = list(manifest.part_sets[name])[: cfg.images_per_part]
        parts[name] = _curate(manifest, ids, cfg, workers)
        if not parts[name]:
            raise ManifestError(f"part set {name!r} is empty after curation")
    objects = {vp: [] for vp in VIEWPOINT_ORDER}
    for name, ids in manifest.object_sets.items():
        crops = _curate(manifest, list(ids)[: cfg.objects_per_viewpoint], cfg, workers)
        if name in manifest.side_sets:
            if len(crops) < 2:
                raise ManifestError(f"side set {name!r} needs at least two instances")
            left, right = split_side_views([c.raster for c in crops], seed=cfg.seed)
            objects["left"] += [crops[i] for i in left]
            objects["right"] += [crops[i] for i in right]
        else:
            objects[name] += crops
    if any(objects.values()):
        for vp, crops in objects.items():
            if not crops:
                raise ManifestError(f"object set for viewpoint {vp!r} is empty after curation")
    return CuratedDataset(parts, objects, list(manifest.parts))


# ---------------------------------------------------------------- bundle

@dataclass
class ModelBundle:
    stage: str
    parts: list
    appearance: PartClassifier
    location_models: dict = field(default_factory=dict)  # (part_id, viewpoint) -> LocationModel
    viewpoint: PartClassifier | None = None
    frame_sizes: dict = field(default_factory=dict)  # viewpoint -> (W, H)
    config: dict = field(default_factory=dict)
    mined: MinedSet = field(default_factory=MinedSet)
    version: int = BUNDLE_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidArgumentError(f"unknown stage {self.stage!r}")
        if self.stage == "T1" and (self.location_models or self.viewpoint is not None):
            raise InvalidArgumentError("a T1 bundle carries no location or viewpoint model")
        if self.stage != "T1":
            missing = [(i, v) for i in range(len(self.parts)) for v in VIEWPOINT_ORDER
                       if (i, v) not in self.location_models]
            if missing:
                raise InvalidArgumentError(f"missing location models for {missing}")
            if self.viewpoint is None:
                raise InvalidArgumentError(f"{self.stage} bundle needs a viewpoint classifier")

    @property
    def part_count(self) -> int:
        return len(self.parts)

    def location_model(self, part_id: int, viewpoint: str) -> LocationModel:
        if self.stage == "T1":
            raise InvalidStateError("a T1 bundle has no location models")
        return self.location_models[(part_id, viewpoint)]


def _array_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _mined_to_json(m: MinedSet) -> dict:
    def enc(items):
        return [[s.image_id, *s.box.as_tuple(), s.part_id, s.score, s.proposal_index] for s in items]

    return {"positives": enc(m.positives), "negatives": enc(m.negatives), "skipped": list(m.skipped_images)}


def _mined_from_json(doc: dict) -> MinedSet:
    def dec(items):
        return [MinedSample(r[0], BBox(*r[1:5]), int(r[5]), float(r[6]), int(r[7])) for r in items]

    return MinedSet(dec(doc["positives"]), dec(doc["negatives"]), list(doc["skipped"]))


def _classifier_meta(c: PartClassifier) -> dict:
    return {"part_count": c.part_count, "background": c.has_background_class, "tag": c.stage_tag,
            "shape": list(c.weights.shape)}


def bundle_to_bytes(b: ModelBundle) -> bytes:
    sections = []
    loc_keys = sorted(b.location_models, key=lambda k: (k[0], VIEWPOINT_ORDER.index(k[1])))
    meta = {
        "stage": b.stage,
        "parts": list(b.parts),
        "appearance": _classifier_meta(b.appearance),
        "viewpoint": None if b.viewpoint is None else _classifier_meta(b.viewpoint),
        "frame_sizes": {k: list(v) for k, v in sorted(b.frame_sizes.items())},
        "locations": [
            {"part_id": i, "viewpoint": v, "bandwidth": b.location_models[(i, v)].bandwidth,
             "frame_size": list(b.location_models[(i, v)].frame_size),
             "count": len(b.location_models[(i, v)])}
            for i, v in loc_keys
        ],
        "config": b.config,
        "mined": _mined_to_json(b.mined),
    }
    sections.append(("meta", json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()))
    sections.append(("appearance.weights", _array_bytes(b.appearance.weights)))
    sections.append(("appearance.bias", _array_bytes(b.appearance.bias)))
    if b.viewpoint is not None:
        sections.append(("viewpoint.weights", _array_bytes(b.viewpoint.weights)))
        sections.append(("viewpoint.bias", _array_bytes(b.viewpoint.bias)))
    for i, v in loc_keys:
        sections.append((f"location.{i}.{v}", _array_bytes(b.location_models[(i, v)].samples)))
    body = [BUNDLE_MAGIC, struct.pack("<II", b.version, len(sections))]
    for name, payload in sections:
        nb = name.encode()
        body += [struct.pack("<H", len(nb)), nb, struct.pack("<Q", len(payload)), payload]
    data = b"".join(body)
    return data + struct.pack("<I", zlib.crc32(data))


def bundle_from_bytes(data: bytes) -> ModelBundle:
    if len(data) < 16 or data[:4] != BUNDLE_MAGIC:
        raise CorruptBundleError("not a model bundle (bad magic or too short)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != BUNDLE_VERSION:
        raise BundleVersionError(f"bundle version {version}, this build reads {BUNDLE_VERSION}")
    if zlib.crc32(data[:-4]) != struct.unpack_from("<I", data, len(data) - 4)[0]:
        raise CorruptBundleError("bundle checksum mismatch (truncated or damaged file)")
    pos, end = 12, len(data) - 4
    sections = {}
    try:
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2: pos + 2 + nl].decode()
            pos += 2 + nl
            (pl,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if pos + pl > end:
                raise CorruptBundleError(f"section {name!r} runs past the end of the file")
            sections[name] = data[pos: pos + pl]
            pos += pl
        if pos != end:
            raise CorruptBundleError("trailing bytes after the last section")
        meta = json.loads(sections["meta"])

        def arr(name, shape):
            return np.frombuffer(sections[name], dtype="<f8").astype(float).reshape(shape)

        def clf(prefix, m):
            shape = tuple(m["shape"])
            return PartClassifier(arr(prefix + ".weights", shape), arr(prefix + ".bias", (shape[0],)),
                                  m["part_count"], m["background"], m["tag"])

        locs = {}
        for rec in meta["locations"]:
            key = (int(rec["part_id"]), rec["viewpoint"])
            samples = arr(f"location.{key[0]}.{key[1]}", (rec["count"], 4))
            locs[key] = LocationModel(samples, rec["bandwidth"], tuple(rec["frame_size"]))
        return ModelBundle(
            stage=meta["stage"],
            parts=meta["parts"],
            appearance=clf("appearance", meta["appearance"]),
            location_models=locs,
            viewpoint=None if meta["viewpoint"] is None else clf("viewpoint", meta["viewpoint"]),
            frame_sizes={k: tuple(v) for k, v in meta["frame_sizes"].items()},
            config=meta["config"],
            mined=_mined_from_json(meta["mined"]),
            version=version,
        )
    except CorruptBundleError:
        raise
    except (KeyError, ValueError, struct.error, UnicodeDecodeError, InvalidArgumentError) as e:
        raise CorruptBundleError(f"malformed bundle contents: {e}") from None


def save_bundle(b: ModelBundle, path):
    atomic_write_bytes(path, bundle_to_bytes(b))


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no bundle at {path}")
    return bundle_from_bytes(path.read_bytes())


# ---------------------------------------------------------------- stages

class FeatureCache:
    """Proposals and descriptors per image, computed once and shared by all stages."""

    def __init__(self, proposal_cfg: ProposalConfig):
        self.proposal_cfg = proposal_cfg
        self._store: dict = {}

    def __len__(self):
        return len(self._store)

    def get(self, key: str, r: Raster, viewpoint: str | None = None) -> ImageProposals:
        if key not in self._store:
            props = generate_proposals(r, self.proposal_cfg, key)
            feats = extract_features_batch(r, props.boxes)
            self._store[key] = ImageProposals(key, props.boxes, feats, r.size, None,
                                              extract_features(r, r.full_box()))
        base = self._store[key]
        return dataclasses.replace(base, viewpoint=viewpoint)


def _crop_features(crops) -> np.ndarray:
    return np.array([extract_features(c.raster, c.raster.full_box()) for c in crops])


def _train_cfg(cfg: StageConfig, offset: int, balanced: bool = False) -> TrainConfig:
    return dataclasses.replace(cfg.appearance, seed=cfg.seed * 1000 + offset,
                               balanced=balanced or cfg.appearance.balanced)


def stage_t1(curated: CuratedDataset, cfg: StageConfig = StageConfig()) -> ModelBundle:
    """P-way appearance classifier on the curated part crops alone."""
    X, y = [], []
    for i, name in enumerate(curated.part_names):
        feats = _crop_features(curated.parts[name])
        X.append(feats)
        y += [i] * len(feats)
    tag = "A1" if cfg.fit_boxes else "A0"
    clf = train_classifier(np.concatenate(X), np.array(y), len(curated.part_names), _train_cfg(cfg, 1), tag)
    return ModelBundle("T1", list(curated.part_names), clf, config=cfg.to_dict())


def _object_proposals(curated: CuratedDataset, cache: FeatureCache) -> list:
    return [cache.get(c.crop_id, c.raster, vp) for vp in VIEWPOINT_ORDER for c in curated.objects[vp]]


def _mined_training_rows(mined: MinedSet, lookup, P: int):
    X, y = [], []
    for s in mined.positives:
        X.append(lookup[s.image_id].features[s.proposal_index])
        y.append(s.part_id)
    for s in mined.negatives:
        X.append(lookup[s.image_id].features[s.proposal_index])
        y.append(P)
    return X, y


def _train_with_background(curated, mined, lookup, cfg, tag, offset, init=None):
    P = len(curated.part_names)
    X, y = [], []
    for i, name in enumerate(curated.part_names):
        feats = _crop_features(curated.parts[name])
        X += list(feats)
        y += [i] * len(feats)
    mx, my = _mined_training_rows(mined, lookup, P)
    X += mx
    y += my
    if P not in y:
        raise InvalidStateError("mining produced no background samples")
    tcfg = _train_cfg(cfg, offset, balanced=cfg.balanced_background)
    return train_classifier(np.array(X), np.array(y), P + 1, tcfg, tag, has_background_class=True, init=init)


def stage_t2(bundle_t1: ModelBundle, curated: CuratedDataset, cfg: StageConfig = StageConfig(),
             cache: FeatureCache | None = None) -> ModelBundle:
    """Location models from A1 detections, mining, then A2 and the viewpoint classifier."""
    if bundle_t1.stage != "T1":
        raise InvalidStateError(f"stage_t2 expects a T1 bundle, got {bundle_t1.stage}")
    cache = cache or FeatureCache(cfg.proposals)
    P = bundle_t1.part_count
    A1 = bundle_t1.appearance
    frame_sizes = {}
    locs = {}
    images = _object_proposals(curated, cache)
    for vp in VIEWPOINT_ORDER:
        crops = curated.objects[vp]
        if not crops:
            raise ManifestError(f"no curated object images for viewpoint {vp!r}")
        frame_sizes[vp] = (float(np.mean([c.raster.width for c in crops])),
                           float(np.mean([c.raster.height for c in crops])))
        ims = [im for im in images if im.viewpoint == vp]
        probs = [A1.predict_proba(im.features) for im in ims]
        for i in range(P):
            dets = harvest_location_training_samples([p[:, i] for p in probs], [im.boxes for im in ims],
                                                     [im.image_size for im in ims], cfg.harvest)
            if dets:
                locs[(i, vp)] = build_location_model(dets, cfg.bandwidth, frame_sizes[vp])
            else:
                log.warning("no location samples for part %s, viewpoint %s", bundle_t1.parts[i], vp)
                locs[(i, vp)] = empty_location_model(cfg.bandwidth, frame_sizes[vp])
    mined = mine_part_instances(A1, locs, images, cfg.mining, np.random.default_rng([cfg.seed, 2]))
    lookup = {im.image_id: im for im in images}
    A2 = _train_with_background(curated, mined, lookup, cfg, "A2", 2)
    V2 = train_viewpoint_classifier(
        {vp: np.array([lookup[c.crop_id].whole_features for c in curated.objects[vp]]) for vp in VIEWPOINT_ORDER},
        dataclasses.replace(cfg.viewpoint_training, seed=cfg.seed * 1000 + 3),
    )
    return ModelBundle("T2", list(bundle_t1.parts), A2, locs, V2, frame_sizes, cfg.to_dict(), mined)


def hard_domain_proposals(manifest: DatasetManifest, V: PartClassifier, cache: FeatureCache) -> list:
    """Proposals inside each hard-domain object box, tagged with the predicted viewpoint."""
    out = []
    for h in manifest.hard_domain:
        r = manifest.load_raster(h.image_id)
        c, window = crop(r, h.object_box)
        im = cache.get(f"{h.image_id}@object", c)
        vp = predict_viewpoints(V, im.whole_features[None])[0]
        out.append(dataclasses.replace(im, viewpoint=vp))
    return out


def stage_t3(bundle_t2: ModelBundle, curated: CuratedDataset, manifest: DatasetManifest,
             cfg: StageConfig = StageConfig(), cache: FeatureCache | None = None) -> ModelBundle:
    """Mine the hard domain with (A2, L2), enrich the location models and retrain A3."""
    if bundle_t2.stage != "T2":
        raise InvalidStateError(f"stage_t3 expects a T2 bundle, got {bundle_t2.stage}")
    if not manifest.hard_domain:
        log.warning("hard domain is empty; the T3 bundle repeats the T2 models")
        return dataclasses.replace(bundle_t2, stage="T3")
    cache = cache or FeatureCache(cfg.proposals)
    hard = hard_domain_proposals(manifest, bundle_t2.viewpoint, cache)
    mined = mine_part_instances(bundle_t2.appearance, bundle_t2.location_models, hard, cfg.hard_mining,
                                np.random.default_rng([cfg.seed, 3]))
    sizes = {im.image_id: (im.image_size, im.viewpoint) for im in hard}
    locs = {}
    for (i, vp), model in bundle_t2.location_models.items():
        extra = [normalize_box(s.box, sizes[s.image_id][0], model.frame_size).as_tuple()
                 for s in mined.positives if s.part_id == i and sizes[s.image_id][1] == vp]
        locs[(i, vp)] = model.with_samples(np.array(extra)) if extra else model
    lookup = {im.image_id: im for im in hard}
    lookup.update({im.image_id: im for im in _object_proposals(curated, cache)})
    accumulated = bundle_t2.mined.extend(mined)
    init = bundle_t2.appearance if cfg.warm_start_a3 else None
    A3 = _train_with_background(curated, accumulated, lookup, cfg, "A3", 4, init=init)
    return ModelBundle("T3", list(bundle_t2.parts), A3, locs, bundle_t2.viewpoint,
                       dict(bundle_t2.frame_sizes), cfg.to_dict(), accumulated)


@dataclass
class PipelineResult:
    curated: CuratedDataset
    t1: ModelBundle
    t2: ModelBundle
    t3: ModelBundle
    a0: ModelBundle | None
    cache: FeatureCache = field(repr=False)


def run_pipeline(manifest: DatasetManifest, cfg: StageConfig = StageConfig(), with_baseline: bool = True,
                 workers: int = 1) -> PipelineResult:
    """All stages in order; ``with_baseline`` also trains the uncropped-image baseline."""
    curated = stage_t0(manifest, cfg, workers)
    cache = FeatureCache(cfg.proposals)
    t1 = stage_t1(curated, cfg)
    t2 = stage_t2(t1, curated, cfg, cache)
    t3 = stage_t3(t2, curated, manifest, cfg, cache)
    a0 = None
    if with_baseline:
        raw_cfg = cfg.replace(fit_boxes=False)
        raw = CuratedDataset({n: _curate(manifest, list(manifest.part_sets[n])[: cfg.images_per_part], raw_cfg, 1)
                              for n in manifest.parts}, {}, list(manifest.parts))
        a0 = stage_t1(raw, raw_cfg)
    return PipelineResult(curated, t1, t2, t3, a0, cache)
