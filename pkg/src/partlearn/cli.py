"""Command-line entry point: ``partlearn <command> ...``.

Exit status: 0 on success, 1 on usage errors, 2 on data or model errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, PartLearnError
from .pipeline import (
    CuratedDataset,
    DatasetManifest,
    FeatureCache,
    StageConfig,
    atomic_write_text,
    load_bundle,
    save_bundle,
    stage_t0,
    stage_t1,
    stage_t2,
    stage_t3,
)

log = logging.getLogger("partlearn")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------- config

def load_config(path: str | None, seed: int | None = None, fit_boxes: bool | None = None) -> StageConfig:
    """Defaults, then the JSON config file, then command-line flags."""
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path}: invalid JSON ({e})") from None
    if seed is not None:
        doc["seed"] = seed
    if fit_boxes is not None:
        doc["fit_boxes"] = fit_boxes
    try:
        return StageConfig.from_dict(doc)
    except InvalidArgumentError as e:
        raise UsageError(f"rejected config: {e}") from None


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    from .synth import BenchmarkCounts, default_archetypes, generate_benchmark, write_benchmark

    spec = json.loads(Path(args.spec).read_text()) if args.spec else {}
    known = {"archetypes", "seed", "counts"}
    unknown = set(spec) - known
    if unknown:
        raise UsageError(f"unknown synth spec fields {sorted(unknown)}")
    try:
        counts = BenchmarkCounts(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in spec.get("counts", {}).items()})
    except TypeError as e:
        raise UsageError(f"synth spec counts: {e}") from None
    indices = spec.get("archetypes", [0])
    archetypes = default_archetypes(max(indices) + 1)
    seed = args.seed if args.seed is not None else spec.get("seed", 0)
    out = Path(args.out)
    for idx in indices:
        bench = generate_benchmark(archetypes[idx], counts, seed)
        target = out if len(indices) == 1 else out / archetypes[idx].name
        write_benchmark(bench, target)
        print(f"wrote {len(bench.images)} images for {archetypes[idx].name} to {target}")
    return EXIT_OK


# ---------------------------------------------------------------- fit-boxes

def _image_paths(path: Path) -> list:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".pnm"))
        if not files:
            raise FileNotFoundError(f"no .ppm images in {path}")
        return files
    return [path]


def cmd_fit_boxes(args) -> int:
    from .boxfit import fit_instance_boxes_detailed
    from .raster import load_image, save_mask

    cfg = load_config(args.config)
    rows = []
    for p in _image_paths(Path(args.input)):
        r = load_image(p)
        boxes, result, _ = fit_instance_boxes_detailed(r, cfg.segmentation, cfg.proposals)
        for k, b in enumerate(boxes):
            rows.append([p.stem, k, *(_fmt(v) for v in b.as_tuple())])
        if args.masks:
            save_mask(result.segmentation.labels.astype(bool), Path(args.masks) / f"{p.stem}.pgm")
    atomic_write_text(args.out, _csv_text(["image_id", "instance", "x_min", "y_min", "x_max", "y_max"], rows))
    print(f"{len(rows)} boxes written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    fit = False if args.no_box_fitting else None
    cfg = load_config(args.config, args.seed, fit)
    manifest = DatasetManifest.load(args.manifest)
    if args.curated:
        curated = CuratedDataset.from_json(json.loads(Path(args.curated).read_text()), manifest)
    else:
        curated = stage_t0(manifest, cfg, args.workers)
    if args.stage == "t0":
        atomic_write_text(args.bundle_out, json.dumps(curated.to_json(), indent=1, sort_keys=True))
        n = sum(1 for _ in curated.crops())
        print(f"curated {n} crops -> {args.bundle_out}")
        return EXIT_OK
    cache = FeatureCache(cfg.proposals)
    if args.stage == "t1":
        bundle = stage_t1(curated, cfg)
    else:
        if not args.bundle_in:
            raise UsageError(f"train --stage {args.stage} needs --bundle-in")
        prev = load_bundle(args.bundle_in)
        if args.stage == "t2":
            bundle = stage_t2(prev, curated, cfg, cache)
        else:
            bundle = stage_t3(prev, curated, manifest, cfg, cache)
    save_bundle(bundle, args.bundle_out)
    print(f"{bundle.stage} bundle -> {args.bundle_out}")
    return EXIT_OK


# ---------------------------------------------------------------- detect

def _object_boxes(path) -> dict:
    from .synth import truth_from_json

    doc = json.loads(Path(path).read_text())
    return {iid: t.objects[0].box for iid, t in truth_from_json(doc).items() if t.objects}


def cmd_detect(args) -> int:
    from .detection import DetectionConfig, PartScorer, bundle_proposal_config, object_crop_proposals
    from .raster import load_image

    bundle = load_bundle(args.bundle)
    cfg = StageConfig.from_dict(bundle.config) if bundle.config else StageConfig()
    dcfg = DetectionConfig(mining=cfg.mining)
    cache = FeatureCache(bundle_proposal_config(bundle))
    boxes = _object_boxes(args.objects) if args.objects else {}
    scorer = PartScorer.from_bundle(bundle, use_location=not args.appearance_only)
    rows, vp_rows = [], []
    for p in _image_paths(Path(args.images)):
        iid = p.stem
        if boxes and iid not in boxes:
            continue
        r = load_image(p)
        box = boxes.get(iid, r.full_box())
        im, offset = object_crop_proposals(r, box, cache, iid)
        for d in scorer.detect(im, dcfg, offset):
            rows.append([iid, d.part_id, bundle.parts[d.part_id], _fmt(d.score),
                         *(_fmt(v) for v in d.box.as_tuple())])
        if bundle.viewpoint is not None:
            probs = bundle.viewpoint.predict_proba(im.whole_features[None])[0]
            vp_rows.append([iid, scorer.viewpoint_of(im.whole_features), *(_fmt(v) for v in probs)])
    header = ["image_id", "part_id", "part_name", "score", "x_min", "y_min", "x_max", "y_max"]
    atomic_write_text(args.out, _csv_text(header, rows))
    if vp_rows:
        from .viewpoint import VIEWPOINT_ORDER

        vp_path = Path(args.out).with_suffix(".viewpoints.csv")
        atomic_write_text(vp_path, _csv_text(["image_id", "viewpoint", *VIEWPOINT_ORDER], vp_rows))
    print(f"{len(rows)} detections -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def read_detections(path) -> dict:
    from .geometry import BBox, Detection

    out: dict = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            box = BBox(float(rec["x_min"]), float(rec["y_min"]), float(rec["x_max"]), float(rec["y_max"]))
            out.setdefault(rec["image_id"], []).append(Detection(box, float(rec["score"]), int(rec["part_id"])))
    return out


def cmd_eval(args) -> int:
    from .detection import align_side_names, mean_ap, part_average_precisions, viewpoint_accuracy
    from .synth import truth_from_json
    from .viewpoint import VIEWPOINT_ORDER

    if not 0 < args.iou <= 1:
        raise UsageError("--iou must lie in (0, 1]")
    dets = read_detections(args.detections)
    doc = json.loads(Path(args.gt).read_text())
    truth = truth_from_json(doc)
    ids = [i for i in doc.get("eval_ids", sorted(truth)) if i in truth]
    part_truth = {i: [pb for o in truth[i].objects for pb in o.parts] for i in ids}
    P = 1 + max([pid for v in part_truth.values() for pid, _ in v] + [d.part_id for v in dets.values() for d in v] + [-1])
    curves = part_average_precisions({i: dets.get(i, []) for i in ids}, part_truth, P, args.iou)
    report = {
        "iou_threshold": args.iou,
        "images": len(ids),
        "per_part_ap": [c.ap for c in curves],
        "undefined": [c.undefined for c in curves],
        "map": mean_ap(curves),
        "pr_samples": [
            {"recall": c.recall[:: max(1, len(c.recall) // 50)].tolist(),
             "precision": c.precision[:: max(1, len(c.precision) // 50)].tolist()}
            for c in curves
        ],
    }
    vp_path = Path(args.detections).with_suffix(".viewpoints.csv")
    if vp_path.is_file():
        with open(vp_path, newline="") as fh:
            recs = {r["image_id"]: r for r in csv.DictReader(fh)}
        labelled = [i for i in ids if i in recs and truth[i].objects and truth[i].objects[0].viewpoint]
        if labelled:
            probs = np.array([[float(recs[i][v]) for v in VIEWPOINT_ORDER] for i in labelled])
            labels = [truth[i].objects[0].viewpoint for i in labelled]
            vr = viewpoint_accuracy(labels, align_side_names(labels, probs))
            report["viewpoint"] = {"accuracy": vr.accuracy, "per_class_accuracy": vr.per_class_accuracy,
                                   "per_class_ap": vr.per_class_ap, "confusion": vr.confusion.tolist()}
    atomic_write_text(args.report, json.dumps(report, indent=1, sort_keys=True))
    print(f"mAP@{args.iou:g} = {report['map']:.4f} over {len(ids)} images")
    return EXIT_OK


# ---------------------------------------------------------------- report

def cmd_report(args) -> int:
    from . import report as rp
    from .detection import DetectionConfig
    from .pipeline import run_pipeline
    from .synth import truth_from_json

    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    tables, last = {}, None
    for mpath in args.manifest:
        manifest = DatasetManifest.load(mpath)
        gt_path = Path(args.gt) if args.gt else Path(mpath).parent / "ground_truth.json"
        doc = json.loads(gt_path.read_text())
        truth = truth_from_json(doc)
        ids = [i for i in doc.get("eval_ids", sorted(truth)) if i in truth]
        images = {i: manifest.load_raster(f"images/{i}.ppm") for i in ids}
        result = run_pipeline(manifest, cfg, with_baseline=True, workers=args.workers)
        scores = rp.evaluate_stages(result, images, truth, ids, DetectionConfig(mining=cfg.mining))
        tables[manifest.class_name] = scores.table()
        last = (manifest.class_name, scores, result)
        if args.per_class_figures:
            rp.plot_pr_curves(scores, out / f"pr_{manifest.class_name}.png")
            rp.plot_location_models(result.t3, out / f"location_{manifest.class_name}.png")
    if last is not None and not args.per_class_figures:
        name, scores, result = last
        rp.plot_pr_curves(scores, out / f"pr_{name}.png")
        rp.plot_location_models(result.t3, out / f"location_{name}.png")
    headers, rows = rp.stage_rows(tables)
    rp.write_text(out / "stage_table.csv", rp.csv_text(headers, rows))
    table_txt = rp.ascii_table(headers, rows)
    rp.write_text(out / "stage_table.txt", table_txt + "\n")
    rp.plot_stage_map(headers, rows if len(rows) == 1 else rows[-1:], out / "stage_map.png")
    print(table_txt)
    summary = dict(zip(headers[1:], rows[-1][1:]))
    bad = rp.chain_violations(summary)
    print("stage ordering " + ("holds" if not bad else "violated: " + ", ".join(f"{a}>{b}" for a, b, *_ in bad)))
    if last is not None and last[1].viewpoint is not None:
        print(f"viewpoint accuracy ({last[0]}): {last[1].viewpoint.accuracy:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="partlearn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic benchmark")
    s.add_argument("--spec", help="JSON with archetypes, seed and counts")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-boxes", help="fit instance boxes to images")
    s.add_argument("--in", dest="input", required=True, help="PPM file or directory")
    s.add_argument("--out", required=True, help="CSV output")
    s.add_argument("--masks", help="directory for PGM segmentation masks")
    s.add_argument("--config")
    s.set_defaults(func=cmd_fit_boxes)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--stage", required=True, choices=["t0", "t1", "t2", "t3"])
    s.add_argument("--manifest", required=True)
    s.add_argument("--bundle-in")
    s.add_argument("--bundle-out", required=True, help="bundle path (t0 writes the curated set as JSON)")
    s.add_argument("--curated", help="curated-set JSON from a previous t0 run")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--no-box-fitting", action="store_true", help="train on uncropped images")
    s.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="detect parts with a bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--images", required=True, help="PPM file or directory")
    s.add_argument("--out", required=True)
    s.add_argument("--objects", help="ground-truth JSON supplying object boxes (else whole images)")
    s.add_argument("--appearance-only", action="store_true")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="score detections against ground truth")
    s.add_argument("--detections", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--iou", type=float, default=0.4)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="train all stages and compare them")
    s.add_argument("--manifest", required=True, nargs="+")
    s.add_argument("--gt", help="ground-truth JSON (default: next to the manifest)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    s.add_argument("--per-class-figures", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be at least 1")
        return args.func(args)
    except UsageError as e:
        print(f"partlearn {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PartLearnError, OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        print(f"partlearn {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
