"""Stage-by-stage evaluation, tables and figures."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detection import (
    DetectionConfig,
    PartScorer,
    align_side_names,
    mean_ap,
    object_crop_proposals,
    part_average_precisions,
    viewpoint_accuracy,
)
from .pipeline import FeatureCache, PipelineResult, atomic_write_bytes, atomic_write_text
from .viewpoint import VIEWPOINT_ORDER

STAGE_COLUMNS = ("A0", "A1", "A1+L2", "A2", "A2+L2", "A3", "A3+L2", "A3+L3")
# the chain whose mAP should not drop from one entry to the next
MONOTONE_CHAIN = ("A0", "A1", "A1+L2", "A2+L2", "A3+L3")


@dataclass
class StageScores:
    part_names: list
    columns: dict = field(default_factory=dict)  # column -> list of PRCurve (one per part)
    viewpoint: object = None  # ViewpointReport on the evaluation crops

    def map(self, column: str) -> float:
        return mean_ap(self.columns[column])

    def table(self) -> dict:
        return {c: self.map(c) for c in self.columns}


def stage_scorers(result: PipelineResult) -> dict:
    V = result.t2.viewpoint
    out = {}
    if result.a0 is not None:
        out["A0"] = PartScorer(result.a0.appearance)
    out["A1"] = PartScorer(result.t1.appearance)
    out["A1+L2"] = PartScorer(result.t1.appearance, result.t2.location_models, V)
    out["A2"] = PartScorer(result.t2.appearance)
    out["A2+L2"] = PartScorer(result.t2.appearance, result.t2.location_models, V)
    out["A3"] = PartScorer(result.t3.appearance)
    out["A3+L2"] = PartScorer(result.t3.appearance, result.t2.location_models, V)
    out["A3+L3"] = PartScorer(result.t3.appearance, result.t3.location_models, V)
    return out


def evaluate_stages(result: PipelineResult, images: dict, truth: dict, eval_ids, cfg: DetectionConfig,
                    iou_threshold: float = 0.4, cache: FeatureCache | None = None) -> StageScores:
    """Part AP of every stage column on evaluation images with given object boxes.

    ``truth`` maps image id -> SyntheticTruth-like records whose first object
    supplies the box, the viewpoint and the part boxes.
    """
    cache = cache or result.cache
    crops, part_truth, vp_truth = {}, {}, {}
    for iid in eval_ids:
        o = truth[iid].objects[0]
        crops[iid] = object_crop_proposals(images[iid], o.box, cache, f"{iid}@eval")
        part_truth[iid] = list(o.parts)
        vp_truth[iid] = o.viewpoint
    P = result.t1.part_count
    scores = StageScores(list(result.t1.parts))
    for name, scorer in stage_scorers(result).items():
        dets = {iid: scorer.detect(im, cfg, off) for iid, (im, off) in crops.items()}
        scores.columns[name] = part_average_precisions(dets, part_truth, P, iou_threshold)
    labelled = [iid for iid in eval_ids if vp_truth[iid] in VIEWPOINT_ORDER]
    if labelled:
        V = result.t2.viewpoint
        probs = V.predict_proba(np.array([crops[iid][0].whole_features for iid in labelled]))
        labels = [vp_truth[i] for i in labelled]
        scores.viewpoint = viewpoint_accuracy(labels, align_side_names(labels, probs))
    return scores


def chain_violations(table: dict, allowance: float = 0.01) -> list:
    """Adjacent pairs of the monotone chain where mAP drops by more than ``allowance``."""
    bad = []
    chain = [c for c in MONOTONE_CHAIN if c in table]
    for a, b in zip(chain, chain[1:]):
        if table[b] < table[a] - allowance:
            bad.append((a, b, table[a], table[b]))
    return bad


def ascii_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[f"{v:.3f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [line]
    for k, r in enumerate(cells):
        out.append("|" + "|".join(f" {c:>{w}} " for c, w in zip(r, widths)) + "|")
        if k == 0:
            out.append(line)
    out.append(line)
    return "\n".join(out)


def stage_rows(tables: dict) -> tuple:
    """``tables`` maps a row label (class or seed) to a column -> mAP dict."""
    columns = [c for c in STAGE_COLUMNS if any(c in t for t in tables.values())]
    rows = [[label] + [t.get(c, float("nan")) for c in columns] for label, t in tables.items()]
    if len(tables) > 1:
        rows.append(["mean"] + [float(np.nanmean([t.get(c, np.nan) for t in tables.values()])) for c in columns])
    return ["class"] + columns, rows


def csv_text(headers, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(headers)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save_fig(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100)
    _pyplot().close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_stage_map(headers, rows, path):
    plt = _pyplot()
    columns = headers[1:]
    fig, ax = plt.subplots(figsize=(8, 3.5))
    n = len(rows)
    width = 0.8 / max(n, 1)
    x = np.arange(len(columns))
    for k, r in enumerate(rows):
        ax.bar(x + k * width - 0.4 + width / 2, r[1:], width, label=str(r[0]))
    ax.set_xticks(x)
    ax.set_xticklabels(columns)
    ax.set_ylabel("part mAP")
    ax.set_ylim(0, 1)
    if n <= 12:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    _save_fig(fig, path)


def plot_pr_curves(scores: StageScores, path, columns=("A0", "A1", "A1+L2", "A2+L2", "A3+L3")):
    plt = _pyplot()
    P = len(scores.part_names)
    fig, axes = plt.subplots(1, P, figsize=(3.2 * P, 3), squeeze=False)
    for i, ax in enumerate(axes[0]):
        for c in columns:
            if c not in scores.columns:
                continue
            curve = scores.columns[c][i]
            if len(curve.recall):
                ax.plot(np.concatenate([[0], curve.recall]), np.concatenate([[1], curve.precision]),
                        label=f"{c} ({curve.ap:.2f})")
        ax.set_title(scores.part_names[i])
        ax.set_xlabel("recall")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=6)
    axes[0][0].set_ylabel("precision")
    fig.tight_layout()
    _save_fig(fig, path)


def plot_location_models(bundle, path, box_fraction: float = 0.3, step: float = 1.0):
    """Density of a fixed-size box slid over each (part, viewpoint) frame."""
    from .location import density_map

    plt = _pyplot()
    P = bundle.part_count
    fig, axes = plt.subplots(P, 4, figsize=(8, 2.1 * P), squeeze=False)
    for i in range(P):
        for j, vp in enumerate(VIEWPOINT_ORDER):
            ax = axes[i][j]
            m = bundle.location_models[(i, vp)]
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(vp, fontsize=8)
            if j == 0:
                ax.set_ylabel(bundle.parts[i], fontsize=8)
            if m.is_empty:
                continue
            fw, fh = m.frame_size
            med = np.median(m.samples[:, 2:] - m.samples[:, :2], axis=0)
            size = med if np.all(med > 0) else (box_fraction * fw, box_fraction * fh)
            ax.imshow(density_map(m, size, step), cmap="magma", vmin=0, vmax=1)
    fig.tight_layout()
    _save_fig(fig, path)


def write_text(path, text: str):
    atomic_write_text(Path(path), text)
