"""Detection, pose accuracy, timing and contact metrics for mapping runs."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import dataclass, field, replace
import itertools
import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .const import (
    DEFAULT_ADDS_IOU,
    DEFAULT_CONF_THRESHOLD,
    DEFAULT_CURVE_MAX,
    DEFAULT_CURVE_SAMPLES,
    DEFAULT_MIN_VISIBLE_PIXELS,
    IOU_THRESHOLDS_50_95,
    RUNTIME_BUDGET_MS,
    TABLE_ID,
)
from .coordinator import MapSnapshot
from .exceptions import BehindCamera, ConfigError
from .geometry import ModelRegistry, ObjectModel, Pose
from .relations import ContactRelation, contact_distance, interpenetration, relation_residuals
from .scene_sim import GroundTruthScene, Intrinsics, SceneObject, SimulatedDataset, render_depth

_LOGGER = logging.getLogger(__name__)

BBox = tuple[float, float, float, float]

TABLE_THRESHOLDS = (0.5, 0.75)
PHASES = ("assoc_ms", "stage1_ms", "relations_ms", "stage2_ms")


@dataclass(frozen=True)
class Detection2D:
    """A 2D box in one frame; ground truth carries score 1."""

    t: int
    class_id: int
    bbox: BBox
    score: float
    source: int

    def __post_init__(self) -> None:
        xmin, ymin, xmax, ymax = self.bbox
        if not (xmin < xmax and ymin < ymax):
            raise ValueError(f"Degenerate box {self.bbox}")


@dataclass(frozen=True)
class EvalConfig:
    """Thresholds of the evaluation."""

    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    adds_iou: float = DEFAULT_ADDS_IOU
    curve_max: float = DEFAULT_CURVE_MAX
    curve_samples: int = DEFAULT_CURVE_SAMPLES
    min_visible_pixels: int = DEFAULT_MIN_VISIBLE_PIXELS
    workers: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.conf_threshold <= 1.0 or not 0.0 < self.adds_iou <= 1.0:
            raise ConfigError("conf_threshold must be in [0, 1] and adds_iou in (0, 1]")
        if self.curve_max <= 0.0 or self.curve_samples < 2:
            raise ConfigError("Accuracy curve needs curve_max > 0 and at least 2 samples")
        if self.min_visible_pixels < 1 or self.workers < 1:
            raise ConfigError("min_visible_pixels and workers must be >= 1")


# === Boxes ===


def project_bbox(model: ObjectModel, pose: Pose, camera: Pose, intrinsics: Intrinsics) -> BBox:
    """Image-clipped bounds of the model's surface points, points behind the camera dropped.

    Raises:
        BehindCamera: if no surface point has positive depth
    """
    points_cam = camera.inverse().compose(pose).transform_points(model.surface_points)
    points_cam = points_cam[points_cam[:, 2] > 0.0]
    if len(points_cam) == 0:
        raise BehindCamera(f"Model {model.name} is entirely behind the camera")
    u, v, _ = intrinsics.project(points_cam)
    return (
        float(np.clip(u.min(), 0.0, intrinsics.width)),
        float(np.clip(v.min(), 0.0, intrinsics.height)),
        float(np.clip(u.max(), 0.0, intrinsics.width)),
        float(np.clip(v.max(), 0.0, intrinsics.height)),
    )


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


# === Matching and precision ===


def _by_score(dets: Sequence[Detection2D]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(
    dets: Sequence[Detection2D], gts: Sequence[Detection2D], iou_thresh: float
) -> dict[int, int]:
    """Greedy one-to-one matching in descending score order.

    Each detection takes the unmatched ground truth of its frame and class
    with the highest IoU, if that IoU reaches the threshold. Returns
    detection index -> ground-truth index.
    """
    by_frame: dict[tuple[int, int], list[int]] = {}
    for j, gt in enumerate(gts):
        by_frame.setdefault((gt.t, gt.class_id), []).append(j)
    taken: set[int] = set()
    matches: dict[int, int] = {}
    for i in _by_score(dets):
        det = dets[i]
        best_j, best_iou = -1, iou_thresh
        for j in by_frame.get((det.t, det.class_id), ()):
            if j in taken:
                continue
            overlap = iou(det.bbox, gts[j].bbox)
            if overlap >= best_iou:
                best_j, best_iou = j, overlap
        if best_j >= 0:
            taken.add(best_j)
            matches[i] = best_j
    return matches


def average_precision(
    dets: Sequence[Detection2D], gts: Sequence[Detection2D], class_id: int, iou_thresh: float
) -> float:
    """Area under the all-points interpolated precision-recall curve of one class."""
    dets = [d for d in dets if d.class_id == class_id]
    gts = [g for g in gts if g.class_id == class_id]
    if not gts or not dets:
        return 0.0
    matches = match_detections(dets, gts, iou_thresh)
    order = _by_score(dets)
    tp = np.array([1.0 if i in matches else 0.0 for i in order])
    cum_tp = np.cumsum(tp)
    recall = cum_tp / len(gts)
    precision = cum_tp / np.arange(1, len(order) + 1)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(
    dets: Sequence[Detection2D], gts: Sequence[Detection2D], thresholds: Sequence[float] = (0.5,)
) -> float:
    """AP averaged over the classes present in ground truth, then over IoU thresholds."""
    classes = sorted({g.class_id for g in gts})
    if not classes:
        return 0.0
    return float(
        np.mean([np.mean([average_precision(dets, gts, c, thr) for c in classes]) for thr in thresholds])
    )


def precision_recall(
    dets: Sequence[Detection2D],
    gts: Sequence[Detection2D],
    iou_thresh: float,
    conf_thresh: float = DEFAULT_CONF_THRESHOLD,
) -> tuple[float, float]:
    kept = [d for d in dets if d.score >= conf_thresh]
    tp = len(match_detections(kept, gts, iou_thresh))
    precision = tp / len(kept) if kept else 0.0
    recall = tp / len(gts) if gts else 0.0
    return precision, recall


# === Pose accuracy ===


def add_s(points: np.ndarray, pose_est: Pose, pose_gt: Pose) -> float:
    """Mean distance from each ground-truth placed point to the closest estimated placed point."""
    tree = cKDTree(pose_est.transform_points(points))
    distances, _ = tree.query(pose_gt.transform_points(points), k=1)
    return float(np.mean(distances))


def accuracy_curve(
    errors: Sequence[float], max_threshold: float = DEFAULT_CURVE_MAX, samples: int = DEFAULT_CURVE_SAMPLES
) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of errors at or below each of `samples` uniform thresholds in [0, max_threshold]."""
    thresholds = np.linspace(0.0, max_threshold, samples)
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        return thresholds, np.zeros(samples)
    accuracy = (errors[None, :] <= thresholds[:, None] + 1e-12).mean(axis=1)
    return thresholds, accuracy


def contact_violation_stats(
    objects: Sequence[Any],
    relations: Sequence[ContactRelation],
    registry: ModelRegistry,
    table: Optional[Any] = None,
) -> tuple[float, float]:
    """Worst interpenetration over every object pair and worst contact distance over relations, meters."""
    poses = {o.id: o.pose for o in objects}
    classes = {o.id: o.class_id for o in objects}
    max_gap = 0.0
    for relation in relations:
        if any(i != TABLE_ID and i not in poses for i in relation.objects):
            continue
        residuals = relation_residuals(relation, poses, classes, registry, table)
        max_gap = max(max_gap, contact_distance(relation, residuals))
    max_pen = 0.0
    for a, b in itertools.combinations(objects, 2):
        model_a, model_b = registry[a.class_id], registry[b.class_id]
        reach = np.linalg.norm(model_a.half_extents) + np.linalg.norm(model_b.half_extents)
        if a.pose.translation_distance_to(b.pose) > reach:
            continue
        max_pen = max(max_pen, interpenetration(model_a, a.pose, model_b, b.pose))
    return max_pen, max_gap


# === Per-frame detections ===


def _visible_boxes(
    objects: Sequence[tuple[int, int, Pose, float]],
    labels: np.ndarray,
    t: int,
    camera: Pose,
    intrinsics: Intrinsics,
    registry: ModelRegistry,
    min_visible: int,
) -> list[Detection2D]:
    ids, counts = np.unique(labels[labels > TABLE_ID], return_counts=True)
    visible = {int(i) for i, c in zip(ids, counts) if c >= min_visible}
    boxes = []
    for obj_id, class_id, pose, score in objects:
        if obj_id not in visible:
            continue
        try:
            bbox = project_bbox(registry[class_id], pose, camera, intrinsics)
        except BehindCamera:
            continue
        if bbox[0] < bbox[2] and bbox[1] < bbox[3]:
            boxes.append(Detection2D(t, class_id, bbox, score, obj_id))
    return boxes


def ground_truth_detections(dataset: SimulatedDataset, cfg: EvalConfig) -> list[Detection2D]:
    """Boxes of every object with enough labeled pixels in each frame."""
    objects = [(o.object_id, o.class_id, o.pose, 1.0) for o in dataset.scene.objects]

    def _frame(t: int) -> list[Detection2D]:
        frame = dataset.frames[t]
        return _visible_boxes(
            objects, frame.labels, t, frame.pose, frame.intrinsics, dataset.registry, cfg.min_visible_pixels
        )

    return _map_frames(_frame, len(dataset.frames), cfg.workers)


def predicted_detections(
    dataset: SimulatedDataset, snapshots: Sequence[MapSnapshot], cfg: EvalConfig
) -> list[Detection2D]:
    """Boxes of the map objects visible from the estimated camera of each snapshot."""
    registry = dataset.registry
    intrinsics = dataset.frames[0].intrinsics if len(dataset.frames) else Intrinsics()
    spacing = registry[registry.class_ids[0]].spacing

    def _frame(index: int) -> list[Detection2D]:
        snapshot = snapshots[index]
        if not snapshot.objects:
            return []
        scene = GroundTruthScene(
            [SceneObject(e.id, e.class_id, e.pose) for e in snapshot.objects], dataset.scene.table_extents
        )
        rendered = render_depth(scene, snapshot.camera, intrinsics, registry, snapshot.t, spacing=spacing)
        objects = [(e.id, e.class_id, e.pose, e.score) for e in snapshot.objects]
        return _visible_boxes(
            objects, rendered.labels, snapshot.t, snapshot.camera, intrinsics, registry, cfg.min_visible_pixels
        )

    return _map_frames(_frame, len(snapshots), cfg.workers)


def _map_frames(fn, n: int, workers: int) -> list[Detection2D]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(fn, range(n)))
    else:
        chunks = [fn(i) for i in range(n)]
    return [d for chunk in chunks for d in chunk]


# === Reports ===


@dataclass
class VariantMetrics:
    """Every metric of one variant."""

    variant: str
    map_50: float
    map_75: float
    map_50_95: float
    precision_recall: dict[str, tuple[float, float]]
    adds_errors: list[float]
    final_adds_errors: list[float]
    curve: list[float]
    final_curve: list[float]
    timings: dict[str, float]
    contacts: dict[str, float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "mAP_50": self.map_50,
            "mAP_75": self.map_75,
            "mAP_50_95": self.map_50_95,
            "precision_recall": {k: {"precision": p, "recall": r} for k, (p, r) in self.precision_recall.items()},
            "adds_mean": float(np.mean(self.adds_errors)) if self.adds_errors else None,
            "final_adds": self.final_adds_errors,
            "curve": self.curve,
            "final_curve": self.final_curve,
            "timings_ms": self.timings,
            "contacts_m": self.contacts,
        }


@dataclass
class MetricReport:
    """Metrics of all evaluated variants on one dataset."""

    thresholds: list[float]
    variants: dict[str, VariantMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"thresholds": self.thresholds, "variants": {k: v.to_dict() for k, v in self.variants.items()}}


def timing_summary(snapshots: Sequence[MapSnapshot]) -> dict[str, float]:
    """Mean per phase plus mean and p95 of the per-frame total."""
    if not snapshots:
        return {**{f"mean_{p}": 0.0 for p in PHASES}, "mean_total_ms": 0.0, "p95_total_ms": 0.0}
    rows = np.array([[getattr(s.timing, p) for p in PHASES] for s in snapshots])
    totals = rows.sum(axis=1)
    summary = {f"mean_{p}": float(m) for p, m in zip(PHASES, rows.mean(axis=0))}
    summary["mean_total_ms"] = float(totals.mean())
    summary["p95_total_ms"] = float(np.percentile(totals, 95))
    if summary["mean_total_ms"] > RUNTIME_BUDGET_MS:
        _LOGGER.warning(
            "Mean frame time %.1f ms exceeds the %.0f ms budget", summary["mean_total_ms"], RUNTIME_BUDGET_MS
        )
    return summary


def align_to_world(dataset: SimulatedDataset, snapshots: Sequence[MapSnapshot]) -> list[MapSnapshot]:
    """Re-express snapshots from the run's first-camera frame in the ground-truth world frame."""
    anchor = dataset.anchor
    return [
        replace(
            snapshot,
            camera=anchor.compose(snapshot.camera),
            objects=[replace(entry, pose=anchor.compose(entry.pose)) for entry in snapshot.objects],
        )
        for snapshot in snapshots
    ]


def final_map_errors(
dataset: SimulatedDataset, snapshot: Optional[MapSnapshot]) -> list[float]:
    """ADD-S of every ground-truth object against the nearest final map object of its class (inf if none)."""
    errors = []
    entries = snapshot.objects if snapshot is not None else []
    for obj in dataset.scene.objects:
        candidates = [e for e in entries if e.class_id == obj.class_id]
        if not candidates:
            errors.append(float("inf"))
            continue
        nearest = min(candidates, key=lambda e: e.pose.translation_distance_to(obj.pose))
        errors.append(add_s(dataset.registry[obj.class_id].surface_points, nearest.pose, obj.pose))
    return errors


def evaluate_variant(
    dataset: SimulatedDataset,
    variant: str,
    snapshots: Sequence[MapSnapshot],
    cfg: EvalConfig,
    gts: Optional[list[Detection2D]] = None,
) -> VariantMetrics:
    """Detection, pose, timing and contact metrics of one run."""
    snapshots = align_to_world(dataset, snapshots)
    gts = ground_truth_detections(dataset, cfg) if gts is None else gts
    dets = predicted_detections(dataset, snapshots, cfg)
    _LOGGER.debug("%s: %d predicted boxes, %d ground-truth boxes", variant, len(dets), len(gts))

    pr = {f"{thr:.2f}": precision_recall(dets, gts, thr, cfg.conf_threshold) for thr in TABLE_THRESHOLDS}
    sweep = [precision_recall(dets, gts, thr, cfg.conf_threshold) for thr in IOU_THRESHOLDS_50_95]
    pr["0.50:0.95"] = tuple(float(v) for v in np.mean(sweep, axis=0))

    poses = {(s.t, e.id): e.pose for s in snapshots for e in s.objects}
    gt_poses = {o.object_id: o.pose for o in dataset.scene.objects}
    adds_errors = [
        add_s(
            dataset.registry[gts[j].class_id].surface_points,
            poses[(dets[i].t, dets[i].source)],
            gt_poses[gts[j].source],
        )
        for i, j in sorted(match_detections(dets, gts, cfg.adds_iou).items())
    ]
    final = snapshots[-1] if snapshots else None
    final_errors = final_map_errors(dataset, final)
    _, curve = accuracy_curve(adds_errors, cfg.curve_max, cfg.curve_samples)
    _, final_curve = accuracy_curve(final_errors, cfg.curve_max, cfg.curve_samples)

    contacts = {"max_interpenetration": 0.0, "max_contact_gap": 0.0}
    if final is not None:
        pen, gap = contact_violation_stats(final.objects, final.relations, dataset.registry, dataset.scene.table)
        contacts = {"max_interpenetration": pen, "max_contact_gap": gap}

    metrics = VariantMetrics(
        variant,
        mean_average_precision(dets, gts, (0.5,)),
        mean_average_precision(dets, gts, (0.75,)),
        mean_average_precision(dets, gts, IOU_THRESHOLDS_50_95),
        pr,
        adds_errors,
        final_errors,
        [float(v) for v in curve],
        [float(v) for v in final_curve],
        timing_summary(snapshots),
        contacts,
    )
    _LOGGER.info(
        "%s: mAP50 %.3f, mAP75 %.3f, mAP50:95 %.3f", variant, metrics.map_50, metrics.map_75, metrics.map_50_95
    )
    return metrics


def evaluate_run(
    dataset: SimulatedDataset, runs: dict[str, Sequence[MapSnapshot]], cfg: Optional[EvalConfig] = None
) -> MetricReport:
    """Evaluate several variants against one dataset's ground truth."""
    cfg = cfg or EvalConfig()
    gts = ground_truth_detections(dataset, cfg)
    thresholds, _ = accuracy_curve([], cfg.curve_max, cfg.curve_samples)
    report = MetricReport([float(t) for t in thresholds])
    for variant, snapshots in runs.items():
        report.variants[variant] = evaluate_variant(dataset, variant, snapshots, cfg, gts)
    return report


def write_report(report: MetricReport, out_dir: Path) -> Path:
    """Write metrics.json, tables.csv, curves.csv and timings.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    names = list(report.variants)

    with open(out_dir / "tables.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", *names])
        for label, attr in (("mAP_50", "map_50"), ("mAP_75", "map_75"), ("mAP_50:95", "map_50_95")):
            writer.writerow([label, *(f"{getattr(report.variants[n], attr):.4f}" for n in names)])
        for key in report.variants[names[0]].precision_recall if names else ():
            writer.writerow([f"Pr_{key}", *(f"{report.variants[n].precision_recall[key][0]:.4f}" for n in names)])
            writer.writerow([f"Rec_{key}", *(f"{report.variants[n].precision_recall[key][1]:.4f}" for n in names)])

    with open(out_dir / "curves.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["threshold", *names, *(f"{n}_final" for n in names)])
        for k, threshold in enumerate(report.thresholds):
            writer.writerow(
                [
                    f"{threshold:.4f}",
                    *(f"{report.variants[n].curve[k]:.4f}" for n in names),
                    *(f"{report.variants[n].final_curve[k]:.4f}" for n in names),
                ]
            )

    with open(out_dir / "timings.csv", "w", newline="", encoding="utf-8") as handle:
        fields = ["variant", *(f"mean_{p}" for p in PHASES), "mean_total_ms", "p95_total_ms"]
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        for name in names:
            writer.writerow({"variant": name, **{k: f"{v:.3f}" for k, v in report.variants[name].timings.items()}})
    _LOGGER.info("Wrote evaluation report for %s to %s", ", ".join(names) or "no variants", out_dir)
    return out_dir
