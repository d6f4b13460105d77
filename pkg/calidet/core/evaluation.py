import json
import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .config import PRIOR_ORDER, PriorName
from .dataset import Dataset, ImageRecord, dataset_edge, split_subsets
from .detection import DetectionSet
from .edge import EdgeMatrix, edge_from_label_sets, edge_mae, flat_prior, flip_edge

if TYPE_CHECKING:
    from calidet.detectors import Detector

logger = logging.getLogger(__name__)

COCO_AREAS = {"small": (0.0, 32.0**2), "medium": (32.0**2, 96.0**2), "large": (96.0**2, 1e10)}


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iou_thresholds: list[float] = Field(
        default_factory=lambda: [round(0.5 + 0.05 * i, 2) for i in range(10)]
    )
    recall_points: int = Field(101, ge=2)
    score_threshold: float = Field(0.0, ge=0.0, le=1.0)
    max_detections: int | None = Field(None, ge=1)
    area_ranges: dict[str, tuple[float, float]] | None = None

    @field_validator("iou_thresholds")
    @classmethod
    def _increasing(cls, thresholds):
        if not thresholds:
            raise ValueError("Need at least one IoU threshold.")
        if any(not 0.0 < t <= 1.0 for t in thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1].")
        if any(a >= b for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("IoU thresholds must be strictly increasing.")
        return thresholds

    @classmethod
    def coco(cls, **overrides) -> "EvalConfig":
        return cls(max_detections=100, area_ranges=dict(COCO_AREAS), **overrides)


#######
# IoU #
#######


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Intersection over union of two (x, y, w, h) boxes; 0 when the union is empty.
    """
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = boxes_a[:, None, :2], boxes_a[:, None, :2] + boxes_a[:, None, 2:]
    b0, b1 = boxes_b[None, :, :2], boxes_b[None, :, :2] + boxes_b[None, :, 2:]
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (boxes_a[:, 2] * boxes_a[:, 3])[:, None] + (boxes_b[:, 2] * boxes_b[:, 3])[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


######
# AP #
######


def interpolated_ap(true_positive: np.ndarray, positives: int, recall_points: int = 101) -> float:
    """
    Area under the precision envelope sampled at evenly spaced recall points.
    `true_positive` flags predictions already sorted by descending confidence.
    """
    if positives <= 0:
        raise ValueError("AP is undefined without positives.")
    true_positive = np.asarray(true_positive, dtype=bool)
    if true_positive.size == 0:
        return 0.0
    tp = np.cumsum(true_positive)
    fp = np.cumsum(~true_positive)
    recall = tp / positives
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    samples = np.linspace(0.0, 1.0, recall_points)
    index = np.searchsorted(recall, samples, side="left")
    sampled = np.where(index < recall.size, envelope[np.minimum(index, recall.size - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class EvalMetrics:
    """
    AP figures as fractions in [0, 1]; `to_dict` reports them on the 0-100 scale.
    """

    ap: float
    ap50: float | None
    ap75: float | None
    per_threshold: list[float]
    per_class: dict[int, float]
    area_ap: dict[str, float | None] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        def pct(v):
            return None if v is None else round(100.0 * v, 4)

        record = {"AP": pct(self.ap), "AP50": pct(self.ap50), "AP75": pct(self.ap75)}
        for name, value in self.area_ap.items():
            record[f"AP_{name}"] = pct(value)
        return record


def _class_ap(
    class_index: int,
    dataset: Dataset,
    predictions: Mapping[int, DetectionSet],
    cfg: EvalConfig,
    area_range: tuple[float, float] | None,
) -> list[float] | None:
    """
    AP per IoU threshold for one class, or None when the class has no
    (non-ignored) ground truth.
    """
    entries = []  # (-score, image_id, position, image_id, det box)
    ground_truth = {}
    for image in dataset.images:
        gts = np.array([b.xywh for b in image.boxes_of(class_index)], dtype=np.float64).reshape(-1, 4)
        if area_range is None:
            ignore = np.zeros(len(gts), dtype=bool)
        else:
            area = gts[:, 2] * gts[:, 3]
            ignore = (area < area_range[0]) | (area > area_range[1])
        ground_truth[image.image_id] = (gts, ignore)
        prediction = predictions.get(image.image_id)
        if prediction is None:
            continue
        for position, d in enumerate(prediction.detections):
            if d.class_index == class_index:
                entries.append((-d.score, image.image_id, position, d.box))

    positives = int(sum((~ignore).sum() for _, ignore in ground_truth.values()))
    if positives == 0:
        return None
    entries.sort(key=lambda e: (e[0], e[1], e[2]))

    ious = []
    for _, image_id, _, box in entries:
        gts, _ = ground_truth[image_id]
        ious.append(iou_matrix(np.asarray(box)[None, :], gts)[0])

    results = []
    for threshold in cfg.iou_thresholds:
        matched = {image_id: np.zeros(len(gts), dtype=bool) for image_id, (gts, _) in ground_truth.items()}
        flags = []
        for (_, image_id, _, box), overlap in zip(entries, ious):
            _, ignore = ground_truth[image_id]
            taken = matched[image_id]
            outcome = None
            for prefer_ignored in (False, True):
                candidates = (~taken) & (ignore == prefer_ignored) & (overlap >= threshold)
                if candidates.any():
                    best = int(np.argmax(np.where(candidates, overlap, -1.0)))
                    taken[best] = True
                    outcome = "ignore" if prefer_ignored else "tp"
                    break
            if outcome is None:
                if area_range is not None and not area_range[0] <= box[2] * box[3] <= area_range[1]:
                    outcome = "ignore"
                else:
                    outcome = "fp"
            if outcome != "ignore":
                flags.append(outcome == "tp")
        results.append(interpolated_ap(np.array(flags, dtype=bool), positives, cfg.recall_points))
    return results


def _prepare_predictions(
    dataset: Dataset, predictions: Mapping[int, DetectionSet] | Iterable[DetectionSet], cfg: EvalConfig
) -> dict[int, DetectionSet]:
    if not isinstance(predictions, Mapping):
        predictions = {p.image_id: p for p in predictions}
    prepared = {}
    for image_id, prediction in predictions.items():
        prediction.validate(dataset.k)
        kept = tuple(d for d in prediction.detections if d.score >= cfg.score_threshold)
        prediction = DetectionSet(image_id, kept)
        if cfg.max_detections is not None:
            prediction = prediction.top(cfg.max_detections)
        prepared[image_id] = prediction
    return prepared


def _mean_over_classes(per_class: dict[int, list[float]], thresholds: int) -> list[float]:
    if not per_class:
        return [0.0] * thresholds
    table = np.array(list(per_class.values()))
    return table.mean(axis=0).tolist()


def average_precision(
    gts: Dataset,
    preds: Mapping[int, DetectionSet] | Iterable[DetectionSet],
    cfg: EvalConfig | None = None,
) -> EvalMetrics:
    """
    COCO-style AP: per class and IoU threshold, detections sorted by score
    (ties by image id, then detection order) are greedily matched to the
    unmatched ground truth with the highest IoU (ties to the lowest index).
    Classes without ground truth are left out of the averages.
    """
    cfg = cfg or EvalConfig()
    predictions = _prepare_predictions(gts, preds, cfg)

    per_class = {}
    for c in range(gts.k):
        result = _class_ap(c, gts, predictions, cfg, None)
        if result is not None:
            per_class[c] = result
    if not per_class:
        logger.warning("No ground truth boxes in the evaluated set; AP reported as 0.")
    per_threshold = _mean_over_classes(per_class, len(cfg.iou_thresholds))

    def at(threshold):
        for t, value in zip(cfg.iou_thresholds, per_threshold):
            if abs(t - threshold) < 1e-9:
                return value
        return None

    area_ap = {}
    for name, area_range in (cfg.area_ranges or {}).items():
        area_class = {}
        for c in range(gts.k):
            result = _class_ap(c, gts, predictions, cfg, tuple(area_range))
            if result is not None:
                area_class[c] = result
        area_ap[name] = float(np.mean(_mean_over_classes(area_class, len(cfg.iou_thresholds)))) if area_class else None

    return EvalMetrics(
        ap=float(np.mean(per_threshold)),
        ap50=at(0.5),
        ap75=at(0.75),
        per_threshold=per_threshold,
        per_class={c: float(np.mean(v)) for c, v in per_class.items()},
        area_ap=area_ap,
    )


def mean_metrics(records: Sequence[EvalMetrics]) -> EvalMetrics:
    def mean(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    area_names = records[0].area_ap.keys() if records else ()
    return EvalMetrics(
        ap=mean(r.ap for r in records),
        ap50=mean(r.ap50 for r in records),
        ap75=mean(r.ap75 for r in records),
        per_threshold=np.mean([r.per_threshold for r in records], axis=0).tolist() if records else [],
        per_class={},
        area_ap={name: mean(r.area_ap.get(name) for r in records) for name in area_names},
    )


##########
# Priors #
##########


@dataclass(frozen=True)
class InjectedPrior:
    """
    A named prior to inject: either one edge for every image or an edge per image.
    """

    name: str
    edge: EdgeMatrix | None = None
    per_image: Callable[[ImageRecord], EdgeMatrix] | None = None

    def edge_for(self, image: ImageRecord) -> EdgeMatrix:
        if self.per_image is not None:
            return self.per_image(image)
        return self.edge

    def epsilon(self, dataset: Dataset, reference: EdgeMatrix) -> float:
        if self.per_image is None:
            return edge_mae(self.edge, reference).mae
        if len(dataset) == 0:
            return 0.0
        return float(np.mean([edge_mae(self.edge_for(image), reference).mae for image in dataset.images]))


def sample_edge_of(image: ImageRecord, k: int, class_ids: Sequence[int]) -> EdgeMatrix:
    return edge_from_label_sets(k, [image.labels], class_ids)


def standard_priors(
    dataset: Dataset,
    e_t: EdgeMatrix,
    names: Iterable[str | PriorName] = PRIOR_ORDER,
    batch_size: int = 2,
) -> list[InjectedPrior]:
    """
    Builds the usual ladder of priors for a dataset: the flipped and true
    single-image edges, the flat prior, training statistics, the dataset's
    own statistics and consecutive-batch statistics.
    """
    k, class_ids = dataset.k, dataset.class_ids
    priors = []
    for name in names:
        name = PriorName(name)
        if name == PriorName.FLIPPED:
            prior = InjectedPrior(name, per_image=lambda im: flip_edge(sample_edge_of(im, k, class_ids)))
        elif name == PriorName.FLAT:
            prior = InjectedPrior(name, edge=flat_prior(k, class_ids))
        elif name == PriorName.TRAIN:
            prior = InjectedPrior(name, edge=e_t)
        elif name == PriorName.VALIDATION:
            prior = InjectedPrior(name, edge=dataset_edge(dataset))
        elif name == PriorName.BATCH:
            batch_edges = {}
            for start in range(0, len(dataset), batch_size):
                chunk = dataset.images[start : start + batch_size]
                edge = edge_from_label_sets(k, [im.labels for im in chunk], class_ids)
                batch_edges.update({im.image_id: edge for im in chunk})
            prior = InjectedPrior(name, per_image=lambda im, edges=batch_edges: edges[im.image_id])
        else:
            prior = InjectedPrior(name, per_image=lambda im: sample_edge_of(im, k, class_ids))
        priors.append(prior)
    return priors


def run_detector(
    detector: "Detector", dataset: Dataset, prior: InjectedPrior, workers: int = 1
) -> dict[int, DetectionSet]:
    def detect(image):
        return detector.detect(image, prior.edge_for(image))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(detect, dataset.images))
    else:
        results = [detect(image) for image in dataset.images]
    return {r.image_id: r for r in results}


def _prior_rank(name: str) -> int:
    try:
        return PRIOR_ORDER.index(PriorName(name))
    except ValueError:
        return len(PRIOR_ORDER)


@dataclass
class PriorRow:
    name: str
    epsilon: float
    metrics: EvalMetrics
    delta: float | None = None  # AP - AP(et), as a fraction


@dataclass
class PriorSweepReport:
    rows: list[PriorRow]

    def row(self, name: str) -> PriorRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def ap_column(self) -> list[float]:
        return [row.metrics.ap for row in self.rows]

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows": [
                {
                    "prior": row.name,
                    "epsilon": round(row.epsilon, 6),
                    **row.metrics.to_dict(),
                    "delta_vs_et": None if row.delta is None else round(100.0 * row.delta, 4),
                }
                for row in self.rows
            ]
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        header = f"{'prior':<6} {'eps':>7} {'AP':>7} {'AP50':>7} {'AP75':>7} {'vs et':>8}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            m = row.metrics.to_dict()
            delta = "" if row.delta is None else f"{100.0 * row.delta:+.2f}"
            lines.append(
                f"{row.name:<6} {row.epsilon:7.3f} {m['AP']:7.2f} "
                f"{_fmt(m['AP50'])} {_fmt(m['AP75'])} {delta:>8}"
            )
        return "\n".join(lines)


def _fmt(value: float | None) -> str:
    return f"{'-':>7}" if value is None else f"{value:7.2f}"


def prior_sweep(
    detector: "Detector",
    dataset: Dataset,
    priors: Sequence[InjectedPrior],
    cfg: EvalConfig | None = None,
    e_t: EdgeMatrix | None = None,
    workers: int = 1,
) -> PriorSweepReport:
    """
    Evaluates the detector once per injected prior. Rows come out in the
    canonical order ebar, e0, et, ev, eb, ex; other names follow in input order.
    """
    cfg = cfg or EvalConfig()
    if e_t is None:
        trained = [p for p in priors if p.name == PriorName.TRAIN]
        if not trained:
            raise ValueError("prior_sweep needs e_t or an 'et' prior to measure epsilon against.")
        e_t = trained[0].edge

    rows = []
    for prior in sorted(priors, key=lambda p: _prior_rank(p.name)):
        predictions = run_detector(detector, dataset, prior, workers)
        metrics = average_precision(dataset, predictions, cfg)
        rows.append(PriorRow(str(prior.name), prior.epsilon(dataset, e_t), metrics))
        logger.info("Prior %s: AP %.2f", prior.name, 100.0 * metrics.ap)

    baseline = next((row for row in rows if row.name == PriorName.TRAIN), None)
    if baseline is not None:
        for row in rows:
            row.delta = row.metrics.ap - baseline.metrics.ap
    return PriorSweepReport(rows)


@dataclass
class SubsetReport:
    subset_size: int
    subset_count: int
    mean_epsilon: float
    train_prior: EvalMetrics  # injected e_t
    subset_prior: EvalMetrics  # injected each subset's own e_b

    def to_dict(self) -> dict[str, Any]:
        return {
            "subset_size": self.subset_size,
            "subset_count": self.subset_count,
            "epsilon": round(self.mean_epsilon, 6),
            "et": self.train_prior.to_dict(),
            "eb": self.subset_prior.to_dict(),
        }

    def to_text(self) -> str:
        return format_subset_table([self])


def format_subset_table(reports: Sequence[SubsetReport]) -> str:
    """
    One block per subset size: metric rows with e_t and e_b columns and the
    signed gain of e_b.
    """
    lines = []
    for report in reports:
        lines.append(f"size {report.subset_size} ({report.subset_count} subsets), eps = {report.mean_epsilon:.3f}")
        et, eb = report.train_prior.to_dict(), report.subset_prior.to_dict()
        for metric in et:
            if et[metric] is None or eb[metric] is None:
                continue
            lines.append(f"  {metric:<10} et {et[metric]:7.2f}  eb {eb[metric]:7.2f} ({eb[metric] - et[metric]:+.2f})")
    return "\n".join(lines)


def subset_eval(
    detector: "Detector",
    dataset: Dataset,
    subset_size: int,
    seed: int,
    cfg: EvalConfig | None = None,
    e_t: EdgeMatrix | None = None,
    workers: int = 1,
) -> SubsetReport:
    """
    Splits the dataset into equal-sized subsets and evaluates each one under
    e_t and under its own statistics e_b; metrics are re-accumulated per
    subset and then averaged.
    """
    cfg = cfg or EvalConfig()
    if e_t is None:
        raise ValueError("subset_eval needs the training prior e_t.")
    subsets = split_subsets(dataset, subset_size, seed)
    if not subsets:
        raise ValueError(f"Subset size {subset_size} leaves no subsets of a {len(dataset)}-image dataset.")

    train_prior = InjectedPrior(PriorName.TRAIN, edge=e_t)
    under_et, under_eb, epsilons = [], [], []
    for subset in subsets:
        e_b = dataset_edge(subset)
        epsilons.append(edge_mae(e_b, e_t).mae)
        under_et.append(average_precision(subset, run_detector(detector, subset, train_prior, workers), cfg))
        own = InjectedPrior(PriorName.BATCH, edge=e_b)
        under_eb.append(average_precision(subset, run_detector(detector, subset, own, workers), cfg))

    report = SubsetReport(
        subset_size=subset_size,
        subset_count=len(subsets),
        mean_epsilon=float(np.mean(epsilons)),
        train_prior=mean_metrics(under_et),
        subset_prior=mean_metrics(under_eb),
    )
    logger.info("Subset size %d: eps %.3f over %d subsets", subset_size, report.mean_epsilon, len(subsets))
    return report
