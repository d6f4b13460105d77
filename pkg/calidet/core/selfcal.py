import logging
from collections.abc import Iterable, Mapping, Sequence
from typing import TYPE_CHECKING, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .config import CONVERGENCE_EPS, ETA, PRESENCE_THRESHOLD, Estimator, ZAxis
from .dataset import Dataset
from .detection import DetectionSet
from .edge import (
    EdgeMatrix,
    clip_edge,
    cooccurrence_counts,
    edge_from_counts,
    edge_from_label_sets,
    flat_prior,
    presence_matrix,
)
from .errors import CalidetError, DetectorError
from .evaluation import EvalConfig, InjectedPrior, average_precision, run_detector
from .trace import CalibrationTrace, TraceEntry

if TYPE_CHECKING:
    from calidet.detectors import Detector

logger = logging.getLogger(__name__)


class SelfCalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eta: float = Field(ETA, gt=0.0, allow_inf_nan=False)
    max_iterations: int = Field(10, ge=1)
    presence_threshold: float = Field(PRESENCE_THRESHOLD, ge=0.0, le=1.0)
    confidence_floor: float = Field(0.0, ge=0.0, le=1.0)
    tolerance: float = Field(CONVERGENCE_EPS, ge=0.0)
    z_axis: ZAxis = ZAxis.COLUMNS
    estimator: Estimator = Estimator.FULL
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    init: Literal["et", "e0"] = "et"
    workers: int = Field(1, ge=1)
    evaluate: bool = True


def z_vector(preds: DetectionSet, k: int, floor: float = 0.0) -> np.ndarray:
    """
    Highest confidence per class among detections at or above `floor`; 0 for classes never predicted.
    """
    z = np.zeros(k)
    for d in preds.detections:
        if d.score >= floor and d.score > z[d.class_index]:
            z[d.class_index] = d.score
    return z


def mean_z(all_preds: Iterable[DetectionSet], k: int, floor: float = 0.0) -> np.ndarray:
    vectors = [z_vector(p, k, floor) for p in all_preds]
    return np.mean(vectors, axis=0) if vectors else np.zeros(k)


def predicted_presence(all_preds: Iterable[DetectionSet], k: int, threshold: float) -> np.ndarray:
    return presence_matrix(k, (p.present_classes(threshold) for p in all_preds))


def predictions_to_edge(
    all_preds: Iterable[DetectionSet],
    k: int,
    threshold: float = PRESENCE_THRESHOLD,
    class_ids: Sequence[int] | None = None,
) -> EdgeMatrix:
    return edge_from_label_sets(k, (p.present_classes(threshold) for p in all_preds), class_ids)


def step_weights(z_bar: np.ndarray, eta: float, z_axis: ZAxis = ZAxis.COLUMNS) -> np.ndarray:
    """
    eta * Z, with Z(i, j) = z_bar[j] (columns) or z_bar[i] (rows).
    """
    z_bar = np.asarray(z_bar, dtype=np.float64)
    k = z_bar.size
    z = np.tile(z_bar, (k, 1))
    if z_axis == ZAxis.ROWS:
        z = z.T
    return eta * z


def selfcal_step(
    e_c: EdgeMatrix,
    e_i: EdgeMatrix,
    z_bar: np.ndarray,
    eta: float = ETA,
    z_axis: ZAxis = ZAxis.COLUMNS,
) -> EdgeMatrix:
    """
    E_c + eta * Z * (E_i - E_c), clipped to [0, 1] with the diagonal reset to 1.
    """
    if e_c.k != e_i.k or np.size(z_bar) != e_c.k:
        raise ValueError(f"Shapes disagree: E_c k={e_c.k}, E_i k={e_i.k}, z of size {np.size(z_bar)}.")
    weights = step_weights(z_bar, eta, z_axis)
    return clip_edge(e_c.values + weights * (e_i.values - e_c.values), e_c.class_ids)


class RunningStatistics:
    """
    Exponentially decayed co-occurrence counts over past iterations' predictions.
    """

    def __init__(self, k: int, momentum: float, class_ids: Sequence[int] | None = None):
        self.counts = np.zeros((k, k))
        self.momentum = momentum
        self.class_ids = class_ids

    def update(self, presence: np.ndarray) -> EdgeMatrix:
        self.counts = self.momentum * self.counts + cooccurrence_counts(presence)
        return edge_from_counts(self.counts, self.class_ids)


def _initial_edge(cfg: SelfCalConfig, e_t: EdgeMatrix) -> EdgeMatrix:
    if cfg.init == "e0":
        return flat_prior(e_t.k, e_t.class_ids)
    return e_t


def selfcal_run(
    detector: "Detector",
    images: Dataset,
    cfg: SelfCalConfig | None = None,
    e_t: EdgeMatrix | None = None,
    eval_cfg: EvalConfig | None = None,
    name: str = "selfcal",
) -> CalibrationTrace:
    """
    Iteratively re-estimates the prior from the detector's own predictions.

    Each iteration runs the detector on every image under the current E_c,
    builds E_i from the predicted presence sets, takes the mean per-class
    top confidence z_bar and moves E_c towards E_i by eta * Z. Stops after
    `max_iterations` or once the largest cell update drops below `tolerance`.
    If the detector fails, a DetectorError carrying the partial trace is raised.
    """
    cfg = cfg or SelfCalConfig()
    if e_t is None:
        raise ValueError("selfcal_run needs the training prior e_t.")
    if e_t.k != images.k:
        raise ValueError(f"Training prior has k={e_t.k}, images have k={images.k}.")
    evaluate = cfg.evaluate and images.annotation_count() > 0

    e_c = _initial_edge(cfg, e_t)
    trace = CalibrationTrace(name, e_c, config=cfg.model_dump(mode="json"))
    running = RunningStatistics(e_t.k, cfg.momentum, e_t.class_ids) if cfg.estimator == Estimator.RUNNING else None

    for iteration in range(cfg.max_iterations):
        try:
            predictions: Mapping[int, DetectionSet] = run_detector(
                detector, images, InjectedPrior("ec", edge=e_c), cfg.workers
            )
        except CalidetError as exc:
            if isinstance(exc, DetectorError):
                exc.trace = trace
                raise
            raise DetectorError(f"Detector failed at iteration {iteration}: {exc}", trace) from exc
        except Exception as exc:
            raise DetectorError(f"Detector failed at iteration {iteration}: {exc}", trace) from exc

        ordered = [predictions[image.image_id] for image in images.images]
        if running is not None:
            e_i = running.update(predicted_presence(ordered, e_t.k, cfg.presence_threshold))
        else:
            e_i = predictions_to_edge(ordered, e_t.k, cfg.presence_threshold, e_t.class_ids)
        z_bar = mean_z(ordered, e_t.k, cfg.confidence_floor)
        metrics = average_precision(images, predictions, eval_cfg).to_dict() if evaluate else None

        updated = selfcal_step(e_c, e_i, z_bar, cfg.eta, cfg.z_axis)
        change = np.abs(updated.values - e_c.values)
        weights = step_weights(z_bar, cfg.eta, cfg.z_axis)
        trace.add_state(
            TraceEntry(
                iteration=iteration,
                edge=e_c,
                step_mae=float(change.mean()),
                step_max=float(change.max()),
                effective_step=(weights[0] if cfg.z_axis == ZAxis.COLUMNS else weights[:, 0]).tolist(),
                z_bar=z_bar.tolist(),
                metrics=metrics,
            )
        )
        logger.info(
            "Iteration %d: step MAE %.6f, step MAX %.6f%s",
            iteration,
            change.mean(),
            change.max(),
            "" if metrics is None else f", AP {metrics['AP']:.2f}",
        )
        e_c = updated
        if change.max() < cfg.tolerance:
            trace.converged = True
            break

    trace.final_edge = e_c
    return trace
