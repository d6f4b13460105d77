import dataclasses
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit, log_expit

from .califormer import CaliFormer, CaliFormerConfig, CalibrationCache
from .config import GAMMA, LAYER_COUNT, RHO, SIGMA, EdgeSource, LayerOrder, PriorName, derive_rng
from .dataset import Dataset, ImageRecord, dataset_edge
from .edge import EdgeMatrix, alignment, clip_edge, delta, edge_from_label_sets, flat_prior, flip_edge
from .errors import NumericalError
from .evaluation import interpolated_ap
from .world import FeatureMap, WorldSpec, gen_dataset, gen_world, make_feature_map

logger = logging.getLogger(__name__)

# Priors the toy model is evaluated under, from most misleading to most informative
EVAL_PRIORS = (PriorName.FLIPPED, PriorName.FLAT, PriorName.TRAIN, PriorName.SAMPLE)


class LomaConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(GAMMA, ge=0.0)


class EdgeSamplerConfig(BaseModel):
    """
    The distribution training priors are drawn from: a uniform pick among the
    enabled sources, Gaussian noise, clip, unit diagonal. `extra_batch_sizes`
    adds statistics of random n-image draws from the training set as
    further sources.
    """

    model_config = ConfigDict(extra="forbid")

    sigma: float = Field(SIGMA, ge=0.0)
    sources: list[EdgeSource] = Field(default_factory=lambda: list(EdgeSource))
    extra_batch_sizes: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _has_source(self):
        if not self.sources and not self.extra_batch_sizes:
            raise ValueError("Enable at least one edge source.")
        if len(set(self.sources)) != len(self.sources):
            raise ValueError("Edge sources must not repeat.")
        if any(n < 1 for n in self.extra_batch_sizes):
            raise ValueError("Extra batch sizes must be positive.")
        return self


class ToyTrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(6, ge=1)
    scene_count: int = Field(3, ge=1)
    d: int = Field(16, ge=1)
    head_count: int = Field(2, ge=1)
    layer_count: int = Field(LAYER_COUNT, ge=1)
    layer_order: LayerOrder = LayerOrder.PRE_NORM
    rho: float = Field(RHO, ge=0.0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(8, ge=1)
    learning_rate: float = Field(0.005, gt=0.0, allow_inf_nan=False)
    optimizer: Literal["adam", "sgd"] = "adam"
    train_size: int = Field(512, ge=1)
    val_size: int = Field(256, ge=1)
    feature_noise: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    seed: int = Field(1, ge=0)
    loma: LomaConfig = Field(default_factory=LomaConfig)
    sampler: EdgeSamplerConfig = Field(default_factory=EdgeSamplerConfig)
    world: WorldSpec | None = None

    @model_validator(mode="after")
    def _world_matches(self):
        if self.world is not None and self.world.k != self.k:
            raise ValueError(f"World has k={self.world.k}, config has k={self.k}.")
        return self

    def model_config_for(self) -> CaliFormerConfig:
        return CaliFormerConfig(
            d=self.d,
            k=self.k,
            head_count=self.head_count,
            layer_count=self.layer_count,
            layer_order=self.layer_order,
            rho=self.rho,
        )


########
# LoMa #
########


def loma_loss(s: np.ndarray, e: EdgeMatrix, e_x: EdgeMatrix, gamma: float = GAMMA) -> float:
    """
    Logit manipulation loss: gamma * sum_j(-s_j * m_j) / K, where m_j is the
    agreement of the injected edge's column j with the sample's true edge.
    Rewards logits that follow the prior and penalizes those that ignore it.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (e.k,):
        raise ValueError(f"Expected {e.k} logits, got shape {s.shape}.")
    m = alignment(e, e_x)
    return float(gamma * np.sum(-s * m) / e.k)


def loma_gradient(e: EdgeMatrix, e_x: EdgeMatrix, gamma: float = GAMMA) -> np.ndarray:
    return -gamma * alignment(e, e_x) / e.k


def sample_edge(
    e_x: EdgeMatrix,
    e_b: EdgeMatrix,
    e_t: EdgeMatrix,
    cfg: EdgeSamplerConfig,
    rng: np.random.Generator,
    extra: Sequence[EdgeMatrix] = (),
) -> EdgeMatrix:
    if not e_x.k == e_b.k == e_t.k or any(e.k != e_t.k for e in extra):
        raise ValueError("Sampled edges must share k.")
    by_source = {EdgeSource.SAMPLE: e_x, EdgeSource.BATCH: e_b, EdgeSource.TRAIN: e_t}
    candidates = [by_source[s] for s in cfg.sources] + list(extra)
    chosen = candidates[int(rng.integers(len(candidates)))]
    noise = rng.normal(0.0, cfg.sigma, size=(e_t.k, e_t.k))
    return clip_edge(chosen.values + noise, e_t.class_ids)


def classification_loss(s: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Sigmoid cross-entropy summed over the K presence labels, with its gradient
    w.r.t. the logits.
    """
    loss = -np.sum(y * log_expit(s) + (1.0 - y) * log_expit(-s))
    return float(loss), expit(s) - y


##############
# Optimizers #
##############


class SGD:
    def __init__(self, arrays: dict[str, np.ndarray], learning_rate: float):
        self.arrays = arrays
        self.learning_rate = learning_rate

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, array in self.arrays.items():
            array -= self.learning_rate * grads[name]


class Adam(SGD):
    def __init__(self, arrays, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(arrays, learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in arrays.items()}
        self.v = {name: np.zeros_like(a) for name, a in arrays.items()}

    def step(self, grads):
        self.t += 1
        for name, array in self.arrays.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            array -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


##############
# Evaluation #
##############


def presence_map(scores: np.ndarray, labels: np.ndarray) -> float:
    """
    Mean over classes of the 101-point AP of ranking images by class score.
    Classes with no positive image are skipped.
    """
    values = []
    for j in range(labels.shape[1]):
        positives = int(labels[:, j].sum())
        if positives == 0:
            continue
        order = np.argsort(-scores[:, j], kind="stable")
        values.append(interpolated_ap(labels[order, j].astype(bool), positives))
    return float(np.mean(values)) if values else 0.0


def _indicators(dataset: Dataset) -> np.ndarray:
    return np.stack([label_set.indicator(dataset.k) for label_set in dataset.label_sets()]).astype(np.float64)


def evaluate_priors(
    model: CaliFormer,
    dataset: Dataset,
    features: np.ndarray,
    e_t: EdgeMatrix,
    priors: Sequence[PriorName] = EVAL_PRIORS,
) -> dict[str, float]:
    """
    Presence mAP (0-100) of the model on `dataset` under each injected prior.
    Single-image priors are rebuilt per image from its own labels.
    """
    labels = _indicators(dataset)
    cache = CalibrationCache(model.params, model.nodes)
    results = {}
    for name in priors:
        name = PriorName(name)
        if name in (PriorName.SAMPLE, PriorName.FLIPPED):
            rows = []
            for image, h in zip(dataset.images, features):
                e_x = edge_from_label_sets(dataset.k, [image.labels], dataset.class_ids)
                edge = flip_edge(e_x) if name == PriorName.FLIPPED else e_x
                rows.append(model.logits(delta(edge), h))
            scores = np.stack(rows)
        else:
            edge = {
                PriorName.FLAT: flat_prior(dataset.k, dataset.class_ids),
                PriorName.TRAIN: e_t,
                PriorName.VALIDATION: dataset_edge(dataset),
            }[name]
            scores = cache.logits(model.head, delta(edge), features)
        results[str(name)] = round(100.0 * presence_map(scores, labels), 4)
    return results


def ordering_holds(record: dict[str, float], margin: float = 1.0) -> bool:
    """
    ebar < e0 < et <= ex, with `margin` mAP points between ebar and e0 and
    between e0 and ex.
    """
    ebar, e0, et, ex = (record[str(p)] for p in EVAL_PRIORS)
    return ebar + margin <= e0 and e0 < et <= ex and e0 + margin <= ex


############
# Training #
############


@dataclass
class TrainResult:
    model: CaliFormer
    world: WorldSpec
    feature_map: FeatureMap
    e_t: EdgeMatrix
    validation: Dataset
    metrics: list[dict[str, Any]] = field(default_factory=list)

    def final(self) -> dict[str, Any]:
        return self.metrics[-1]


def write_metrics(metrics: Sequence[dict[str, Any]], path: str | Path) -> None:
    with open(path, "w") as f:
        for record in metrics:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _offset_ids(dataset: Dataset, offset: int) -> Dataset:
    return dataset.with_images(dataclasses.replace(im, image_id=im.image_id + offset) for im in dataset.images)


def _batch_step(
    model: CaliFormer,
    batch: Sequence[ImageRecord],
    features: np.ndarray,
    e_t: EdgeMatrix,
    extra_pool: Dataset,
    cfg: ToyTrainConfig,
    rng: np.random.Generator,
) -> tuple[dict[str, np.ndarray], float, float]:
    k, class_ids = cfg.k, e_t.class_ids
    e_b = edge_from_label_sets(k, [im.labels for im in batch], class_ids)
    grads = {name: np.zeros_like(a) for name, a in model.named_arrays().items()}
    bce_total = loma_total = 0.0
    for image, h in zip(batch, features):
        e_x = edge_from_label_sets(k, [image.labels], class_ids)
        extra = []
        for n in cfg.sampler.extra_batch_sizes:
            draw = rng.choice(len(extra_pool), size=min(n, len(extra_pool)), replace=False)
            extra.append(edge_from_label_sets(k, [extra_pool.images[i].labels for i in draw], class_ids))
        e = sample_edge(e_x, e_b, e_t, cfg.sampler, rng, extra)

        s = model.forward(delta(e), h)
        y = image.labels.indicator(k).astype(np.float64)
        bce, d_bce = classification_loss(s, y)
        loma = loma_loss(s, e, e_x, cfg.loma.gamma)
        image_grads = model.backward(d_bce + loma_gradient(e, e_x, cfg.loma.gamma))
        for name, g in image_grads.items():
            grads[name] += g
        bce_total += bce
        loma_total += loma
    n = len(batch)
    return {name: g / n for name, g in grads.items()}, bce_total / n, loma_total / n


def train_toy(cfg: ToyTrainConfig, metrics_path: str | Path | None = None) -> TrainResult:
    """
    Trains a CaliFormer-headed presence classifier on a simulated world.

    Every image in a mini-batch gets its own prior drawn from the edge
    sampler (E_b is the current mini-batch's statistics) and the loss is
    sigmoid cross-entropy plus the LoMa term. After each epoch the model is
    evaluated on a held-out set under the flipped, flat, training and
    single-image priors. Runs are deterministic for a fixed seed.
    """
    world = cfg.world if cfg.world is not None else gen_world(cfg.k, cfg.scene_count, cfg.seed)
    train = gen_dataset(world, cfg.train_size, cfg.seed)
    validation = _offset_ids(gen_dataset(world, cfg.val_size, cfg.seed + 1), cfg.train_size)
    e_t = dataset_edge(train)
    feature_map = make_feature_map(world, cfg.d, cfg.feature_noise, cfg.seed)
    train_features = feature_map.stack(train)
    val_features = feature_map.stack(validation)

    model = CaliFormer.init(cfg.model_config_for(), derive_rng(cfg.seed, "init"))
    arrays = model.named_arrays()
    optimizer = Adam(arrays, cfg.learning_rate) if cfg.optimizer == "adam" else SGD(arrays, cfg.learning_rate)
    sampler_rng = derive_rng(cfg.seed, "sampler")
    logger.info(
        "Training toy model: k=%d d=%d layers=%d gamma=%g sigma=%g sources=%s",
        cfg.k, cfg.d, cfg.layer_count, cfg.loma.gamma, cfg.sampler.sigma,
        ",".join(str(s) for s in cfg.sampler.sources),
    )

    metrics = []
    step = 0
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(train))
        bce_sum = loma_sum = 0.0
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            index = order[start : start + cfg.batch_size]
            batch = [train.images[i] for i in index]
            try:
                grads, bce, loma = _batch_step(model, batch, train_features[index], e_t, train, cfg, sampler_rng)
            except NumericalError as exc:
                raise NumericalError(f"Training diverged at step {step}: {exc}") from exc
            if not np.isfinite(bce + loma):
                raise NumericalError(f"Training diverged at step {step}: loss is {bce + loma}.")
            optimizer.step(grads)
            bce_sum += bce
            loma_sum += loma
            batches += 1
            step += 1

        record = {"epoch": epoch, "step": step, "bce": bce_sum / batches, "loma": loma_sum / batches}
        record["map"] = evaluate_priors(model, validation, val_features, e_t)
        metrics.append(record)
        logger.info("Epoch %d: bce %.4f loma %.4f map %s", epoch, record["bce"], record["loma"], record["map"])

    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return TrainResult(model, world, feature_map, e_t, validation, metrics)
