import functools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import expit

from .config import CANVAS_SIZE, DEFAULT_SEED, REFERENCE_SIZE, TARGET_IOU, derive_rng
from .dataset import BoxAnnotation, Dataset, ImageRecord, dataset_edge
from .detection import Detection, DetectionSet
from .edge import EdgeMatrix, alignment, edge_from_label_sets, edge_mae
from .evaluation import iou

logger = logging.getLogger(__name__)


class WorldSpec(BaseModel):
    """
    Mixture-of-scenes generator of co-occurring labels plus the response model
    of a simulated detector whose logits move with the injected prior.
    """

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    k: int = Field(..., ge=1)
    scenes: list[list[float]]
    scene_weights: list[float]
    base_logit_present: float = 0.5
    base_logit_absent: float = -1.0
    lam: float = Field(4.0, alias="lambda")
    logit_noise: float = Field(1.0, ge=0.0)
    target_iou: float = Field(TARGET_IOU, gt=0.0, le=1.0)
    fp_rate: float = Field(1.0, ge=0.0)
    seed: int = Field(DEFAULT_SEED, ge=0)
    class_ids: list[int] | None = None
    reference_edge: list[list[float]] | None = None

    @field_validator("scenes")
    @classmethod
    def _probabilities(cls, scenes):
        for scene in scenes:
            if any(not 0.0 <= p <= 1.0 for p in scene):
                raise ValueError("Scene presence probabilities must lie in [0, 1].")
        return scenes

    @field_validator("lam")
    @classmethod
    def _finite(cls, value):
        if not np.isfinite(value):
            raise ValueError("lambda must be finite.")
        return value

    @model_validator(mode="after")
    def _shapes(self):
        if not self.scenes or len(self.scenes) != len(self.scene_weights):
            raise ValueError("Need one weight per scene and at least one scene.")
        if any(len(scene) != self.k for scene in self.scenes):
            raise ValueError(f"Every scene needs {self.k} presence probabilities.")
        if any(w < 0 for w in self.scene_weights) or abs(sum(self.scene_weights) - 1.0) > 1e-9:
            raise ValueError("Scene weights must be non-negative and sum to 1.")
        if self.class_ids is not None and len(self.class_ids) != self.k:
            raise ValueError(f"Expected {self.k} class ids.")
        return self

    @property
    def scene_count(self) -> int:
        return len(self.scenes)

    @property
    def box_jitter(self) -> float:
        return calibrate_jitter(self.target_iou)

    def reference(self) -> EdgeMatrix:
        if self.reference_edge is None:
            raise ValueError("World has no reference edge; build it with gen_world or with_reference().")
        return EdgeMatrix(self.reference_edge, self.class_ids)

    def with_reference(self, n: int = REFERENCE_SIZE) -> "WorldSpec":
        edge = reference_edge(self, n)
        return self.model_copy(update={"reference_edge": edge.values.tolist()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.model_dump_json(by_alias=True))

    @classmethod
    def load(cls, path: str | Path) -> "WorldSpec":
        return cls.model_validate_json(Path(path).read_text())


@dataclass(frozen=True)
class SyntheticImage(ImageRecord):
    scene: int = -1


@dataclass(frozen=True)
class FeatureMap:
    """
    Fixed random linear map from an image's latent vector (presence indicators
    followed by the scene one-hot) to a d-dimensional feature, plus noise.
    """

    matrix: np.ndarray
    offset: np.ndarray
    noise: float
    seed: int

    def latent(self, image: ImageRecord, k: int) -> np.ndarray:
        u = np.zeros(self.matrix.shape[1])
        u[list(image.labels)] = 1.0
        scene = getattr(image, "scene", -1)
        if 0 <= scene < self.matrix.shape[1] - k:
            u[k + scene] = 1.0
        return u

    def features(self, image: ImageRecord, k: int) -> np.ndarray:
        rng = derive_rng(self.seed, "features", image.image_id)
        eps = rng.normal(0.0, 1.0, size=self.matrix.shape[0])
        return self.matrix @ self.latent(image, k) + self.offset + self.noise * eps

    def stack(self, dataset: Dataset) -> np.ndarray:
        return np.stack([self.features(image, dataset.k) for image in dataset.images])


def make_feature_map(world: WorldSpec, d: int, noise: float, seed: int) -> FeatureMap:
    rng = derive_rng(seed, "feature_map")
    scale = 1.0 / np.sqrt(d)
    matrix = rng.normal(0.0, scale, size=(d, world.k + world.scene_count))
    offset = rng.normal(0.0, scale, size=d)
    return FeatureMap(matrix, offset, noise, seed)


def _scene_profile(rng: np.random.Generator, k: int) -> list[float]:
    # Mostly near-certain or near-impossible classes, so pairs inside a scene
    # co-occur almost deterministically; a few stay uncertain.
    kind = rng.choice(3, size=k, p=[0.3, 0.5, 0.2])
    high = rng.uniform(0.85, 1.0, size=k)
    low = rng.uniform(0.0, 0.05, size=k)
    mid = rng.uniform(0.2, 0.6, size=k)
    return np.choose(kind, [high, low, mid]).tolist()


def gen_world(
    k: int, j: int, seed: int, reference_size: int = REFERENCE_SIZE, **overrides
) -> WorldSpec:
    """
    Draws a k-class world with j latent scenes and measures its reference edge
    over `reference_size` generated images.
    """
    if k < 1 or j < 1:
        raise ValueError(f"Need k >= 1 and j >= 1, got k={k}, j={j}.")
    rng = derive_rng(seed, "world")
    scenes = [_scene_profile(rng, k) for _ in range(j)]
    weights = rng.dirichlet(np.full(j, 2.0))
    weights = (weights / weights.sum()).tolist()
    world = WorldSpec(k=k, scenes=scenes, scene_weights=weights, seed=seed, **overrides)
    world = world.with_reference(reference_size)
    logger.info("Generated world k=%d with %d scenes (seed %d)", k, j, seed)
    return world


def sample_presence(world: WorldSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """
    Returns (scene index per image, n x k boolean presence matrix).
    """
    probabilities = np.asarray(world.scenes, dtype=np.float64)
    scenes = rng.choice(world.scene_count, size=n, p=np.asarray(world.scene_weights))
    presence = rng.random((n, world.k)) < probabilities[scenes]
    return scenes, presence


def reference_edge(world: WorldSpec, n: int = REFERENCE_SIZE) -> EdgeMatrix:
    _, presence = sample_presence(world, n, derive_rng(world.seed, "reference"))
    return edge_from_label_sets(world.k, (np.flatnonzero(row) for row in presence), world.class_ids)


def random_box(rng: np.random.Generator) -> tuple[float, float, float, float]:
    """
    A box inside the canvas with sides between 5% and 40% of its size, as (x, y, w, h).
    """
    w, h = rng.uniform(0.05, 0.4, size=2) * CANVAS_SIZE
    x = rng.uniform(0.0, CANVAS_SIZE - w)
    y = rng.uniform(0.0, CANVAS_SIZE - h)
    return (float(x), float(y), float(w), float(h))


def gen_dataset(world: WorldSpec, n: int, seed: int) -> Dataset:
    """
    Samples a scene per image, then each class's presence from that scene,
    and places one uniformly random box per present class.
    """
    rng = derive_rng(seed, "dataset")
    scenes, presence = sample_presence(world, n, rng)
    images = []
    for index in range(n):
        boxes = tuple(BoxAnnotation(int(c), *random_box(rng)) for c in np.flatnonzero(presence[index]))
        images.append(
            SyntheticImage(
                image_id=index + 1,
                width=CANVAS_SIZE,
                height=CANVAS_SIZE,
                boxes=boxes,
                scene=int(scenes[index]),
            )
        )
    class_ids = world.class_ids if world.class_ids is not None else range(world.k)
    return Dataset(world.k, class_ids, images)


def jitter_box(box, u: np.ndarray, jitter: float) -> tuple[float, float, float, float]:
    """
    Shifts a box by up to `jitter` of its size and rescales each side by up to
    exp(+-jitter); u holds four uniforms in [-1, 1].
    """
    x, y, w, h = box
    new_w, new_h = w * np.exp(jitter * u[2]), h * np.exp(jitter * u[3])
    cx = x + w / 2 + jitter * u[0] * w
    cy = y + h / 2 + jitter * u[1] * h
    return (float(cx - new_w / 2), float(cy - new_h / 2), float(new_w), float(new_h))


def expected_iou(jitter: float, samples: int = 4000) -> float:
    u = derive_rng(0, "jitter").uniform(-1.0, 1.0, size=(samples, 4))
    box = (0.0, 0.0, 100.0, 100.0)
    return float(np.mean([iou(box, jitter_box(box, row, jitter)) for row in u]))


@functools.lru_cache(maxsize=32)
def calibrate_jitter(target_iou: float) -> float:
    """
    Bisects the jitter scale whose expected IoU with the original box is `target_iou`.
    """
    if target_iou >= 1.0:
        return 0.0
    lo, hi = 0.0, 2.0
    for _ in range(30):
        mid = (lo + hi) / 2
        if expected_iou(mid) > target_iou:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def sim_detect(world: WorldSpec, image: ImageRecord, injected: EdgeMatrix, seed: int) -> DetectionSet:
    """
    Simulated detector response under an injected prior.

    Every class logit is shifted by lam * m_j, where m_j is the agreement of
    the injected edge's column j with the image's true single-sample edge.
    Present classes emit their jittered ground-truth boxes; Poisson(fp_rate)
    false positives get random classes and boxes. All randomness is drawn
    before the prior is looked at, so the same seed pairs up runs under
    different priors.
    """
    if injected.k != world.k:
        raise ValueError(f"Injected edge has k={injected.k}, world has k={world.k}.")
    rng = derive_rng(seed, "detect", image.image_id)
    class_noise = rng.normal(0.0, world.logit_noise, size=world.k)
    box_noise = rng.uniform(-1.0, 1.0, size=(len(image.boxes), 4))
    fp_count = int(rng.poisson(world.fp_rate))
    fp_classes = rng.integers(0, world.k, size=fp_count)
    fp_boxes = [random_box(rng) for _ in range(fp_count)]
    fp_noise = rng.normal(0.0, world.logit_noise, size=fp_count)

    e_x = edge_from_label_sets(world.k, [image.labels], injected.class_ids)
    m = alignment(injected, e_x)
    jitter = world.box_jitter

    detections = []
    for box, u in zip(image.boxes, box_noise):
        j = box.class_index
        logit = world.base_logit_present + world.lam * m[j] + class_noise[j]
        detections.append(Detection(j, float(expit(logit)), jitter_box(box.xywh, u, jitter)))
    for c, box, eps in zip(fp_classes, fp_boxes, fp_noise):
        logit = world.base_logit_absent + world.lam * m[c] + eps
        detections.append(Detection(int(c), float(expit(logit)), box))
    return DetectionSet(image.image_id, tuple(detections))


class WorldFactory:
    """
    Keeps default generation settings; every call may override them.
    """

    def __init__(
        self,
        k: int = 6,
        scene_count: int = 3,
        seed: int = DEFAULT_SEED,
        reference_size: int = REFERENCE_SIZE,
        **spec_defaults,
    ):
        self.k = k
        self.scene_count = scene_count
        self.seed = seed
        self.reference_size = reference_size
        self.spec_defaults = spec_defaults

    def world_from_generator(
        self, k: int = None, scene_count: int = None, seed: int = None, **overrides
    ) -> WorldSpec:
        if k is None:
            k = self.k
        if scene_count is None:
            scene_count = self.scene_count
        if seed is None:
            seed = self.seed
        spec = {**self.spec_defaults, **overrides}
        return gen_world(k, scene_count, seed, self.reference_size, **spec)

    def world_from_file(self, path: str | Path) -> WorldSpec:
        world = WorldSpec.load(path)
        if world.reference_edge is None:
            world = world.with_reference(self.reference_size)
        return world

    @staticmethod
    def check_reference(world: WorldSpec, dataset: Dataset) -> float:
        """
        MAE between a generated dataset's statistics and the world's reference edge.
        """
        return edge_mae(dataset_edge(dataset), world.reference()).mae
