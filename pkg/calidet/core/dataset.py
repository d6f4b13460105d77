import json
import logging
import math
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

from .config import derive_rng
from .edge import EdgeMatrix, LabelSet, edge_from_label_sets
from .errors import AnnotationError

logger = logging.getLogger(__name__)


class BoxAnnotation(NamedTuple):
    class_index: int
    x: float
    y: float
    w: float
    h: float

    @property
    def xywh(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class ImageRecord:
    """
    Annotation side of one image: its label set and ground-truth boxes.

    Boxes are absolute pixels (x, y, w, h); they are not clamped to the image.
    """

    image_id: int
    width: float
    height: float
    boxes: tuple[BoxAnnotation, ...] = ()
    labels: LabelSet = field(default=None)

    def __post_init__(self):
        boxes = tuple(BoxAnnotation(*b) for b in self.boxes)
        for box in boxes:
            if not all(math.isfinite(v) for v in box.xywh):
                raise AnnotationError(f"Image {self.image_id} has a non-finite box {box.xywh}.")
            if box.w <= 0 or box.h <= 0:
                raise AnnotationError(f"Image {self.image_id} has a box with non-positive size {box.xywh}.")
        object.__setattr__(self, "boxes", boxes)
        present = LabelSet(b.class_index for b in boxes)
        if self.labels is None:
            object.__setattr__(self, "labels", present)
        elif self.labels != present:
            raise AnnotationError(
                f"Image {self.image_id} labels {self.labels} disagree with its boxes {present}."
            )

    def boxes_of(self, class_index: int) -> list[BoxAnnotation]:
        return [b for b in self.boxes if b.class_index == class_index]


class Dataset:
    """
    Collection of image records over a fixed class index space.
    """

    def __init__(
        self,
        k: int,
        class_ids: Sequence[int] | None = None,
        images: Iterable[ImageRecord] = (),
        class_names: Sequence[str] | None = None,
    ):
        self.k = int(k)
        self.class_ids = tuple(range(self.k)) if class_ids is None else tuple(int(c) for c in class_ids)
        if len(self.class_ids) != self.k:
            raise AnnotationError(f"Expected {self.k} class ids, got {len(self.class_ids)}.")
        if any(a >= b for a, b in zip(self.class_ids, self.class_ids[1:])):
            raise AnnotationError("Class ids must be strictly increasing.")
        self.class_names = None if class_names is None else tuple(class_names)
        self.images = tuple(images)

        seen = set()
        for image in self.images:
            if image.image_id in seen:
                raise AnnotationError(f"Duplicate image id {image.image_id}.")
            seen.add(image.image_id)
            if any(c >= self.k for c in image.labels):
                raise AnnotationError(f"Image {image.image_id} has labels outside k={self.k}.")

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def label_sets(self) -> list[LabelSet]:
        return [image.labels for image in self.images]

    def annotation_count(self) -> int:
        return sum(len(image.boxes) for image in self.images)

    def with_images(self, images: Iterable[ImageRecord]) -> "Dataset":
        return Dataset(self.k, self.class_ids, images, self.class_names)

    def image(self, image_id: int) -> ImageRecord:
        for image in self.images:
            if image.image_id == image_id:
                return image
        raise KeyError(image_id)


class ClassMapping:
    """
    Many-to-one mapping from source category ids to target category ids.
    Source ids that are not listed are dropped.
    """

    def __init__(self, pairs: Iterable[tuple[int, int]]):
        entries: dict[int, int] = {}
        for source, target in pairs:
            source, target = int(source), int(target)
            if source in entries:
                raise AnnotationError(f"Source class id {source} is mapped more than once.")
            entries[source] = target
        self.entries = entries

    @classmethod
    def identity(cls, class_ids: Iterable[int]) -> "ClassMapping":
        return cls((c, c) for c in class_ids)

    @classmethod
    def load(cls, path: str | Path) -> "ClassMapping":
        document = json.loads(Path(path).read_text())
        try:
            return cls((entry["source"], entry["target"]) for entry in document)
        except (KeyError, TypeError) as e:
            raise AnnotationError(f"Malformed class mapping file {path}: {e}") from e

    def targets(self) -> set[int]:
        return set(self.entries.values())


@dataclass(frozen=True)
class FilterReport:
    images_before: int
    images_after: int
    annotations_before: int
    annotations_after: int

    @staticmethod
    def _percent(after: int, before: int) -> float:
        return 100.0 if before == 0 else round(100.0 * after / before, 1)

    @property
    def image_retention(self) -> float:
        return self._percent(self.images_after, self.images_before)

    @property
    def annotation_retention(self) -> float:
        return self._percent(self.annotations_after, self.annotations_before)

    def to_dict(self) -> dict[str, Any]:
        return {
            "images_before": self.images_before,
            "images_after": self.images_after,
            "annotations_before": self.annotations_before,
            "annotations_after": self.annotations_after,
            "image_retention": self.image_retention,
            "annotation_retention": self.annotation_retention,
        }


def _require(document: dict, key: str) -> list:
    value = document.get(key)
    if not isinstance(value, list):
        raise AnnotationError(f"COCO document needs a '{key}' array.")
    return value


def parse_annotations(document: str | bytes | dict) -> Dataset:
    """
    Builds a Dataset from a COCO-format document (text or already decoded).

    Category ids are sorted ascending and mapped to contiguous indices.
    Only `bbox` and `category_id` are consumed from annotations.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise AnnotationError(f"Malformed annotation JSON: {e}") from e
    if not isinstance(document, dict):
        raise AnnotationError("COCO document must be a JSON object.")

    images = _require(document, "images")
    annotations = _require(document, "annotations")
    categories = _require(document, "categories")

    try:
        category_names = {int(c["id"]): str(c.get("name", c["id"])) for c in categories}
        class_ids = sorted(category_names)
        index_of = {cid: i for i, cid in enumerate(class_ids)}

        boxes: dict[int, list[BoxAnnotation]] = {}
        meta: dict[int, tuple[float, float]] = {}
        for image in images:
            image_id = int(image["id"])
            if image_id in meta:
                raise AnnotationError(f"Duplicate image id {image_id}.")
            meta[image_id] = (image.get("width", 0), image.get("height", 0))
            boxes[image_id] = []

        for annotation in annotations:
            image_id = int(annotation["image_id"])
            category_id = int(annotation["category_id"])
            if image_id not in boxes:
                raise AnnotationError(f"Annotation references unknown image id {image_id}.")
            if category_id not in index_of:
                raise AnnotationError(f"Annotation references unknown category id {category_id}.")
            x, y, w, h = (float(v) for v in annotation["bbox"])
            boxes[image_id].append(BoxAnnotation(index_of[category_id], x, y, w, h))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, AnnotationError):
            raise
        raise AnnotationError(f"Malformed COCO document: {e!r}") from e

    records = [
        ImageRecord(image_id=image_id, width=meta[image_id][0], height=meta[image_id][1], boxes=tuple(boxes[image_id]))
        for image_id in meta
    ]
    logger.info("Parsed %d images, %d categories", len(records), len(class_ids))
    return Dataset(
        len(class_ids),
        class_ids,
        records,
        class_names=[category_names[c] for c in class_ids],
    )


def load_annotations(path: str | Path) -> Dataset:
    return parse_annotations(Path(path).read_text())


def to_coco(dataset: Dataset) -> dict[str, Any]:
    """
    Writes a Dataset back out as a COCO-format document.
    """
    names = dataset.class_names or [f"class_{c}" for c in dataset.class_ids]
    images, annotations = [], []
    annotation_id = 1
    for image in dataset.images:
        images.append({"id": image.image_id, "width": image.width, "height": image.height})
        for box in image.boxes:
            annotations.append(
                {
                    "id": annotation_id,
                    "image_id": image.image_id,
                    "category_id": dataset.class_ids[box.class_index],
                    "bbox": [box.x, box.y, box.w, box.h],
                    "area": box.w * box.h,
                    "iscrowd": 0,
                }
            )
            annotation_id += 1
    categories = [{"id": cid, "name": name} for cid, name in zip(dataset.class_ids, names)]
    return {"images": images, "annotations": annotations, "categories": categories}


def save_coco(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_coco(dataset)))


def remap_dataset(
    dataset: Dataset, mapping: ClassMapping, target_ids: Sequence[int]
) -> tuple[Dataset, FilterReport]:
    """
    Moves a dataset into another taxonomy.

    Annotations of unmapped source classes are removed, and images that end
    up with zero annotations because of that are removed too. Images that had
    no annotations to begin with are kept.
    """
    target_ids = sorted(set(int(t) for t in target_ids))
    unknown = mapping.targets() - set(target_ids)
    if unknown:
        raise AnnotationError(f"Mapping targets {sorted(unknown)} are not in the target taxonomy.")
    target_index = {cid: i for i, cid in enumerate(target_ids)}

    records = []
    for image in dataset.images:
        kept = []
        for box in image.boxes:
            source_id = dataset.class_ids[box.class_index]
            if source_id in mapping.entries:
                kept.append(box._replace(class_index=target_index[mapping.entries[source_id]]))
        if image.boxes and not kept:
            continue
        records.append(ImageRecord(image.image_id, image.width, image.height, tuple(kept)))

    remapped = Dataset(len(target_ids), target_ids, records)
    report = FilterReport(
        images_before=len(dataset),
        images_after=len(remapped),
        annotations_before=dataset.annotation_count(),
        annotations_after=remapped.annotation_count(),
    )
    logger.info(
        "Remapped %d -> %d images (%.1f%%), %d -> %d annotations (%.1f%%)",
        report.images_before,
        report.images_after,
        report.image_retention,
        report.annotations_before,
        report.annotations_after,
        report.annotation_retention,
    )
    return remapped, report


def split_subsets(dataset: Dataset, subset_size: int, seed: int) -> list[Dataset]:
    """
    Shuffles images with the seed's "split" stream and cuts them into
    floor(n / size) disjoint subsets of exactly `subset_size` images.
    The remainder is discarded.
    """
    if subset_size < 1:
        raise ValueError(f"Subset size must be positive, got {subset_size}.")
    n = len(dataset)
    if subset_size > n:
        warnings.warn(
            f"Subset size {subset_size} is larger than the dataset ({n} images); no subsets produced.",
            UserWarning,
        )
        return []
    order = derive_rng(seed, "split").permutation(n)
    count = n // subset_size
    return [
        dataset.with_images(dataset.images[i] for i in order[s * subset_size : (s + 1) * subset_size])
        for s in range(count)
    ]


def dataset_edge(dataset: Dataset) -> EdgeMatrix:
    return edge_from_label_sets(dataset.k, dataset.label_sets(), dataset.class_ids)
