from collections.abc import Iterable
from dataclasses import dataclass
from typing import Any, NamedTuple

from typing_extensions import TypeAlias

Box: TypeAlias = tuple[float, float, float, float]  # x, y, w, h in absolute pixels


class Detection(NamedTuple):
    class_index: int
    score: float
    box: Box


@dataclass(frozen=True)
class DetectionSet:
    """
    All predictions a detector made for one image.
    """

    image_id: int
    detections: tuple[Detection, ...] = ()

    def __post_init__(self):
        detections = tuple(Detection(int(c), float(s), tuple(float(v) for v in b)) for c, s, b in self.detections)
        for d in detections:
            if not 0.0 <= d.score <= 1.0:
                raise ValueError(f"Detection score {d.score} on image {self.image_id} is outside [0, 1].")
            if d.class_index < 0:
                raise ValueError(f"Negative class index {d.class_index} on image {self.image_id}.")
        object.__setattr__(self, "detections", detections)

    def validate(self, k: int) -> "DetectionSet":
        for d in self.detections:
            if d.class_index >= k:
                raise ValueError(f"Class index {d.class_index} on image {self.image_id} is out of range for k={k}.")
        return self

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def present_classes(self, threshold: float) -> set[int]:
        return {d.class_index for d in self.detections if d.score >= threshold}

    def top(self, count: int) -> "DetectionSet":
        order = sorted(range(len(self.detections)), key=lambda i: -self.detections[i].score)[:count]
        return DetectionSet(self.image_id, tuple(self.detections[i] for i in sorted(order)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "detections": [
                {"class": d.class_index, "score": d.score, "bbox": list(d.box)} for d in self.detections
            ],
        }

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> "DetectionSet":
        return cls(
            int(document["image_id"]),
            tuple((d["class"], d["score"], d["bbox"]) for d in document.get("detections", [])),
        )


def by_image(prediction_sets: Iterable[DetectionSet]) -> dict[int, DetectionSet]:
    return {p.image_id: p for p in prediction_sets}
