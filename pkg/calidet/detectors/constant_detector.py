from collections.abc import Sequence

from calidet.core.detection import Detection, DetectionSet

from .detector import Detector


class ConstantDetector(Detector):
    """
    Ignores both the image content and the prior: every listed class is
    predicted with the same score and a whole-image box. With a score below
    the presence threshold its statistics are the flat prior and its mean
    confidence is exactly `score` for every class.
    """

    def __init__(self, k: int, score: float = 0.2, classes: Sequence[int] | None = None, name="Constant"):
        super().__init__(name)
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"Score {score} is outside [0, 1].")
        self.k = k
        self.score = score
        self.classes = tuple(range(k)) if classes is None else tuple(classes)

    def detect(self, image, edge):
        box = (0.0, 0.0, float(image.width), float(image.height))
        return DetectionSet(image.image_id, tuple(Detection(c, self.score, box) for c in self.classes))
