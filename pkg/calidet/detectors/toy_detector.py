import numpy as np
from scipy.special import expit

from calidet.core.califormer import CaliFormer, CalibrationCache
from calidet.core.config import DEFAULT_SEED, derive_rng
from calidet.core.detection import Detection, DetectionSet
from calidet.core.edge import delta
from calidet.core.world import FeatureMap, random_box

from .detector import Detector


class ToyModelDetector(Detector):
    """
    Serves a trained toy model as a detector: one detection per class, scored
    by the calibrated presence logit. Present classes reuse their ground-truth
    box, absent ones get a random box. V' is cached per injected prior.
    """

    def __init__(self, model: CaliFormer, feature_map: FeatureMap, seed: int = DEFAULT_SEED, name="Toy"):
        super().__init__(name)
        self.model = model
        self.feature_map = feature_map
        self.seed = seed
        self.cache = CalibrationCache(model.params, model.nodes)

    def detect(self, image, edge):
        k = self.model.config.k
        features = self.feature_map.features(image, k)
        scores = expit(self.cache.logits(self.model.head, delta(edge), features))
        detections = []
        for j in range(k):
            boxes = image.boxes_of(j)
            if boxes:
                box = boxes[0].xywh
            else:
                box = random_box(derive_rng(self.seed, "toy_box", image.image_id, j))
            detections.append(Detection(j, float(np.clip(scores[j], 0.0, 1.0)), box))
        return DetectionSet(image.image_id, tuple(detections))

    def reset(self):
        self.cache.clear()
