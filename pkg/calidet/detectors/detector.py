from abc import ABC, abstractmethod

from calidet.core.dataset import ImageRecord
from calidet.core.detection import DetectionSet
from calidet.core.edge import EdgeMatrix


class Detector(ABC):
    """
    Base class for all prediction sources.
    """

    def __init__(self, name="Detector"):
        self.name = name

    @abstractmethod
    def detect(self, image: ImageRecord, edge: EdgeMatrix) -> DetectionSet:
        """
        This method should be implemented by the child class.
        It receives an image and the prior to inject and returns its predictions.
        Implementations must be pure given (image, edge) so calls can run in parallel.
        """
        raise NotImplementedError

    def reset(self):
        """
        Drops any state (caches, connections). Stateless detectors need not override.
        """

    def __call__(self, image: ImageRecord, edge: EdgeMatrix) -> DetectionSet:
        return self.detect(image, edge)

    def __str__(self):
        return self.name
