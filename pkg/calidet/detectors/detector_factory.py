from .constant_detector import ConstantDetector
from .detector import Detector
from .http_detector import HttpDetector
from .sim_detector import SimDetector
from .toy_detector import ToyModelDetector


class DetectorFactory:
    """
    Factory class for creating detectors.
    """

    @staticmethod
    def make_detector(detector_type: str, **kwargs) -> Detector:
        """
        Creates a detector of the specified type.
        """
        if detector_type == "sim":
            return SimDetector(**kwargs)
        elif detector_type == "toy":
            return ToyModelDetector(**kwargs)
        elif detector_type == "constant":
            return ConstantDetector(**kwargs)
        elif detector_type == "http":
            return HttpDetector(**kwargs)
        else:
            raise ValueError(f"Unknown detector type: {detector_type}")
