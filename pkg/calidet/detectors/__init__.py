# detectors/__init__.py

from .constant_detector import ConstantDetector
from .detector import Detector
from .detector_factory import DetectorFactory
from .http_detector import HttpDetector
from .sim_detector import SimDetector
from .toy_detector import ToyModelDetector

__all__ = [
    "Detector",
    "DetectorFactory",
    "SimDetector",
    "ConstantDetector",
    "ToyModelDetector",
    "HttpDetector",
]
