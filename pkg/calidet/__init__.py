from .core.califormer import CaliFormer, CaliFormerConfig
from .core.dataset import Dataset, ImageRecord, load_annotations, parse_annotations
from .core.edge import EdgeMatrix, LabelSet, edge_from_label_sets, flat_prior, flip_edge
from .core.selfcal import SelfCalConfig, selfcal_run
from .core.trace import CalibrationTrace
from .core.world import WorldFactory, WorldSpec
from .detectors.detector_factory import DetectorFactory


__all__ = [
    "CaliFormer",
    "CaliFormerConfig",
    "CalibrationTrace",
    "Dataset",
    "DetectorFactory",
    "EdgeMatrix",
    "ImageRecord",
    "LabelSet",
    "SelfCalConfig",
    "WorldFactory",
    "WorldSpec",
    "edge_from_label_sets",
    "flat_prior",
    "flip_edge",
    "load_annotations",
    "parse_annotations",
    "selfcal_run",
]
