import zlib
from typing import Literal
from enum import IntEnum

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11: same str()/format() behavior as enum.StrEnum
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

        @staticmethod
        def _generate_next_value_(name, start, count, last_values):
            return name.lower()

import numpy as np

#################
# Edge Literals #
#################
FLAT_VALUE: Literal[0.5] = 0.5  # P(i|j) when nothing is known about i given j
DIAGONAL_VALUE: Literal[1.0] = 1.0
PERCENTILES: tuple[int, ...] = (0, 50, 90, 97, 100)

######################
# Model and training #
######################
EMBED_DIM = 256
HEAD_COUNT = 8
LAYER_COUNT = 3
FF_MULTIPLIER = 4
NODE_INIT_STD = 0.01
LAYER_NORM_EPS = 1e-5
RHO = 0.2
GAMMA = 20.0
SIGMA = 0.16

###################
# Self-calibration #
###################
ETA = 4.0
PRESENCE_THRESHOLD = 0.5
CONVERGENCE_EPS = 1e-6

#########
# World #
#########
CANVAS_SIZE = 1000
TARGET_IOU = 0.85
REFERENCE_SIZE = 10_000

DEFAULT_SEED = 20240601
SEED_ENV = "CALIDET_SEED"


class PriorName(StrEnum):
    FLIPPED = "ebar"  # flipped single-sample edge, the misleading one
    FLAT = "e0"
    TRAIN = "et"
    VALIDATION = "ev"
    BATCH = "eb"
    SAMPLE = "ex"


# Canonical report order, from most misleading to most accurate
PRIOR_ORDER = [
    PriorName.FLIPPED,
    PriorName.FLAT,
    PriorName.TRAIN,
    PriorName.VALIDATION,
    PriorName.BATCH,
    PriorName.SAMPLE,
]


class EdgeSource(StrEnum):
    SAMPLE = "ex"
    BATCH = "eb"
    TRAIN = "et"


class LayerOrder(StrEnum):
    PRE_NORM = "pre"
    POST_NORM = "post"


class ZAxis(StrEnum):
    COLUMNS = "columns"  # Z(i, j) = mean z_j
    ROWS = "rows"  # Z(i, j) = mean z_i


class Estimator(StrEnum):
    FULL = "full"
    RUNNING = "running"


class ExitCode(IntEnum):
    SUCCESS = 0
    USAGE = 1
    DATA = 2
    NUMERIC = 3


def derive_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """
    Returns a generator for a named sub-stream of `seed`.

    Keys are hashed with crc32 so streams are stable across processes,
    e.g. derive_rng(seed, "split") and derive_rng(seed, "detect", image_id).
    """
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode()))
        else:
            entropy.append(int(key))
    return np.random.default_rng(np.random.SeedSequence(entropy))
