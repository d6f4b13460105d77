from calidet.core.config import DEFAULT_SEED
from calidet.core.world import WorldSpec, sim_detect

from .detector import Detector


class SimDetector(Detector):
    def __init__(self, world: WorldSpec, seed: int = DEFAULT_SEED, name="Sim"):
        super().__init__(name)
        self.world = world
        self.seed = seed

    def detect(self, image, edge):
        return sim_detect(self.world, image, edge, self.seed)
