import logging
from dataclasses import dataclass

import numpy as np

from cameraModel import Intrinsics

"""
@Data: 2025/5/16
@Desc: 传感器模拟的基类：散粒噪声 + 读出噪声 + 量化
"""

logger = logging.getLogger(__name__)

SENSOR_MODES = ("raw12", "rgb8")


@dataclass
class SensorConfig:
    mode: str = "raw12"
    read_noise: float = 0.0
    shot_gain: float = 0.0
    gamma: float = 2.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SENSOR_MODES:
            raise ValueError(f"Unsupported sensor mode: {self.mode}. Supported modes: {list(SENSOR_MODES)}")
        if self.read_noise < 0 or self.shot_gain < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


class SensorSimulator:
    mode = ""
    channels = 0
    bits = 0

    def __init__(self, config: SensorConfig):
        self.config = config

    @property
    def levels(self) -> int:
        return 2 ** self.bits - 1

    @property
    def noiseless(self) -> bool:
        return self.config.read_noise == 0 and self.config.shot_gain == 0

    def add_noise(self, linear: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        # shot_gain is the signal carried by one photo-electron
        if self.noiseless:
            return linear.copy()
        signal = np.maximum(linear, 0.0)
        gain = self.config.shot_gain
        if gain > 0:
            signal = rng.poisson(signal / gain) * gain
        return signal + self.config.read_noise * rng.standard_normal(linear.shape)

    def quantize(self, x: np.ndarray) -> np.ndarray:
        return np.round(np.clip(x, 0.0, 1.0) * self.levels) / self.levels

    def codes(self, stored: np.ndarray) -> np.ndarray:
        return np.round(stored * self.levels).astype(np.uint16)

    def frame_intrinsics(self, K: Intrinsics) -> Intrinsics:
        return K

    def linearize(self, stored: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def delinearize(self, linear: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def simulate(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Linear H×W×3 image in [0,1] -> stored frame in [0,1]."""
        raise NotImplementedError
