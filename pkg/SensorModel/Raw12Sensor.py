import numpy as np

from cameraModel import Intrinsics
from SensorModel.SensorSimulator import SensorSimulator

"""
@Data: 2025/5/16
@Desc: 线性 12 位 RGGB 传感器，输出 4 个半分辨率平面 (R, G1, G2, B)
"""

# (row offset, col offset, rgb channel) per plane
BAYER_PLANES = (
    ("r", 0, 0, 0),
    ("g1", 0, 1, 1),
    ("g2", 1, 0, 1),
    ("b", 1, 1, 2),
)


class Raw12Sensor(SensorSimulator):
    mode = "raw12"
    channels = 4
    bits = 12

    def mosaic(self, image: np.ndarray) -> np.ndarray:
        H, W = image.shape[:2]
        if H % 2 or W % 2:
            raise ValueError(f"RGGB mosaic needs even dimensions, got {W}x{H}")
        return np.stack([image[dy::2, dx::2, c] for _, dy, dx, c in BAYER_PLANES], axis=-1)

    def frame_intrinsics(self, K: Intrinsics) -> Intrinsics:
        return K.scaled(0.5)

    def linearize(self, stored: np.ndarray) -> np.ndarray:
        return np.asarray(stored, dtype=np.float64)

    def delinearize(self, linear: np.ndarray) -> np.ndarray:
        return np.asarray(linear, dtype=np.float64)

    def simulate(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        planes = self.mosaic(np.asarray(image, dtype=np.float64))
        return self.quantize(self.add_noise(planes, rng))
