import numpy as np

from SensorModel.SensorSimulator import SensorSimulator

"""
@Data: 2025/5/16
@Desc: 处理后的 8 位 RGB：线性域加噪，gamma 编码后量化
"""


class Rgb8Sensor(SensorSimulator):
    mode = "rgb8"
    channels = 3
    bits = 8

    def linearize(self, stored: np.ndarray) -> np.ndarray:
        return np.power(np.clip(stored, 0.0, 1.0), self.config.gamma)

    def delinearize(self, linear: np.ndarray) -> np.ndarray:
        return np.power(np.clip(linear, 0.0, 1.0), 1.0 / self.config.gamma)

    def simulate(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noisy = self.add_noise(np.asarray(image, dtype=np.float64), rng)
        return self.quantize(self.delinearize(noisy))
