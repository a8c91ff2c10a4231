"""Mean/std normalization with training-window statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Normalizer:
    """Affine normalizer fitted on training data only.

    Degenerate (zero-variance) columns keep std 1 so they center to zero
    instead of blowing up; ``degenerate`` records which ones were clamped.
    """

    mean: np.ndarray | float
    std: np.ndarray | float
    degenerate: np.ndarray | bool

    @classmethod
    def fit(cls, values: np.ndarray, axis: int | None = None) -> "Normalizer":
        values = np.asarray(values, dtype=float)
        if axis is None:
            mean = float(np.mean(values))
            std = float(np.std(values))
            degen = std == 0.0
            return cls(mean, 1.0 if degen else std, degen)
        mean = np.mean(values, axis=axis)
        std = np.std(values, axis=axis)
        degen = std == 0.0
        std = np.where(degen, 1.0, std)
        return cls(mean, std, degen)

    def normalize(self, values):
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def de_normalize(self, values):
        return self.mean + self.std * np.asarray(values, dtype=float)
