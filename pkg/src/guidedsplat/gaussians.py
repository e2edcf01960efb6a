"""Container for a flat set of pixel-aligned Gaussian primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GaussianSet:
    """J primitives. Arrays may be numpy or torch; the rasterizer reads numpy.

    means (J, 3) source-camera meters, quats (J, 4) in (w, x, y, z),
    log_scales (J, 3), opacities (J,) in (0, 1), sh (J, 3, K).
    ``pixel_of`` (J, 2) holds the (row, col) each primitive was decoded from.
    """

    means: object
    quats: object
    log_scales: object
    opacities: object
    sh: object
    pixel_of: np.ndarray | None = None
    clamped_depths: int = 0

    def __len__(self) -> int:
        return int(self.means.shape[0])

    def numpy(self, dtype=None) -> "GaussianSet":
        def conv(a):
            if hasattr(a, "detach"):
                a = a.detach().cpu().numpy()
            a = np.asarray(a)
            return a.astype(dtype) if dtype is not None else a

        return GaussianSet(conv(self.means), conv(self.quats), conv(self.log_scales),
                           conv(self.opacities), conv(self.sh), self.pixel_of,
                           self.clamped_depths)

    @classmethod
    def empty(cls, sh_coeffs: int = 1, dtype=np.float64) -> "GaussianSet":
        z = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
        return cls(z(0, 3), z(0, 4), z(0, 3), z(0), z(0, 3, sh_coeffs))

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(self.means[idx], self.quats[idx], self.log_scales[idx],
                           self.opacities[idx], self.sh[idx],
                           None if self.pixel_of is None else self.pixel_of[idx])
