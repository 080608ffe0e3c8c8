"""Cartesian volume grids, Simpson weights and trilinear resampling.

A :class:`VolumeGrid` is a cube ``[-extent, extent]^3`` sampled at ``n``
equally spaced nodes per axis (node ``0`` at ``-extent``, node ``n-1`` at
``+extent``), with a mask of the nodes lying in the closed ball of radius
``radius``. Reconstructions, phantoms and metrics all exchange this type.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigError


def simpson_weights(n: int, a: float, b: float) -> np.ndarray:
    """Composite Simpson weights for ``n`` (odd) equally spaced nodes on [a, b]."""
    if n < 3 or n % 2 == 0:
        raise ConfigError(f"Simpson's rule needs an odd node count >= 3, got {n}")
    h = (b - a) / (n - 1)
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


@dataclass(frozen=True)
class GridSpec:
    n: int
    extent: float = 1.0
    radius: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("grid needs at least two nodes per axis")
        if self.radius > self.extent * (1 + 1e-12):
            raise ConfigError("grid does not cover the ball")

    @property
    def h(self) -> float:
        return 2.0 * self.extent / (self.n - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.extent, self.extent, self.n)

    def mesh(self):
        a = self.axis
        return np.meshgrid(a, a, a, indexing="ij")

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(n, n, n, 3)``."""
        return np.stack(self.mesh(), axis=-1)

    def mask(self) -> np.ndarray:
        x1, x2, x3 = self.mesh()
        return x1**2 + x2**2 + x3**2 <= self.radius**2 * (1 + 1e-12)


@dataclass
class VolumeGrid:
    """Complex samples on a :class:`GridSpec`, with the inside-ball mask."""

    spec: GridSpec
    values: np.ndarray
    mask: np.ndarray = field(default=None)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.spec.n
        self.values = np.asarray(self.values)
        if self.values.shape != (n, n, n):
            raise ConfigError(f"expected values of shape {(n, n, n)}, got {self.values.shape}")
        if self.mask is None:
            self.mask = self.spec.mask()

    @classmethod
    def constant(cls, spec: GridSpec, value, **meta):
        return cls(spec, np.full((spec.n,) * 3, value, dtype=complex), meta=dict(meta))

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag

    def with_values(self, values, **meta) -> "VolumeGrid":
        return replace(self, values=np.asarray(values), meta={**self.meta, **meta})

    def filled(self, outside_value) -> np.ndarray:
        """Values with every node outside the ball replaced by ``outside_value``."""
        out = np.array(self.values, dtype=complex)
        out[~self.mask] = outside_value
        return out

    def interpolate(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at arbitrary points (clamped to the cube)."""
        a = self.spec.axis
        pts = np.clip(np.asarray(points, dtype=float), -self.spec.extent, self.spec.extent)
        re = RegularGridInterpolator((a, a, a), self.values.real)(pts)
        if np.iscomplexobj(self.values):
            return re + 1j * RegularGridInterpolator((a, a, a), self.values.imag)(pts)
        return re

    def resample(self, n: int, outside_value=None) -> "VolumeGrid":
        """Trilinear resampling onto an ``n``-node grid over the same cube."""
        spec = GridSpec(n, self.spec.extent, self.spec.radius)
        if n == self.spec.n:
            vals = self.values.copy()
        else:
            vals = self.interpolate(spec.points().reshape(-1, 3)).reshape((n,) * 3)
        out = VolumeGrid(spec, vals, meta=dict(self.meta))
        if outside_value is not None:
            out.values = out.filled(outside_value)
        return out
