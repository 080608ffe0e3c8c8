"""Spherical-domain geometry: electrodes, spherical harmonics, CGO exponentials.

Conventions
-----------
Directions use physics angles: polar ``theta`` in [0, pi] from the x3 axis and
azimuth ``phi`` in [0, 2 pi). Spherical harmonics are orthonormal on the unit
sphere and carry the Condon-Shortley phase,

    Y_l^m(theta, phi) = N_lm P_l^m(cos theta) exp(i m phi),
    Y_l^{-m} = (-1)^m conj(Y_l^m).

Coefficient vectors are flat, index ``l*l + l + m``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeometryError

DEFAULT_LMAX = 50
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


# ---------------------------------------------------------------------------
# electrodes


@dataclass(frozen=True)
class ElectrodeLayout:
    """Circular electrodes on the sphere of radius ``radius_domain``.

    ``centers`` are Cartesian points on the sphere (metres). The electrode
    area used to convert currents into current densities is the flat disk
    ``pi r_e^2`` unless ``exact_cap_area`` is set.
    """

    radius_domain: float
    centers: np.ndarray
    radius_electrode: float
    exact_cap_area: bool = False

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        object.__setattr__(self, "centers", c)
        if c.ndim != 2 or c.shape[1] != 3:
            raise GeometryError("centers must have shape (L, 3)")
        if c.shape[0] < 2:
            raise GeometryError("at least two electrodes are required")
        r = np.linalg.norm(c, axis=1)
        if np.max(np.abs(r - self.radius_domain)) > 1e-12 * self.radius_domain:
            raise GeometryError("electrode centers must lie on the domain surface")
        if self.radius_electrode <= 0:
            raise GeometryError("electrode radius must be positive")
        if self.L > 1:
            d = _min_angular_separation(self.unit_centers)
            if d <= 2.0 * self.cap_angle:
                raise GeometryError(
                    f"electrode caps overlap: minimum center separation {d:.4g} rad "
                    f"<= 2 x cap angle {self.cap_angle:.4g} rad"
                )

    @property
    def L(self) -> int:
        return self.centers.shape[0]

    @property
    def unit_centers(self) -> np.ndarray:
        return self.centers / np.linalg.norm(self.centers, axis=1, keepdims=True)

    @property
    def cap_angle(self) -> float:
        """Angular (geodesic) radius of each cap, radians."""
        return self.radius_electrode / self.radius_domain

    @property
    def cap_area(self) -> float:
        """Exact spherical-cap area (m^2)."""
        return 2.0 * np.pi * self.radius_domain**2 * (1.0 - np.cos(self.cap_angle))

    @property
    def area(self) -> float:
        """Electrode area A_e used for current densities (m^2)."""
        if self.exact_cap_area:
            return self.cap_area
        return np.pi * self.radius_electrode**2

    @property
    def coverage(self) -> float:
        return self.L * self.area / (4.0 * np.pi * self.radius_domain**2)

    @property
    def surface_weight(self) -> float:
        """Uniform quadrature weight 4 pi r^2 / L per electrode center."""
        return 4.0 * np.pi * self.radius_domain**2 / self.L

    def to_dict(self) -> dict:
        return {
            "radius_domain": float(self.radius_domain),
            "radius_electrode": float(self.radius_electrode),
            "exact_cap_area": bool(self.exact_cap_area),
            "centers": [[float(v) for v in row] for row in self.unit_centers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ElectrodeLayout":
        u = np.asarray(d["centers"], dtype=float)
        u = u / np.linalg.norm(u, axis=1, keepdims=True)
        return cls(d["radius_domain"], u * d["radius_domain"], d["radius_electrode"],
                   d.get("exact_cap_area", False))

    def layout_hash(self) -> str:
        d = self.to_dict()
        d["centers"] = np.round(self.unit_centers, 12).tolist()  # stable under save/load
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ElectrodeLayout":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def permuted(self, order) -> "ElectrodeLayout":
        return ElectrodeLayout(self.radius_domain, self.centers[np.asarray(order)],
                               self.radius_electrode, self.exact_cap_area)


def _min_angular_separation(u: np.ndarray) -> float:
    g = np.clip(u @ u.T, -1.0, 1.0)
    np.fill_diagonal(g, -1.0)
    return float(np.arccos(g.max()))


def fibonacci_directions(L: int) -> np.ndarray:
    """Fibonacci spiral with both poles included; ``L = 2`` gives the poles."""
    i = np.arange(L)
    x3 = 1.0 - 2.0 * i / (L - 1)
    rho = np.sqrt(np.clip(1.0 - x3**2, 0.0, None))
    phi = i * GOLDEN_ANGLE
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), x3])


def place_electrodes(L: int, r_domain: float = 1.0, r_elec: float = 0.05,
                     exact_cap_area: bool = False) -> ElectrodeLayout:
    """Quasi-uniform electrode placement on the sphere (deterministic).

    Raises
    ------
    GeometryError
        If ``L < 2`` or the caps of radius ``r_elec`` cannot be disjoint.
    """
    if L < 2:
        raise GeometryError("at least two electrodes are required")
    return ElectrodeLayout(r_domain, r_domain * fibonacci_directions(L), r_elec, exact_cap_area)


# ---------------------------------------------------------------------------
# spherical harmonics


def n_coeffs(lmax: int) -> int:
    return (lmax + 1) ** 2


def sh_index(l, m):
    return np.asarray(l) ** 2 + np.asarray(l) + np.asarray(m)


@lru_cache(maxsize=32)
def lm_arrays(lmax: int):
    """``(l, m)`` of every flat coefficient index up to ``lmax``."""
    l = np.concatenate([np.full(2 * k + 1, k) for k in range(lmax + 1)])
    m = np.concatenate([np.arange(-k, k + 1) for k in range(lmax + 1)])
    return l, m


def normalized_legendre(lmax: int, x: np.ndarray) -> np.ndarray:
    """Orthonormalised associated Legendre functions.

    Returns ``P[l, m, ...]`` (zero for ``m > l``) such that
    ``Y_l^m = P[l, m](cos theta) exp(i m phi)`` for ``m >= 0``.
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    P = np.zeros((lmax + 1, lmax + 1) + x.shape)
    P[0, 0] = np.sqrt(1.0 / (4.0 * np.pi))
    for m in range(1, lmax + 1):
        P[m, m] = -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * P[m - 1, m - 1]
    for m in range(0, lmax):
        P[m + 1, m] = np.sqrt(2.0 * m + 3.0) * x * P[m, m]
    for m in range(0, lmax + 1):
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            P[l, m] = a * (x * P[l - 1, m] - b * P[l - 2, m])
    return P


def sph_harm(l: int, m: int, theta, phi) -> np.ndarray:
    """Single orthonormal harmonic ``Y_l^m(theta, phi)``."""
    P = normalized_legendre(l, np.cos(theta))
    y = P[l, abs(m)] * np.exp(1j * abs(m) * np.asarray(phi))
    if m < 0:
        y = (-1) ** abs(m) * np.conj(y)
    return y


def cartesian_to_angles(x: np.ndarray):
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    theta = np.arccos(np.clip(x[..., 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
    phi = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2.0 * np.pi)
    return theta, phi


@dataclass(frozen=True)
class SphericalHarmonicField:
    lmax: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape[-1] != n_coeffs(self.lmax):
            raise GeometryError(
                f"bandlimit {self.lmax} needs {n_coeffs(self.lmax)} coefficients, got {c.shape[-1]}")
        object.__setattr__(self, "coeffs", c)

    def __getitem__(self, lm):
        l, m = lm
        return self.coeffs[..., sh_index(l, m)]

    def energy(self) -> np.ndarray:
        return np.sum(np.abs(self.coeffs) ** 2, axis=-1)


class SphereQuadrature:
    """Equiangular grid with ``2B x 2B`` nodes, ``B = lmax + 1``.

    Polar nodes ``theta_j = pi (2j+1) / (4B)`` with Fejer (first rule)
    weights, azimuthal nodes ``phi_k = 2 pi k / (2B)``. Products of two
    harmonics of degree <= ``lmax`` are integrated exactly.
    """

    def __init__(self, lmax: int = DEFAULT_LMAX):
        if lmax < 0:
            raise GeometryError("bandlimit must be non-negative")
        self.lmax = int(lmax)
        n = 2 * (self.lmax + 1)
        self.n = n
        j = np.arange(n)
        self.theta = np.pi * (2 * j + 1) / (2 * n)
        self.phi = 2.0 * np.pi * np.arange(n) / n
        k = np.arange(1, n // 2 + 1)
        fejer = (2.0 / n) * (1.0 - 2.0 * np.sum(
            np.cos(2.0 * np.outer(self.theta, k)) / (4.0 * k**2 - 1.0), axis=1))
        self.theta_weights = fejer * (2.0 * np.pi / n)
        self._legendre = normalized_legendre(self.lmax, np.cos(self.theta))

    @property
    def weights(self) -> np.ndarray:
        """Per-node weights (steradian), shape ``(n, n)``."""
        return np.repeat(self.theta_weights[:, None], self.n, axis=1)

    def directions(self) -> np.ndarray:
        """Unit vectors of the nodes, shape ``(n, n, 3)``."""
        t, p = np.meshgrid(self.theta, self.phi, indexing="ij")
        return np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)

    def _gather(self, lmax):
        l, m = lm_arrays(lmax)
        P = self._legendre[l, np.abs(m)]  # (ncoef, ntheta)
        sign = np.where(m < 0, (-1.0) ** np.abs(m), 1.0)
        col = np.mod(m, self.n)
        return P * sign[:, None], col, m


@lru_cache(maxsize=8)
def sphere_quadrature(lmax: int = DEFAULT_LMAX) -> SphereQuadrature:
    return SphereQuadrature(lmax)


def sh_analyze(samples: np.ndarray, quad: SphereQuadrature, lmax: int | None = None) -> np.ndarray:
    """Spherical-harmonic coefficients of samples on ``quad`` nodes.

    ``samples`` has shape ``(..., n, n)`` (theta, phi); the result has shape
    ``(..., (lmax+1)^2)``.
    """
    lmax = quad.lmax if lmax is None else int(lmax)
    if lmax > quad.lmax:
        raise GeometryError(f"quadrature bandlimit {quad.lmax} < requested lmax {lmax}")
    samples = np.asarray(samples)
    if samples.shape[-2:] != (quad.n, quad.n):
        raise GeometryError(f"samples must end with shape {(quad.n, quad.n)}")
    F = np.fft.fft(samples, axis=-1) * quad.theta_weights[:, None]  # sum_k f e^{-i m phi_k}
    Pg, col, _ = quad._gather(lmax)
    Fg = F[..., :, col]  # (..., ntheta, ncoef)
    return np.einsum("ij,...ji->...i", Pg, Fg)


def sh_synthesize(coeffs, theta, phi, lmax: int | None = None) -> np.ndarray:
    """Evaluate an expansion at directions ``(theta, phi)`` (same shapes)."""
    if isinstance(coeffs, SphericalHarmonicField):
        lmax, coeffs = coeffs.lmax, coeffs.coeffs
    coeffs = np.asarray(coeffs, dtype=complex)
    if lmax is None:
        lmax = int(round(np.sqrt(coeffs.shape[-1]))) - 1
    if coeffs.shape[-1] != n_coeffs(lmax):
        raise GeometryError("coefficient count does not match the bandlimit")
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    shape = theta.shape
    th, ph = theta.ravel(), phi.ravel()
    l, m = lm_arrays(lmax)
    out = np.empty(coeffs.shape[:-1] + th.shape, dtype=complex)
    for s in range(0, th.size, 2048):
        sl = slice(s, s + 2048)
        P = normalized_legendre(lmax, np.cos(th[sl]))[l, np.abs(m)]
        sign = np.where(m < 0, (-1.0) ** np.abs(m), 1.0)
        Y = sign[:, None] * P * np.exp(1j * np.outer(np.abs(m), ph[sl]))
        Y = np.where((m < 0)[:, None], np.conj(Y), Y)
        out[..., sl] = coeffs @ Y
    return out.reshape(coeffs.shape[:-1] + shape)


def synthesize_grid(coeffs: np.ndarray, quad: SphereQuadrature, lmax: int | None = None) -> np.ndarray:
    """Evaluate an expansion on the quadrature nodes, shape ``(..., n, n)``."""
    coeffs = np.asarray(coeffs, dtype=complex)
    if lmax is None:
        lmax = int(round(np.sqrt(coeffs.shape[-1]))) - 1
    if lmax > quad.lmax:
        raise GeometryError("expansion bandlimit exceeds the quadrature bandlimit")
    l, m = lm_arrays(lmax)
    P = quad._legendre[l, np.abs(m)] * np.where(m < 0, (-1.0) ** np.abs(m), 1.0)[:, None]
    G = np.zeros(coeffs.shape[:-1] + (quad.n, quad.n), dtype=complex)
    # G[..., j, col(m)] accumulates sum_l c_lm P_lm(theta_j); then inverse DFT over m
    contrib = coeffs[..., None, :] * P.T  # (..., ntheta, ncoef)
    for mm in range(-lmax, lmax + 1):
        sel = m == mm
        G[..., :, mm % quad.n] = contrib[..., :, sel].sum(axis=-1)
    return np.fft.ifft(G, axis=-1) * quad.n


# ---------------------------------------------------------------------------
# CGO exponentials


def check_orthogonal_frame(z, a, a_perp, tol: float = 1e-10) -> None:
    z, a, a_perp = (np.asarray(v, dtype=float) for v in (z, a, a_perp))
    nz = np.linalg.norm(z)
    scale = max(nz**2, 1.0)
    bad = (abs(np.linalg.norm(a) - nz) > tol * max(nz, 1.0)
           or abs(np.linalg.norm(a_perp) - nz) > tol * max(nz, 1.0)
           or abs(z @ a) > tol * scale or abs(z @ a_perp) > tol * scale
           or abs(a @ a_perp) > tol * scale)
    if bad:
        raise GeometryError("z, a, a_perp must be mutually orthogonal with equal norms")


def cgo_exponentials(z, a, a_perp, Theta, x: np.ndarray):
    """``U1, U2`` of the Theta-averaged Calderon integrand at points ``x``.

    ``U1 = exp(pi i z.x + pi a_Theta.x)``, ``U2 = exp(pi i z.x - pi a_Theta.x)``
    with ``a_Theta = cos(Theta) a + sin(Theta) a_perp``. ``Theta`` may be an
    array; the result then has shape ``Theta.shape + x.shape[:-1]``.
    """
    Theta = np.asarray(Theta, dtype=float)
    if Theta.ndim > 1:
        raise ConfigError("Theta must be a scalar or 1-D array")
    x = np.asarray(x, dtype=float)
    zx = x @ np.asarray(z, dtype=float)
    ax = x @ np.asarray(a, dtype=float)
    px = x @ np.asarray(a_perp, dtype=float)
    expand = Theta.shape + (1,) * zx.ndim
    real = np.pi * (np.cos(Theta).reshape(expand) * ax + np.sin(Theta).reshape(expand) * px)
    phase = np.pi * zx
    return np.exp(1j * phase + real), np.exp(1j * phase - real)


def expand_exponentials(z, a, a_perp, Theta, lmax: int = DEFAULT_LMAX, radius: float = 1.0,
                        quad: SphereQuadrature | None = None, check: bool = True):
    """Spherical-harmonic coefficients ``(a_tilde, b_tilde)`` of the CGO exponentials.

    With ``x = radius * x_hat`` on the boundary sphere,

        U1(x) = sum conj(a_tilde_lm) conj(Y_lm(x_hat)),
        U2(x) = sum b_tilde_lm Y_lm(x_hat),

    so ``a_tilde`` are the coefficients of ``conj(U1)``. Returns arrays of
    shape ``Theta.shape + ((lmax+1)^2,)``.
    """
    if check:
        check_orthogonal_frame(z, a, a_perp)
    quad = sphere_quadrature(lmax) if quad is None else quad
    x = radius * quad.directions()
    U1, U2 = cgo_exponentials(z, a, a_perp, Theta, x)
    return sh_analyze(np.conj(U1), quad, lmax), sh_analyze(U2, quad, lmax)
