"""Calderón's linearized method.

``F^(z)`` approximates the Fourier transform (``e^{-2 pi i x.z}`` convention)
of the admittivity perturbation. It is computed from a boundary quadratic
form of the DN difference against the exponentials ``U1``, ``U2``, averaged
over the rotation angle ``Theta`` of ``a`` in the plane orthogonal to ``z``.
The form comes either from electrode data (discrete DN maps) or, for radial
layers, from DN eigenvalues and spherical-harmonic coefficients. The
perturbation is recovered by a mollified, truncated inverse transform in
spherical ``z`` coordinates.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dnmap import DiscreteDNMap, difference_operator
from .errors import ConfigError, GeometryError
from .forward import dn_eigenvalues
from .geometry import (cgo_exponentials, expand_exponentials, lm_arrays,
                       sphere_quadrature)
from .grid import GridSpec, VolumeGrid, simpson_weights
from .phantom import RadialLayers

DEFAULT_NTHETA = 30
REAL_NODES = (11, 9, 15)
COMPLEX_NODES = (11, 11, 21)
DEFAULT_LMAX = 50


@dataclass(frozen=True)
class ZAFrame:
    """``z``, ``a``, ``a_perp`` mutually orthogonal with equal norms."""

    z: np.ndarray
    a: np.ndarray
    a_perp: np.ndarray

    def a_theta(self, Theta):
        Theta = np.asarray(Theta, dtype=float)[..., None]
        return np.cos(Theta) * self.a + np.sin(Theta) * self.a_perp


def za_frame(z) -> ZAFrame:
    """Frame from the spherical parametrization of ``z``.

    ``z = |z| (cos p sin t, sin p sin t, cos t)``,
    ``a = |z| (cos p cos t, sin p cos t, -sin t)`` and ``a_perp = z x a / |z|``.
    """
    z = np.asarray(z, dtype=float)
    nz = float(np.linalg.norm(z))
    if nz == 0:
        raise GeometryError("za_frame needs z != 0")
    t = np.arccos(np.clip(z[2] / nz, -1.0, 1.0))
    p = np.arctan2(z[1], z[0])
    return _frame(nz, t, p)


def _frame(r, t, p) -> ZAFrame:
    z = r * np.array([np.cos(p) * np.sin(t), np.sin(p) * np.sin(t), np.cos(t)])
    a = r * np.array([np.cos(p) * np.cos(t), np.sin(p) * np.cos(t), -np.sin(t)])
    ap = np.cross(z, a) / r
    return ZAFrame(z, a, ap)


def theta_samples(n_theta: int = DEFAULT_NTHETA) -> np.ndarray:
    """``Theta_k = 2 pi k / N``, ``k = 1..N``."""
    if n_theta < 1:
        raise ConfigError("need at least one Theta sample")
    return 2 * np.pi * np.arange(1, n_theta + 1) / n_theta


@dataclass
class SphericalZGrid:
    """Product grid in ``(|z|, theta, phi)`` with samples of ``F^``.

    ``radii`` span ``[0, T_z]``, ``thetas`` ``[0, pi]`` and ``phis``
    ``[0, 2 pi]``; each has an odd node count for Simpson's rule.
    """

    radii: np.ndarray
    thetas: np.ndarray
    phis: np.ndarray
    values: np.ndarray | None = None
    t: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("radii", "thetas", "phis"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.size < 3 or a.size % 2 == 0:
                raise ConfigError(f"{name}: Simpson's rule needs an odd node count >= 3, got {a.size}")
            setattr(self, name, a)
        if self.values is None:
            self.values = np.zeros(self.shape, dtype=complex)
        self.values = np.asarray(self.values)
        if self.values.shape != self.shape:
            raise ConfigError("values do not match the z grid")

    @classmethod
    def build(cls, T_z: float, nodes=REAL_NODES) -> "SphericalZGrid":
        nr, nt, npf = nodes
        return cls(np.linspace(0, T_z, nr), np.linspace(0, np.pi, nt), np.linspace(0, 2 * np.pi, npf))

    @property
    def shape(self):
        return (self.radii.size, self.thetas.size, self.phis.size)

    @property
    def T_z(self) -> float:
        return float(self.radii[-1])

    def points(self) -> np.ndarray:
        R, T, P = np.meshgrid(self.radii, self.thetas, self.phis, indexing="ij")
        return np.stack([R * np.cos(P) * np.sin(T), R * np.sin(P) * np.sin(T), R * np.cos(T)], axis=-1)

    def with_values(self, values, **meta) -> "SphericalZGrid":
        return SphericalZGrid(self.radii, self.thetas, self.phis, values, self.t, {**self.meta, **meta})

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, radii=self.radii, thetas=self.thetas, phis=self.phis, values=self.values,
                 meta=json.dumps({"kind": "spherical", "t": self.t, **self.meta}, default=str))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "SphericalZGrid":
        with np.load(path, allow_pickle=False) as d:
            meta = json.loads(str(d["meta"]))
            t = float(meta.pop("t", 0.0))
            meta.pop("kind", None)
            return cls(d["radii"], d["thetas"], d["phis"], d["values"], t, meta)


def electrode_weight(layout, rule: str = "uniform") -> float:
    """Surface quadrature weight of the electrode sum.

    ``"uniform"``: ``4 pi r^2 / L``. ``"angles"``: ``dphi dtheta / A_e`` with
    the smallest nonzero polar and azimuthal separations of the centres.
    """
    if rule == "uniform":
        return layout.surface_weight
    if rule == "angles":
        u = layout.unit_centers
        th = np.sort(np.unique(np.round(np.arccos(np.clip(u[:, 2], -1, 1)), 12)))
        ph = np.sort(np.unique(np.round(np.mod(np.arctan2(u[:, 1], u[:, 0]), 2 * np.pi), 12)))
        dth = np.diff(th)
        dph = np.diff(ph)
        return float(dph[dph > 0].min() * dth[dth > 0].min() / layout.area)
    raise ConfigError(f"unknown electrode weight rule {rule!r}")


def fhat_electrode(map_g: DiscreteDNMap, map_1: DiscreteDNMap, layout, zgrid: SphericalZGrid,
                   n_theta: int = DEFAULT_NTHETA, weight: str = "uniform") -> SphericalZGrid:
    """``F^`` on ``zgrid`` from electrode data.

    For each node and ``Theta_k``::

        I = w U1(x)^T Q (L_g - L_1) Q^T U2(x),   F^ = -mean_k I / (2 pi^2 |z|^2)

    with ``x`` the electrode centres. The ``|z| = 0`` node is set to 0.
    """
    D = difference_operator(map_g, map_1)
    if layout.L != D.shape[0]:
        raise ConfigError("layout and DN maps disagree on L")
    w = electrode_weight(layout, weight)
    x = layout.unit_centers * layout.radius_domain
    Theta = theta_samples(n_theta)
    out = np.zeros(zgrid.shape, dtype=complex)
    for i, r in enumerate(zgrid.radii):
        if r == 0:
            continue
        for j, t in enumerate(zgrid.thetas):
            for k, p in enumerate(zgrid.phis):
                f = _frame(r, t, p)
                U1, U2 = cgo_exponentials(f.z, f.a, f.a_perp, Theta, x)   # (N_Theta, L)
                I = w * np.sum(U1 * (U2 @ D.T), axis=1)
                out[i, j, k] = -I.mean() / (2 * np.pi**2 * r**2)
    meta = {"source": "electrode", "n_theta": n_theta, "weight": weight, "L": layout.L}
    return zgrid.with_values(out, **meta)


def fhat_analytic_radius(layers: RadialLayers, r: float, n_theta: int = DEFAULT_NTHETA,
                         lmax: int = DEFAULT_LMAX, background=None, tail_tol: float = 1e-8) -> complex:
    """``F^`` at ``|z| = r`` for radial layers (independent of the direction of ``z``).

    ``I = R^2 sum conj(a_lm) b_lm (lambda_l - gamma_b l / R)`` with the
    spherical-harmonic coefficients of the exponentials on the sphere of
    radius ``R``.
    """
    if r == 0:
        return 0.0
    R = layers.radius
    gb = layers.values[-1] if background is None else complex(background)
    lam = dn_eigenvalues(layers, lmax)
    ell = np.arange(lmax + 1)
    diff = lam - gb * ell / R
    f = _frame(r, 0.0, 0.0)
    Theta = theta_samples(n_theta)
    quad = sphere_quadrature(lmax)
    at, bt = expand_exponentials(f.z, f.a, f.a_perp, Theta, lmax, R, quad, check=False)
    l_idx, _ = lm_arrays(lmax)
    prod = np.mean(np.conj(at) * bt, axis=0)            # Theta average, per (l, m)
    per_l = np.bincount(l_idx, weights=prod.real, minlength=lmax + 1) \
        + 1j * np.bincount(l_idx, weights=prod.imag, minlength=lmax + 1)
    terms = R**2 * per_l * diff
    total = terms.sum()
    tail = np.abs(terms[-max(2, lmax // 10):]).max()
    if tail > tail_tol * max(abs(total), 1e-300):
        warnings.warn(f"lmax={lmax} is low for |z|={r:.3g}: tail term {tail:.2e} relative to "
                      f"{abs(total):.2e}", RuntimeWarning, stacklevel=2)
    return complex(-total / (2 * np.pi**2 * r**2))


def fhat_analytic(layers: RadialLayers, zgrid: SphericalZGrid, n_theta: int = DEFAULT_NTHETA,
                  lmax: int = DEFAULT_LMAX, background=None) -> SphericalZGrid:
    """``F^`` on ``zgrid`` from DN eigenvalues of radial layers.

    The Theta-averaged form is invariant under rotations of ``z`` for a
    radial admittivity, so it is evaluated once per radius.
    """
    vals = np.array([fhat_analytic_radius(layers, r, n_theta, lmax, background) for r in zgrid.radii])
    out = np.broadcast_to(vals[:, None, None], zgrid.shape).astype(complex)
    if layers.is_real:
        out = out.real.astype(complex)
    return zgrid.with_values(out, source="analytic", n_theta=n_theta, lmax=lmax)


def mollifier_value(z, t: float):
    """``exp(-pi t |z|^2)``; ``z`` may be a vector or a norm."""
    if t < 0:
        raise ConfigError("mollifier parameter must be non-negative")
    z = np.asarray(z, dtype=float)
    n2 = np.sum(z * z, axis=-1) if z.ndim >= 1 and z.shape[-1] == 3 else z * z
    return np.exp(-np.pi * t * n2)


def inverse_fourier_spherical(fhat: SphericalZGrid, grid: GridSpec, t: float | None = None,
                              T_z: float | None = None, inside_only: bool = True,
                              chunk: int | None = None) -> VolumeGrid:
    """Mollified truncated inverse transform by triple Simpson in ``(|z|, theta, phi)``.

    ``delta(x) = int_0^{T_z} int int |z|^2 sin(theta) F^ e^{-pi t |z|^2} e^{-2 pi i x.z}``.
    Nodes beyond ``T_z`` (default: the grid extent) are dropped.
    """
    t = fhat.t if t is None else t
    T_z = fhat.T_z if T_z is None else T_z
    if T_z > fhat.T_z * (1 + 1e-12):
        raise ConfigError("T_z exceeds the z-grid extent")
    r = fhat.radii
    wr = simpson_weights(r.size, r[0], r[-1])
    wt = simpson_weights(fhat.thetas.size, fhat.thetas[0], fhat.thetas[-1])
    wp = simpson_weights(fhat.phis.size, fhat.phis[0], fhat.phis[-1])
    W = (wr * r**2 * mollifier_value(r, t) * (r <= T_z * (1 + 1e-12)))[:, None, None] \
        * np.sin(fhat.thetas)[None, :, None] * wp[None, None, :] * wt[None, :, None]
    coef = (W * fhat.values).ravel()
    Z = fhat.points().reshape(-1, 3)
    keep = coef != 0
    coef, Z = coef[keep], Z[keep]
    pts = grid.points()
    mask = grid.mask() if inside_only else np.ones((grid.n,) * 3, bool)
    X = pts[mask]
    out = np.zeros(X.shape[0], dtype=complex)
    if chunk is None:
        # keep each phase block near 2^24 entries
        chunk = max(1, 2**24 // max(1, Z.shape[0]))
    for s in range(0, X.shape[0], chunk):
        out[s:s + chunk] = np.exp(-2j * np.pi * (X[s:s + chunk] @ Z.T)) @ coef
    vals = np.zeros((grid.n,) * 3, dtype=complex)
    vals[mask] = out
    return VolumeGrid(grid, vals, meta={"kind": "delta-sigma", "T_z": T_z, "t": t})


def reconstruct_calderon(delta: VolumeGrid, gamma_best, out_n: int | None = 128) -> VolumeGrid:
    """``sigma = gamma_best + delta``; outside the ball filled with ``gamma_best``."""
    g = complex(gamma_best)
    vol = delta.with_values(delta.filled(0.0) + g)
    vol = vol.with_values(vol.filled(g))
    if out_n is not None and out_n != vol.spec.n:
        vol = vol.resample(out_n, outside_value=g)
    vol.meta.update(method="calderon", gamma_best=[g.real, g.imag])
    return vol


def calderon_pipeline(map_g: DiscreteDNMap, map_1: DiscreteDNMap, layout, T_z: float, t: float,
                      nodes=None, n_theta: int = DEFAULT_NTHETA, solver_n: int = 64,
                      out_n: int | None = 128, weight: str = "uniform"):
    """Electrode ``F^``, inverse transform and assembly. Returns ``(volume, fhat)``."""
    if nodes is None:
        cplx = np.iscomplexobj(map_g.Lmat) and np.abs(map_g.Lmat.imag).max() > 0
        nodes = COMPLEX_NODES if cplx else REAL_NODES
    zgrid = SphericalZGrid.build(T_z, nodes)
    fh = fhat_electrode(map_g, map_1, layout, zgrid, n_theta, weight)
    fh.t = t
    R = layout.radius_domain
    delta = inverse_fourier_spherical(fh, GridSpec(solver_n, R, R), t)
    vol = reconstruct_calderon(delta, map_g.gamma_best, out_n)
    vol.meta.update(T_z=T_z, t=t, nodes=list(nodes), n_theta=n_theta)
    return vol, fh
