"""The t^exp (Born-approximated D-bar) method and its Calderón-type shortcut.

Pipeline: scattering data ``t^exp(xi, zeta(xi))`` on a Cartesian ``xi`` grid
from two discrete DN maps, a Simpson inverse Fourier transform to the
potential ``q^exp``, and a Schrödinger solve whose squared solution gives
the admittivity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dnmap import DiscreteDNMap, difference_operator
from .elliptic import solve_schrodinger
from .errors import ConfigError
from .forward import dn_eigenvalues
from .geometry import lm_arrays, sh_analyze, sphere_quadrature
from .grid import GridSpec, VolumeGrid, simpson_weights

DEFAULT_NXI = 15


# -- zeta -----------------------------------------------------------------


@dataclass(frozen=True)
class ZetaFrame:
    """``zeta(xi) = -xi/2 + sqrt(kappa^2 - |xi|^2/4) xi_perp + i kappa xi_perp2``."""

    xi: np.ndarray
    kappa: float
    xi_perp: np.ndarray
    xi_perp2: np.ndarray
    zeta: np.ndarray

    def residuals(self):
        """``(zeta . zeta, (xi + zeta) . (xi + zeta))``, both zero in exact arithmetic."""
        z = self.zeta
        w = self.xi + z
        return complex(np.sum(z * z)), complex(np.sum(w * w))


def null_basis(xi: np.ndarray):
    """Deterministic orthonormal pair spanning the plane orthogonal to ``xi``.

    ``e`` is the coordinate axis with the smallest ``|xi_i|`` (the first one on
    ties), ``xi_perp = normalize(e x xi)`` and ``xi_perp2 = normalize(xi x xi_perp)``.
    Works row-wise on arrays of shape ``(..., 3)``.
    """
    xi = np.asarray(xi, dtype=float)
    e = np.zeros_like(xi)
    idx = np.argmin(np.abs(xi), axis=-1)
    np.put_along_axis(e, idx[..., None], 1.0, axis=-1)
    p = np.cross(e, xi)
    p /= np.linalg.norm(p, axis=-1, keepdims=True)
    pp = np.cross(xi, p)
    pp /= np.linalg.norm(pp, axis=-1, keepdims=True)
    return p, pp


def zeta_from_xi(xi, kappa=None, kappa_mult: float = 1.0, basis=None) -> ZetaFrame:
    """Build ``zeta(xi)`` with ``kappa = kappa_mult |xi|/2`` unless given.

    Parameters
    ----------
    basis : pair of vectors, optional
        Explicit ``(xi_perp, xi_perp2)``; otherwise :func:`null_basis`.
    """
    xi = np.asarray(xi, dtype=float)
    nx = float(np.linalg.norm(xi))
    if nx == 0:
        raise ConfigError("zeta(xi) needs xi != 0")
    if kappa is None:
        kappa = kappa_mult * nx / 2
    if kappa < nx / 2 * (1 - 1e-12):
        raise ConfigError(f"kappa = {kappa} is below |xi|/2 = {nx / 2}")
    if basis is None:
        p, pp = null_basis(xi)
    else:
        p, pp = (np.asarray(b, dtype=float) for b in basis)
        G = np.array([xi / nx, p, pp])
        if np.abs(G @ G.T - np.eye(3)).max() > 1e-10:
            raise ConfigError("basis must be orthonormal and orthogonal to xi")
    root = np.sqrt(max(kappa**2 - nx**2 / 4, 0.0))
    zeta = -xi / 2 + root * p + 1j * kappa * pp
    return ZetaFrame(xi, float(kappa), p, pp, zeta)


def zeta_grid(xis: np.ndarray, kappa_mult: float = 1.0) -> np.ndarray:
    """Vectorized ``zeta(xi)`` for rows of ``xis``; ``zeta(0) = 0``."""
    xis = np.asarray(xis, dtype=float)
    if kappa_mult < 1:
        raise ConfigError("kappa multiplier must be >= 1")
    nx = np.linalg.norm(xis, axis=-1)
    out = np.zeros(xis.shape, dtype=complex)
    nz = nx > 0
    p, pp = null_basis(xis[nz])
    kappa = kappa_mult * nx[nz] / 2
    root = np.sqrt(np.maximum(kappa**2 - nx[nz] ** 2 / 4, 0.0))
    out[nz] = -xis[nz] / 2 + root[:, None] * p + 1j * kappa[:, None] * pp
    return out


# -- Fourier volumes ------------------------------------------------------


@dataclass
class FourierVolume:
    """Samples on a symmetric Cartesian frequency cube ``[-T, T]^3``.

    Attributes
    ----------
    axis : ndarray
        Odd number of equally spaced nodes on ``[-T, T]``.
    values : ndarray, shape (n, n, n)
    T : float
        Truncation radius; samples with ``|xi| > T`` are zero.
    """

    axis: np.ndarray
    values: np.ndarray
    T: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        n = self.axis.size
        if n < 3 or n % 2 == 0:
            raise ConfigError(f"Fourier grid needs an odd node count >= 3, got {n}")
        self.values = np.asarray(self.values)
        if self.values.shape != (n, n, n):
            raise ConfigError("values do not match the frequency grid")

    @property
    def n(self) -> int:
        return self.axis.size

    def points(self) -> np.ndarray:
        a = self.axis
        return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.points(), axis=-1)

    def clip(self, T: float | None = None) -> "FourierVolume":
        T = self.T if T is None else T
        vals = np.where(self.norms() <= T * (1 + 1e-12), self.values, 0.0)
        return FourierVolume(self.axis, vals, T, dict(self.meta))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, axis=self.axis, values=self.values,
                 meta=json.dumps({"T": self.T, "kind": "cartesian", **self.meta}, default=str))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "FourierVolume":
        with np.load(path, allow_pickle=False) as d:
            meta = json.loads(str(d["meta"]))
            return cls(d["axis"], d["values"], float(meta.pop("T")), meta)


def xi_axis(T: float, n: int = DEFAULT_NXI) -> np.ndarray:
    if n < 3 or n % 2 == 0:
        raise ConfigError(f"xi grid needs an odd node count >= 3, got {n}")
    return np.linspace(-T, T, n)


def texp_volume(map_g: DiscreteDNMap, map_1: DiscreteDNMap, layout, T: float,
                n: int = DEFAULT_NXI, kappa_mult: float = 1.0, grid_T: float | None = None) -> FourierVolume:
    """Scattering data ``t^exp(xi, zeta(xi))`` on ``[-grid_T, grid_T]^3``, clipped at ``T``.

    For every node, with ``x`` the electrode centres and ``w = 4 pi r^2/L``::

        t = w e^{-i x.(xi+zeta)}^T  Q (L_g - L_1) Q^T  e^{i x.zeta}

    ``t(0) = 0``. ``grid_T`` (default ``T``) sets the cube extent, so several
    truncation radii can share one grid.
    """
    D = difference_operator(map_g, map_1)
    if layout.L != D.shape[0]:
        raise ConfigError("layout and DN maps disagree on L")
    axis = xi_axis(grid_T or T, n)
    A = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    nrm = np.linalg.norm(A, axis=1)
    active = (nrm <= T * (1 + 1e-12)) & (nrm > 0)
    xi = A[active]
    zeta = zeta_grid(xi, kappa_mult)
    x = layout.unit_centers * layout.radius_domain
    vals = np.zeros(A.shape[0], dtype=complex)
    chunk = 2048
    for s in range(0, xi.shape[0], chunk):
        z = zeta[s:s + chunk]
        e_in = np.exp(1j * (x @ z.T))                      # (L, m)
        e_out = np.exp(-1j * (x @ (xi[s:s + chunk] + z).T))
        vals[np.flatnonzero(active)[s:s + chunk]] = layout.surface_weight * np.sum(e_out * (D @ e_in), axis=0)
    meta = {"kappa_mult": kappa_mult, "gamma_best": str(map_g.gamma_best), "L": layout.L}
    return FourierVolume(axis, vals.reshape(n, n, n), float(T), meta)


def texp_analytic_radius(layers, r: float, kappa_mult: float = 1.0, lmax: int = 60,
                         background=None) -> complex:
    """``t^exp`` at ``|xi| = r`` for radial layers (rotation invariant).

    ``int e^{-i x.(xi+zeta)} (Lambda_g - Lambda_b) e^{i x.zeta} dS`` from DN
    eigenvalues and spherical-harmonic coefficients on the sphere of radius
    ``R``.
    """
    if r == 0:
        return 0.0
    R = layers.radius
    gb = layers.values[-1] if background is None else complex(background)
    xi = np.array([0.0, 0.0, float(r)])
    zeta = zeta_from_xi(xi, kappa_mult=kappa_mult).zeta
    quad = sphere_quadrature(lmax)
    x = quad.directions() * R
    f_conj = np.conj(np.exp(-1j * (x @ (xi + zeta))))
    g = np.exp(1j * (x @ zeta))
    a, b = sh_analyze(np.stack([f_conj, g]), quad)
    l_idx, _ = lm_arrays(lmax)
    ell = np.arange(lmax + 1)
    diff = dn_eigenvalues(layers, lmax) - gb * ell / R
    return complex(R**2 * np.sum(np.conj(a) * b * diff[l_idx]))


def texp_analytic(layers, T: float, n: int = DEFAULT_NXI, kappa_mult: float = 1.0,
                  lmax: int = 60, grid_T: float | None = None) -> FourierVolume:
    """Continuum ``t^exp`` of radial layers on the same grid as :func:`texp_volume`."""
    axis = xi_axis(grid_T or T, n)
    A = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    nrm = np.linalg.norm(A, axis=-1)
    r = np.round(nrm, 12)
    vals = np.zeros(nrm.shape, dtype=complex)
    for u in np.unique(r[(nrm <= T * (1 + 1e-12)) & (nrm > 0)]):
        vals[r == u] = texp_analytic_radius(layers, u, kappa_mult, lmax)
    return FourierVolume(axis, vals, float(T), {"kappa_mult": kappa_mult, "source": "analytic"})


def inverse_fourier_cartesian(t: FourierVolume, grid: GridSpec, divide_by_norm2: bool = False) -> VolumeGrid:
    """``(2 pi)^-3 int e^{i x.xi} t(xi) d xi`` by tensor Simpson on the ``xi`` cube.

    With ``divide_by_norm2`` the integrand is ``t/|xi|^2`` (zero at ``xi = 0``).
    """
    a = t.axis
    w = simpson_weights(a.size, a[0], a[-1])
    vals = t.values
    if divide_by_norm2:
        n2 = t.norms() ** 2
        vals = np.divide(vals.astype(complex), n2, out=np.zeros(vals.shape, dtype=complex), where=n2 > 0)
    x = grid.axis
    W = w[None, :] * np.exp(1j * x[:, None] * a[None, :])   # (nx, nxi)
    q = np.einsum("ia,abc->ibc", W, vals, optimize=True)
    q = np.einsum("jb,ibc->ijc", W, q, optimize=True)
    q = np.einsum("kc,ijc->ijk", W, q, optimize=True)
    return VolumeGrid(grid, q / (2 * np.pi) ** 3, meta={"kind": "inverse-ft"})


def _finish(values_grid: VolumeGrid, gamma_best, out_n: int | None) -> VolumeGrid:
    g = complex(gamma_best)
    vol = values_grid.with_values(values_grid.filled(g))
    if out_n is not None and out_n != vol.spec.n:
        vol = vol.resample(out_n, outside_value=g)
    vol.meta["gamma_best"] = [g.real, g.imag]
    return vol


def reconstruct_dbar(q: VolumeGrid, gamma_best, out_n: int | None = 128) -> VolumeGrid:
    """``sigma = gamma_best u^2`` with ``(-Lap + q) u = 0``, ``u = 1`` on the sphere."""
    u = solve_schrodinger(q)
    sigma = u.with_values(complex(gamma_best) * np.asarray(u.values, dtype=complex) ** 2)
    out = _finish(sigma, gamma_best, out_n)
    out.meta.update(method="dbar", residual=u.meta.get("residual"))
    return out


def reconstruct_texp_calderon(t: FourierVolume, gamma_best, grid: GridSpec,
                              out_n: int | None = 128) -> VolumeGrid:
    """Linearized variant ``gamma_best (1 - 2 (2 pi)^-3 int t/|xi|^2 e^{i x.xi})``."""
    inv = inverse_fourier_cartesian(t, grid, divide_by_norm2=True)
    sigma = inv.with_values(complex(gamma_best) * (1.0 - 2.0 * inv.values))
    out = _finish(sigma, gamma_best, out_n)
    out.meta.update(method="texp-calderon")
    return out


def dbar_pipeline(map_g: DiscreteDNMap, map_1: DiscreteDNMap, layout, T: float,
                  n_xi: int = DEFAULT_NXI, kappa_mult: float = 1.0, solver_n: int = 64,
                  out_n: int | None = 128, method: str = "dbar"):
    """Scattering data, inverse transform and reconstruction in one call.

    Returns ``(volume, t)``.
    """
    t = texp_volume(map_g, map_1, layout, T, n_xi, kappa_mult)
    R = layout.radius_domain
    grid = GridSpec(solver_n, R, R)
    if method == "dbar":
        q = inverse_fourier_cartesian(t, grid)
        vol = reconstruct_dbar(q, map_g.gamma_best, out_n)
    elif method == "texp-calderon":
        vol = reconstruct_texp_calderon(t, map_g.gamma_best, grid, out_n)
    else:
        raise ConfigError(f"unknown t^exp reconstruction {method!r}")
    vol.meta.update(T_xi=T, n_xi=n_xi, kappa_mult=kappa_mult)
    return vol, t
