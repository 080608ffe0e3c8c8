"""Synthetic electrode data: current patterns, voltages and noise.

Radially layered admittivities are handled analytically. The DN map is
diagonal in spherical harmonics with eigenvalues from a layer recursion; the
boundary data of every electrode are zonal, so the gap-model transfer matrix
``Z`` (electrode voltage per unit electrode current) is a Legendre series in
the angle between electrode centres.

General admittivities use the finite-volume operator of :mod:`cgoeit.elliptic`
in a perturbation form. The homogeneous-background potentials are known in
closed form, so only the correction caused by ``gamma - gamma_b`` is solved
numerically. Its electrode response is obtained by reciprocity, which keeps
``Z`` exactly symmetric.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError
from .grid import GridSpec
from .phantom import Phantom, RadialLayers, radial_profile

log = logging.getLogger(__name__)

DEFAULT_AMPLITUDE = 1e-3
DEFAULT_TAIL_TOL = 1e-6


# -- patterns and voltage containers --------------------------------------


@dataclass(frozen=True)
class CurrentPatternSet:
    """Applied currents, one pattern per column (amperes)."""

    C: np.ndarray
    skip: int | None = None
    amplitude: float = DEFAULT_AMPLITUDE

    def __post_init__(self):
        C = np.asarray(self.C, dtype=float)
        if C.ndim != 2:
            raise ConfigError("pattern matrix must be two-dimensional")
        scale = np.abs(C).max() if C.size else 1.0
        if np.any(np.abs(C.sum(axis=0)) > 1e-12 * max(scale, 1e-300) * C.shape[0]):
            raise ConfigError("every current pattern must sum to zero")
        if C.shape[1] and np.linalg.matrix_rank(C) < C.shape[1]:
            raise ConfigError("current patterns are linearly dependent")
        object.__setattr__(self, "C", C)

    @property
    def L(self) -> int:
        return self.C.shape[0]

    @property
    def K(self) -> int:
        return self.C.shape[1]

    @property
    def tag(self) -> str:
        return f"skip-{self.skip}" if self.skip is not None else "custom"


@dataclass
class VoltageMatrix:
    """Electrode voltages, one pattern per column (volts)."""

    V: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.V = np.asarray(self.V)
        if self.V.ndim != 2:
            raise ConfigError("voltage matrix must be two-dimensional")
        if not np.all(np.isfinite(self.V)):
            raise NumericalError("voltage matrix contains non-finite entries")

    @property
    def L(self) -> int:
        return self.V.shape[0]

    @property
    def K(self) -> int:
        return self.V.shape[1]

    def with_values(self, V, **meta) -> "VoltageMatrix":
        return VoltageMatrix(np.asarray(V), {**self.meta, **meta})


def pairwise_patterns(L: int, skip: int = 0, amplitude: float = DEFAULT_AMPLITUDE) -> CurrentPatternSet:
    """Pairwise injection: pattern k drives +I on electrode k, -I on k+skip+1.

    The cyclic family has rank ``L - gcd(L, skip+1)``; patterns are kept in
    order while they add a new direction, so the result has that many columns.
    A warning is issued when it is fewer than ``L - 1``.
    """
    if L < 2:
        raise ConfigError("need at least two electrodes")
    if skip < 0:
        raise ConfigError("skip must be non-negative")
    K = L - math.gcd(L, skip + 1)
    cols = []
    basis = np.zeros((L, 0))
    for k in range(L):
        c = np.zeros(L)
        c[k] = amplitude
        c[(k + skip + 1) % L] -= amplitude
        trial = np.column_stack([basis, c])
        if np.linalg.matrix_rank(trial) > basis.shape[1]:
            basis = trial
            cols.append(c)
        if len(cols) == K:
            break
    if K < L - 1:
        warnings.warn(f"skip-{skip} pairwise injection on {L} electrodes gives only {K} "
                      f"independent patterns (L - gcd(L, skip+1)), fewer than L-1 = {L - 1}",
                      RuntimeWarning, stacklevel=2)
    return CurrentPatternSet(np.column_stack(cols), skip, amplitude)


def ground(V: np.ndarray) -> np.ndarray:
    """Per-pattern zero-mean voltages."""
    return V - V.mean(axis=0, keepdims=True)


# -- layered DN eigenvalues -----------------------------------------------


def dn_eigenvalues(layers: RadialLayers, lmax: int) -> np.ndarray:
    """DN eigenvalues ``lambda_0..lambda_lmax`` of a radially layered ball.

    The boundary potential ``Y_lm`` produces flux ``lambda_l Y_lm``. In shell
    ``j`` the radial factor is ``r^l + a_j r^-(l+1)``; the recursion carries
    the log-derivative ``y = r f'/f`` across interfaces (flux continuity
    scales it by ``sigma_j/sigma_{j+1}``) and the scaled ratio
    ``w = a_j r^-(2l+1)``, which only shrinks between interfaces, so nothing
    overflows for large ``l``. The result is ``sigma_N y(R) / R``.

    Raises
    ------
    NumericalError
        When a recursion denominator vanishes (a complex layer contrast tuned
        to a pole); perturbing one admittivity slightly avoids it.
    """
    if lmax < 0:
        raise ConfigError("lmax must be non-negative")
    R = layers.radius
    r = np.asarray(layers.radii) / R
    s = np.asarray(layers.values, dtype=complex)
    ell = np.arange(lmax + 1, dtype=float)
    y = ell.astype(complex)
    with np.errstate(under="ignore"):
        for j in range(layers.N - 1):
            y = y * s[j] / s[j + 1]
            den = y + ell + 1.0
            if np.any(np.abs(den) < 1e-12 * (ell + 1.0)):
                raise NumericalError(f"layer recursion hit a zero denominator at interface {j + 1}")
            w = (ell - y) / den * (r[j] / r[j + 1]) ** (2 * ell + 1)
            y = (ell - (ell + 1.0) * w) / (1.0 + w)
    out = s[-1] * y / R
    out[0] = 0.0
    if layers.is_real:
        return out.real.copy()
    return out


def dn_eigenvalues_ode(layers: RadialLayers, ells, rtol: float = 1e-10) -> np.ndarray:
    """Reference DN eigenvalues from a Riccati shooting solve.

    ``y = r f'/f`` for the radial factor of ``u = f(r) Y_lm`` satisfies
    ``r y' = l(l+1) - y - y^2`` inside each shell; across an interface the
    flux continuity gives ``y+ = (sigma_-/sigma_+) y-``. Starting from
    ``y = l`` (regular solution near the origin), ``lambda = sigma_N y(R)/R``.
    """
    from scipy.integrate import solve_ivp

    R = layers.radius
    r = np.asarray(layers.radii) / R
    s = np.asarray(layers.values, dtype=complex)
    out = []
    for l in np.atleast_1d(ells):
        l = int(l)
        y = complex(l)
        for j in range(1, layers.N):
            y = y * s[j - 1] / s[j]

            def rhs(t, v, l=l):
                z = complex(v[0], v[1])
                d = (l * (l + 1) - z - z * z) / t
                return [d.real, d.imag]

            sol = solve_ivp(rhs, (r[j - 1], r[j]), [y.real, y.imag], method="DOP853",
                            rtol=rtol, atol=1e-13)
            y = complex(sol.y[0, -1], sol.y[1, -1])
        out.append(s[-1] * y / R if l > 0 else 0.0)
    out = np.asarray(out, dtype=complex)
    return out.real if layers.is_real else out


# -- zonal gap-model synthesis --------------------------------------------


def cap_coefficients(alpha: float, lmax: int) -> np.ndarray:
    """``c_l = int_cap P_l(n . x) dOmega`` for a cap of angular radius ``alpha``."""
    x = math.cos(alpha)
    P = np.empty(lmax + 2)
    P[0] = 1.0
    P[1] = x
    for l in range(1, lmax + 1):
        P[l + 1] = ((2 * l + 1) * x * P[l] - l * P[l - 1]) / (l + 1)
    c = np.empty(lmax + 1)
    c[0] = 2 * np.pi * (1 - x)
    l = np.arange(1, lmax + 1)
    c[1:] = 2 * np.pi * (P[l - 1] - P[l + 1]) / (2 * l + 1)
    return c


def legendre_series(coef: np.ndarray, x: np.ndarray, t: np.ndarray | None = None,
                    eps: float = 1e-16) -> np.ndarray:
    """``sum_l coef[l] t^l P_l(x)`` by the three-term recurrence.

    ``coef`` is 1-d over ``l`` (possibly complex); ``x`` and ``t`` broadcast.
    With ``t`` given, the sum stops once ``max|t|^l`` falls below ``eps``
    relative to the running sum.
    """
    x = np.asarray(x, dtype=float)
    coef = np.asarray(coef)
    if t is None:
        t = np.ones(())
    t = np.asarray(t, dtype=float)
    tmax = float(np.max(np.abs(t))) if t.size else 0.0
    p_prev = np.ones(np.broadcast(x, t).shape)
    out = coef[0] * p_prev
    if coef.size == 1:
        return out
    p = x * t * p_prev
    out = out + coef[1] * p
    cmax = np.abs(coef).max()
    for l in range(1, coef.size - 1):
        p, p_prev = ((2 * l + 1) * x * t * p - l * t * t * p_prev) / (l + 1), p
        out = out + coef[l + 1] * p
        if tmax < 1 and tmax ** (l + 1) * cmax * (l + 2) < eps * max(np.abs(out).max(), 1e-300):
            break
    return out


def cap_tail_fraction(alpha: float, lmax: int, lam: np.ndarray) -> float:
    """Relative truncation error of the cap-averaged self response.

    The self term ``sum_l c_l^2 (2l+1)/lambda_l`` is the slowest converging
    entry of ``Z``; the tail beyond ``lmax`` is estimated by summing to
    ``4 lmax`` with the asymptotic ``lambda_l ~ l lambda_lmax / lmax``.
    """
    c = cap_coefficients(alpha, 4 * lmax)
    l = np.arange(4 * lmax + 1)
    lam_ext = np.empty(4 * lmax + 1, dtype=complex)
    lam_ext[: lmax + 1] = lam
    lam_ext[lmax + 1:] = l[lmax + 1:] * lam[lmax] / lmax
    terms = np.abs(c[1:] ** 2 * (2 * l[1:] + 1) / lam_ext[1:])
    return float(terms[lmax:].sum() / terms.sum())


def transfer_matrix_radial(layers: RadialLayers, layout, lmax: int | None = None,
                           tail_tol: float = DEFAULT_TAIL_TOL) -> np.ndarray:
    """Gap-model transfer matrix ``Z`` (L x L, ohms) for a layered ball.

    ``Z[k, e]`` is the mean potential over cap ``k`` when unit current enters
    uniformly through cap ``e`` (and the net current leaves through the
    constant mode, which grounding removes).
    """
    if abs(layers.radius - layout.radius_domain) > 1e-9 * layout.radius_domain:
        raise ConfigError("layer radius differs from the electrode layout radius")
    alpha = layout.cap_angle
    if lmax is None:
        lmax = default_lmax(alpha)
    R = layout.radius_domain
    lam = dn_eigenvalues(layers, lmax) * R  # unit-radius eigenvalues
    tail = cap_tail_fraction(alpha, lmax, lam)
    if tail > tail_tol:
        warnings.warn(f"bandlimit {lmax} too low for caps of angle {alpha:.3g}: relative tail "
                      f"{tail:.2e} > {tail_tol:.0e}", RuntimeWarning, stacklevel=2)
    c = cap_coefficients(alpha, lmax)
    l = np.arange(lmax + 1)
    coef = np.zeros(lmax + 1, dtype=complex)
    coef[1:] = c[1:] ** 2 / lam[1:] * (2 * l[1:] + 1) / (4 * np.pi)
    if np.all(coef.imag == 0):
        coef = coef.real
    n = layout.unit_centers
    G = np.clip(n @ n.T, -1.0, 1.0)
    iu = np.triu_indices(layout.L)
    z = legendre_series(coef, G[iu])
    Z = np.zeros((layout.L, layout.L), dtype=z.dtype)
    Z[iu] = z
    Z = Z + np.triu(Z, 1).T
    return Z * R / (layout.area * c[0])


def default_lmax(alpha: float) -> int:
    """Bandlimit giving a cap self-term tail below ``1e-6`` (tail ~ (l alpha)^-2)."""
    return int(min(max(200, math.ceil(620.0 / alpha)), 40000))


def synth_voltages_radial(layers: RadialLayers, layout, patterns: CurrentPatternSet,
                          lmax: int | None = None, tail_tol: float = DEFAULT_TAIL_TOL) -> VoltageMatrix:
    """Electrode voltages of a layered ball under the gap model (grounded)."""
    if patterns.L != layout.L:
        raise ConfigError("pattern matrix and layout disagree on L")
    Z = transfer_matrix_radial(layers, layout, lmax, tail_tol)
    V = ground(Z @ patterns.C)
    return VoltageMatrix(V, _meta(layout, patterns, method="radial", lmax=lmax or default_lmax(layout.cap_angle)))


def _meta(layout, patterns, **extra) -> dict:
    return {"layout_hash": layout.layout_hash(), "L": layout.L, "K": patterns.K,
            "protocol": patterns.tag, "amplitude": patterns.amplitude, "eta": 0.0,
            "seed": None, **extra}


# -- general admittivities (finite-volume perturbation) -------------------


def homogeneous_potential(layout, gamma_b, points: np.ndarray, electrodes=None,
                          lmax: int | None = None) -> np.ndarray:
    """Interior potential of a homogeneous ball for unit current on each cap.

    Returns an array of shape ``(len(points), n_electrodes)``; the constant
    mode is dropped (zero mean over the sphere).
    """
    R = layout.radius_domain
    pts = np.asarray(points, dtype=float)
    r = np.linalg.norm(pts, axis=-1)
    if np.any(r > R * (1 + 1e-12)):
        raise ConfigError("points must lie in the ball")
    rr = r / R
    safe = np.where(r > 0, r, 1.0)
    xhat = pts / safe[:, None]
    if lmax is None:
        lmax = default_lmax(layout.cap_angle)
    c = cap_coefficients(layout.cap_angle, lmax)
    l = np.arange(lmax + 1)
    coef = np.zeros(lmax + 1)
    coef[1:] = c[1:] / l[1:] * (2 * l[1:] + 1) / (4 * np.pi)
    n = layout.unit_centers if electrodes is None else layout.unit_centers[electrodes]
    cosg = np.clip(xhat @ n.T, -1.0, 1.0)
    vals = legendre_series(coef, cosg, rr[:, None])
    return vals * (R / layout.area) / gamma_b


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("CGOEIT_WORKERS", "1")))
    except ValueError:
        return 1


def transfer_matrix_general(p: Phantom, layout, grid: GridSpec | int = 64, lmax: int | None = None,
                            tol: float = 1e-8, tail_tol: float = DEFAULT_TAIL_TOL):
    """Transfer matrix of a general phantom via the finite-volume perturbation.

    With ``K`` the stiffness of ``gamma`` and ``K_d`` that of ``gamma - gamma_b``
    on the grid, and ``phi_e`` the homogeneous potential of electrode ``e``,

        K v_e = -K_d phi_e,     Z = Z_b - a (phi^T K_d (phi + v)),

    with ``Z_b`` the analytic homogeneous matrix and ``a`` the ratio of the
    electrode area to the exact cap area. ``K_d`` vanishes away from the
    inclusions, so ``phi`` is only evaluated there.

    Returns
    -------
    Z : ndarray (L, L)
    info : dict
        Solver statistics.
    """
    from . import elliptic

    spec = grid if isinstance(grid, GridSpec) else GridSpec(int(grid), p.radius, p.radius)
    if abs(p.radius - layout.radius_domain) > 1e-9 * p.radius:
        raise ConfigError("phantom radius differs from the electrode layout radius")
    gb = p.background
    Zb = transfer_matrix_radial(RadialLayers.homogeneous(gb, p.radius), layout, lmax, tail_tol)
    info = {"grid": spec.n, "support_nodes": 0, "max_residual": 0.0}
    gamma = p.evaluate(spec.points())
    if np.all(gamma[spec.mask()] == gb):
        return Zb, info
    sysK = elliptic.assemble_conductivity(gamma, spec)
    sysD = elliptic.assemble_conductivity(gamma, spec, background=gb)
    Kd = sysD.matrix
    support = np.unique(Kd.nonzero()[0])
    info["support_nodes"] = int(support.size)
    pts = sysK.points()[support]
    phi_s = homogeneous_potential(layout, gb, pts, lmax=lmax)  # (m, L)
    Kd_ss = Kd[support][:, support]
    load = np.zeros((sysK.size, layout.L), dtype=np.result_type(Kd.dtype, phi_s.dtype))
    load[support] = -(Kd_ss @ phi_s)
    pinned = elliptic.pinned_operator(sysK)
    A, node = pinned
    solver = elliptic.LinearSolver(A, not np.iscomplexobj(A), tol, 20 * spec.n,
                                   label="perturbation solve")

    def solve(e):
        b = load[:, e].copy()
        b[node] = 0
        return solver.solve(b)

    with ThreadPoolExecutor(_workers()) as ex:
        results = list(ex.map(solve, range(layout.L)))
    V_s = np.column_stack([res[0][support] for res in results])
    info["max_residual"] = max(res[1] for res in results)
    dZ = -(phi_s.T @ (Kd_ss @ (phi_s + V_s)))
    dZ *= layout.area / layout.cap_area
    return Zb + dZ, info


def synth_voltages_general(p: Phantom, layout, patterns: CurrentPatternSet, grid: GridSpec | int = 64,
                           lmax: int | None = None, tol: float = 1e-8) -> VoltageMatrix:
    """Electrode voltages of an arbitrary phantom (gap model, grounded)."""
    if patterns.L != layout.L:
        raise ConfigError("pattern matrix and layout disagree on L")
    Z, info = transfer_matrix_general(p, layout, grid, lmax, tol)
    V = ground(Z @ patterns.C)
    return VoltageMatrix(V, _meta(layout, patterns, method="fd-perturbation", **info))


def synth_voltages(p: Phantom, layout, patterns: CurrentPatternSet, grid: GridSpec | int = 64,
                   lmax: int | None = None) -> VoltageMatrix:
    """Dispatch to the analytic route when ``p`` is radially layered."""
    try:
        layers = radial_profile(p)
    except ConfigError:
        return synth_voltages_general(p, layout, patterns, grid, lmax)
    return synth_voltages_radial(layers, layout, patterns, lmax)


# -- noise ----------------------------------------------------------------


def gaussian_streams(seed: int, K: int, size: int) -> np.ndarray:
    """Standard normal samples, one independent counter-based stream per pattern.

    Column ``j`` depends only on ``(seed, j)``: Philox generators spawned from
    one seed sequence feed a Box-Muller transform.
    """
    children = np.random.SeedSequence(seed).spawn(K)
    out = np.empty((size, K))
    m = (size + 1) // 2
    for j, ss in enumerate(children):
        u = np.random.Generator(np.random.Philox(ss)).random((2, m))
        rad = np.sqrt(-2.0 * np.log1p(-u[0]))
        ang = 2 * np.pi * u[1]
        out[:, j] = np.concatenate([rad * np.cos(ang), rad * np.sin(ang)])[:size]
    return out


def add_noise(V: VoltageMatrix, eta: float, seed: int = 0) -> VoltageMatrix:
    """Add relative Gaussian noise ``eta * mean|V^j| * N^j`` to every pattern.

    Complex voltages receive ``(N_re + i N_im)/sqrt(2)``. Data flagged as the
    homogeneous reference (``meta['reference']``) are returned unchanged.
    """
    if eta < 0:
        raise ConfigError("noise level must be non-negative")
    if eta == 0 or V.meta.get("reference", False):
        return V.with_values(V.V.copy())
    L, K = V.V.shape
    level = eta * np.mean(np.abs(V.V), axis=0)
    if np.iscomplexobj(V.V):
        N = gaussian_streams(seed, 2 * K, L)
        noise = (N[:, :K] + 1j * N[:, K:]) / np.sqrt(2)
    else:
        noise = gaussian_streams(seed, K, L)
    return V.with_values(V.V + level[None, :] * noise, eta=float(eta), seed=int(seed))


# -- voltage file format --------------------------------------------------

_HEADER = "# cgoeit voltage matrix v1"


def save_voltages(V: VoltageMatrix, path) -> None:
    """Write a voltage file: ``key: value`` header lines, then the values in
    column-major order, one entry per line (``re im`` for complex data)."""
    path = Path(path)
    meta = dict(V.meta)
    is_c = np.iscomplexobj(V.V)
    lines = [_HEADER, f"L: {V.L}", f"K: {V.K}", f"complex: {int(is_c)}"]
    for key in ("protocol", "amplitude", "eta", "seed", "layout_hash", "config_hash", "reference"):
        if key in meta and meta[key] is not None:
            lines.append(f"{key}: {meta[key]}")
    lines.append("# data")
    flat = V.V.ravel(order="F")
    if is_c:
        lines += [f"{float(z.real)!r} {float(z.imag)!r}" for z in flat.astype(complex)]
    else:
        lines += [repr(float(v)) for v in flat]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_voltages(path) -> VoltageMatrix:
    """Read a voltage file written by :func:`save_voltages` (or an external
    simulator following the same layout)."""
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# cgoeit voltage matrix"):
        raise ConfigError(f"{path}: not a voltage matrix file")
    meta, i = {}, 1
    while i < len(text) and text[i] != "# data":
        key, _, val = text[i].partition(":")
        meta[key.strip()] = val.strip()
        i += 1
    try:
        L, K, is_c = int(meta.pop("L")), int(meta.pop("K")), bool(int(meta.pop("complex", 0)))
    except KeyError as exc:
        raise ConfigError(f"{path}: missing header field {exc}") from None
    rows = [ln.split() for ln in text[i + 1:] if ln.strip()]
    if len(rows) != L * K:
        raise ConfigError(f"{path}: expected {L * K} entries ({K} columns), found {len(rows)}")
    if is_c:
        flat = np.array([complex(float(a), float(b)) for a, b in rows])
    else:
        flat = np.array([float(r[0]) for r in rows])
    for key in ("amplitude", "eta"):
        if key in meta:
            meta[key] = float(meta[key])
    if "seed" in meta:
        meta["seed"] = None if meta["seed"] == "None" else int(meta["seed"])
    if "reference" in meta:
        meta["reference"] = meta["reference"] == "True"
    meta.update(L=L, K=K)
    return VoltageMatrix(flat.reshape((L, K), order="F"), meta)
