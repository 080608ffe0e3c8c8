"""Discrete ND/DN maps from current and voltage matrices.

The applied currents are first converted to boundary current densities by
dividing by the surface area per electrode, ``a = 4 pi r^2 / L``. An
orthonormal basis ``Q`` of the density patterns is built by modified
Gram-Schmidt, ``C / a = Q S``, and the measured voltages are moved into that
basis, ``V_synth = V S^-1``. Then ``R = V_synth^* Q`` represents the ND map and
``L = R^-1`` the DN map: if a boundary potential has pattern coefficients
``p = Q^T f``, the current density at the electrodes is ``Q L p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, NumericalError

COND_LIMIT = 1e12


def mgs(C: np.ndarray, rtol: float = 1e-12):
    """Modified Gram-Schmidt factorization ``C = Q S``.

    Returns ``Q`` (orthonormal columns) and upper-triangular ``S``. Works for
    complex input (Hermitian inner product).

    Raises
    ------
    NumericalError
        When a pivot falls below ``rtol * ||C||`` (rank deficiency).
    """
    C = np.asarray(C)
    if C.ndim != 2:
        raise ConfigError("mgs expects a matrix")
    m, k = C.shape
    Q = np.array(C, dtype=np.result_type(C, float), copy=True)
    S = np.zeros((k, k), dtype=Q.dtype)
    scale = np.linalg.norm(C) if C.size else 0.0
    for j in range(k):
        for i in range(j):
            S[i, j] = np.vdot(Q[:, i], Q[:, j])
            Q[:, j] -= S[i, j] * Q[:, i]
        nrm = np.linalg.norm(Q[:, j])
        if nrm <= rtol * scale or nrm == 0:
            raise NumericalError(f"pattern matrix is rank deficient (column {j})")
        S[j, j] = nrm
        Q[:, j] /= nrm
    return Q, S


def zero_mean_columns(V: np.ndarray) -> np.ndarray:
    """Subtract the mean of every column (voltages of each pattern sum to zero)."""
    V = np.asarray(V)
    return V - V.mean(axis=0, keepdims=True)


def change_basis(V_meas: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Voltages for the orthonormal patterns: ``V_meas S^-1`` by triangular solve."""
    S = np.asarray(S)
    d = np.abs(np.diag(S))
    if d.size and (d.min() == 0 or d.min() < 1e-14 * d.max()):
        raise NumericalError("triangular factor S is singular")
    # X S = V  <=>  S^T X^T = V^T
    return solve_triangular(S, np.asarray(V_meas).T, trans="T", lower=False).T


def assemble_nd(V_synth: np.ndarray, Q: np.ndarray, conjugate: bool = True) -> np.ndarray:
    """ND matrix ``R = V_synth^* Q`` (plain transpose when ``conjugate`` is off)."""
    V_synth = np.asarray(V_synth)
    if V_synth.shape != Q.shape:
        raise ConfigError(f"voltage {V_synth.shape} and basis {Q.shape} shapes differ")
    Vt = V_synth.conj().T if conjugate else V_synth.T
    return Vt @ Q


def assemble_dn(R: np.ndarray) -> np.ndarray:
    """DN matrix ``L = R^-1`` by LU, refusing ill-conditioned ``R``."""
    R = np.asarray(R)
    c = np.linalg.cond(R)
    if not np.isfinite(c) or c > COND_LIMIT:
        raise NumericalError(f"ND matrix is near singular (condition {c:.3e})")
    return np.linalg.solve(R, np.eye(R.shape[0], dtype=R.dtype))


def gamma_best(U1, V) -> complex:
    """Best constant admittivity ``sum U U / sum U V`` (no conjugation).

    ``U1`` are the homogeneous unit-admittivity voltages, ``V`` the measured
    ones, both for the same patterns.
    """
    U1 = getattr(U1, "V", U1)
    V = getattr(V, "V", V)
    U1, V = np.asarray(U1), np.asarray(V)
    if U1.shape != V.shape:
        raise ConfigError("reference and measured voltages differ in shape")
    den = np.sum(U1 * V)
    if den == 0:
        raise NumericalError("gamma_best: zero denominator")
    g = np.sum(U1 * U1) / den
    g = complex(g)
    return g.real if g.imag == 0 else g


@dataclass(frozen=True)
class DiscreteDNMap:
    """Discrete DN map in an orthonormal pattern basis.

    Attributes
    ----------
    Q : ndarray (L, K)
    S : ndarray (K, K)
    R : ndarray (K, K)
    Lmat : ndarray (K, K)
        DN matrix, divided by ``gamma_best`` once :func:`scale_dn` is applied.
    gamma_best : complex
        Scale factor applied (1 before scaling).
    scaled : bool
    weight : float
        Surface area per electrode ``4 pi r^2 / L`` used to form densities.
    layout_hash : str
    """

    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    Lmat: np.ndarray
    gamma_best: complex = 1.0
    scaled: bool = False
    weight: float = 1.0
    layout_hash: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def L(self) -> int:
        return self.Q.shape[0]

    @property
    def K(self) -> int:
        return self.Q.shape[1]

    def boundary_operator(self) -> np.ndarray:
        """``Q Lmat Q^T``: electrode potentials to electrode current densities."""
        return self.Q @ self.Lmat @ self.Q.T

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Current densities at the electrodes for boundary potentials ``f``."""
        return self.Q @ (self.Lmat @ (self.Q.T @ f))

    def save(self, directory) -> None:
        """Dump ``Q``, ``S``, ``R`` and ``Lmat`` as text files (debugging aid)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("Q", "S", "R", "Lmat"):
            a = getattr(self, name)
            if np.iscomplexobj(a):
                np.savetxt(d / f"{name}_re.txt", a.real, fmt="%.17g")
                np.savetxt(d / f"{name}_im.txt", a.imag, fmt="%.17g")
            else:
                np.savetxt(d / f"{name}.txt", a, fmt="%.17g")


def build_dn_map(C, V, layout=None, weight: float | None = None,
                 conjugate: bool = True) -> DiscreteDNMap:
    """Assemble a :class:`DiscreteDNMap` from currents and measured voltages.

    Parameters
    ----------
    C : ndarray (L, K) or CurrentPatternSet
        Applied currents (amperes).
    V : ndarray (L, K) or VoltageMatrix
        Measured voltages; columns are re-grounded to zero mean.
    layout : ElectrodeLayout, optional
        Supplies the surface area per electrode, ``4 pi r^2 / L``.
    weight : float, optional
        Overrides the area per electrode (``1`` keeps currents as given).
    conjugate : bool
        Conjugate transpose in ``R = V_synth^* Q`` (the default) or plain
        transpose.
    """
    C = np.asarray(getattr(C, "C", C), dtype=float)
    V = np.asarray(getattr(V, "V", V))
    if C.shape != V.shape:
        raise ConfigError(f"current {C.shape} and voltage {V.shape} matrices differ in shape")
    if weight is None:
        weight = layout.surface_weight if layout is not None else 4 * np.pi / C.shape[0]
    Q, S = mgs(C / weight)
    Vs = change_basis(zero_mean_columns(V), S)
    R = assemble_nd(Vs, Q, conjugate)
    Lmat = assemble_dn(R)
    return DiscreteDNMap(Q, S, R, Lmat, 1.0, False, float(weight),
                         layout.layout_hash() if layout is not None else "",
                         {"conjugate": conjugate})


def scale_dn(m: DiscreteDNMap, gamma) -> DiscreteDNMap:
    """Scaled DN map ``Lmat / gamma`` (the map of ``gamma_true / gamma``)."""
    if m.scaled:
        raise ConfigError("DN map is already scaled")
    if gamma == 0:
        raise NumericalError("cannot scale by zero")
    g = complex(gamma)
    g = g.real if g.imag == 0 else g
    return replace(m, Lmat=m.Lmat / g, gamma_best=g, scaled=True)


def estimate_self_term(m_ref: DiscreteDNMap, layout) -> float:
    """Electrode spreading term of a unit homogeneous reference ND matrix.

    Small caps carrying uniform current add a nearly constant self term
    ``s I`` to ``R`` that the continuum ND map lacks. On the degree-one
    patterns (electrode coordinates) the continuum ND eigenvalue is ``r``, so
    ``s`` is the mean Rayleigh quotient of ``R`` there minus ``r``.
    """
    if m_ref.scaled:
        raise ConfigError("estimate the self term on the unscaled reference map")
    P = m_ref.Q.T @ layout.unit_centers
    rq = [np.real(P[:, i] @ m_ref.R @ P[:, i]) / (P[:, i] @ P[:, i]) for i in range(3)]
    return float(np.mean(rq) - layout.radius_domain)


def remove_self_term(m: DiscreteDNMap, s: float, gamma=1.0) -> DiscreteDNMap:
    """``R - (s / gamma) I`` and its inverse; ``gamma`` is the admittivity near the electrodes."""
    if m.scaled:
        raise ConfigError("remove the self term before scaling")
    g = complex(gamma)
    if m.meta.get("conjugate", True):
        g = g.conjugate()      # R = V^* Q carries conjugated voltages
    g = g.real if g.imag == 0 else g
    R = m.R - (s / g) * np.eye(m.K)
    return replace(m, R=R, Lmat=assemble_dn(R), meta={**m.meta, "self_term": str(s / g)})


def dn_pair(C, V, U1, layout, self_term: bool = True, conjugate: bool = True):
    """Scaled measured and reference DN maps ready for reconstruction.

    ``V`` are the measured voltages, ``U1`` the unit homogeneous reference.
    With ``self_term`` the electrode spreading term is removed from both maps
    (scaled by ``gamma_best`` for the measured one) before inversion.
    """
    gb = gamma_best(U1, V)
    m1 = build_dn_map(C, U1, layout, conjugate=conjugate)
    mg = build_dn_map(C, V, layout, conjugate=conjugate)
    if self_term:
        s = estimate_self_term(m1, layout)
        m1 = remove_self_term(m1, s)
        mg = remove_self_term(mg, s, gb)
    return scale_dn(mg, gb), scale_dn(m1, 1.0)


def difference_operator(map_g: DiscreteDNMap, map_1: DiscreteDNMap) -> np.ndarray:
    """``Q (L_gamma - L_1) Q^T`` after checking the two maps are compatible."""
    if not (map_g.scaled and map_1.scaled):
        raise ConfigError("both DN maps must be scaled (use scale_dn, with 1 for the reference)")
    if map_g.Q.shape != map_1.Q.shape or not np.allclose(map_g.Q, map_1.Q, rtol=0, atol=1e-12):
        raise ConfigError("DN maps were built from different current patterns")
    if map_g.layout_hash and map_1.layout_hash and map_g.layout_hash != map_1.layout_hash:
        raise ConfigError("DN maps were built on different electrode layouts")
    if not np.isclose(map_g.weight, map_1.weight):
        raise ConfigError("DN maps use different surface weights")
    Q = map_g.Q
    return Q @ (map_g.Lmat - map_1.Lmat) @ Q.T
