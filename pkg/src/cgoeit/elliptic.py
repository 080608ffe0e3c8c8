"""Finite-difference solvers on the ball embedded in a Cartesian grid.

Two problems are handled on the nodes of a :class:`~cgoeit.grid.GridSpec`
lying in the ball:

* the conductivity equation ``div(gamma grad u) = 0`` with Neumann data, as a
  node-centred finite-volume scheme (harmonic-mean face coefficients, natural
  no-flux condition across the staircase boundary, boundary current entering
  through the exposed faces). Sphere flux data are moved onto the faces with
  a local quadratic fit (:class:`NeumannBoundary`), which keeps the scheme
  second order despite the staircase;
* the Schrödinger problem ``(-Lap + q) u = 0`` with Dirichlet data, using the
  seven-point Laplacian and linear ghost-node extrapolation to the sphere,
  which keeps the matrix symmetric.

Real symmetric positive systems are solved by CG, everything else by
BiCGStab (GMRES as a fallback); both are preconditioned by smoothed
aggregation AMG built on the real part of the operator.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, GeometryError, SolverError
from .grid import GridSpec, VolumeGrid

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
NEAR_SINGULAR_GAIN = 100.0
AMG_SEED = 0
_AXES = np.eye(3, dtype=int)


@dataclass
class FDSystem:
    """Sparse system on the ball nodes of a grid.

    Attributes
    ----------
    spec : GridSpec
    mask : ndarray of bool
        Nodes carrying an unknown.
    index : ndarray of int
        Unknown number per node, ``-1`` elsewhere.
    matrix : scipy.sparse.csr_matrix
    rhs : ndarray
        Load from boundary data (zero for the conductivity operator).
    kind : str
        ``"conductivity"`` or ``"schrodinger"``.
    """

    spec: GridSpec
    mask: np.ndarray
    index: np.ndarray
    matrix: sp.csr_matrix
    rhs: np.ndarray
    kind: str
    info: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def points(self) -> np.ndarray:
        return self.spec.points()[self.mask]

    def to_grid(self, u: np.ndarray, outside=0.0) -> VolumeGrid:
        vals = np.full((self.spec.n,) * 3, outside, dtype=np.result_type(u, complex))
        vals[self.mask] = u
        return VolumeGrid(self.spec, vals)


def _index(mask: np.ndarray) -> np.ndarray:
    idx = np.full(mask.shape, -1, dtype=np.int64)
    idx[mask] = np.arange(int(mask.sum()))
    return idx


def _neighbour_pairs(mask: np.ndarray, axis: int):
    """Flat node pairs (i, i + e_axis) with both nodes in ``mask``."""
    sl_lo = [slice(None)] * 3
    sl_hi = [slice(None)] * 3
    sl_lo[axis] = slice(0, -1)
    sl_hi[axis] = slice(1, None)
    both = mask[tuple(sl_lo)] & mask[tuple(sl_hi)]
    n = mask.shape[0]
    flat = np.arange(n**3).reshape(mask.shape)
    return flat[tuple(sl_lo)][both], flat[tuple(sl_hi)][both]


def _coefficient_array(coef, spec: GridSpec) -> np.ndarray:
    if isinstance(coef, VolumeGrid):
        if coef.spec.n != spec.n:
            raise ConfigError("coefficient grid does not match the solver grid")
        coef = coef.values
    coef = np.asarray(coef)
    if coef.ndim == 0:
        coef = np.full((spec.n,) * 3, coef)
    if coef.shape != (spec.n,) * 3:
        raise ConfigError(f"coefficient must have shape {(spec.n,) * 3}")
    return coef


def face_coefficients(gamma: np.ndarray, mask: np.ndarray):
    """Harmonic-mean face admittivities for the three axis directions.

    Returns a list of ``(i, j, gamma_f)`` triples of flat node indices.
    """
    g = gamma.ravel()
    out = []
    for ax in range(3):
        i, j = _neighbour_pairs(mask, ax)
        gi, gj = g[i], g[j]
        out.append((i, j, 2.0 * gi * gj / (gi + gj)))
    return out


def _assemble_faces(faces, index, size, h, shift=0.0) -> sp.csr_matrix:
    """Stiffness matrix ``sum_f (c_f - shift) h (e_i - e_j)(e_i - e_j)^T``."""
    rows, cols, vals = [], [], []
    for i, j, c in faces:
        c = (c - shift) * h
        keep = c != 0
        a, b, c = index.ravel()[i[keep]], index.ravel()[j[keep]], c[keep]
        rows += [a, b, a, b]
        cols += [a, b, b, a]
        vals += [c, c, -c, -c]
    if not rows:
        return sp.csr_matrix((size, size))
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(size, size))
    return A.tocsr()


def assemble_conductivity(gamma, spec: GridSpec | None = None, background=None) -> FDSystem:
    """Finite-volume stiffness matrix of ``-div(gamma grad .)`` on the ball.

    With ``background`` given, the face coefficients are ``gamma_f - background``,
    which yields the (sparse, interior-supported) perturbation operator.
    """
    if spec is None:
        if not isinstance(gamma, VolumeGrid):
            raise ConfigError("spec required when gamma is an array")
        spec = gamma.spec
    g = _coefficient_array(gamma, spec)
    if np.any(g[spec.mask()].real <= 0):
        raise ConfigError("admittivity must have positive real part in the ball")
    mask = spec.mask()
    index = _index(mask)
    faces = face_coefficients(g, mask)
    A = _assemble_faces(faces, index, int(mask.sum()), spec.h,
                        shift=0.0 if background is None else complex(background))
    if not np.iscomplexobj(g) or np.all(g.imag == 0):
        A = A.real.tocsr()
    A.eliminate_zeros()
    return FDSystem(spec, mask, index, A, np.zeros(A.shape[0]), "conductivity")


def boundary_faces(spec: GridSpec):
    """Exposed faces of the staircase ball.

    Returns
    -------
    node : ndarray of int
        Unknown number of the inside node owning the face.
    normal : ndarray, shape (m, 3)
        Outward axis direction of the face.
    xhat : ndarray, shape (m, 3)
        Unit vector through the face centre.
    weight : ndarray
        ``h^2 max(s . xhat, 0)``. A sphere patch ``dA`` is covered by faces of
        normal ``s`` with total area ``dA (s . n)_+``, so weighting a normal
        flux by ``s . n`` again conserves the patch current exactly.
    """
    mask = spec.mask()
    index = _index(mask)
    pts = spec.points()
    nodes, normals, centres = [], [], []
    for ax in range(3):
        for sign in (1, -1):
            shifted = np.roll(mask, -sign, axis=ax)
            edge = [slice(None)] * 3
            edge[ax] = -1 if sign == 1 else 0
            shifted[tuple(edge)] = False
            exposed = mask & ~shifted
            s = sign * _AXES[ax]
            nodes.append(index[exposed])
            normals.append(np.repeat(s[None, :], exposed.sum(), axis=0))
            centres.append(pts[exposed] + 0.5 * spec.h * s)
    node = np.concatenate(nodes)
    normal = np.concatenate(normals).astype(float)
    c = np.concatenate(centres)
    xhat = c / np.linalg.norm(c, axis=1, keepdims=True)
    weight = spec.h**2 * np.maximum(np.sum(normal * xhat, axis=1), 0.0)
    return node, normal, xhat, weight


def electrode_faces(spec: GridSpec, layout):
    """Exposed faces assigned to each electrode cap.

    Returns a list (one entry per electrode) of ``(face, weight)`` arrays, with
    ``face`` indexing the output of :func:`boundary_faces` and the weights
    normalized to sum to one.
    """
    _, _, xhat, weight = boundary_faces(spec)
    cosang = xhat @ layout.unit_centers.T
    out = []
    for e in range(layout.L):
        sel = np.flatnonzero((cosang[:, e] >= np.cos(layout.cap_angle)) & (weight > 0))
        if sel.size == 0:
            raise GeometryError(f"electrode {e} covers no boundary face at n={spec.n}; "
                                "refine the grid or enlarge the electrodes")
        w = weight[sel]
        out.append((sel, w / w.sum()))
    return out


_FIT_OFFSETS = np.array([(a, b, c) for a in range(-2, 3) for b in range(-2, 3) for c in range(-2, 3)])


def _quadratic_basis(p: np.ndarray) -> np.ndarray:
    x, y, z = np.moveaxis(p, -1, 0)
    return np.stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, x * z, y * z], -1)


def _quadratic_gradient(p: np.ndarray) -> np.ndarray:
    """Gradient of each quadratic basis function at ``p``, shape ``(..., 3, 10)``."""
    x, y, z = np.moveaxis(p, -1, 0)
    o, e = np.zeros_like(x), np.ones_like(x)
    gx = [o, e, o, o, 2 * x, o, o, y, z, o]
    gy = [o, o, e, o, o, 2 * y, o, x, o, z]
    gz = [o, o, o, e, o, o, 2 * z, o, x, y]
    return np.stack([np.stack(g, -1) for g in (gx, gy, gz)], -2)


@dataclass
class NeumannBoundary:
    """Boundary closure turning sphere flux data into face currents.

    A face of normal ``s`` centred at ``c`` carries ``h^2 gamma(c) grad u(c).s``.
    Splitting ``grad u`` at the sphere point ``xhat`` into the prescribed
    normal part and a tangential part, and moving from ``xhat`` to ``c``, both
    taken from a local least-squares quadratic of the nodal solution, gives

        h^2 [r g (n.s) + gamma(c) (grad q(c).s - (grad q(xhat).n)(n.s))],

    with ``r = gamma(c) / gamma(xhat)``. The first term is the load, the rest
    a (nonsymmetric) correction to the operator. Without it the staircase
    limits the scheme to first order.

    Attributes
    ----------
    node, normal, xhat, weight
        As returned by :func:`boundary_faces`.
    ratio : ndarray
        ``gamma(c) / gamma(xhat)`` per face.
    correction : scipy.sparse.csr_matrix
        Node currents of the correction as a function of the unknowns.
    trace : scipy.sparse.csr_matrix
        Fitted value of the solution at each ``xhat``.
    wnode : ndarray
        Boundary weight per node, used to spread current defects.
    """

    node: np.ndarray
    normal: np.ndarray
    xhat: np.ndarray
    weight: np.ndarray
    ratio: np.ndarray
    correction: sp.csr_matrix
    trace: sp.csr_matrix
    wnode: np.ndarray

    def face_load(self, density: np.ndarray, size: int) -> np.ndarray:
        """Node load for a current density sampled at the face points."""
        dens = np.asarray(density) * self.weight * self.ratio
        load = np.zeros(size, dtype=dens.dtype)
        np.add.at(load, self.node, dens)
        return load

    def project(self, load: np.ndarray) -> np.ndarray:
        """Remove the net current of ``load`` along the boundary weights."""
        return load - load.sum(axis=0) * (self.wnode / self.wnode.sum()).reshape(
            (-1,) + (1,) * (np.ndim(load) - 1))


def neumann_boundary(system: FDSystem, gamma) -> NeumannBoundary:
    """Build the :class:`NeumannBoundary` of a conductivity system."""
    spec = system.spec
    h = spec.h
    g = _coefficient_array(gamma, spec)
    node, normal, xhat, weight = boundary_faces(spec)
    xhat = xhat * spec.radius
    owners, inv = np.unique(node, return_inverse=True)
    ijk = np.argwhere(system.mask)[owners]
    nb = ijk[:, None, :] + _FIT_OFFSETS[None]
    ok = np.all((nb >= 0) & (nb < spec.n), axis=2)
    nb = np.clip(nb, 0, spec.n - 1)
    ok &= system.mask[nb[..., 0], nb[..., 1], nb[..., 2]]
    cols = np.where(ok, system.index[nb[..., 0], nb[..., 1], nb[..., 2]], 0)
    # weighted least squares in units of h; rows outside the ball get weight 0
    A = _quadratic_basis(_FIT_OFFSETS.astype(float))
    P = np.linalg.pinv(A[None] * ok[..., None]) * ok[:, None, :]  # (m, 10, 125)
    base = system.points()[node]
    pc = normal * 0.5  # face centre relative to its node, in units of h
    px = (xhat - base) / h
    Pf, cf = P[inv], cols[inv]
    gc = np.einsum("fkb,fbj->fkj", _quadratic_gradient(pc), Pf) / h
    gx = np.einsum("fkb,fbj->fkj", _quadratic_gradient(px), Pf) / h
    gvals = g[system.mask][cf]
    gam_c = np.einsum("fb,fbj,fj->f", _quadratic_basis(pc), Pf, gvals)
    gam_x = np.einsum("fb,fbj,fj->f", _quadratic_basis(px), Pf, gvals)
    sn = np.sum(normal * xhat, axis=1) / spec.radius
    nrm = xhat / spec.radius
    coef = (np.einsum("fkj,fk->fj", gc, normal)
            - np.einsum("fkj,fk->fj", gx, nrm) * sn[:, None]) * (h**2 * gam_c)[:, None]
    F, size = node.size, system.size
    rows = np.repeat(np.arange(F), cf.shape[1])
    C = sp.csr_matrix((coef.ravel(), (rows, cf.ravel())), shape=(F, size))
    S = sp.csr_matrix((np.ones(F), (node, np.arange(F))), shape=(size, F))
    trace = sp.csr_matrix((np.einsum("fb,fbj->fj", _quadratic_basis(px), Pf).ravel(),
                           (rows, cf.ravel())), shape=(F, size))
    wnode = np.zeros(size)
    np.add.at(wnode, node, weight)
    correction = (S @ C).tocsr()
    if not np.iscomplexobj(g) or np.all(g.imag == 0):
        correction = correction.real.tocsr()
    return NeumannBoundary(node, normal, xhat / spec.radius, weight, gam_c / gam_x,
                           correction, trace.tocsr(), wnode)


def electrode_load(system: FDSystem, layout, currents: np.ndarray, boundary=None) -> np.ndarray:
    """Node load vectors for electrode currents (shape ``(L,)`` or ``(L, K)``).

    Current enters uniformly over each cap; with ``boundary`` the face
    currents carry the admittivity ratio of :class:`NeumannBoundary`.
    """
    currents = np.asarray(currents)
    single = currents.ndim == 1
    C = currents[:, None] if single else currents
    node = boundary_faces(system.spec)[0] if boundary is None else boundary.node
    ratio = 1.0 if boundary is None else boundary.ratio
    dens = np.zeros((node.size, C.shape[1]), dtype=np.result_type(C, float, ratio))
    for e, (face, w) in enumerate(electrode_faces(system.spec, layout)):
        dens[face] += w[:, None] * C[e][None, :]
    if boundary is not None:
        dens *= ratio[:, None]
    b = np.zeros((system.size, C.shape[1]), dtype=dens.dtype)
    np.add.at(b, node, dens)
    if boundary is not None:
        b = boundary.project(b)
    return b[:, 0] if single else b


def electrode_means(system: FDSystem, layout, u: np.ndarray, boundary=None) -> np.ndarray:
    """Cap averages of a node field (the electrode voltages of ``u``).

    The trace is taken at the owning nodes, or on the sphere itself through
    the quadratic fit when ``boundary`` is given.
    """
    u = np.asarray(u)
    if boundary is not None:
        tr = boundary.trace @ u
    else:
        tr = u[boundary_faces(system.spec)[0]]
    return np.array([np.tensordot(w, tr[face], axes=(0, 0))
                     for face, w in electrode_faces(system.spec, layout)])


# -- linear algebra -------------------------------------------------------


def _amg_preconditioner(A_real, complex_input: bool = False):
    # pyamg needs canonical CSR (sorted indices, no duplicates)
    A_real = sp.csr_matrix(A_real, dtype=float, copy=True)
    A_real.sum_duplicates()
    A_real.sort_indices()
    # pyamg estimates spectral radii from the global numpy RNG; pin it so the
    # hierarchy (and every solve) is reproducible, then restore the caller's state
    state = np.random.get_state()
    np.random.seed(AMG_SEED)
    try:
        ml = pyamg.smoothed_aggregation_solver(A_real, symmetry="symmetric", max_coarse=500)
    finally:
        np.random.set_state(state)
    return ml.aspreconditioner(cycle="V")


class LinearSolver:
    """Krylov solver with an AMG preconditioner built once for many right-hand sides.

    Parameters
    ----------
    A : sparse matrix
    spd : bool
        Use CG (real symmetric positive definite); otherwise BiCGStab with a
        GMRES retry.
    precond_matrix : sparse matrix, optional
        Real SPD matrix on which the AMG preconditioner is built (default: the
        real part of ``A``).
    """

    def __init__(self, A, spd: bool, tol: float = DEFAULT_TOL, maxiter: int = 1000,
                 precond_matrix=None, label: str = "system"):
        self.A = sp.csr_matrix(A)
        self.spd = spd and not np.iscomplexobj(self.A)
        self.tol = tol
        self.maxiter = maxiter
        self.label = label
        P = precond_matrix if precond_matrix is not None else self.A.real
        self._M_real = _amg_preconditioner(P, False)
        self._M_complex = None
        self.history = []

    def _M(self, is_complex):
        if not is_complex:
            return self._M_real
        if self._M_complex is None:
            M = self._M_real

            def apply(x):
                return (M.matvec(np.ascontiguousarray(x.real))
                        + 1j * M.matvec(np.ascontiguousarray(x.imag)))

            self._M_complex = spla.LinearOperator(self.A.shape, matvec=apply, dtype=complex)
        return self._M_complex

    def solve(self, b):
        """Return ``(x, relative residual)``; raises :class:`SolverError`."""
        A, tol, maxiter = self.A, self.tol, self.maxiter
        b = np.ascontiguousarray(b)
        is_complex = np.iscomplexobj(A) or np.iscomplexobj(b)
        bnorm = np.linalg.norm(b)
        if bnorm == 0:
            return np.zeros(b.shape, dtype=complex if is_complex else float), 0.0
        M = self._M(is_complex)
        iters = [0]

        def count(_):
            iters[0] += 1

        if self.spd and not is_complex:
            x, _ = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M, callback=count)
        else:
            x, _ = spla.bicgstab(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M, callback=count)
            res = np.linalg.norm(A @ x - b) / bnorm
            if not np.isfinite(res) or res > tol:
                x0 = x if np.all(np.isfinite(x)) else None
                x, _ = spla.gmres(A, b, x0=x0, rtol=tol, atol=0.0, restart=60, maxiter=maxiter,
                                  M=M, callback=count, callback_type="pr_norm")
        res = float(np.linalg.norm(A @ x - b) / bnorm)
        self.history.append((iters[0], res))
        if not np.isfinite(res) or res > 10 * tol:
            raise SolverError(f"{self.label} did not converge", residual=res, iterations=iters[0])
        return x, res


def solve_linear(A, b, spd: bool, tol: float = DEFAULT_TOL, maxiter: int = 1000,
                 precond_matrix=None, label="system"):
    """One-shot preconditioned Krylov solve, see :class:`LinearSolver`."""
    return LinearSolver(A, spd, tol, maxiter, precond_matrix, label).solve(b)


def _pin(A: sp.csr_matrix, b: np.ndarray, node: int):
    """Fix the additive constant of a pure Neumann system at ``node``."""
    A = A.tolil(copy=True)
    A[node, :] = 0
    A[:, node] = 0
    A[node, node] = 1.0
    b = np.array(b, copy=True)
    b[node] = 0
    return A.tocsr(), b


def pinned_operator(system: FDSystem, node: int | None = None):
    """Pure-Neumann operator with one node pinned, plus the pinned index."""
    if node is None:
        node = int(np.argmax(np.linalg.norm(system.points(), axis=1)))
    A, _ = _pin(system.matrix, np.zeros(system.size), node)
    return A, node


def solve_neumann(system: FDSystem, load: np.ndarray, tol: float = DEFAULT_TOL,
                  maxiter: int | None = None, pinned=None, boundary=None) -> np.ndarray:
    """Solve ``K u = load`` for one or several load vectors; zero-mean output.

    With a :class:`NeumannBoundary` the system is ``(K - C) u = load``, ``C``
    the boundary correction with its net current spread back over the
    boundary nodes so that constants stay in the left null space. It is
    solved by GMRES preconditioned with the AMG of ``K``.
    """
    load = np.asarray(load)
    single = load.ndim == 1
    B = load[:, None] if single else load
    scale = np.abs(B).sum(axis=0)
    scale[scale == 0] = 1.0
    if np.any(np.abs(B.sum(axis=0)) > 1e-10 * scale):
        raise ConfigError("incompatible Neumann data: boundary currents do not sum to zero")
    A, node = pinned if pinned is not None else pinned_operator(system)
    maxiter = maxiter or 20 * system.spec.n
    solver = LinearSolver(A, not np.iscomplexobj(A), tol, maxiter, label="conductivity solve")
    if boundary is not None:
        K, C = system.matrix, boundary.correction
        spread = boundary.wnode / boundary.wnode.sum()
        dtype = np.result_type(K.dtype, C.dtype, B.dtype, float)

        def matvec(x):
            x = np.ravel(x)
            xp = x.copy()
            xp[node] = 0
            Cx = C @ xp
            y = K @ xp - Cx + spread * Cx.sum()
            y[node] = x[node]
            return y

        op = spla.LinearOperator(A.shape, matvec=matvec, dtype=dtype)
        M = solver._M(np.iscomplexobj(op) or np.iscomplexobj(B))
    U = np.zeros(B.shape, dtype=np.result_type(A.dtype, B.dtype, float))
    for k in range(B.shape[1]):
        b = B[:, k].copy()
        b[node] = 0
        if boundary is None:
            u, _ = solver.solve(b)
        else:
            bn = np.linalg.norm(b)
            if bn == 0:
                continue
            u, _ = spla.gmres(op, b, rtol=tol, atol=0.0, restart=60, maxiter=maxiter, M=M)
            res = float(np.linalg.norm(op @ u - b) / bn)
            if not np.isfinite(res) or res > 10 * tol:
                raise SolverError("corrected conductivity solve did not converge", residual=res)
        U[:, k] = u - u.mean()
    return U[:, 0] if single else U


def solve_conductivity(gamma: VolumeGrid, flux, layout=None, tol: float = DEFAULT_TOL,
                       maxiter: int | None = None, corrected: bool = True) -> VolumeGrid:
    """Potential of ``div(gamma grad u) = 0`` with Neumann boundary data.

    Parameters
    ----------
    gamma : VolumeGrid
        Admittivity on the solver grid.
    flux : ndarray or callable
        Either a node load vector (net current entering through each node,
        summing to zero), electrode currents of shape ``(L,)`` when ``layout``
        is given, or a callable ``g(xhat)`` giving the current density on the
        sphere.
    corrected : bool
        Apply the second-order :class:`NeumannBoundary` closure to sphere
        data (callable or electrode currents). A node load is used as is.
    """
    system = assemble_conductivity(gamma)
    bnd = None
    if layout is not None or callable(flux):
        bnd = neumann_boundary(system, gamma) if corrected else None
    if layout is not None:
        load = electrode_load(system, layout, flux, boundary=bnd)
    elif callable(flux):
        node, _, xhat, weight = boundary_faces(gamma.spec)
        dens = np.asarray(flux(xhat))
        if bnd is not None:
            load = bnd.project(bnd.face_load(dens, system.size))
        else:
            load = np.zeros(system.size, dtype=dens.dtype)
            wnode = np.zeros(system.size)
            np.add.at(load, node, dens * weight)
            np.add.at(wnode, node, weight)
            # remove the quadrature defect in the net current
            load = load - load.sum() * wnode / wnode.sum()
    else:
        load = np.asarray(flux)
        if load.shape != (system.size,):
            raise ConfigError(f"load vector must have length {system.size}")
    u = solve_neumann(system, load, tol, maxiter, boundary=bnd)
    out = system.to_grid(u)
    out.meta["kind"] = "potential"
    return out


# -- Schrödinger ----------------------------------------------------------


def assemble_schrodinger(q, spec: GridSpec, boundary=1.0) -> FDSystem:
    """Matrix of ``-Lap + q`` with Dirichlet data on the sphere.

    Nodes strictly inside the ball are unknowns. A neighbour on or outside the
    sphere is replaced by a ghost value extrapolated linearly through the
    boundary point at fraction ``theta`` of the spacing.
    """
    q = _coefficient_array(q, spec)
    R = spec.radius
    h = spec.h
    pts = spec.points()
    r2 = np.sum(pts * pts, axis=-1)
    mask = r2 < R**2 * (1 - 1e-12)
    index = _index(mask)
    size = int(mask.sum())
    flat_idx = index.ravel()
    diag = np.full(size, 6.0 / h**2, dtype=complex) + q[mask]
    rhs = np.zeros(size, dtype=complex)
    rows, cols = [], []
    x_in = pts[mask]
    for ax in range(3):
        i, j = _neighbour_pairs(mask, ax)
        rows += [flat_idx[i], flat_idx[j]]
        cols += [flat_idx[j], flat_idx[i]]
        for sign in (1, -1):
            nb = np.roll(mask, -sign, axis=ax)
            edge = [slice(None)] * 3
            edge[ax] = -1 if sign == 1 else 0
            nb[tuple(edge)] = False
            cut = mask[mask] & ~nb[mask]
            xs = x_in[cut]
            s = sign * _AXES[ax]
            p = xs @ s
            t = -p + np.sqrt(np.maximum(p * p - np.sum(xs * xs, axis=1) + R**2, 0.0))
            theta = np.clip(t / h, 1e-6, 1.0)
            xb = xs + (theta * h)[:, None] * s
            ub = boundary(xb) if callable(boundary) else np.full(len(xs), boundary, dtype=complex)
            diag[cut] += (1.0 / theta - 1.0) / h**2
            rhs[cut] += ub / (theta * h**2)
    off = np.concatenate(rows)
    A = sp.coo_matrix((np.full(off.size, -1.0 / h**2), (off, np.concatenate(cols))),
                      shape=(size, size)).tocsr()
    A = A + sp.diags(diag)
    if np.all(diag.imag == 0):
        A = A.real.tocsr()
    if np.all(rhs.imag == 0):
        rhs = rhs.real
    return FDSystem(spec, mask, index, A.tocsr(), rhs, "schrodinger",
                    info={"laplacian_diag": 6.0 / h**2})


def solve_schrodinger(q, spec: GridSpec | None = None, boundary=1.0, tol: float = DEFAULT_TOL,
                      maxiter: int | None = None) -> VolumeGrid:
    """Solve ``(-Lap + q) u = 0`` in the ball with ``u = boundary`` on the sphere.

    ``q`` may be complex; values outside the ball are ignored. Nodes outside
    the open ball carry the boundary value in the output.

    Raises
    ------
    SolverError
        When the Krylov solver stalls, which typically means ``q`` is close
        to a Dirichlet eigenvalue of ``-Lap``; no regularization is attempted.

    Warns
    -----
    RuntimeWarning
        When the solution exceeds its boundary data by more than
        ``NEAR_SINGULAR_GAIN`` (with ``q >= 0`` the ratio is at most one).
    """
    if spec is None:
        if not isinstance(q, VolumeGrid):
            raise ConfigError("spec required when q is an array")
        spec = q.spec
    qa = _coefficient_array(q, spec)
    qa = np.where(spec.mask(), qa, 0.0)
    system = assemble_schrodinger(qa, spec, boundary)
    A = system.matrix
    qin = qa[system.mask]
    real_pos = np.all(np.imag(qin) == 0) and np.all(np.real(qin) >= 0)
    P = None
    if not real_pos:
        P = sp.csr_matrix(A.real) - sp.diags(np.real(qin) - np.maximum(np.real(qin), 0.0))
    maxiter = maxiter or 20 * spec.n
    u, res = solve_linear(A, system.rhs, real_pos, tol, maxiter, precond_matrix=P,
                          label="Schrodinger solve (q may be near a Dirichlet eigenvalue)")
    vals = np.full((spec.n,) * 3, 0.0 if callable(boundary) else boundary, dtype=complex)
    if callable(boundary):
        outside = ~system.mask
        vals[outside] = boundary(spec.points()[outside])
    vals[system.mask] = u
    if not np.iscomplexobj(u) and np.all(vals.imag == 0):
        vals = vals.real
    data = np.abs(vals[~system.mask]).max() if np.any(~system.mask) else 1.0
    umax = float(np.abs(u).max()) if u.size else 0.0
    gain = umax / data if data > 0 else (0.0 if umax == 0 else float("inf"))
    if gain > NEAR_SINGULAR_GAIN:
        warnings.warn(f"Schrodinger solution is {gain:.3g} times its boundary data; "
                      "q is probably close to a Dirichlet eigenvalue", RuntimeWarning, stacklevel=2)
    return VolumeGrid(spec, vals, meta={"kind": "schrodinger", "residual": res, "gain": gain})
