"""Stiffness assembly and the Schur-complement realization of the singular
diffusion form.

Outer-boundary dofs are eliminated by row/column deletion, encoding the
homogeneous Dirichlet condition.  The quadratic form on the support dofs
is the Schur complement over the gap block,

    A~ = A_SS - A_SI A_II^{-1} A_IS,

applied matrix-free (one preconditioned CG solve on the gap per apply) or
through a cached dense matrix when the support block is small enough.
Applying A~ realizes the energy of the discretely harmonic extension of
support data, which is the discrete lift behind the measure form.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import SolverDiverged, TooLargeForDense

log = logging.getLogger("gapdiff.solve")

# Local P1 stiffness of the two right-triangle orientations (h-independent
# in 2-D).  Lower = (SW, SE, NE), upper = (SW, NE, NW).
K_LOWER = 0.5 * np.array([[1.0, -1.0, 0.0],
                          [-1.0, 2.0, -1.0],
                          [0.0, -1.0, 1.0]])
K_UPPER = 0.5 * np.array([[1.0, 0.0, -1.0],
                          [0.0, 1.0, -1.0],
                          [-1.0, -1.0, 2.0]])

DEFAULT_DENSE_THRESHOLD = 2000


@dataclass
class SolverOptions:
    """Inner solver configuration for gap solves.

    ``max_iter`` of None selects 10 * sqrt(n) + 500 for an n-dof system.
    """

    tol: float = 1e-12
    max_iter: int | None = None
    dense_threshold: int = DEFAULT_DENSE_THRESHOLD


def assemble_global_stiffness(mesh):
    """P1 stiffness matrix over all mesh vertices (no boundary handling)."""
    tri = mesh.triangles
    n_tri = len(tri)
    elem = np.empty((n_tri, 3, 3))
    elem[0::2] = K_LOWER
    elem[1::2] = K_UPPER
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    A = sp.coo_matrix((elem.ravel(), (rows, cols)),
                      shape=(mesh.n_vertices, mesh.n_vertices)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


@dataclass
class StiffnessMatrix:
    """Dirichlet-eliminated stiffness with its support/gap block split.

    ``matrix`` is indexed by the free (non-boundary) vertices in ascending
    vertex order; ``pos_support`` and ``pos_gap`` give the rows of the
    partition's S and I dofs inside that ordering.
    """

    matrix: sp.csr_matrix
    free: np.ndarray
    partition: object
    pos_support: np.ndarray = field(repr=False, default=None)
    pos_gap: np.ndarray = field(repr=False, default=None)
    A_SS: sp.csr_matrix = field(repr=False, default=None)
    A_SI: sp.csr_matrix = field(repr=False, default=None)
    A_IS: sp.csr_matrix = field(repr=False, default=None)
    A_II: sp.csr_matrix = field(repr=False, default=None)


def assemble_stiffness(mesh, partition):
    """Assemble the stiffness of the classical energy form and eliminate
    the outer-boundary rows and columns.

    Returns a StiffnessMatrix whose S/I blocks follow ``partition``.
    """
    A = assemble_global_stiffness(mesh)
    free = np.sort(np.concatenate([partition.support, partition.gap]))
    Af = A[free][:, free].tocsr()
    Af.sum_duplicates()
    Af.sort_indices()

    pos = np.full(mesh.n_vertices, -1, dtype=np.int64)
    pos[free] = np.arange(len(free))
    pos_S = pos[partition.support]
    pos_I = pos[partition.gap]

    A_SS = Af[pos_S][:, pos_S].tocsr()
    A_SI = Af[pos_S][:, pos_I].tocsr()
    A_IS = Af[pos_I][:, pos_S].tocsr()
    A_II = Af[pos_I][:, pos_I].tocsr()
    return StiffnessMatrix(matrix=Af, free=free, partition=partition,
                           pos_support=pos_S, pos_gap=pos_I,
                           A_SS=A_SS, A_SI=A_SI, A_IS=A_IS, A_II=A_II)


def solve_spd(operator, rhs, tol=1e-12, max_iter=None, precond=None):
    """Preconditioned conjugate gradients for an SPD operator.

    Parameters
    ----------
    operator : callable or sparse/dense matrix
        Maps a vector to the operator application.
    rhs : array_like
    tol : float
        Relative residual target, ||b - Ax|| <= tol * ||b||.
    max_iter : int, optional
        Defaults to 10 * sqrt(n) + 500.
    precond : array_like, optional
        Diagonal (Jacobi) preconditioner entries.

    Returns
    -------
    numpy.ndarray

    Raises
    ------
    SolverDiverged
        When the tolerance is not met within ``max_iter`` iterations.
    """
    matvec = operator if callable(operator) else (lambda v: operator @ v)
    b = np.asarray(rhs, dtype=float)
    n = b.size
    if max_iter is None:
        max_iter = int(10.0 * np.sqrt(n)) + 500
    x = np.zeros_like(b)
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        log.info("solve iters=0 relres=0.000e+00")
        return x

    r = b.copy()
    z = r / precond if precond is not None else r.copy()
    p = z.copy()
    rz = float(r @ z)
    relres = 1.0
    for it in range(1, max_iter + 1):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0 or not np.isfinite(pAp):
            raise SolverDiverged("operator not positive definite in CG",
                                 iterations=it, relres=relres)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        relres = np.linalg.norm(r) / norm_b
        if relres <= tol:
            log.info("solve iters=%d relres=%.3e", it, relres)
            return x
        z = r / precond if precond is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverDiverged("conjugate gradients did not converge",
                         iterations=max_iter, relres=relres)


class SchurOperator:
    """Matrix-free quadratic form on the support dofs.

    Wraps the stiffness blocks; each application solves the gap system
    A_II u_I = -A_IS u_S by Jacobi-preconditioned CG and returns
    A_SS u_S + A_SI u_I.  When the support block is at most
    ``options.dense_threshold`` dofs the matrix can be cached densely and
    applications become a single matrix-vector product.
    """

    def __init__(self, stiffness, options=None):
        self.stiffness = stiffness
        self.options = options or SolverOptions()
        self._jacobi = (stiffness.A_II.diagonal()
                        if stiffness.A_II.shape[0] else None)
        self._dense = None
        self.dense_asymmetry = None

    @property
    def n_support(self):
        return self.stiffness.A_SS.shape[0]

    @property
    def n_gap(self):
        return self.stiffness.A_II.shape[0]

    @property
    def dense(self):
        return self._dense

    def harmonic_fill(self, u_support):
        """Gap values of the discretely harmonic extension of ``u_support``."""
        if self.n_gap == 0:
            return np.zeros(0)
        rhs = -(self.stiffness.A_IS @ u_support)
        return solve_spd(self.stiffness.A_II, rhs,
                         tol=self.options.tol, max_iter=self.options.max_iter,
                         precond=self._jacobi)

    def apply(self, u_support):
        if self._dense is not None:
            return self._dense @ u_support
        if self.n_gap == 0:
            return self.stiffness.A_SS @ u_support
        u_gap = self.harmonic_fill(u_support)
        return self.stiffness.A_SS @ u_support + self.stiffness.A_SI @ u_gap

    def ensure_dense(self):
        """Cache the dense form matrix when the support block is small."""
        if self._dense is None and self.n_support <= self.options.dense_threshold:
            assemble_dense_schur(self)
        return self._dense


@dataclass
class ExtendedField:
    """Full-mesh vertex field: zero on B, given on S, harmonic on I."""

    values: np.ndarray
    partition: object
    fill_residual: float = 0.0


def harmonic_extend(op, u_support):
    """Extend support data to the whole mesh by the discrete harmonic
    fill-in of the gap, with zero outer-boundary values.

    The result is the discrete version of the energy-minimizing lift of
    measure-class data into the Dirichlet space.
    """
    part = op.stiffness.partition
    u_support = np.asarray(u_support, dtype=float)
    n_total = len(part.boundary) + len(part.support) + len(part.gap)
    values = np.zeros(n_total)
    values[part.support] = u_support
    if op.n_gap:
        u_gap = op.harmonic_fill(u_support)
        values[part.gap] = u_gap
        resid = np.linalg.norm(op.stiffness.A_II @ u_gap
                               + op.stiffness.A_IS @ u_support)
    else:
        resid = 0.0
    return ExtendedField(values=values, partition=part, fill_residual=resid)


def apply_form(op, u_support):
    """Apply the Schur-complement form matrix to support data."""
    return op.apply(np.asarray(u_support, dtype=float))


def apply_generator(op, mass, u_support):
    """Apply the generator, the lumped-mass-scaled form application.

    Discretely this is M_lumped^{-1} A~ u, the operator whose quadratic
    form against the measure inner product reproduces the energy.
    """
    if np.any(mass.lumped <= 0.0):
        raise ValueError("lumped masses must be positive")
    return apply_form(op, u_support) / mass.lumped


def assemble_dense_schur(op):
    """Materialize the form matrix column by column and symmetrize it.

    Each column is one application of the matrix-free form to a unit
    vector (columns without gap coupling cost nothing: the inner solve
    sees a zero right-hand side).  The symmetrized matrix is cached on the
    operator; the measured asymmetry is logged and stored as a solver
    quality diagnostic.

    Raises
    ------
    TooLargeForDense
        When the support block exceeds ``options.dense_threshold``.
    """
    n = op.n_support
    if n > op.options.dense_threshold:
        raise TooLargeForDense(
            f"support block has {n} dofs, dense threshold is "
            f"{op.options.dense_threshold}")
    if op._dense is not None:
        return op._dense
    if op.n_gap == 0:
        dense = op.stiffness.A_SS.toarray()
        asym = 0.0
    else:
        dense = np.empty((n, n))
        e = np.zeros(n)
        for j in range(n):
            e[j] = 1.0
            dense[:, j] = op.apply(e)
            e[j] = 0.0
        asym = float(np.abs(dense - dense.T).max())
        dense = 0.5 * (dense + dense.T)
    log.info("dense schur n=%d asymmetry=%.3e", n, asym)
    op._dense = dense
    op.dense_asymmetry = asym
    return dense
