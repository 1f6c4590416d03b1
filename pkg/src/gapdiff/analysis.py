"""Spectrum and semigroup of the singular diffusion generator.

The generalized eigenproblem A~ u = lambda M u is reduced with the lumped
mass to a symmetric standard problem and solved either densely (when the
form matrix is cached) or by Lanczos iteration with full
reorthogonalization, deflation restarts, and a verification pass that
guards against missed copies of degenerate eigenvalues.  The semigroup is
stepped by backward Euler, which preserves positivity and the sup-norm
bound on this M-matrix discretization.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import SolverDiverged, TooLargeForDense, TooManyRequested
from .geometry import FLOAT_FMT
from .operators import apply_form, harmonic_extend, solve_spd

log = logging.getLogger("gapdiff.analysis")

DEFAULT_EIG_TOL = 1e-9


@dataclass
class EigenPair:
    """Eigenvalue with its unit-M-norm eigenvector and relative residual."""

    value: float
    vector: np.ndarray
    residual: float


@dataclass
class EvolutionResult:
    """Backward-Euler trajectory: states[k] approximates the field at times[k]."""

    times: np.ndarray
    states: np.ndarray
    scheme: str
    dt: float


@dataclass
class MarkovReport:
    """Worst-case positivity/contraction bookkeeping over random trials."""

    n_trials: int
    min_value: float
    max_value: float
    per_trial_min: np.ndarray
    per_trial_max: np.ndarray
    max_mass_increment: float

    @property
    def positivity_violation(self):
        if self.n_trials == 0:
            return 0.0
        return max(0.0, -self.min_value)

    @property
    def contraction_violation(self):
        if self.n_trials == 0:
            return 0.0
        return max(0.0, self.max_value - 1.0)


def _sign_normalize(vec):
    i = int(np.argmax(np.abs(vec)))
    return vec if vec[i] >= 0.0 else -vec


def _lanczos_pass(apply_b, n, rng, locked, tol, max_dim, want):
    """One Lanczos run with full reorthogonalization, deflated against the
    ``locked`` columns.

    Returns (pairs, low_converged): the converged (theta, vector) Ritz
    pairs and whether the smallest Ritz value itself converged, which is
    the certificate the caller needs about the low end of the deflated
    spectrum.
    """

    def deflate(v):
        if locked.shape[1]:
            v = v - locked @ (locked.T @ v)
        return v

    limit = min(max_dim, n - locked.shape[1])
    if limit < 1:
        return [], True

    q = deflate(rng.standard_normal(n))
    nq = np.linalg.norm(q)
    if nq < 1e-14:
        return [], False
    q /= nq

    V = np.zeros((n, limit + 1))
    V[:, 0] = q
    alphas: list[float] = []
    betas: list[float] = []
    m = 0
    while m < limit:
        w = apply_b(V[:, m])
        a = float(V[:, m] @ w)
        alphas.append(a)
        w = w - a * V[:, m]
        if m > 0:
            w = w - betas[-1] * V[:, m - 1]
        # full reorthogonalization, then deflation against locked pairs
        w = w - V[:, :m + 1] @ (V[:, :m + 1].T @ w)
        w = deflate(w)
        b = float(np.linalg.norm(w))
        m += 1
        breakdown = b < 1e-13 * max(1.0, abs(a))
        if not breakdown:
            betas.append(b)
            V[:, m] = w / b
        if breakdown or m == limit or m % 5 == 0:
            theta, s = sla.eigh_tridiagonal(np.array(alphas),
                                            np.array(betas[:m - 1]))
            beta_last = betas[m - 1] if len(betas) >= m else 0.0
            resid = np.abs(beta_last * s[m - 1, :])
            scale = np.maximum(np.abs(theta), 1e-300)
            converged = resid <= tol * scale
            n_leading = int(np.argmin(converged)) if not converged.all() \
                else len(converged)
            done = breakdown or m == limit or (
                n_leading >= 1 and (n_leading >= want or m > limit // 2))
            if done:
                idx = np.where(converged)[0]
                vecs = V[:, :m] @ s[:, idx]
                return list(zip(theta[idx], vecs.T)), bool(converged[0])
    return [], False


def _lanczos_smallest(apply_b, n, k, seed, tol, max_dim=500, max_restarts=24):
    """Smallest k eigenpairs of a symmetric PSD operator by deflated
    Lanczos passes.

    A single Krylov sequence cannot see eigenvalue multiplicities, so
    after k pairs are locked an extra verification pass over the deflated
    operator must converge its smallest Ritz value and find it at or above
    the k-th locked value; hidden degenerate copies surface there and are
    locked too.
    """
    rng = np.random.default_rng(seed)
    locked_vals: list[float] = []
    locked = np.zeros((n, 0))

    def lock(pairs):
        nonlocal locked, locked_vals
        for val, vec in pairs:
            if locked.shape[1]:
                vec = vec - locked @ (locked.T @ vec)
            nv = np.linalg.norm(vec)
            if nv < 0.5:
                continue
            locked = np.column_stack([locked, vec / nv])
            locked_vals.append(float(val))
        order = np.argsort(locked_vals)
        locked_vals = [locked_vals[i] for i in order]
        locked = locked[:, order]

    for _ in range(max_restarts):
        want = max(1, k - len(locked_vals))
        pairs, low_ok = _lanczos_pass(apply_b, n, rng, locked, tol,
                                      max_dim, want)
        lock(pairs)
        if len(locked_vals) < k:
            continue
        if locked.shape[1] >= n:
            break
        # verification: smallest Ritz value of the deflated operator must
        # converge and sit at or above the k-th locked value
        pairs, low_ok = _lanczos_pass(apply_b, n, rng, locked, tol,
                                      max_dim, 1)
        below = [p for p in pairs if p[0] < locked_vals[k - 1] * (1.0 - 1e-10)]
        if low_ok and not below:
            break
        lock(pairs)
    else:
        raise SolverDiverged(
            f"Lanczos could not certify the {k} smallest eigenpairs "
            f"({len(locked_vals)} converged)")
    if len(locked_vals) < k:
        raise SolverDiverged(
            f"Lanczos locked only {len(locked_vals)} of {k} requested pairs")
    return np.array(locked_vals[:k]), locked[:, :k]


def eigen_smallest(op, mass, k, which_mass="lumped", seed=0,
                   eig_tol=DEFAULT_EIG_TOL):
    """Smallest k eigenpairs of the generator pencil A~ u = lambda M u.

    With the lumped mass D the problem is symmetrized to
    D^{-1/2} A~ D^{-1/2} w = lambda w and solved densely when the form
    matrix is cached (or small enough to cache), otherwise by matrix-free
    Lanczos.  The consistent-mass path solves the dense generalized
    problem and is only available below the dense threshold.

    Returns pairs sorted ascending, vectors unit in the chosen M-norm,
    sign-normalized so the largest-magnitude entry is positive.
    """
    n = op.n_support
    if k > n:
        raise TooManyRequested(f"requested {k} pairs from {n} support dofs")
    if k < 1:
        raise ValueError("k must be >= 1")

    if which_mass == "lumped":
        d = mass.lumped
        s = np.sqrt(d)
        dense = op.ensure_dense()
        if dense is not None:
            B = dense / np.outer(s, s)
            vals, W = sla.eigh(B)
            vals, W = vals[:k], W[:, :k]
        else:
            apply_b = lambda w: apply_form(op, w / s) / s
            vals, W = _lanczos_smallest(apply_b, n, k, seed, eig_tol)
        vectors = W / s[:, None]
        m_norm = lambda u: float(np.sqrt(np.sum(d * u * u)))
        m_apply = lambda u: d * u
    elif which_mass == "consistent":
        dense = op.ensure_dense()
        if dense is None:
            raise TooLargeForDense(
                f"consistent-mass eigensolve needs the dense form matrix: "
                f"{n} support dofs exceed threshold "
                f"{op.options.dense_threshold}")
        M = mass.consistent.toarray()
        vals, W = sla.eigh(dense, M)
        vals, W = vals[:k], W[:, :k]
        vectors = W
        m_norm = lambda u: float(np.sqrt(u @ (mass.consistent @ u)))
        m_apply = lambda u: mass.consistent @ u
    else:
        raise ValueError("which_mass must be 'lumped' or 'consistent'")

    pairs = []
    for i in range(k):
        u = vectors[:, i] / m_norm(vectors[:, i])
        u = _sign_normalize(u)
        au = apply_form(op, u)
        resid = float(np.linalg.norm(au - vals[i] * m_apply(u))
                      / max(np.linalg.norm(au), 1e-300))
        pairs.append(EigenPair(value=float(vals[i]), vector=u, residual=resid))
    pairs.sort(key=lambda p: p.value)
    return pairs


def _step_count(t_end, dt):
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if t_end < 0.0:
        raise ValueError("t_end must be nonnegative")
    return int(np.ceil(t_end / dt - 1e-12))


def evolve(op, mass, f0, t_end, dt):
    """Backward-Euler evolution of the semigroup from the field ``f0``.

    Each step solves (M + dt A~) u_next = M u with the lumped mass.  With
    the cached dense form matrix the shifted system is factored once;
    otherwise every step runs preconditioned CG on the shifted
    matrix-free operator.
    """
    f0 = np.asarray(f0, dtype=float)
    n_steps = _step_count(t_end, dt)
    times = dt * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, op.n_support))
    states[0] = f0

    d = mass.lumped
    dense = op.ensure_dense()
    if dense is not None:
        system = dt * dense + np.diag(d)
        chol = sla.cho_factor(system)
        u = f0.copy()
        for step in range(1, n_steps + 1):
            u = sla.cho_solve(chol, d * u)
            states[step] = u
    else:
        shifted = lambda v: d * v + dt * apply_form(op, v)
        precond = d + dt * op.stiffness.A_SS.diagonal()
        u = f0.copy()
        for step in range(1, n_steps + 1):
            try:
                u = solve_spd(shifted, d * u, tol=op.options.tol,
                              max_iter=op.options.max_iter, precond=precond)
            except SolverDiverged as err:
                raise SolverDiverged(f"backward Euler step {step} failed: {err}",
                                     iterations=err.iterations,
                                     relres=err.relres) from err
            states[step] = u
    return EvolutionResult(times=times, states=states,
                           scheme="backward-euler", dt=dt)


def check_submarkov(op, mass, n_trials, t_end, dt, seed=0):
    """Evolve random [0,1]-valued fields and report worst positivity and
    sup-norm violations, plus the worst per-step mass increase.

    Trial i draws its initial field from a generator seeded seed + i, so
    trials are reproducible independently of execution order.
    """
    if n_trials == 0:
        return MarkovReport(n_trials=0, min_value=np.nan, max_value=np.nan,
                            per_trial_min=np.zeros(0), per_trial_max=np.zeros(0),
                            max_mass_increment=0.0)
    n = op.n_support
    d = mass.lumped
    n_steps = _step_count(t_end, dt)
    fields = np.column_stack([
        np.random.default_rng(seed + i).uniform(0.0, 1.0, size=n)
        for i in range(n_trials)])

    per_min = fields.min(axis=0).copy()
    per_max = fields.max(axis=0).copy()
    max_increment = 0.0

    dense = op.ensure_dense()
    if dense is not None:
        system = dt * dense + np.diag(d)
        chol = sla.cho_factor(system)
        U = fields
        masses = d @ U
        for _ in range(n_steps):
            U = sla.cho_solve(chol, d[:, None] * U)
            np.minimum(per_min, U.min(axis=0), out=per_min)
            np.maximum(per_max, U.max(axis=0), out=per_max)
            new_masses = d @ U
            max_increment = max(max_increment,
                                float((new_masses - masses).max()))
            masses = new_masses
    else:
        for i in range(n_trials):
            run = evolve(op, mass, fields[:, i], t_end, dt)
            per_min[i] = run.states.min()
            per_max[i] = run.states.max()
            masses = run.states @ d
            if len(masses) > 1:
                max_increment = max(max_increment,
                                    float(np.diff(masses).max()))
    return MarkovReport(n_trials=n_trials,
                        min_value=float(per_min.min()),
                        max_value=float(per_max.max()),
                        per_trial_min=per_min, per_trial_max=per_max,
                        max_mass_increment=max_increment)


def write_eigenvalues_csv(pairs, path):
    """Write eigenvalues as ``k,lambda,residual`` rows."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("k,lambda,residual\n")
        for i, p in enumerate(pairs, start=1):
            fh.write(f"{i}," + (FLOAT_FMT % p.value) + ","
                     + (FLOAT_FMT % p.residual) + "\n")


def write_field_csv(mesh, partition, values_support, path, op=None,
                    extend=False):
    """Write a support field as ``vertex_index,x,y,value`` rows.

    With ``extend`` (and an operator) the gap and boundary vertices are
    included with their harmonically extended values; otherwise only the
    support rows are written.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("vertex_index,x,y,value\n")
        if extend:
            if op is None:
                raise ValueError("extend=True requires the form operator")
            ext = harmonic_extend(op, values_support)
            for v in range(mesh.n_vertices):
                x, y = mesh.vertices[v]
                fh.write(f"{v}," + (FLOAT_FMT % x) + "," + (FLOAT_FMT % y)
                         + "," + (FLOAT_FMT % ext.values[v]) + "\n")
        else:
            for i, v in enumerate(partition.support):
                x, y = mesh.vertices[v]
                fh.write(f"{v}," + (FLOAT_FMT % x) + "," + (FLOAT_FMT % y)
                         + "," + (FLOAT_FMT % values_support[i]) + "\n")
