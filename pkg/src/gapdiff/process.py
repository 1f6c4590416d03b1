"""Jump-diffusion trace process on the support dofs.

The dense form matrix induces a continuous-time Markov chain on S: dof i
waits an exponential time with rate A~_ii / m_i, then jumps to j with
probability -A~_ij / A~_ii or is killed with the remaining probability.
Off-diagonal coupling reaches across the gap (dense Schur rows), so a
single transition can traverse the region without measure mass; killing
absorbs the deficit created by the eliminated outer boundary.  Paths are
driven by counter-based Philox streams keyed by (seed, path index), so
sampling is reproducible regardless of scheduling.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonMarkovianDiscretization
from .geometry import FLOAT_FMT
from .operators import assemble_dense_schur

# Positive off-diagonal entries below this fraction of the largest matrix
# entry are treated as solver noise and clipped to zero.
CLIP_REL = 1e-10


@dataclass
class CTMC:
    """Killed Markov jump chain of the discrete trace process.

    ``jump_probs[i]`` sums with ``kill_probs[i]`` to one; the cumulative
    rows are cached for categorical sampling.  ``support_vertices`` maps
    chain states to global mesh vertex indices.
    """

    exit_rates: np.ndarray
    jump_probs: np.ndarray
    kill_probs: np.ndarray
    support_vertices: np.ndarray
    _cum: np.ndarray = None

    def __post_init__(self):
        if self._cum is None:
            self._cum = np.cumsum(self.jump_probs, axis=1)

    @property
    def n_states(self):
        return len(self.exit_rates)

    def state_of_vertex(self, vertex):
        i = int(np.searchsorted(self.support_vertices, vertex))
        if i >= len(self.support_vertices) or self.support_vertices[i] != vertex:
            raise ValueError(f"vertex {vertex} is not a support dof")
        return i


@dataclass
class PathSample:
    """One sampled trajectory, recorded as global vertex indices."""

    dofs: list
    holding_times: list
    killed: bool
    total_time: float
    seed: int


@dataclass
class McEstimate:
    """Monte Carlo mean with its standard error."""

    mean: float
    stderr: float
    n_paths: int
    seed: int


def build_ctmc(op, mass):
    """Extract jump rates, jump laws, and killing probabilities from the
    dense form matrix.

    Requires the support block to fit under the dense threshold.  Positive
    off-diagonal entries above CLIP_REL times the largest matrix entry
    mean the mesh lost the M-matrix property and raise
    NonMarkovianDiscretization; smaller ones are clipped to zero and the
    jump law renormalized.
    """
    dense = assemble_dense_schur(op)
    n = dense.shape[0]
    diag = dense.diagonal().copy()
    if np.any(diag <= 0.0):
        raise NonMarkovianDiscretization("nonpositive diagonal in the form matrix")

    off = -dense.copy()
    np.fill_diagonal(off, 0.0)
    worst = float((-off).max()) if n > 1 else 0.0
    scale = float(np.abs(dense).max())
    if worst > CLIP_REL * scale:
        raise NonMarkovianDiscretization(
            f"positive off-diagonal {worst:.3e} exceeds {CLIP_REL:.1e} * "
            f"|A~|_max = {CLIP_REL * scale:.3e}")
    np.clip(off, 0.0, None, out=off)

    probs = off / diag[:, None]
    row = probs.sum(axis=1)
    kill = 1.0 - row
    # roundoff can push the kill probability marginally negative
    neg = kill < 0.0
    if np.any(neg):
        probs[neg] /= row[neg, None]
        kill[neg] = 0.0

    rates = diag / mass.lumped
    return CTMC(exit_rates=rates, jump_probs=probs, kill_probs=kill,
                support_vertices=mass.partition.support.copy())


def _path_rng(seed, path_index):
    key = np.array([seed % 2**64, path_index % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _run_chain(ctmc, state, t_max, rng, record=None):
    """Simulate until t_max or killing; returns (state, killed, t).

    ``record`` optionally collects (state, holding time) events.
    """
    t = 0.0
    while True:
        rate = ctmc.exit_rates[state]
        tau = rng.exponential(1.0 / rate)
        if t + tau >= t_max:
            if record is not None:
                record.append((state, t_max - t))
            return state, False, t_max
        t += tau
        u = rng.random()
        cum = ctmc._cum[state]
        if u >= cum[-1]:
            if record is not None:
                record.append((state, tau))
            return state, True, t
        nxt = int(np.searchsorted(cum, u, side="right"))
        if record is not None:
            record.append((state, tau))
        state = nxt


def sample_path(ctmc, start, t_max, seed, path_index=0):
    """Sample one trajectory from the global vertex index ``start``.

    The path is fully determined by (seed, path_index).  Holding times
    are recorded per visited dof; the last one is truncated at ``t_max``
    for surviving paths.
    """
    state = ctmc.state_of_vertex(start)
    rng = _path_rng(seed, path_index)
    if t_max <= 0.0:
        return PathSample(dofs=[int(start)], holding_times=[0.0],
                          killed=False, total_time=0.0, seed=seed)
    events = []
    _, killed, total = _run_chain(ctmc, state, t_max, rng, record=events)
    dofs = [int(ctmc.support_vertices[s]) for s, _ in events]
    holds = [float(h) for _, h in events]
    return PathSample(dofs=dofs, holding_times=holds, killed=killed,
                      total_time=float(total), seed=seed)


def estimate_expectation(ctmc, f, start, t, n_paths, seed):
    """Monte Carlo estimate of E[f(X_t); alive] from ``start``.

    Killed paths contribute zero (Dirichlet pairing).  Path i uses the
    Philox stream keyed (seed, i); the reduction is numpy pairwise
    summation, so the estimate is independent of evaluation order.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    f = np.asarray(f, dtype=float)
    start_state = ctmc.state_of_vertex(start)
    values = np.empty(n_paths)
    if t <= 0.0:
        values[:] = f[start_state]
    else:
        for i in range(n_paths):
            rng = _path_rng(seed, i)
            state, killed, _ = _run_chain(ctmc, start_state, t, rng)
            values[i] = 0.0 if killed else f[state]
    mean = float(np.mean(values))
    if n_paths > 1:
        stderr = float(np.std(values, ddof=1) / np.sqrt(n_paths))
    else:
        stderr = 0.0
    return McEstimate(mean=mean, stderr=stderr, n_paths=n_paths, seed=seed)


def write_path_csv(sample, mesh, path):
    """Export a path as ``step,dof,x,y,hold_time`` rows."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,dof,x,y,hold_time\n")
        for step, (dof, hold) in enumerate(zip(sample.dofs,
                                               sample.holding_times)):
            x, y = mesh.vertices[dof]
            fh.write(f"{step},{dof}," + (FLOAT_FMT % x) + ","
                     + (FLOAT_FMT % y) + "," + (FLOAT_FMT % hold) + "\n")


def write_estimates_csv(rows, path):
    """Export estimates as ``start,t,mean,stderr,n_paths,seed`` rows.

    ``rows`` holds (start, t, McEstimate) triples.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("start,t,mean,stderr,n_paths,seed\n")
        for start, t, est in rows:
            fh.write(f"{start}," + (FLOAT_FMT % t) + ","
                     + (FLOAT_FMT % est.mean) + "," + (FLOAT_FMT % est.stderr)
                     + f",{est.n_paths},{est.seed}\n")
