"""Is a learned update rule secretly gradient descent?

If a full-batch update ``dw(w)`` were ``-lr * grad L(w)``, its Jacobian
``Q[a, b] = d dw_a / d w_b`` would be (a multiple of) a Hessian and hence
symmetric.  :func:`update_jacobian` estimates ``Q`` by central differences
over the forward weights and :func:`symmetry_gap` measures how far it is
from symmetric.

:func:`constant_metric_probe` asks the weaker question of whether some
constant metric ``g`` (symmetric positive definite) turns the update into
a gradient flow, i.e. whether ``gQ - (gQ)^T = 0`` can hold at every state.
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericOverflowError
from .genome import Genome
from .network import Architecture, SynapseSet, check_compatible, init_synapses, unroll_step

log = logging.getLogger(__name__)

MAX_PROBE_DIM = 60


@dataclass
class UpdateJacobian:
    coords: List[tuple]        # (layer, channel, i, j) per flat coordinate
    Q: np.ndarray
    h: float

    @property
    def dim(self):
        return self.Q.shape[0]


def weight_coords(synapses: SynapseSet):
    coords = []
    for l, w in enumerate(synapses.forward):
        for idx in np.ndindex(*w.shape):
            coords.append((l,) + idx)
    return coords


def update_map(genome: Genome, arch: Architecture, synapses: SynapseSet, batch):
    """``w -> dw`` for the forward weights, one full-batch synapse update.

    Backward weights are held fixed unless they alias the forward weights.
    """
    check_compatible(genome, arch, synapses)

    def delta(w_flat):
        syn = synapses.with_flat_forward(w_flat)
        with np.errstate(all="ignore"):
            new, _ = unroll_step(syn, genome, arch, batch)
        return new.flat_forward() - w_flat

    return delta


def update_jacobian(genome: Genome, arch: Architecture, synapses: SynapseSet, batch,
                    h: float = 1e-5, threads: int = 1) -> UpdateJacobian:
    if not 1e-6 <= h <= 1e-3:
        raise ConfigurationError(f"finite-difference step {h} outside [1e-6, 1e-3]")
    delta = update_map(genome, arch, synapses, batch)
    w0 = synapses.flat_forward().astype(np.float64)
    n = w0.size

    def column(b):
        e = np.zeros(n)
        e[b] = h
        try:
            return (delta(w0 + e) - delta(w0 - e)) / (2 * h)
        except NumericOverflowError as err:
            raise NumericOverflowError(f"update diverged at perturbed coordinate {b}: {err}",
                                       layer=err.layer) from err

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(column, range(n)))
    else:
        cols = [column(b) for b in range(n)]
    return UpdateJacobian(weight_coords(synapses), np.stack(cols, axis=1), h)


def symmetry_gap(Q):
    """Elementwise ``|Q - Q^T|`` and its maximum."""
    Q = Q.Q if isinstance(Q, UpdateJacobian) else np.asarray(Q, dtype=np.float64)
    gap = np.abs(Q - Q.T)
    return gap, float(gap.max()) if gap.size else 0.0


def fd_noise(genome, arch, synapses, batch, h=1e-5, threads=1):
    """Finite-difference noise floor: max entry change between steps h and h/2."""
    q1 = update_jacobian(genome, arch, synapses, batch, h, threads).Q
    q2 = update_jacobian(genome, arch, synapses, batch, h / 2, threads).Q
    return float(np.max(np.abs(q1 - q2)))


def write_matrix_csv(path, matrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(matrix):
            w.writerow([repr(float(v)) for v in row])


def log_gap(gap, floor=1e-300):
    """Natural log of the gap map, with zeros floored for plotting."""
    return np.log(np.maximum(gap, floor))


# -- constant metric probe ---------------------------------------------------------

def _sym_basis(n):
    """(n*n, n(n+1)/2) matrix mapping packed upper-triangular entries to vec(g)."""
    iu = np.triu_indices(n)
    s = np.zeros((n * n, iu[0].size))
    cols = np.arange(iu[0].size)
    s[iu[0] * n + iu[1], cols] = 1.0
    s[iu[1] * n + iu[0], cols] = 1.0
    return s


def unpack_symmetric(packed, n):
    g = np.zeros((n, n))
    iu = np.triu_indices(n)
    g[iu] = packed
    g[(iu[1], iu[0])] = packed
    return g


def metric_system(Q, basis=None):
    """Rows of ``Z[g, Q] = gQ - (gQ)^T`` (strict upper triangle) as a matrix on packed ``g``."""
    Q = np.asarray(Q, dtype=np.float64)
    n = Q.shape[0]
    eye = np.eye(n)
    # row-major vec: vec(gQ) = (I kron Q^T) vec(g), vec(Q^T g) = (Q^T kron I) vec(g)
    full = np.kron(eye, Q.T) - np.kron(Q.T, eye)
    iu = np.triu_indices(n, 1)
    rows = full[iu[0] * n + iu[1]]
    return rows @ (_sym_basis(n) if basis is None else basis)


def metric_residual(g, Q):
    gq = g @ Q
    return float(np.linalg.norm(gq - gq.T) / max(np.linalg.norm(g) * np.linalg.norm(Q), 1e-300))


def _null_space(m, tol, scale=None):
    """Right null space of ``m``: singular values below ``tol * scale`` count as zero.

    ``scale`` defaults to the largest singular value of ``m``.
    """
    _, s, vt = np.linalg.svd(m, full_matrices=True)
    scale = (s[0] if s.size else 0.0) if scale is None else scale
    if scale == 0:
        return vt.T
    rank = int(np.sum(s > tol * scale))
    return vt[rank:].T


@dataclass
class MetricProbeResult:
    dim: int
    null_dim: int
    num_probes: int
    survivors: int
    survivor_min_eigs: List[float]
    pd_survivors: int
    identity_survives: bool
    joint_null_dim: int
    span_max_min_eig: Optional[float]
    singular_values: np.ndarray = field(repr=False, default=None)

    def summary(self):
        lines = [
            f"weights probed: {self.dim}",
            f"null-space basis vectors at reference state: {self.null_dim}",
            f"probe states: {self.num_probes}",
            f"basis vectors surviving every probe: {self.survivors}",
            f"positive-definite survivors: {self.pd_survivors}",
            f"identity metric survives: {self.identity_survives}",
            f"joint null-space dimension: {self.joint_null_dim}",
        ]
        if self.span_max_min_eig is not None:
            lines.append(f"best min eigenvalue over unit-norm joint span: {self.span_max_min_eig:.6g}")
        if self.survivor_min_eigs:
            lines.append("survivor min |eigenvalue|: "
                         + " ".join(f"{v:.3g}" for v in self.survivor_min_eigs))
        return "\n".join(lines) + "\n"


def _span_max_min_eig(mats):
    """max over unit-norm combinations of the smallest eigenvalue (an SDP)."""
    try:
        import cvxpy as cp
    except ImportError:  # pragma: no cover - cvxpy is an optional extra
        return None
    n = mats[0].shape[0]
    c = cp.Variable(len(mats))
    t = cp.Variable()
    combo = sum(c[i] * mats[i] for i in range(len(mats)))
    problem = cp.Problem(cp.Maximize(t), [combo - t * np.eye(n) >> 0, cp.norm(c, 2) <= 1])
    try:
        problem.solve()
    except cp.error.SolverError:  # pragma: no cover
        return None
    return None if t.value is None else float(t.value)


def constant_metric_probe(genome: Genome, arch: Architecture, probe_states: Sequence[SynapseSet],
                          batch, tol: float = 1e-8, check_tol: float = 1e-6, h: float = 1e-5,
                          pd_tol: Optional[float] = None) -> MetricProbeResult:
    """Search for a constant metric compatible with the update at every probe state.

    The first probe state is the reference: the null space of the linear
    system ``Z[g, Q(w*)] = 0`` over symmetric ``g`` is taken from its SVD
    (singular values below ``tol`` relative to the largest).  Each basis
    vector is then checked against ``Q`` at every other probe state
    (relative residual below ``check_tol``) and tested for positive
    definiteness.  The joint null space over all probes and the best
    achievable minimum eigenvalue within it are reported too.
    """
    if len(probe_states) < 1:
        raise ConfigurationError("need at least one probe state")
    n = probe_states[0].flat_forward().size
    if n > MAX_PROBE_DIM:
        raise ConfigurationError(f"{n} weights is too many for the metric probe (max {MAX_PROBE_DIM})")
    qs = [update_jacobian(genome, arch, s, batch, h).Q for s in probe_states]
    return probe_jacobians(qs, tol, check_tol, pd_tol)


def probe_jacobians(qs: Sequence[np.ndarray], tol: float = 1e-8, check_tol: float = 1e-6,
                    pd_tol: Optional[float] = None) -> MetricProbeResult:
    """The metric probe on precomputed Jacobians; ``qs[0]`` is the reference."""
    n = qs[0].shape[0]
    pd_tol = tol if pd_tol is None else pd_tol
    basis = _sym_basis(n)
    try:
        _, svals, _ = np.linalg.svd(metric_system(qs[0], basis))
    except np.linalg.LinAlgError as err:
        raise ConfigurationError(f"SVD failed: {err}") from err
    null = _null_space(metric_system(qs[0], basis), tol)

    survivors, min_eigs, pd = [], [], 0
    for v in null.T:
        g = unpack_symmetric(v, n)
        if all(metric_residual(g, q) < check_tol for q in qs[1:]):
            survivors.append(g)
            ev = np.linalg.eigvalsh(g)
            min_eigs.append(float(np.min(np.abs(ev))))
            if ev.min() > pd_tol or ev.max() < -pd_tol:
                pd += 1

    eye = np.eye(n)
    identity_ok = all(metric_residual(eye, q) < check_tol for q in qs)

    joint = null
    for q in qs[1:]:
        if joint.shape[1] == 0:
            break
        system = metric_system(q, basis)
        # judge the restricted system against the scale of the unrestricted one
        joint = joint @ _null_space(system @ joint, check_tol, np.linalg.norm(system, 2))
    span = None
    if joint.shape[1]:
        mats = [unpack_symmetric(v, n) for v in joint.T]
        span = _span_max_min_eig(mats)

    return MetricProbeResult(n, null.shape[1], len(qs) - 1, len(survivors), min_eigs, pd,
                             identity_ok, joint.shape[1], span, svals)


def random_probe_states(arch: Architecture, k: int, count: int, seed: int = 0):
    """Independent random synapse draws used as probe states."""
    ss = np.random.SeedSequence(seed)
    return [init_synapses(arch, k, int(child.generate_state(1)[0])) for child in ss.spawn(count)]


# -- synapse amplitude diagnostics ------------------------------------------------------

@dataclass
class NormTrace:
    max: np.ndarray     # (steps,) max column norm over all layer pairs
    mean: np.ndarray    # (steps,) mean of the per-pair mean column norms
    diverged: bool = False


def synapse_norm_trace(reports) -> NormTrace:
    """Per-step column-norm statistics from one FitnessReport (or several, stacked)."""
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    with warnings.catch_warnings():
        # an episode that diverged before its first update has an all-NaN trace
        warnings.simplefilter("ignore", RuntimeWarning)
        return _norm_trace(reports)


def _norm_trace(reports):
    mx = np.nanmax(np.stack([r.norm_max for r in reports]), axis=(0, 2)) \
        if reports[0].norm_max.size else np.zeros(0)
    mn = np.nanmean(np.stack([r.norm_mean for r in reports]), axis=(0, 2)) \
        if reports[0].norm_mean.size else np.zeros(0)
    return NormTrace(mx, mn, any(r.diverged for r in reports))


def is_monotone_increasing(trace, start: int = 0, strict: bool = True) -> bool:
    t = np.asarray(trace, dtype=np.float64)[start:]
    t = t[np.isfinite(t)]
    if t.size < 2:
        return False
    d = np.diff(t)
    return bool(np.all(d > 0) if strict else np.all(d >= 0))


def bounded_growth(trace, ref_step: int = 50, factor: float = 10.0) -> bool:
    """True when every value after ``ref_step`` stays below ``factor`` x the value at ``ref_step``."""
    t = np.asarray(trace, dtype=np.float64)
    if t.size <= ref_step or not np.all(np.isfinite(t)):
        return False
    return bool(np.all(t[ref_step:] < factor * t[ref_step]))
