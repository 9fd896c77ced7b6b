"""Optimal-transport numerics: Gibbs kernels, Sinkhorn scaling, exact
(earth mover's) transport, and plan-based particle transforms/resampling.

Plans are ``L x M`` matrices whose rows carry the weighted source ensemble
(row marginal ``p1``) and whose columns are the output particles (column
marginal ``p0``, uniform for filtering).
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InfeasibleTransportError

# smallest kernel entry the plain (non-log) Sinkhorn iteration is trusted with
_LOG_DOMAIN_THRESHOLD = 1e-300


class SinkhornConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class TransportPlan:
    entries: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    converged: bool = True
    iterations: int = 0

    @property
    def shape(self):
        return self.entries.shape

    def marginal_error(self) -> float:
        rows = np.abs(self.entries.sum(axis=1) - self.row_marginal).max()
        cols = np.abs(self.entries.sum(axis=0) - self.col_marginal).max()
        return float(max(rows, cols))

    def cost(self, cost_matrix) -> float:
        return float(np.sum(self.entries * cost_matrix))

    def to_csv(self, fname, threshold: float = 0.0):
        """Write ``row, col, value`` triples for entries above ``threshold``."""
        rows, cols = np.nonzero(self.entries > threshold)
        with open(fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "value"])
            for j, i in zip(rows, cols):
                w.writerow([int(j), int(i), repr(float(self.entries[j, i]))])


@dataclass(frozen=True)
class GibbsKernel:
    """``q_ji = exp(-|x_j - xbar_i|^2 / (2 g^2 dt))``; ``log_entries`` is kept
    so that tightly concentrated kernels can be scaled in the log domain."""

    log_entries: np.ndarray

    @property
    def entries(self) -> np.ndarray:
        return np.exp(self.log_entries)

    @property
    def shape(self):
        return self.log_entries.shape


def gibbs_kernel(fine, coarse, g: float, dt: float) -> GibbsKernel:
    if g <= 0 or dt <= 0:
        raise ValueError("g and dt must be positive")
    fine = np.asarray(fine, dtype=float)
    coarse = np.asarray(coarse, dtype=float)
    if fine.ndim == 1:
        fine, coarse = fine[:, None], coarse[:, None]
    d2 = np.sum((fine[:, None, :] - coarse[None, :, :]) ** 2, axis=-1)
    return GibbsKernel(-d2 / (2.0 * g * g * dt))


def _sinkhorn_plain(K, p0, p1, tol, max_iter):
    v = np.ones(K.shape[1])
    u = np.ones(K.shape[0])
    Kv = K @ v
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        u = p1 / Kv
        v = p0 / (K.T @ u)
        # columns now match exactly; row error decides convergence.  K v is
        # reused as the next sweep's first product.
        Kv = K @ v
        err = np.max(np.abs(u * Kv - p1))
        if not np.isfinite(err):
            break
        if err <= tol:
            converged = True
            break
    return u[:, None] * K * v[None, :], converged, it


def _sinkhorn_log(logK, p0, p1, tol, max_iter):
    with np.errstate(divide="ignore"):
        log_p0, log_p1 = np.log(p0), np.log(p1)
    f = np.zeros(logK.shape[0])
    gv = np.zeros(logK.shape[1])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = log_p1 - logsumexp(logK + gv[None, :], axis=1)
        gv = log_p0 - logsumexp(logK + f[:, None], axis=0)
        rows = np.exp(f + logsumexp(logK + gv[None, :], axis=1))
        err = np.max(np.abs(rows - p1))
        if err <= tol:
            converged = True
            break
    return np.exp(f[:, None] + logK + gv[None, :]), converged, it


def sinkhorn(kernel, p0, p1, tol: float = 1e-8, max_iter: int = 10_000, log_domain=None) -> TransportPlan:
    """Bi-stochastic scaling ``P = diag(u) K diag(v)`` with row sums ``p1`` and column sums ``p0``.

    Alternates ``u <- p1 / (K v)`` and ``v <- p0 / (K^T u)`` until the row
    marginal error is below ``tol``.  ``kernel`` is a :class:`GibbsKernel` or a
    nonnegative ``L x M`` array.  The log-domain iteration is used when
    ``log_domain`` is True, or automatically when kernel entries would
    underflow.  A plan with ``converged=False`` is returned (with a warning)
    if ``max_iter`` is reached.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    if np.any(p0 < 0) or np.any(p1 < 0):
        raise ValueError("marginals must be nonnegative")
    if abs(p0.sum() - 1.0) > 1e-10 or abs(p1.sum() - 1.0) > 1e-10:
        raise ValueError("marginals must each sum to one")

    if isinstance(kernel, GibbsKernel):
        logK = kernel.log_entries
        K = None
    else:
        K = np.asarray(kernel, dtype=float)
        if np.any(K < 0):
            raise ValueError("kernel entries must be nonnegative")
        with np.errstate(divide="ignore"):
            logK = np.log(K)
    if logK.shape != (p1.size, p0.size):
        raise ValueError(f"kernel shape {logK.shape} does not match marginals ({p1.size}, {p0.size})")
    if np.any(np.all(np.isneginf(logK), axis=1)) or np.any(np.all(np.isneginf(logK), axis=0)):
        raise InfeasibleTransportError("kernel has an all-zero row or column")

    if log_domain is None:
        log_domain = logK.min() < np.log(_LOG_DOMAIN_THRESHOLD)
    if log_domain:
        P, converged, it = _sinkhorn_log(logK, p0, p1, tol, max_iter)
    else:
        P, converged, it = _sinkhorn_plain(np.exp(logK) if K is None else K, p0, p1, tol, max_iter)
    if not converged:
        warnings.warn(f"Sinkhorn did not converge in {max_iter} iterations", SinkhornConvergenceWarning, stacklevel=2)
    return TransportPlan(P, p1, p0, converged, it)


def _import_ot():
    # POT probes torch/jax/tensorflow at import time; none are needed here
    for key in ("PYTORCH", "JAX", "TENSORFLOW", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{key}", "1")
    import ot

    return ot


def squared_distances(X, Y=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    Y = X if Y is None else (np.asarray(Y, dtype=float).reshape(-1, X.shape[1]))
    return np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=-1)


def exact_transport(cost, source_weights, target_weights=None) -> TransportPlan:
    """Minimise ``sum t_ij cost_ij`` subject to row sums ``source_weights`` and
    column sums ``target_weights`` (uniform by default), solved exactly by the
    network simplex."""
    cost = np.asarray(cost, dtype=float)
    w = np.asarray(source_weights, dtype=float)
    tgt = np.full(cost.shape[1], 1.0 / cost.shape[1]) if target_weights is None else np.asarray(target_weights, float)
    if np.any(w < 0) or np.any(tgt < 0):
        raise InfeasibleTransportError("weights must be nonnegative")
    if abs(w.sum() - tgt.sum()) > 1e-12 or abs(w.sum() - 1.0) > 1e-10:
        raise InfeasibleTransportError(f"marginal masses differ: {w.sum()!r} vs {tgt.sum()!r}")
    ot = _import_ot()
    # network simplex wants exactly equal masses
    P = ot.emd(w, tgt * (w.sum() / tgt.sum()), cost, numItermax=1_000_000)
    return TransportPlan(np.asarray(P), w, tgt, True, 0)


def _column_probabilities(plan: TransportPlan) -> np.ndarray:
    P = plan.entries if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)
    colsum = P.sum(axis=0)
    if np.any(colsum <= 0):
        raise InfeasibleTransportError("plan has a zero column")
    return P / colsum[None, :]


def transform_particles(plan, states) -> np.ndarray:
    """Output particle i is the convex combination ``sum_j x_j P_ji / sum_j P_ji``."""
    states = np.asarray(states, dtype=float)
    single = states.ndim == 1
    S = states[:, None] if single else states
    out = _column_probabilities(plan).T @ S
    return out[:, 0] if single else out


def plan_resample(plan, states, rng) -> np.ndarray:
    """Draw output particle i from column i of the plan (renormalised).

    ``rng`` is a ``numpy.random.Generator`` or any object with a
    ``uniform(size)`` / ``random(size)`` method.
    """
    states = np.asarray(states, dtype=float)
    probs = _column_probabilities(plan)
    u = rng.random(probs.shape[1]) if hasattr(rng, "random") else rng(probs.shape[1])
    cdf = np.cumsum(probs, axis=0)
    idx = np.minimum((cdf < u[None, :]).sum(axis=0), probs.shape[0] - 1)
    return states[idx]
