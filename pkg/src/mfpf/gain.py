"""Feedback-particle-filter gain: ``K = grad(phi)`` with
``div(pi grad phi) = -(h - h_hat) pi R^{-1}`` and ``E_pi[phi] = 0``.

Two approximations are provided.  :func:`constant_gain` projects the gain
onto constants (the empirical Kalman gain); :func:`kernel_gain` uses the
diffusion-map semigroup fixed point and returns a per-particle gain together
with the Ito correction ``q_j = (R/2) sum_k K_k dK_j/dx_k``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import DegenerateEnsembleError


class GainConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class GainField:
    """Per-particle gains ``(M, n, r)`` and Ito corrections ``(M, n)``."""

    gain: np.ndarray
    correction: np.ndarray
    method: str
    converged: bool = True
    degenerate: bool = False
    iterations: int = 0
    epsilon: float | None = None
    potential: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.gain)) and np.all(np.isfinite(self.correction))):
            raise FloatingPointError("gain field contains non-finite entries")

    @property
    def n_particles(self) -> int:
        return self.gain.shape[0]

    def norm(self) -> float:
        return float(np.sqrt(np.mean(np.sum(self.gain**2, axis=(1, 2)))))


def _as_ensemble(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def constant_gain(X, H, R) -> GainField:
    """Empirical Kalman gain ``C_xh R^{-1}`` shared by every particle.

    Covariances use the ``1/M`` normalisation.  The gain does not depend on
    the state, so the Ito correction is identically zero.
    """
    X, H = _as_ensemble(X), _as_ensemble(H)
    M = X.shape[0]
    if M < 2:
        raise DegenerateEnsembleError("constant gain needs at least two particles")
    R = np.atleast_2d(R)
    C = (X - X.mean(axis=0)).T @ (H - H.mean(axis=0)) / M
    K = np.linalg.solve(R.T, C.T).T  # C R^{-1}
    gain = np.broadcast_to(K, (M,) + K.shape).copy()
    return GainField(gain, np.zeros_like(X), "constant")


def metric_transform(X, metric: str = "euclidean") -> np.ndarray:
    """Symmetric matrix ``W`` such that kernel distances are measured between
    rows of ``X @ W``.

    ``euclidean`` is the identity.  ``whitened`` is the inverse square root of
    the ensemble covariance (eigenvalues floored at ``1e-12`` of the largest),
    which makes the kernel invariant to affine changes of coordinates.
    """
    X = _as_ensemble(X)
    n = X.shape[1]
    if metric == "euclidean":
        return np.eye(n)
    if metric == "whitened":
        lam, V = np.linalg.eigh(np.atleast_2d(np.cov(X.T, bias=True)))
        top = lam.max()
        if not top > 0:
            return np.eye(n)
        lam = np.maximum(lam, 1e-12 * top)
        return (V / np.sqrt(lam)) @ V.T
    raise ValueError(f"unknown gain metric {metric!r}")


def default_epsilon(X, transform=None) -> float:
    """Median pairwise squared distance divided by ``2 log M``."""
    X = _as_ensemble(X)
    Y = X if transform is None else X @ transform
    d2 = pdist(Y, "sqeuclidean")
    return float(np.median(d2) / (2.0 * np.log(X.shape[0])))


def markov_kernel(X, epsilon: float, transform=None) -> np.ndarray:
    """Row-stochastic diffusion-map operator built on ``exp(-|x - x'|^2 / (4 eps))``,
    with distances taken between rows of ``X @ transform`` when given."""
    X = _as_ensemble(X)
    Y = X if transform is None else X @ transform
    G = np.exp(-cdist(Y, Y, "sqeuclidean") / (4.0 * epsilon))
    s = np.sqrt(G.sum(axis=1))
    Kn = G / s[:, None] / s[None, :]
    return Kn / Kn.sum(axis=1, keepdims=True)


def ito_correction(gain, gain_jacobian, R) -> np.ndarray:
    """``q_j = (R/2) sum_k K_k dK_j/dx_k`` for a scalar observation.

    ``gain`` is ``(M, n)`` and ``gain_jacobian[i, j, k] = dK_j/dx_k`` at particle i.
    """
    gain = _as_ensemble(gain)
    J = np.asarray(gain_jacobian, dtype=float).reshape(gain.shape[0], gain.shape[1], gain.shape[1])
    R = float(np.asarray(R).reshape(-1)[0])
    return 0.5 * R * np.einsum("ijk,ik->ij", J, gain)


def kernel_gain(
    X,
    H,
    R,
    epsilon: float | None = None,
    max_iters: int = 1000,
    tol: float = 1e-8,
    phi0=None,
    metric: str = "euclidean",
) -> GainField:
    """Kernel-based gain approximation for a scalar observation.

    The potential solves the fixed point ``phi = T phi + eps (h - h_hat)/R``
    (projected to mean zero every sweep), where ``T`` is the diffusion-map
    Markov operator.  Writing ``r = phi + eps (h - h_hat)/R``, the gain at
    particle i is the local covariance ``Cov_{T_i}(r, x) / (2 eps)`` and its
    Jacobian is the local third central moment ``E_{T_i}[(r - r_i)(x - m_i)(x - m_i)^T] / (2 eps)^2``.

    ``phi0`` warm-starts the fixed point (e.g. from the previous time step).

    With ``metric='whitened'`` distances are Mahalanobis distances under the
    ensemble covariance ``S``.  The gain formula is unchanged, so it still
    solves ``div(pi K) = -(h - h_hat) pi / R``, but it is then ``S grad(phi)``
    rather than a pure gradient, and the Jacobian picks up a factor ``S^{-1}``
    on its last index.  For linear-Gaussian ensembles both metrics target the
    same (constant) gain.
    """
    X, H = _as_ensemble(X), _as_ensemble(H)
    M, n = X.shape
    if M < 2:
        raise DegenerateEnsembleError("kernel gain needs at least two particles")
    if H.shape[1] != 1:
        raise NotImplementedError("kernel gain and its Ito correction are defined for scalar observations only")
    R = float(np.asarray(R).reshape(-1)[0])
    W = metric_transform(X, metric)
    if epsilon is None:
        epsilon = default_epsilon(X, W)
    if not epsilon > 0:
        # all particles coincide
        return GainField(np.zeros((M, n, 1)), np.zeros((M, n)), "kernel", degenerate=True, epsilon=0.0)

    T = markov_kernel(X, epsilon, W)
    rhs = epsilon * (H[:, 0] - H[:, 0].mean()) / R
    phi = np.zeros(M) if phi0 is None or len(phi0) != M else np.asarray(phi0, dtype=float).copy()
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        new = T @ phi + rhs
        new -= new.mean()
        change = np.max(np.abs(new - phi))
        phi = new
        if change < tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"kernel gain fixed point not converged after {max_iters} sweeps (last change {change:.3g})",
            GainConvergenceWarning,
            stacklevel=2,
        )

    r = phi + rhs
    # local moments under the rows of T, expanded into matrix products;
    # centring first keeps the expansion well conditioned
    Xc = X - X.mean(axis=0)
    rc = r - r.mean()
    m = T @ Xc
    r_bar = T @ rc
    C = T @ (rc[:, None] * Xc) - r_bar[:, None] * m  # Cov_{T_i}(r, x)
    outer = (Xc[:, :, None] * Xc[:, None, :]).reshape(M, n * n)
    S = (T @ (rc[:, None] * outer) - r_bar[:, None] * (T @ outer)).reshape(M, n, n)
    # rows of T weight (r - r_bar) to zero mass, so the centred third moment is
    # S - C m^T - m C^T
    S -= C[:, :, None] * m[:, None, :] + m[:, :, None] * C[:, None, :]
    K = C / (2.0 * epsilon)
    J = S @ (W @ W) / (2.0 * epsilon) ** 2
    q = ito_correction(K, J, R)
    return GainField(K[:, :, None], q, "kernel", converged, False, it, epsilon, phi)


def compute_gain(method: str, X, H, R, **kwargs) -> GainField:
    if method == "constant":
        return constant_gain(X, H, R)
    if method == "kernel":
        return kernel_gain(X, H, R, **kwargs)
    raise ValueError(f"unknown gain method {method!r}")


def linear_test_functions(n: int):
    """Coordinate functions ``psi(x) = x_k`` with their gradients."""
    funcs = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        funcs.append((lambda X, k=k: X[:, k], lambda X, e=e: np.broadcast_to(e, X.shape)))
    return funcs


def poisson_residual(X, gain: GainField, H, R, test_functions) -> float:
    """Max over test functions of the weak-form residual
    ``(1/M) |sum_i grad psi(x_i)^T K(x_i) - sum_i psi(x_i) (h(x_i) - h_hat) R^{-1}|``."""
    X, H = _as_ensemble(X), _as_ensemble(H)
    M = X.shape[0]
    R = np.atleast_2d(R)
    rhs = np.linalg.solve(R.T, (H - H.mean(axis=0)).T).T  # (h - h_hat) R^{-1}
    worst = 0.0
    for psi, grad in test_functions:
        lhs = np.einsum("in,inr->r", grad(X), gain.gain)
        right = psi(X) @ rhs
        worst = max(worst, float(np.max(np.abs(lhs - right))) / M)
    return worst
