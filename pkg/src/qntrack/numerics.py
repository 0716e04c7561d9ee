"""Small dense linear-algebra and polynomial utilities shared by all modules.

Everything here is a pure function of its inputs. SVD is the single backend
for pseudo-inversion and factorization; the default rank cutoff is relative
to the largest singular value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_SVD_CUTOFF = 1e-12


@dataclass
class PseudoInverseResult:
    """Moore-Penrose inverse together with the numerical rank decision."""

    matrix: np.ndarray
    rank: int
    tolerance: float  # absolute singular-value cutoff that was applied


def _as_finite_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def pseudo_inverse(m, tol=DEFAULT_SVD_CUTOFF):
    """Moore-Penrose inverse with singular values below ``tol * sigma_max`` zeroed.

    Returns a :class:`PseudoInverseResult`; ``result.matrix`` satisfies the four
    Penrose identities up to roundoff at the scale of the largest singular value.
    """
    a = _as_finite_matrix(m)
    if tol <= 0:
        raise ValueError("tol must be positive")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    smax = s[0] if s.size else 0.0
    cutoff = tol * smax if smax > 0 else tol
    rank = int(np.count_nonzero(s > cutoff))
    inv_s = np.zeros_like(s)
    inv_s[:rank] = 1.0 / s[:rank]
    pinv = (vt.T * inv_s) @ u.T
    return PseudoInverseResult(matrix=pinv, rank=rank, tolerance=cutoff)


def svd_factorize(m):
    """Thin SVD ``m = U @ diag(sigma) @ V.T`` with orthonormal columns in U and V."""
    a = _as_finite_matrix(m)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return u, s, vt.T


def ridge_regression(inputs, targets, rho):
    """Solve ``min_R 0.5 * sum_i |u_i - R y_i|^2 + 0.5 * rho * ||R||_F^2``.

    ``inputs`` are the regressor vectors ``y_i`` and ``targets`` the vectors
    ``u_i``. With ``rho == 0`` the minimum-norm least-squares solution is
    returned, so rank-deficient regressor sets are handled without explicit
    regularization.
    """
    if len(inputs) == 0 or len(targets) == 0:
        raise ValueError("ridge_regression needs at least one (input, target) pair")
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets must pair up")
    if rho < 0:
        raise ValueError("rho must be non-negative")
    Y = np.asarray(inputs, dtype=float)
    U = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if U.ndim == 1:
        U = U[:, None]
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(U))):
        raise ValueError("regression data contains non-finite entries")
    if rho == 0.0:
        R_t, *_ = np.linalg.lstsq(Y, U, rcond=None)
        return R_t.T
    gram = Y.T @ Y + rho * np.eye(Y.shape[1])
    R_t = np.linalg.solve(gram, Y.T @ U)
    return R_t.T


def convolution_matrix(g, q):
    """Lower-triangular banded matrix mapping an input sequence to ``conv(g, u)[:q]``."""
    g = np.asarray(g, dtype=float).ravel()
    if q <= 0:
        raise ValueError("q must be positive")
    col = np.zeros(q)
    n = min(len(g), q)
    col[:n] = g[:n]
    out = np.zeros((q, q))
    for i in range(n):
        idx = np.arange(q - i)
        out[idx + i, idx] = g[i]
    return out


def solve_quintic_boundary(p0, v0, a0, p1, v1, a1, d):
    """Quintic coefficients (ascending powers) matching full pos/vel/acc boundaries.

    The polynomial ``q(tau) = sum c_i tau^i`` on ``tau in [0, d]`` satisfies
    ``q(0), q'(0), q''(0) = p0, v0, a0`` and the corresponding conditions at
    ``tau = d``. The three leading coefficients follow directly from the left
    boundary; the rest solve a well-conditioned 3x3 system.
    """
    if d <= 0:
        raise ValueError("segment duration must be positive")
    c0, c1, c2 = float(p0), float(v0), float(a0) / 2.0
    d2, d3, d4, d5 = d * d, d**3, d**4, d**5
    lhs = np.array(
        [
            [d3, d4, d5],
            [3 * d2, 4 * d3, 5 * d4],
            [6 * d, 12 * d2, 20 * d3],
        ]
    )
    rhs = np.array(
        [
            p1 - (c0 + c1 * d + c2 * d2),
            v1 - (c1 + 2 * c2 * d),
            a1 - 2 * c2,
        ]
    )
    c3, c4, c5 = np.linalg.solve(lhs, rhs)
    return np.array([c0, c1, c2, c3, c4, c5])


def solve_or_pinv(m, b, tol=DEFAULT_SVD_CUTOFF):
    """Solve ``m @ x = b``; fall back to the pseudo-inverse when singular.

    The fallback logs the numerical rank so silent rank deficiency does not go
    unnoticed in closed-loop gradient assembly.
    """
    a = np.asarray(m, dtype=float)
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        res = pseudo_inverse(a, tol)
        log.warning("singular system: using pseudo-inverse (rank %d of %d)", res.rank, a.shape[0])
        return res.matrix @ b
