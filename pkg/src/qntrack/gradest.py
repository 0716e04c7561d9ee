"""Gradient estimators for the black-box plant map and the closed loop.

Three routes produce the lifted input-to-output Jacobian estimate:

* frequency-domain identification -> rational transfer function -> static
  lower-triangular convolution matrix (independent of the operating point),
* stochastic finite differences: least squares over randomly perturbed
  rollouts,
* the exact convolution matrix for LTI oracle plants (see ``plants``).

Frequency responses are estimated by complex demodulation of the sampled
input and output over an integer number of excitation periods; the ratio is
rotated by half a sample to account for the output being measured at the end
of each hold interval, so the estimate targets the continuous-time response.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .numerics import convolution_matrix, pseudo_inverse
from .plants import DivergenceError
from .trajectories import Trajectory

log = logging.getLogger(__name__)


class IdentificationError(RuntimeError):
    """Rollout diverged during excitation; carries the offending frequency."""

    def __init__(self, frequency, message=None):
        self.frequency = frequency
        super().__init__(message or f"plant diverged during excitation at {frequency} Hz")


class UnstableFitError(RuntimeError):
    """Fitted transfer function has right-half-plane poles."""


class NoDataError(RuntimeError):
    """All perturbed rollouts diverged; nothing to regress on."""


class UndefinedKappaError(RuntimeError):
    """Reference gradient mean is numerically zero; the bias ratio is undefined."""


@dataclass
class FrequencyResponseSet:
    """Measured response at each excitation frequency plus the residual power
    at non-excited content (the nonlinearity indicator)."""

    frequencies: np.ndarray  # Hz, strictly increasing
    amplitude: np.ndarray
    phase: np.ndarray  # rad
    nonlinearity: np.ndarray  # RMS of the residual after removing DC + fundamental

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.amplitude = np.asarray(self.amplitude, dtype=float)
        self.phase = np.asarray(self.phase, dtype=float)
        self.nonlinearity = np.asarray(self.nonlinearity, dtype=float)
        n = len(self.frequencies)
        if not (len(self.amplitude) == len(self.phase) == len(self.nonlinearity) == n):
            raise ValueError("frequency response vectors must have equal length")
        if n > 1 and not np.all(np.diff(self.frequencies) > 0):
            raise ValueError("frequencies must be strictly increasing")

    def complex_response(self):
        return self.amplitude * np.exp(1j * self.phase)

    def to_json(self):
        return json.dumps(
            {
                "frequencies_hz": self.frequencies.tolist(),
                "amplitude": self.amplitude.tolist(),
                "phase_rad": self.phase.tolist(),
                "nonlinearity_rms": self.nonlinearity.tolist(),
            }
        )

    @staticmethod
    def from_json(blob):
        d = json.loads(blob)
        return FrequencyResponseSet(
            d["frequencies_hz"], d["amplitude"], d["phase_rad"], d["nonlinearity_rms"]
        )


@dataclass
class RationalTransferFunction:
    """Continuous-time rational model ``num(s) / den(s)`` with monic denominator."""

    num: np.ndarray  # descending powers
    den: np.ndarray  # descending powers, den[0] == 1
    fit_error: float = 0.0

    def __post_init__(self):
        self.num = np.atleast_1d(np.asarray(self.num, dtype=float))
        self.den = np.atleast_1d(np.asarray(self.den, dtype=float))
        if abs(self.den[0]) < 1e-300:
            raise ValueError("denominator leading coefficient must be nonzero")
        self.num = self.num / self.den[0]
        self.den = self.den / self.den[0]

    def eval(self, s):
        return np.polyval(self.num, s) / np.polyval(self.den, s)

    def poles(self):
        if len(self.den) <= 1:
            return np.array([])
        return np.roots(self.den)

    def is_stable(self):
        """No strictly right-half-plane poles. Marginal poles (e.g. a pure
        integrator) are accepted: the finite-horizon lifted map stays bounded."""
        p = self.poles()
        return bool(np.all(p.real <= 1e-9)) if p.size else True

    def to_json(self):
        return json.dumps(
            {"num": self.num.tolist(), "den": self.den.tolist(), "fit_error": self.fit_error}
        )

    @staticmethod
    def from_json(blob):
        d = json.loads(blob)
        return RationalTransferFunction(d["num"], d["den"], d["fit_error"])


def identify_frequency_response(rollout_fn, freqs, amplitude, settle, measure, dt):
    """Sine-sweep identification of a plant exposed only through rollouts.

    ``rollout_fn(u: Trajectory) -> Trajectory`` runs the plant open loop. For
    each frequency the plant is excited with a sinusoid; the settle window is
    discarded, the measurement window covers at least three full periods (and
    at least ``measure`` seconds), and amplitude ratio and phase follow from
    complex demodulation against the excitation.
    """
    freqs = np.asarray(freqs, dtype=float)
    if np.any(freqs <= 0):
        raise ValueError("excitation frequencies must be positive")
    amps, phases, nonlin = [], [], []
    for f in freqs:
        cycles = max(3, int(np.ceil(measure * f)))
        n_meas = int(round(cycles / (f * dt)))
        n_settle = int(round(settle / dt))
        q = n_settle + n_meas
        t = np.arange(q) * dt
        u = amplitude * np.sin(2 * np.pi * f * t)
        try:
            y = rollout_fn(Trajectory(u, dt)).stacked()
        except DivergenceError as err:
            raise IdentificationError(f) from err
        uw = u[n_settle:]
        yw = y[n_settle:]
        w = 2 * np.pi * f
        phasor = np.exp(-1j * w * np.arange(n_meas) * dt)
        U = np.sum(uw * phasor)
        Y = np.sum(yw * phasor)
        # output samples lag the hold intervals by half a sample
        H = (Y / U) * np.exp(-1j * w * dt / 2)
        amps.append(np.abs(H))
        phases.append(np.angle(H))
        fund = 2.0 / n_meas * Y
        resid = yw - np.mean(yw) - np.real(np.conj(phasor) * fund)
        nonlin.append(float(np.sqrt(np.mean(resid**2))))
    return FrequencyResponseSet(freqs, np.array(amps), np.array(phases), np.array(nonlin))


def fit_transfer_function(frs, num_order, den_order, max_iter=50, weight_tol=1e-6):
    """Iteratively reweighted complex least-squares fit of a rational model.

    Linearized residuals ``num(jw) - H(jw) den(jw)`` are reweighted by the
    previous denominator magnitude (Sanathanan-Koerner) until the weights
    settle. Raises :class:`UnstableFitError` when the fitted poles are not
    strictly in the left half plane; callers may retry with other orders.
    """
    if den_order < num_order:
        raise ValueError("denominator order must be at least the numerator order")
    n_pts = len(frs.frequencies)
    if n_pts < num_order + den_order + 1:
        raise ValueError("not enough frequency points for the requested orders")
    H = frs.complex_response()
    w = 2 * np.pi * frs.frequencies
    scale = np.median(w) if np.median(w) > 0 else 1.0
    s = 1j * w / scale

    def design(weights):
        # unknowns: num coeffs (ascending, num_order+1), den coeffs a_0..a_{den_order-1}
        cols = []
        for j in range(num_order + 1):
            cols.append(s**j)
        for j in range(den_order):
            cols.append(-H * s**j)
        A = np.stack(cols, axis=1)
        b = H * s**den_order
        Aw = A * weights[:, None]
        bw = b * weights
        M = np.vstack([Aw.real, Aw.imag])
        v = np.concatenate([bw.real, bw.imag])
        theta, *_ = np.linalg.lstsq(M, v, rcond=None)
        return theta

    weights = np.ones(n_pts)
    theta = design(weights)
    for _ in range(max_iter):
        den_asc = np.concatenate([theta[num_order + 1 :], [1.0]])
        mags = np.abs(np.polyval(den_asc[::-1], s))
        new_weights = 1.0 / np.maximum(mags, 1e-12)
        new_weights = new_weights / np.max(new_weights)
        if np.max(np.abs(new_weights - weights)) < weight_tol:
            weights = new_weights
            break
        weights = new_weights
        theta = design(weights)

    num_asc = theta[: num_order + 1]
    den_asc = np.concatenate([theta[num_order + 1 :], [1.0]])
    # undo the frequency scaling: coefficient of s^j picks up scale^-j
    powers_num = scale ** (-np.arange(num_order + 1, dtype=float))
    powers_den = scale ** (-np.arange(den_order + 1, dtype=float))
    num = (num_asc * powers_num)[::-1]
    den = (den_asc * powers_den)[::-1]
    den_lead = den[0]
    tf = RationalTransferFunction(num / den_lead, den / den_lead)
    resid = tf.eval(1j * w) - H
    tf.fit_error = float(np.sqrt(np.mean(np.abs(resid) ** 2)))
    if not tf.is_stable():
        raise UnstableFitError(
            f"fitted poles not strictly stable for orders ({num_order},{den_order})"
        )
    return tf


def zoh_impulse_sequence(tf, dt, q):
    """First ``q`` samples of the end-of-interval sampled response to a unit
    input held over one interval (the column generator of the lifted map)."""
    num = np.trim_zeros(tf.num, "f")
    if num.size == 0:
        return np.zeros(q)
    A, B, C, D = sps.tf2ss(num, tf.den)
    n = A.shape[0]
    if n == 0:
        g = np.zeros(q)
        g[0] = float(D.ravel()[0]) if np.size(D) else 0.0
        return g
    Ad, Bd, Cd, Dd, _ = sps.cont2discrete((A, B, C, D), dt, method="zoh")
    g = np.zeros(q)
    x = Bd.ravel()
    c = Cd.ravel()
    g[0] = c @ x + Dd.ravel()[0]
    for k in range(1, q):
        x = Ad @ x
        g[k] = c @ x
    return g


def static_gradient_from_tf(tf, dt, q):
    """Lifted Jacobian of the identified model: ZOH-discretize, take the q-step
    impulse response, and build the lower-triangular convolution matrix."""
    if not tf.is_stable():
        raise UnstableFitError("static gradient requires a stable transfer function")
    return convolution_matrix(zoh_impulse_sequence(tf, dt, q), q)


def finite_difference_gradient(rollout_fn, u, n_env, perturb_std, seed):
    """Least-squares gradient over ``n_env`` randomly perturbed rollouts.

    Diverged rollouts are dropped from the regression; per-environment seeds
    are ``seed + index`` so results do not depend on execution order.
    """
    if n_env < 1:
        raise ValueError("n_env must be at least 1")
    if perturb_std <= 0:
        raise ValueError("perturb_std must be positive")
    y0 = rollout_fn(u).stacked()
    base = u.stacked()
    du_rows, dy_rows = [], []
    for i in range(n_env):
        rng = np.random.default_rng(seed + i)
        du = rng.normal(0.0, perturb_std, base.shape)
        try:
            y = rollout_fn(Trajectory.from_stacked(base + du, u.dt, u.channels)).stacked()
        except DivergenceError:
            continue
        du_rows.append(du)
        dy_rows.append(y - y0)
    if not du_rows:
        raise NoDataError("every perturbed rollout diverged")
    DU = np.array(du_rows)
    DY = np.array(dy_rows)
    Gt, *_ = np.linalg.lstsq(DU, DY, rcond=None)
    return Gt.T


def closed_loop_gradient(G_open, d_pifb_d_signal):
    """Sensitivity of the loop output to an additive input disturbance:
    ``(I - G K)^+ G`` with ``K`` the feedback's signal Jacobian."""
    G = np.asarray(G_open, dtype=float)
    if d_pifb_d_signal is None:
        return G.copy()
    K = np.asarray(d_pifb_d_signal, dtype=float)
    if G.shape[1] != K.shape[0] or K.shape[1] != G.shape[0]:
        raise ValueError(f"incompatible shapes {G.shape} and {K.shape}")
    M = np.eye(G.shape[0]) - G @ K
    try:
        return np.linalg.solve(M, G)
    except np.linalg.LinAlgError:
        res = pseudo_inverse(M)
        log.warning(
            "loop matrix singular; pseudo-inverse applied (rank %d of %d)", res.rank, M.shape[0]
        )
        return res.matrix @ G


class StaticGradientEstimator:
    """Fixed lifted-map estimate, e.g. from frequency-domain identification."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    def gradient(self, u, y):
        return self.matrix


class OracleGradientEstimator:
    """Exact Jacobian of an LTI plant; also serves as the audit reference."""

    def __init__(self, plant):
        self.matrix = plant.exact_jacobian()

    def gradient(self, u, y):
        return self.matrix

    def true_gradient(self, u):
        return self.matrix


class FiniteDifferenceEstimator:
    """Per-iteration stochastic finite differences around the current input.

    Each call consumes a fresh block of ``n_env`` seeds derived from the base
    seed, so repeated runs with the same seed are bit-reproducible.
    """

    def __init__(self, rollout_fn, n_env, perturb_std=1.0, seed=0):
        self.rollout_fn = rollout_fn
        self.n_env = n_env
        self.perturb_std = perturb_std
        self.seed = seed
        self.calls = 0

    def gradient(self, u, y):
        base = self.seed + self.calls * self.n_env
        self.calls += 1
        return finite_difference_gradient(self.rollout_fn, u, self.n_env, self.perturb_std, base)


def estimate_kappa(f_est_samples, f_true_samples, lambda_bound):
    """Relative bias of the estimated gradient against an oracle reference.

    Returns ``sqrt(lambda) * |mean(est) - mean(true)| / |mean(true)|``; values
    below one are the regime where the convergence guarantees stay non-trivial.
    """
    est = np.asarray(f_est_samples, dtype=float)
    true = np.asarray(f_true_samples, dtype=float)
    if est.shape != true.shape:
        raise ValueError("sample arrays must have matching shapes")
    if lambda_bound < 1:
        raise ValueError("lambda bound must be at least 1")
    m_est = est.mean(axis=0) if est.ndim > 1 else est
    m_true = true.mean(axis=0) if true.ndim > 1 else true
    denom = np.linalg.norm(m_true)
    if denom < 1e-12:
        raise UndefinedKappaError("reference gradient mean is numerically zero")
    return float(np.sqrt(lambda_bound) * np.linalg.norm(m_est - m_true) / denom)
