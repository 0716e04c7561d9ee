"""Black-box plants exposing only rollouts: a nonlinear cantilever beam and LTI maps.

The beam is a chain of rigid units joined by nonlinear torsional springs
(``k1 da + k2 da^3 + k3 da^5``) and linear dampers; the active torque enters
the first joint only and the observed output is the tip height. The damper
network makes the chain stiff (fast rate ~ 4 b / inertia), so the classical
RK4 integrator subdivides each sample interval into a fixed number of
substeps chosen for stability; the control input is held constant across one
sample interval. Outputs are reported at the end of each interval, matching
the package-wide sampling convention.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .trajectories import Trajectory

VELOCITY_OVERFLOW = 1e6


class DivergenceError(RuntimeError):
    """Raised when a rollout leaves the overflow guard; carries the first bad step."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"state overflow at sample {step}")


@dataclass
class PlantConfig:
    """Simulation step, horizon, disturbance level, and noise seed."""

    dt: float = 0.01
    horizon: int = 550
    noise_std: float = 0.0
    seed: int = 0
    substeps: int | None = None  # RK4 subdivisions per sample; None = stability rule

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass
class BeamParameters:
    """Lumped-parameter beam model constants (defaults: the reference 50-unit beam)."""

    n_units: int = 50
    unit_length: float = 3e-2  # m
    inertia: float = 5e-3  # per-unit rotational inertia about its joint
    k1: float = 5.0  # N*m/rad
    k2: float = 1e3  # N*m/rad^3
    k3: float = 1e4  # N*m/rad^5
    damping: float = 30.0  # N*s/rad

    def __post_init__(self):
        for name in ("n_units", "unit_length", "inertia", "k1", "k2", "k3", "damping"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class PlantRollout:
    """One episode: applied input, observed output, realized disturbance, seed."""

    input: Trajectory
    output: Trajectory
    noise: Trajectory
    seed: int

    def __post_init__(self):
        if len(self.input) != len(self.output):
            raise ValueError("input and output lengths differ")


@njit(cache=True)
def _beam_derivs(alpha, omega, torque, k1, k2, k3, b, inertia):
    n = alpha.shape[0]
    acc = np.empty(n)
    # joint torque between unit i and its inboard neighbour (unit 0 attaches to the wall)
    f = np.empty(n)
    for i in range(n):
        da = alpha[i] - (alpha[i - 1] if i > 0 else 0.0)
        dv = omega[i] - (omega[i - 1] if i > 0 else 0.0)
        da2 = da * da
        f[i] = (k1 + (k2 + k3 * da2) * da2) * da + b * dv
    for i in range(n):
        t = -f[i]
        if i + 1 < n:
            t += f[i + 1]
        if i == 0:
            t += torque
        acc[i] = t / inertia
    return acc


@njit(cache=True)
def _beam_step(alpha, omega, torque, h, substeps, k1, k2, k3, b, inertia):
    for _ in range(substeps):
        a1 = omega
        b1 = _beam_derivs(alpha, omega, torque, k1, k2, k3, b, inertia)
        a2 = omega + 0.5 * h * b1
        b2 = _beam_derivs(alpha + 0.5 * h * a1, a2, torque, k1, k2, k3, b, inertia)
        a3 = omega + 0.5 * h * b2
        b3 = _beam_derivs(alpha + 0.5 * h * a2, a3, torque, k1, k2, k3, b, inertia)
        a4 = omega + h * b3
        b4 = _beam_derivs(alpha + h * a3, a4, torque, k1, k2, k3, b, inertia)
        alpha = alpha + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        omega = omega + (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
    return alpha, omega


@njit(cache=True)
def _beam_run(alpha, omega, u, dt, substeps, k1, k2, k3, b, inertia, unit_length):
    q = u.shape[0]
    y = np.zeros(q)
    h = dt / substeps
    bad = -1
    for k in range(q):
        alpha, omega = _beam_step(alpha, omega, u[k], h, substeps, k1, k2, k3, b, inertia)
        ok = True
        tip = 0.0
        for i in range(alpha.shape[0]):
            if not (np.isfinite(alpha[i]) and np.isfinite(omega[i]) and abs(omega[i]) <= VELOCITY_OVERFLOW):
                ok = False
            tip += unit_length * np.sin(alpha[i])
        if not ok:
            bad = k
            break
        y[k] = tip
    return y, alpha, omega, bad


def _default_substeps(params, dt):
    # keep |lambda_max| * h <= 2 for the fast damping rate ~ 4 b / inertia
    fast_rate = 4.0 * params.damping / params.inertia
    return max(1, int(np.ceil(dt * fast_rate / 2.0)))


def _resolve_noise(cfg, q, dt, noise):
    if noise is not None:
        if len(noise) != q:
            raise ValueError("noise length must equal the horizon")
        return noise
    if cfg.noise_std > 0:
        rng = np.random.default_rng(cfg.seed)
        return Trajectory(rng.normal(0.0, cfg.noise_std, q), dt)
    return Trajectory.zeros(q, dt)


class BeamPlant:
    """Cantilever beam with a stepwise interface for closed-loop execution."""

    def __init__(self, params=None, cfg=None):
        self.params = params or BeamParameters()
        self.cfg = cfg or PlantConfig()
        self.substeps = self.cfg.substeps or _default_substeps(self.params, self.cfg.dt)

    @property
    def dt(self):
        return self.cfg.dt

    @property
    def horizon(self):
        return self.cfg.horizon

    def rollout(self, input, noise=None):
        if len(input) != self.cfg.horizon:
            raise ValueError("input length must equal the configured horizon")
        noise = _resolve_noise(self.cfg, len(input), self.cfg.dt, noise)
        p = self.params
        alpha = np.zeros(p.n_units)
        omega = np.zeros(p.n_units)
        u_eff = input.stacked() + noise.stacked()
        y, _, _, bad = _beam_run(
            alpha, omega, u_eff, self.cfg.dt, self.substeps,
            p.k1, p.k2, p.k3, p.damping, p.inertia, p.unit_length,
        )
        if bad >= 0:
            raise DivergenceError(bad)
        return PlantRollout(input=input.copy(), output=Trajectory(y, self.cfg.dt), noise=noise, seed=self.cfg.seed)

    def stepper(self, noise=None):
        noise = _resolve_noise(self.cfg, self.cfg.horizon, self.cfg.dt, noise)
        return BeamStepper(self, noise)


class BeamStepper:
    """Advances the beam one sample at a time; used by the causal two-DoF loop."""

    def __init__(self, plant, noise):
        self.plant = plant
        self.noise = noise
        p = plant.params
        self.alpha = np.zeros(p.n_units)
        self.omega = np.zeros(p.n_units)
        self.k = 0

    def step(self, u_k):
        p = self.plant.params
        cfg = self.plant.cfg
        if self.k >= cfg.horizon:
            raise IndexError("stepper ran past the horizon")
        torque = float(u_k) + float(self.noise.stacked()[self.k])
        h = cfg.dt / self.plant.substeps
        self.alpha, self.omega = _beam_step(
            self.alpha, self.omega, torque, h, self.plant.substeps,
            p.k1, p.k2, p.k3, p.damping, p.inertia,
        )
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.omega))
                and np.max(np.abs(self.omega)) <= VELOCITY_OVERFLOW):
            raise DivergenceError(self.k)
        self.k += 1
        return p.unit_length * float(np.sum(np.sin(self.alpha)))

    def state(self):
        return self.alpha.copy(), self.omega.copy()


def beam_rollout(params, cfg, input, noise=None):
    """Functional wrapper around :class:`BeamPlant` for one-off rollouts."""
    return BeamPlant(params, cfg).rollout(input, noise)


def beam_energy(params, alpha, omega):
    """Mechanical-energy surrogate: kinetic plus torsional spring potential."""
    alpha = np.asarray(alpha, dtype=float)
    omega = np.asarray(omega, dtype=float)
    da = np.diff(np.concatenate(([0.0], alpha)))
    potential = np.sum(params.k1 * da**2 / 2 + params.k2 * da**4 / 4 + params.k3 * da**6 / 6)
    kinetic = 0.5 * params.inertia * np.sum(omega**2)
    return float(kinetic + potential)


class LtiPlant:
    """Exact FIR plant ``y = conv(g, u + noise)``; the oracle for estimator tests."""

    def __init__(self, impulse_response, cfg=None):
        self.g = np.asarray(impulse_response, dtype=float).ravel()
        if self.g.size == 0:
            raise ValueError("impulse response must be non-empty")
        self.cfg = cfg or PlantConfig()
        if self.g.size > self.cfg.horizon:
            raise ValueError("impulse response longer than the horizon")

    @property
    def dt(self):
        return self.cfg.dt

    @property
    def horizon(self):
        return self.cfg.horizon

    def rollout(self, input, noise=None):
        if len(input) != self.cfg.horizon:
            raise ValueError("input length must equal the configured horizon")
        noise = _resolve_noise(self.cfg, len(input), self.cfg.dt, noise)
        u_eff = input.stacked() + noise.stacked()
        y = np.convolve(u_eff, self.g)[: len(input)]
        return PlantRollout(input=input.copy(), output=Trajectory(y, self.cfg.dt), noise=noise, seed=self.cfg.seed)

    def exact_jacobian(self):
        """Lower-triangular lifted map; the true gradient of this plant."""
        from .numerics import convolution_matrix

        return convolution_matrix(self.g, self.cfg.horizon)

    def stepper(self, noise=None):
        noise = _resolve_noise(self.cfg, self.cfg.horizon, self.cfg.dt, noise)
        return LtiStepper(self, noise)


class LtiStepper:
    def __init__(self, plant, noise):
        self.plant = plant
        self.noise = noise.stacked()
        self.u_hist = np.zeros(plant.cfg.horizon)
        self.k = 0

    def step(self, u_k):
        g = self.plant.g
        if self.k >= self.plant.cfg.horizon:
            raise IndexError("stepper ran past the horizon")
        self.u_hist[self.k] = float(u_k) + self.noise[self.k]
        lo = max(0, self.k - len(g) + 1)
        y = float(g[: self.k - lo + 1][::-1] @ self.u_hist[lo : self.k + 1])
        self.k += 1
        return y


def lti_rollout(impulse_response, input, noise=None, noise_std=0.0, seed=0):
    """Functional wrapper; horizon and dt are taken from the input trajectory."""
    cfg = PlantConfig(dt=input.dt, horizon=len(input), noise_std=noise_std, seed=seed)
    return LtiPlant(impulse_response, cfg).rollout(input, noise)


def rollout_to_csv(rollout, path):
    """Write ``k, t, u, n_d, y`` rows for one episode."""
    u = rollout.input.stacked()
    n = rollout.noise.stacked()
    y = rollout.output.stacked()
    t = rollout.input.times()
    with open(path, "w") as f:
        f.write("k,t,u,n_d,y\n")
        for k in range(len(u)):
            f.write(f"{k},{t[k]:.17g},{u[k]:.17g},{n[k]:.17g},{y[k]:.17g}\n")
