"""Online quasi-Newton method and its gradient-descent limit.

Per iteration: sample a reference, roll out the (possibly closed) loop,
assemble the sensitivity of the stacked output with respect to the policy
parameters from the plant-gradient estimate and the policy Jacobians, build
the per-step pseudo-Hessian, fold it into the running average, and take the
preconditioned step. The running average stays positive definite because
every pseudo-Hessian includes an identity term, so a plain inverse applies;
the inverse is maintained incrementally by a rank-correction recursion
(``solver="recursion"``, with a periodic direct re-inversion to bound float
drift) or the step solves against the running average by Cholesky
factorization (``solver="cholesky"``, cheaper for wide networks). With
``epsilon = inf`` all curvature terms vanish and the method is plain online
gradient descent; no matrices are formed in that mode.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .gradest import closed_loop_gradient
from .plants import DivergenceError
from .trajectories import LossRecord, tracking_loss, tracking_loss_gradient, update_average_loss


class AbortIterationError(RuntimeError):
    """Non-finite gradient; the optimizer state was left untouched."""


class RunAbortedError(RuntimeError):
    """Too many skipped iterations (plant divergence) for the run to be meaningful."""


@dataclass
class ConstantStep:
    eta: float

    def value(self, t):
        return self.eta


@dataclass
class DiminishingStep:
    """eta_t = c / sqrt(t)."""

    c: float

    def value(self, t):
        return self.c / math.sqrt(t)


def theorem1_step_size(f1, smoothness, grad_bound, horizon):
    """Constant step ``sqrt(2 F(omega_1) / (L H^2 T))`` used by the rate guarantee."""
    if f1 < 0 or smoothness <= 0 or grad_bound <= 0 or horizon <= 0:
        raise ValueError("constants must be positive (f1 may be zero)")
    return math.sqrt(2.0 * f1 / (smoothness * grad_bound**2 * horizon))


@dataclass
class RateCertifiedStep:
    """Constant step from user-supplied estimates of F(omega_1), L, and H."""

    f1: float
    smoothness: float
    grad_bound: float
    horizon: int

    def value(self, t):
        return theorem1_step_size(self.f1, self.smoothness, self.grad_bound, self.horizon)


@dataclass
class OptimizerConfig:
    epsilon: float = math.inf  # inf = gradient descent
    alpha: float = 0.0
    step: object = field(default_factory=lambda: ConstantStep(0.1))
    iterations: int = 100
    solver: str = "recursion"  # "recursion" | "cholesky"
    reinvert_every: int = 100
    max_skip_fraction: float = 0.1
    audit_hessian: bool = False  # record eigenvalue range of each pseudo-Hessian

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive (use inf for gradient descent)")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.solver not in ("recursion", "cholesky"):
            raise ValueError(f"unknown solver {self.solver!r}")

    @property
    def gradient_descent(self):
        return math.isinf(self.epsilon)


@dataclass
class OptimizerState:
    """Iteration counter, parameters, running pseudo-Hessian and its inverse."""

    omega: object  # ParameterVector
    t: int = 0
    A: np.ndarray | None = None
    A_inv: np.ndarray | None = None
    loss_history: list = field(default_factory=list)
    grad_norm_history: list = field(default_factory=list)  # (|g|^2, g^T A^-1 g)
    lambda_range_history: list = field(default_factory=list)
    _chol: tuple | None = None

    def record_loss(self, loss):
        prev = self.loss_history[-1] if self.loss_history else None
        rec = update_average_loss(prev, loss)
        self.loss_history.append(rec)
        return rec


def assemble_sensitivity(G_est, jac):
    """Output-parameter sensitivity ``(I - G K)^+ G J`` of the executed loop.

    ``jac`` carries the stacked policy Jacobians; with no feedback the loop
    matrix is the identity and the result reduces to ``G @ J``.
    """
    G = np.asarray(G_est, dtype=float)
    J = np.asarray(jac.d_pi_d_omega, dtype=float)
    if G.shape[1] != J.shape[0]:
        raise ValueError(f"plant gradient {G.shape} does not accept policy output {J.shape}")
    if jac.d_pi_d_signal is None:
        return G @ J
    return closed_loop_gradient(G, jac.d_pi_d_signal) @ J


def pseudo_hessian(L_t, d_pi_d_omega, epsilon, alpha, hess_l=None):
    """Per-step curvature surrogate ``(L' H L)/eps + (alpha/eps) J' J + I``.

    ``hess_l=None`` means the identity output-loss Hessian of the squared
    tracking loss. The result is symmetric with eigenvalues >= 1; with
    ``epsilon = inf`` it degenerates to the identity.
    """
    L = np.asarray(L_t, dtype=float)
    n = np.asarray(d_pi_d_omega).shape[1] if d_pi_d_omega is not None else L.shape[1]
    if math.isinf(epsilon):
        return np.eye(n)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    core = L.T @ L if hess_l is None else L.T @ np.asarray(hess_l) @ L
    out = core / epsilon
    if alpha != 0.0 and d_pi_d_omega is not None:
        J = np.asarray(d_pi_d_omega, dtype=float)
        out = out + (alpha / epsilon) * (J.T @ J)
    out = out + np.eye(n)
    return out


def curvature_factor(L_t, d_pi_d_omega, epsilon, alpha):
    """Stacked factor B with ``pseudo_hessian = I + B.T @ B`` (identity loss Hessian)."""
    if math.isinf(epsilon):
        return None
    rows = [np.asarray(L_t) / math.sqrt(epsilon)]
    if alpha != 0.0 and d_pi_d_omega is not None:
        rows.append(math.sqrt(alpha / epsilon) * np.asarray(d_pi_d_omega))
    return np.vstack(rows)


def update_running_hessian(state, lambda_t, solver="recursion", reinvert_every=100, audit=False):
    """Fold one pseudo-Hessian into the running mean ``A_t = (1/t) sum Lambda_k``.

    In recursion mode the inverse is advanced without re-inverting:
    ``A_t^{-1} = t/(t-1) A_{t-1}^{-1} - t/(t-1)^2 R (I + R/(t-1))^{-1} A_{t-1}^{-1}``
    with ``R = A_{t-1}^{-1} Lambda_t``; a direct inverse is substituted every
    ``reinvert_every`` steps to stop drift accumulating. ``lambda_t=None``
    denotes the identity (gradient-descent mode) and skips all matrix work.
    """
    if lambda_t is None:
        state.t += 1
        return state
    lam = np.asarray(lambda_t, dtype=float)
    if audit:
        eigs = np.linalg.eigvalsh(lam)
        state.lambda_range_history.append((float(eigs[0]), float(eigs[-1])))
    if state.t == 0:
        state.A = lam.copy()
        state.A_inv = np.linalg.inv(lam) if solver == "recursion" else None
        state.t = 1
        state._chol = None
        return state
    t_prev = state.t
    t_new = t_prev + 1
    state.A = (t_prev * state.A + lam) / t_new
    if solver == "recursion":
        R = state.A_inv @ lam
        n = R.shape[0]
        inner = np.linalg.solve(np.eye(n) + R / t_prev, state.A_inv)
        state.A_inv = (t_new / t_prev) * state.A_inv - (t_new / t_prev**2) * (R @ inner)
        if reinvert_every and t_new % reinvert_every == 0:
            state.A_inv = np.linalg.inv(state.A)
    else:
        state.A_inv = None
    state.t = t_new
    state._chol = None
    return state


def _precondition(state, g):
    """Solve ``A_t d = g`` using whichever representation the state maintains."""
    if state.A is None:
        return g.copy()
    if state.A_inv is not None:
        return state.A_inv @ g
    if state._chol is None:
        state._chol = np.linalg.cholesky(state.A)
    half = solve_triangular(state._chol, g, lower=True, check_finite=False)
    return solve_triangular(state._chol.T, half, lower=False, check_finite=False)


def quasi_newton_step(state, L_t, grad_y_loss, config):
    """Parameter update ``omega -= eta_t A_t^{-1} L_t' grad_y`` with norm bookkeeping.

    Returns the applied step vector. Raises :class:`AbortIterationError` on a
    non-finite gradient, leaving the state untouched.
    """
    g = np.asarray(L_t).T @ np.asarray(grad_y_loss, dtype=float)
    if not np.all(np.isfinite(g)):
        raise AbortIterationError("estimated gradient is not finite")
    eta = config.step.value(max(state.t, 1))
    d = _precondition(state, g)
    step = -eta * d
    state.omega.data = state.omega.data + step
    state.grad_norm_history.append((float(g @ g), float(g @ d)))
    return step


@dataclass
class RunLog:
    """Per-iteration trace of one online learning run."""

    columns = ("t", "loss", "delta_t", "grad_norm2", "grad_norm2_Ainv", "step_norm", "kappa_hat", "skipped")
    rows: list = field(default_factory=list)

    def append(self, **kw):
        self.rows.append([kw.get(c, math.nan) for c in self.columns])

    def column(self, name):
        idx = self.columns.index(name)
        return np.array([r[idx] for r in self.rows])

    def to_csv(self, path, timestamp=None):
        stamp = timestamp or datetime.datetime.now().isoformat()
        with open(path, "w") as f:
            f.write(f"# qntrack run log written {stamp}\n")
            f.write(",".join(self.columns) + "\n")
            for row in self.rows:
                f.write(",".join(_fmt_cell(x) for x in row) + "\n")


def _fmt_cell(x):
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


@dataclass
class KappaAudit:
    """Optional per-iteration bias audit against an oracle plant gradient."""

    lambda_bound: float = 1.0
    every: int = 1

    def check(self, estimator, u, jac, grad_y, g_est):
        true_G = getattr(estimator, "true_gradient", None)
        if true_G is None:
            return math.nan
        from .gradest import estimate_kappa

        L_true = assemble_sensitivity(true_G(u), jac)
        g_true = L_true.T @ grad_y
        try:
            return estimate_kappa(g_est[None, :], g_true[None, :], self.lambda_bound)
        except Exception:
            return math.nan


def run_online_learning(
    plant,
    reference_sampler,
    controller,
    estimator,
    config,
    seed,
    kappa_audit=None,
    checkpoint_hook=None,
):
    """Execute the full online loop for ``config.iterations`` rounds.

    ``reference_sampler.sample(rng)`` draws the reference for each round;
    ``estimator.gradient(u, y)`` supplies the plant-gradient estimate.
    Iterations whose rollout diverges are skipped and logged; the run aborts
    once more than ``max_skip_fraction`` of the budget is lost.
    """
    rng = np.random.default_rng(seed)
    state = OptimizerState(omega=controller.combined_parameters())
    run_log = RunLog()
    skipped = 0
    max_skips = int(config.max_skip_fraction * config.iterations)
    for t in range(1, config.iterations + 1):
        ref = reference_sampler.sample(rng)
        noise = _draw_noise(plant, rng)
        controller.set_combined(state.omega)
        try:
            u, y, err = controller.run(plant, ref, noise)
        except DivergenceError:
            skipped += 1
            run_log.append(t=t, skipped=1)
            if skipped > max_skips:
                raise RunAbortedError(
                    f"{skipped} of {t} iterations diverged (limit {max_skips})"
                )
            continue
        loss_rec = state.record_loss(tracking_loss(y, ref))
        grad_y = tracking_loss_gradient(y, ref)
        G = estimator.gradient(u, y)
        jac = controller.jacobians(ref, err)
        L = assemble_sensitivity(G, jac)
        if config.gradient_descent:
            update_running_hessian(state, None)
        else:
            B = curvature_factor(L, jac.d_pi_d_omega, config.epsilon, config.alpha)
            lam = B.T @ B
            lam[np.diag_indices_from(lam)] += 1.0
            update_running_hessian(
                state, lam, solver=config.solver,
                reinvert_every=config.reinvert_every, audit=config.audit_hessian,
            )
        kappa_hat = math.nan
        g_est = L.T @ grad_y
        if kappa_audit is not None and state.t % kappa_audit.every == 0:
            kappa_hat = kappa_audit.check(estimator, u, jac, grad_y, g_est)
        step = quasi_newton_step(state, L, grad_y, config)
        g2, g2_ainv = state.grad_norm_history[-1]
        run_log.append(
            t=t,
            loss=loss_rec.loss,
            delta_t=loss_rec.average,
            grad_norm2=g2,
            grad_norm2_Ainv=g2_ainv,
            step_norm=float(np.linalg.norm(step)),
            kappa_hat=kappa_hat,
            skipped=0,
        )
        if checkpoint_hook is not None:
            checkpoint_hook(t, state)
    controller.set_combined(state.omega)
    return state, run_log


def _draw_noise(plant, rng):
    cfg = plant.cfg
    if cfg.noise_std <= 0:
        return None
    from .trajectories import Trajectory

    return Trajectory(rng.normal(0.0, cfg.noise_std, cfg.horizon), cfg.dt)
