"""Online quasi-Newton learning of tracking controllers for black-box plants.

The package combines five ingredients: simulated plants that expose only a
rollout interface (a nonlinear lumped-parameter beam and LTI references),
reference-trajectory distributions with minimum-jerk composition, windowed
feedforward/feedback policies with analytic Jacobians, gradient estimators
for the plant map (frequency-domain static model, stochastic finite
differences, exact oracle), and the online quasi-Newton optimizer with its
running pseudo-Hessian. A diagnostics layer checks the convergence theory
empirically and a CLI harness reproduces the beam experiments at desk scale.
"""

__version__ = "0.1.0"
