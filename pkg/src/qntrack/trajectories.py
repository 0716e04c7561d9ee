"""Sampled signals, reference-trajectory distributions, and the tracking loss.

Sampling convention used throughout the package: sample ``k`` of a trajectory
of step ``dt`` refers to time ``(k + 1) * dt``, i.e. the end of the k-th
control interval. Plants report their output at the same instants, so
references, inputs, and outputs of equal length always line up and the lifted
input-to-output map of an LTI plant is lower triangular with a nonzero
diagonal for plants with instantaneous feedthrough.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import solve_quintic_boundary

_BLOB_MAGIC = b"QTRJ"
_BLOB_VERSION = 1


@dataclass
class Trajectory:
    """Uniformly sampled signal; ``values`` is ``(q,)`` or ``(q, channels)``."""

    values: np.ndarray
    dt: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim not in (1, 2):
            raise ValueError("trajectory values must be 1-D or 2-D")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trajectory contains non-finite values")

    @property
    def q(self):
        return self.values.shape[0]

    def __len__(self):
        return self.q

    @property
    def channels(self):
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def times(self):
        """Sample instants ``(k + 1) * dt``."""
        return (np.arange(self.q) + 1.0) * self.dt

    def stacked(self):
        """Flat sample-major vector of length ``q * channels``."""
        return self.values.reshape(-1)

    def as_2d(self):
        v = self.values
        return v[:, None] if v.ndim == 1 else v

    def copy(self):
        return Trajectory(self.values.copy(), self.dt)

    @staticmethod
    def from_stacked(flat, dt, channels=1):
        flat = np.asarray(flat, dtype=float)
        if channels == 1:
            return Trajectory(flat.copy(), dt)
        return Trajectory(flat.reshape(-1, channels).copy(), dt)

    @staticmethod
    def zeros(q, dt, channels=1):
        shape = (q,) if channels == 1 else (q, channels)
        return Trajectory(np.zeros(shape), dt)

    def to_csv(self, path):
        """Write ``k, t, value per channel`` rows."""
        v = self.as_2d()
        t = self.times()
        with open(path, "w") as f:
            cols = ",".join(f"value{c}" for c in range(self.channels))
            f.write(f"k,t,{cols}\n")
            for k in range(self.q):
                vals = ",".join(f"{x:.17g}" for x in v[k])
                f.write(f"{k},{t[k]:.17g},{vals}\n")

    @staticmethod
    def from_csv(path, dt=None):
        data = np.genfromtxt(path, delimiter=",", skip_header=1)
        data = np.atleast_2d(data)
        t = data[:, 1]
        inferred = t[0] if len(t) == 1 else t[1] - t[0]
        values = data[:, 2:]
        if values.shape[1] == 1:
            values = values[:, 0]
        return Trajectory(values, dt if dt is not None else float(inferred))

    def to_blob(self):
        """Compact binary form used for harness checkpoints."""
        buf = io.BytesIO()
        buf.write(_BLOB_MAGIC)
        buf.write(struct.pack("<IdQQ", _BLOB_VERSION, self.dt, self.q, self.channels))
        buf.write(self.as_2d().astype("<f8").tobytes())
        return buf.getvalue()

    @staticmethod
    def from_blob(blob):
        if blob[:4] != _BLOB_MAGIC:
            raise ValueError("not a trajectory blob")
        version, dt, q, channels = struct.unpack_from("<IdQQ", blob, 4)
        if version != _BLOB_VERSION:
            raise ValueError(f"unsupported trajectory blob version {version}")
        off = 4 + struct.calcsize("<IdQQ")
        values = np.frombuffer(blob, dtype="<f8", count=q * channels, offset=off)
        values = values.reshape(q, channels)
        if channels == 1:
            values = values[:, 0]
        return Trajectory(values.copy(), dt)


class PiecewiseQuintic:
    """Piecewise quintic curve with an optional constant hold after the last knot."""

    def __init__(self, breakpoints, coefficients, hold_until=None):
        self.breakpoints = np.asarray(breakpoints, dtype=float)
        self.coefficients = np.asarray(coefficients, dtype=float)  # (n_seg, 6)
        self.hold_until = hold_until
        if len(self.breakpoints) != len(self.coefficients) + 1:
            raise ValueError("need one more breakpoint than segments")

    def _eval(self, t, derivative):
        from numpy.polynomial import polynomial as P

        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        out = np.zeros_like(tt)
        end = self.breakpoints[-1]
        seg = np.clip(np.searchsorted(self.breakpoints, tt, side="right") - 1, 0, len(self.coefficients) - 1)
        for s in range(len(self.coefficients)):
            mask = (seg == s) & (tt < end)
            if not np.any(mask):
                continue
            c = P.polyder(self.coefficients[s], m=derivative) if derivative else self.coefficients[s]
            out[mask] = P.polyval(tt[mask] - self.breakpoints[s], c)
        past = tt >= end
        if np.any(past):
            # hold the terminal position, zero derivatives
            tau_end = end - self.breakpoints[-2]
            terminal = P.polyval(tau_end, self.coefficients[-1])
            out[past] = terminal if derivative == 0 else 0.0
        return out[0] if scalar else out

    def position(self, t):
        return self._eval(t, 0)

    def velocity(self, t):
        return self._eval(t, 1)

    def acceleration(self, t):
        return self._eval(t, 2)


@dataclass
class BeamReferenceDistribution:
    """Random tip references: two interior knots joined by minimum-jerk quintics.

    Knot times, displacements, and velocities are drawn uniformly from the
    stated ranges; accelerations are zero at every knot. The curve starts and
    ends at rest at zero and holds zero for the final ``hold_tail`` seconds.
    """

    t_a_range: tuple = (1.2, 1.8)
    t_b_range: tuple = (2.9, 3.5)
    y_range: tuple = (-0.2, 0.2)
    v_range: tuple = (-2.0, 2.0)
    total_time: float = 5.5
    hold_tail: float = 0.5

    def __post_init__(self):
        for name in ("t_a_range", "t_b_range", "y_range", "v_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered")
        if self.t_a_range[1] > self.t_b_range[0]:
            raise ValueError("knot time ranges must not overlap")
        if self.total_time <= self.t_b_range[1] + self.hold_tail:
            raise ValueError("total_time must leave room for the final segment and hold")

    @property
    def active_time(self):
        """Time at which the curve has returned to zero and the hold begins."""
        return self.total_time - self.hold_tail

    def sample_knots(self, rng):
        t_a = rng.uniform(*self.t_a_range)
        t_b = rng.uniform(*self.t_b_range)
        y_a = rng.uniform(*self.y_range)
        y_b = rng.uniform(*self.y_range)
        v_a = rng.uniform(*self.v_range)
        v_b = rng.uniform(*self.v_range)
        return t_a, y_a, v_a, t_b, y_b, v_b

    def spline(self, rng):
        t_a, y_a, v_a, t_b, y_b, v_b = self.sample_knots(rng)
        knots = [
            (0.0, 0.0, 0.0, 0.0),
            (t_a, y_a, v_a, 0.0),
            (t_b, y_b, v_b, 0.0),
            (self.active_time, 0.0, 0.0, 0.0),
        ]
        coeffs = []
        for (t0, p0, v0, a0), (t1, p1, v1, a1) in zip(knots[:-1], knots[1:]):
            coeffs.append(solve_quintic_boundary(p0, v0, a0, p1, v1, a1, t1 - t0))
        breakpoints = [k[0] for k in knots]
        return PiecewiseQuintic(breakpoints, np.array(coeffs), hold_until=self.total_time)


def _coerce_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_beam_reference(dist, seed_or_rng, dt=0.01):
    """Draw one reference trajectory sampled on the package time grid."""
    rng = _coerce_rng(seed_or_rng)
    spline = dist.spline(rng)
    q = int(round(dist.total_time / dt))
    t = (np.arange(q) + 1.0) * dt
    return Trajectory(spline.position(t), dt)


class BeamReferenceSampler:
    """Draws beam references on the package time grid; plugs into the run loop."""

    def __init__(self, dist=None, dt=0.01):
        self.dist = dist or BeamReferenceDistribution()
        self.dt = dt

    def sample(self, rng):
        return sample_beam_reference(self.dist, rng, self.dt)


class FixedReference:
    """Zero-variance distribution: every draw returns the same trajectory."""

    def __init__(self, trajectory):
        self.trajectory = trajectory

    def sample(self, rng):
        return self.trajectory.copy()


class EpochSampler:
    """Visits a stored reference set exactly once per epoch, in random order."""

    def __init__(self, references):
        if not references:
            raise ValueError("need at least one stored reference")
        self.references = list(references)
        self._pending = []
        self.epoch = 0

    def sample(self, rng):
        if not self._pending:
            self._pending = list(rng.permutation(len(self.references)))
            self.epoch += 1
        return self.references[self._pending.pop(0)].copy()


def tracking_loss(y, y_ref):
    """Squared tracking deviation ``0.5 * |y - y_ref|^2`` summed over all samples.

    The gradient with respect to the stacked output is ``y - y_ref`` (see
    :func:`tracking_loss_gradient`) and the Hessian is the identity.
    """
    a, b = _check_pair(y, y_ref)
    d = a - b
    return 0.5 * float(d @ d)


def tracking_loss_gradient(y, y_ref):
    a, b = _check_pair(y, y_ref)
    return a - b


def _check_pair(y, y_ref):
    a = y.stacked() if isinstance(y, Trajectory) else np.asarray(y, dtype=float).ravel()
    b = y_ref.stacked() if isinstance(y_ref, Trajectory) else np.asarray(y_ref, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


@dataclass
class LossRecord:
    """One row of the loss bookkeeping: iteration count, loss, exact running mean."""

    iteration: int = 0
    loss: float = 0.0
    average: float = 0.0


def update_average_loss(prev, loss):
    """Advance the running average ``avg_t = ((t - 1) avg_{t-1} + loss) / t``."""
    loss = float(loss)
    if prev is None or prev.iteration == 0:
        return LossRecord(iteration=1, loss=loss, average=loss)
    t = prev.iteration + 1
    avg = ((t - 1) * prev.average + loss) / t
    return LossRecord(iteration=t, loss=loss, average=avg)
