"""Parameterized feedforward/feedback controllers and their analytic Jacobians.

A windowed policy applies the same small network independently at every
sample: the input at sample ``k`` is a window of the driving signal covering
``h1`` past samples, the current one, and ``h2`` future samples, zero-padded
where the window leaves the signal. Feedback policies run with
``strict_past=True``: their window covers samples ``k-h1 .. k-1`` only, so in
closed loop the controller at step ``k`` reads strictly past measurements and
its signal Jacobian is strictly lower block-triangular. A ``latent`` policy
instead maps the whole stacked signal through fixed projection matrices
around a one-hidden-layer network (the pretrained-motion-pattern structure).

The rectifier subgradient at exactly zero is taken to be zero.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .trajectories import Trajectory

_CKPT_MAGIC = b"QPOL"
_CKPT_VERSION = 1


@dataclass
class PolicySpec:
    """Architecture of one policy network."""

    kind: str  # "linear" | "mlp" | "latent"
    h1: int = 0
    h2: int = 0
    hidden: int = 0
    in_channels: int = 1
    out_channels: int = 1
    strict_past: bool = False
    input_map: np.ndarray | None = None  # latent only: (n_features, q * in_channels)
    output_map: np.ndarray | None = None  # latent only: (q * out_channels, n_code)

    def __post_init__(self):
        if self.kind not in ("linear", "mlp", "latent"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.h1 < 0 or self.h2 < 0:
            raise ValueError("window horizons must be non-negative")
        if self.kind in ("mlp", "latent") and self.hidden <= 0:
            raise ValueError("hidden layer size must be positive")
        if self.strict_past:
            if self.h2 != 0:
                raise ValueError("a strictly-past policy cannot look ahead (h2 must be 0)")
            if self.h1 < 1:
                raise ValueError("a strictly-past policy needs at least one past sample")
        if self.kind == "latent":
            if self.input_map is None or self.output_map is None:
                raise ValueError("latent policies need input_map and output_map")
            self.input_map = np.asarray(self.input_map, dtype=float)
            self.output_map = np.asarray(self.output_map, dtype=float)

    @property
    def window_len(self):
        return self.h1 if self.strict_past else self.h1 + 1 + self.h2

    @property
    def window_size(self):
        if self.kind == "latent":
            return self.input_map.shape[0]
        return self.window_len * self.in_channels

    def layout(self):
        w = self.window_size
        if self.kind == "linear":
            return [("weight", (self.out_channels, w))]
        code = self.output_map.shape[1] if self.kind == "latent" else self.out_channels
        return [
            ("w1", (self.hidden, w)),
            ("b1", (self.hidden,)),
            ("w2", (code, self.hidden)),
            ("b2", (code,)),
        ]

    def n_parameters(self):
        return sum(int(np.prod(shape)) for _, shape in self.layout())

    def to_dict(self):
        d = {
            "kind": self.kind,
            "h1": self.h1,
            "h2": self.h2,
            "hidden": self.hidden,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "strict_past": self.strict_past,
        }
        if self.kind == "latent":
            d["input_map_sha"] = hashlib.sha256(self.input_map.tobytes()).hexdigest()
            d["output_map_sha"] = hashlib.sha256(self.output_map.tobytes()).hexdigest()
        return d

    def spec_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class ParameterVector:
    """Flat decision-variable vector with a named block layout."""

    data: np.ndarray
    layout: list

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.data.ndim != 1 or self.data.size != expected:
            raise ValueError(f"parameter data length {self.data.size} != layout size {expected}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("parameters contain non-finite values")

    @property
    def size(self):
        return self.data.size

    def block(self, name):
        """View of one named block, reshaped to its layout shape."""
        off = 0
        for bname, shape in self.layout:
            n = int(np.prod(shape))
            if bname == name:
                return self.data[off : off + n].reshape(shape)
            off += n
        raise KeyError(name)

    def blocks(self):
        return {name: self.block(name) for name, _ in self.layout}

    def copy(self):
        return ParameterVector(self.data.copy(), list(self.layout))

    def to_json(self):
        return json.dumps(
            {name: self.block(name).tolist() for name, _ in self.layout}, sort_keys=True
        )


def init_parameters(spec, rng=None):
    """Zero-output initialization: linear weights zero; mlp first layer random,
    output layer zero, so every fresh policy commands zero input."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pv = ParameterVector(np.zeros(spec.n_parameters()), spec.layout())
    if spec.kind in ("mlp", "latent"):
        w1 = pv.block("w1")
        bound = 1.0 / np.sqrt(max(w1.shape[1], 1))
        w1[...] = rng.uniform(-bound, bound, w1.shape)
    return pv


def concat_parameters(named):
    """Join (prefix, ParameterVector) pairs into one vector with prefixed blocks."""
    layout = []
    chunks = []
    for prefix, pv in named:
        for name, shape in pv.layout:
            layout.append((f"{prefix}.{name}", shape))
        chunks.append(pv.data)
    return ParameterVector(np.concatenate(chunks) if chunks else np.zeros(0), layout)


def split_parameters(pv, prefix):
    """Extract the sub-vector whose block names start with ``prefix + '.'``."""
    sub_layout = []
    chunks = []
    off = 0
    for name, shape in pv.layout:
        n = int(np.prod(shape))
        if name.startswith(prefix + "."):
            sub_layout.append((name[len(prefix) + 1 :], shape))
            chunks.append(pv.data[off : off + n])
        off += n
    if not chunks:
        raise KeyError(f"no blocks with prefix {prefix!r}")
    return ParameterVector(np.concatenate(chunks), sub_layout)


def build_window(series, k, h1, h2):
    """Window of ``(h1 + 1 + h2) * channels`` values centered on sample ``k``,
    zero-padded where it leaves the signal."""
    v = series.as_2d() if isinstance(series, Trajectory) else np.atleast_2d(np.asarray(series, dtype=float).T).T
    if v.ndim == 1:
        v = v[:, None]
    q, c = v.shape
    if not 0 <= k < q:
        raise ValueError(f"sample index {k} outside [0, {q})")
    out = np.zeros((h1 + 1 + h2, c))
    lo = max(0, k - h1)
    hi = min(q, k + h2 + 1)
    out[lo - (k - h1) : hi - (k - h1)] = v[lo:hi]
    return out.reshape(-1)


def _window_matrix(values_2d, spec):
    q, c = values_2d.shape
    if spec.strict_past:
        ext = np.vstack([np.zeros((spec.h1, c)), values_2d])
        sw = sliding_window_view(ext, spec.h1, axis=0)[:q]
    else:
        ext = np.vstack([np.zeros((spec.h1, c)), values_2d, np.zeros((spec.h2, c))])
        sw = sliding_window_view(ext, spec.window_len, axis=0)
    # sliding_window_view yields (q, channels, window); store windows time-major
    return np.ascontiguousarray(sw.transpose(0, 2, 1)).reshape(q, -1)


def _relu(z):
    return np.maximum(z, 0.0)


def _check_params(spec, omega):
    expected = [(n, tuple(s)) for n, s in spec.layout()]
    got = [(n, tuple(s)) for n, s in omega.layout]
    if expected != got:
        raise ValueError(f"parameter layout {got} does not match policy spec {expected}")


def policy_forward(spec, omega, signal):
    """Apply the policy to a whole signal; returns the control trajectory."""
    _check_params(spec, omega)
    if spec.kind == "latent":
        x = spec.input_map @ signal.stacked()
        z = omega.block("w1") @ x + omega.block("b1")
        code = omega.block("w2") @ _relu(z) + omega.block("b2")
        return Trajectory.from_stacked(spec.output_map @ code, signal.dt, spec.out_channels)
    v = signal.as_2d()
    if v.shape[1] != spec.in_channels:
        raise ValueError(f"signal has {v.shape[1]} channels, policy expects {spec.in_channels}")
    X = _window_matrix(v, spec)
    if spec.kind == "linear":
        U = X @ omega.block("weight").T
    else:
        A = _relu(X @ omega.block("w1").T + omega.block("b1"))
        U = A @ omega.block("w2").T + omega.block("b2")
    values = U[:, 0] if spec.out_channels == 1 else U
    return Trajectory(values, signal.dt)


def eval_window(spec, omega, window_vec):
    """Single-sample evaluation on a prepared window (used by the causal loop)."""
    if spec.kind == "linear":
        return omega.block("weight") @ window_vec
    z = omega.block("w1") @ window_vec + omega.block("b1")
    return omega.block("w2") @ _relu(z) + omega.block("b2")


@dataclass
class JacobianBundle:
    """Stacked-control Jacobians: w.r.t. parameters and w.r.t. the driving signal."""

    d_pi_d_omega: np.ndarray  # (q * out, n_params)
    d_pi_d_signal: np.ndarray | None  # (q * out, q * in); None means identically zero


def policy_jacobians(spec, omega, signal, with_signal=True):
    """Analytic Jacobians by backpropagation through the (at most) one-hidden-layer net."""
    _check_params(spec, omega)
    if spec.kind == "latent":
        return _latent_jacobians(spec, omega, signal, with_signal)
    v = signal.as_2d()
    q, c = v.shape
    out = spec.out_channels
    w = spec.window_size
    X = _window_matrix(v, spec)

    if spec.kind == "linear":
        if out == 1:
            J = X.copy()
        else:
            J = np.zeros((q, out, out, w))
            for o in range(out):
                J[:, o, o, :] = X
            J = J.reshape(q * out, out * w)
        w_eff = np.broadcast_to(omega.block("weight"), (q, out, w))
    else:
        W1, b1 = omega.block("w1"), omega.block("b1")
        W2, b2 = omega.block("w2"), omega.block("b2")
        Z = X @ W1.T + b1
        mask = (Z > 0).astype(float)
        A = Z * mask
        # blocks in layout order: w1, b1, w2, b2
        d_w1 = np.einsum("oh,kh,kj->kohj", W2, mask, X).reshape(q * out, -1)
        d_b1 = np.einsum("oh,kh->koh", W2, mask).reshape(q * out, -1)
        d_w2 = np.zeros((q, out, out, spec.hidden))
        for o in range(out):
            d_w2[:, o, o, :] = A
        d_w2 = d_w2.reshape(q * out, -1)
        d_b2 = np.tile(np.eye(out), (q, 1))
        J = np.hstack([d_w1, d_b1, d_w2, d_b2])
        w_eff = np.einsum("oh,kh,hj->koj", W2, mask, W1)

    S = None
    if with_signal:
        S = _scatter_signal_jacobian(w_eff, spec, q, c, out)
    return JacobianBundle(J, S)


def _scatter_signal_jacobian(w_eff, spec, q, c, out):
    """Place per-sample effective weights into the banded (q*out, q*c) matrix."""
    wlen = spec.window_len
    w_eff = np.ascontiguousarray(w_eff).reshape(q, out, wlen, c)
    S = np.zeros((q, out, q, c))
    for r in range(wlen):
        # window slot r of sample k reads signal sample j = k - h1 + r
        shift = spec.h1 - r
        k = np.arange(q)
        j = k - shift
        valid = (j >= 0) & (j < q)
        S[k[valid], :, j[valid], :] = w_eff[k[valid], :, r, :]
    return S.reshape(q * out, q * c)


def _latent_jacobians(spec, omega, signal, with_signal):
    x = spec.input_map @ signal.stacked()
    W1, b1 = omega.block("w1"), omega.block("b1")
    W2, b2 = omega.block("w2"), omega.block("b2")
    z = W1 @ x + b1
    mask = (z > 0).astype(float)
    a = z * mask
    n_code = W2.shape[0]
    d_w1 = np.einsum("ch,h,j->chj", W2, mask, x).reshape(n_code, -1)
    d_b1 = W2 * mask
    d_w2 = np.zeros((n_code, n_code, spec.hidden))
    for i in range(n_code):
        d_w2[i, i, :] = a
    d_w2 = d_w2.reshape(n_code, -1)
    d_b2 = np.eye(n_code)
    J_code = np.hstack([d_w1, d_b1, d_w2, d_b2])
    J = spec.output_map @ J_code
    S = None
    if with_signal:
        S = spec.output_map @ ((W2 * mask) @ W1) @ spec.input_map
    return JacobianBundle(J, S)


def two_dof_compose(ff_out, fb_out):
    """Elementwise sum of the feedforward and feedback control sequences."""
    if len(ff_out) != len(fb_out):
        raise ValueError("control sequences must have equal length")
    if ff_out.values.shape != fb_out.values.shape:
        raise ValueError("control sequences must have matching channel counts")
    return Trajectory(ff_out.values + fb_out.values, ff_out.dt)


class TwoDofController:
    """Feedforward policy plus optional strictly-causal feedback policy.

    Owns the combined parameter vector (blocks prefixed ``ff.`` / ``fb.``) and
    executes the closed loop one sample at a time: at step k the feedback
    network reads the tracking-error window ending at k-1.
    """

    def __init__(self, ff_spec, ff_params, fb_spec=None, fb_params=None):
        if fb_spec is not None and not fb_spec.strict_past:
            raise ValueError("feedback policies must be strictly causal (strict_past=True)")
        self.ff_spec = ff_spec
        self.ff_params = ff_params
        self.fb_spec = fb_spec
        self.fb_params = fb_params

    @property
    def has_feedback(self):
        return self.fb_spec is not None

    def combined_parameters(self):
        named = [("ff", self.ff_params)]
        if self.has_feedback:
            named.append(("fb", self.fb_params))
        return concat_parameters(named)

    def set_combined(self, omega):
        self.ff_params = split_parameters(omega, "ff")
        if self.has_feedback:
            self.fb_params = split_parameters(omega, "fb")

    def run(self, plant, reference, noise=None):
        """Roll out the loop; returns (u, y, error) trajectories.

        Without feedback the whole input sequence is known up front, so the
        plant's batch rollout applies; with feedback the plant is advanced
        one sample at a time through its stepper.
        """
        q = len(reference)
        dt = reference.dt
        u_ff = policy_forward(self.ff_spec, self.ff_params, reference).stacked()
        if not self.has_feedback:
            u = Trajectory(u_ff.copy(), dt)
            rollout = plant.rollout(u, noise)
            y = rollout.output
            return u, y, Trajectory(y.stacked() - reference.stacked(), dt)
        stepper = plant.stepper(noise)
        y = np.zeros(q)
        u = np.zeros(q)
        errors = np.zeros(q)
        h1 = self.fb_spec.h1
        ref = reference.stacked()
        for k in range(q):
            lo = max(0, k - h1)
            window = np.zeros(h1)
            window[h1 - (k - lo) :] = errors[lo:k]
            u[k] = u_ff[k] + eval_window(self.fb_spec, self.fb_params, window)[0]
            y[k] = stepper.step(u[k])
            errors[k] = y[k] - ref[k]
        return Trajectory(u, dt), Trajectory(y, dt), Trajectory(errors, dt)

    def jacobians(self, reference, error):
        """Combined bundle evaluated at the executed signals."""
        ff = policy_jacobians(self.ff_spec, self.ff_params, reference, with_signal=False)
        if not self.has_feedback:
            return JacobianBundle(ff.d_pi_d_omega, None)
        fb = policy_jacobians(self.fb_spec, self.fb_params, error, with_signal=True)
        J = np.hstack([ff.d_pi_d_omega, fb.d_pi_d_omega])
        return JacobianBundle(J, fb.d_pi_d_signal)


def save_checkpoint(path, spec, params):
    """Versioned binary checkpoint: spec hash, layout header, then raw reals."""
    _check_params(spec, params)
    header = json.dumps(
        {"layout": [[n, list(s)] for n, s in params.layout], "spec": spec.to_dict()},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(spec.spec_hash())
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(params.data.astype("<f8").tobytes())


def load_checkpoint(path, expected_spec=None):
    """Read a checkpoint; verifies the spec hash when ``expected_spec`` is given."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError("not a policy checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    spec_hash = blob[8:40]
    (hlen,) = struct.unpack_from("<I", blob, 40)
    header = json.loads(blob[44 : 44 + hlen].decode())
    data = np.frombuffer(blob, dtype="<f8", offset=44 + hlen).copy()
    layout = [(n, tuple(s)) for n, s in header["layout"]]
    params = ParameterVector(data, layout)
    if expected_spec is not None and expected_spec.spec_hash() != spec_hash:
        raise ValueError("checkpoint spec hash does not match the expected policy spec")
    return params, header, spec_hash
