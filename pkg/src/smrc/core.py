"""Gated echo-state network dynamics.

The model is a discrete-time tanh reservoir in which two scalar gates,
driven by feedback from the reservoir state, rescale the input signal
(input gate) and the recurrent coupling (reservoir gate) at every step:

    x(t) = tanh( g_res(t-1) * W_res x(t-1) + g_in(t-1) * W_in u(t) + xi * 1 )
    g_in(t)  = f( w_fb_in  . x(t) + b_fb_in )
    g_res(t) = f( w_fb_res . x(t) + b_fb_res )
    y(t) = W_out x(t) + b_out

with f a sigmoid rescaled to the open interval (0, 2).  Clamping both
gates to 1 recovers the conventional echo-state network, which is exposed
here as a gate mode rather than a separate implementation.

All parameter containers are immutable after construction and all
operations are pure functions, so they are safe to share across threads.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np


class GateMode(str, enum.Enum):
    """Which gate feedback paths are active.

    ``CONVENTIONAL`` forces both gates to the constant 1 (plain ESN).
    ``STATIC_*`` modes zero the named gate's feedback weights so that the
    gate degenerates to a trained constant f(bias); the other gate (if
    any) keeps its feedback and remains time-varying.
    """

    CONVENTIONAL = "conventional"
    DYNAMIC_BOTH = "dynamic_both"
    STATIC_INPUT_GATE = "static_input_gate"
    STATIC_RESERVOIR_GATE = "static_reservoir_gate"
    STATIC_BOTH = "static_both"


#: Gate modes with at least one trainable parameter.
TRAINABLE_GATE_MODES = (
    GateMode.DYNAMIC_BOTH,
    GateMode.STATIC_INPUT_GATE,
    GateMode.STATIC_RESERVOIR_GATE,
    GateMode.STATIC_BOTH,
)


@dataclass(frozen=True)
class ModelConfig:
    """Static description of a model: sizes, scales, gate mode, seed."""

    n_res: int = 100
    n_in: int = 1
    n_out: int = 1
    rho_in: float = 0.12
    rho_hat_res: float = 0.9
    xi: float = 0.0
    gate_mode: GateMode = GateMode.DYNAMIC_BOTH
    seed: int = 0

    def __post_init__(self):
        if self.n_res < 1 or self.n_in < 1 or self.n_out < 1:
            raise ValueError("n_res, n_in, n_out must all be >= 1")
        if self.rho_in < 0 or self.rho_hat_res < 0:
            raise ValueError("rho_in and rho_hat_res must be nonnegative")
        object.__setattr__(self, "gate_mode", GateMode(self.gate_mode))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class ReservoirParams:
    """Fixed random weights: input map, recurrent map, bias magnitude."""

    w_in: np.ndarray  # (n_res, n_in)
    w_res: np.ndarray  # (n_res, n_res)
    xi: float

    def __post_init__(self):
        w_in = np.ascontiguousarray(self.w_in, dtype=np.float64)
        w_res = np.ascontiguousarray(self.w_res, dtype=np.float64)
        if w_res.ndim != 2 or w_res.shape[0] != w_res.shape[1]:
            raise ValueError("w_res must be square")
        if w_in.ndim != 2 or w_in.shape[0] != w_res.shape[0]:
            raise ValueError("w_in must be (n_res, n_in)")
        if not (np.isfinite(w_in).all() and np.isfinite(w_res).all()):
            raise ValueError("reservoir weights must be finite")
        w_in.setflags(write=False)
        w_res.setflags(write=False)
        object.__setattr__(self, "w_in", w_in)
        object.__setattr__(self, "w_res", w_res)
        object.__setattr__(self, "xi", float(self.xi))

    @property
    def n_res(self) -> int:
        return self.w_res.shape[0]

    @property
    def n_in(self) -> int:
        return self.w_in.shape[1]


@dataclass(frozen=True)
class GateParams:
    """Trainable feedback weights and biases of the two scalar gates."""

    w_fb_in: np.ndarray  # (n_res,)
    b_fb_in: float
    w_fb_res: np.ndarray  # (n_res,)
    b_fb_res: float

    def __post_init__(self):
        w_in = np.ascontiguousarray(self.w_fb_in, dtype=np.float64)
        w_res = np.ascontiguousarray(self.w_fb_res, dtype=np.float64)
        if w_in.ndim != 1 or w_res.shape != w_in.shape:
            raise ValueError("gate feedback weights must be equal-length vectors")
        if not (np.isfinite(w_in).all() and np.isfinite(w_res).all()):
            raise ValueError("gate weights must be finite")
        w_in.setflags(write=False)
        w_res.setflags(write=False)
        object.__setattr__(self, "w_fb_in", w_in)
        object.__setattr__(self, "w_fb_res", w_res)
        object.__setattr__(self, "b_fb_in", float(self.b_fb_in))
        object.__setattr__(self, "b_fb_res", float(self.b_fb_res))


@dataclass(frozen=True)
class ReadoutParams:
    """Linear output map."""

    w_out: np.ndarray  # (n_out, n_res)
    b_out: np.ndarray  # (n_out,)

    def __post_init__(self):
        w = np.ascontiguousarray(self.w_out, dtype=np.float64)
        b = np.ascontiguousarray(self.b_out, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ValueError("w_out must be (n_out, n_res), b_out (n_out,)")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("readout parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "w_out", w)
        object.__setattr__(self, "b_out", b)

    @classmethod
    def zeros(cls, n_out: int, n_res: int) -> "ReadoutParams":
        return cls(np.zeros((n_out, n_res)), np.zeros(n_out))


@dataclass(frozen=True)
class Model:
    """A runnable bundle: config plus all parameter groups."""

    config: ModelConfig
    reservoir: ReservoirParams
    gates: GateParams
    readout: ReadoutParams


@dataclass(frozen=True)
class Trajectory:
    """Full time course of one sequence: states, gate values, outputs.

    ``states[k]`` is the reservoir state after consuming input ``k``
    (i.e. x(k+1) with x(0) = 0), and ``gates_in[k]`` / ``gates_res[k]``
    are the gate values computed *from* that state, which modulate the
    following step.  ``washout`` records how many leading steps are
    excluded from any fit or error metric.
    """

    states: np.ndarray  # (T, n_res)
    gates_in: np.ndarray  # (T,)
    gates_res: np.ndarray  # (T,)
    outputs: np.ndarray  # (T, n_out)
    washout: int

    def __post_init__(self):
        T = self.states.shape[0]
        if not (self.gates_in.shape == (T,) and self.gates_res.shape == (T,)):
            raise ValueError("gate series must match trajectory length")
        if self.outputs.shape[0] != T:
            raise ValueError("outputs must match trajectory length")
        if not 0 <= self.washout < T:
            raise ValueError("washout must satisfy 0 <= washout < T")
        object.__setattr__(self, "washout", int(self.washout))

    def __len__(self) -> int:
        return self.states.shape[0]


class SpectralRadiusError(RuntimeError):
    """Raised when the iterative spectral-radius estimate fails to converge."""


def gate_activation(x):
    """Sigmoid rescaled to (0, 2): f(x) = 2 / (1 + exp(-x)).

    Strictly increasing, point-symmetric about (0, 1); f(0) = 1.
    Accepts scalars or arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 2.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = 2.0 * ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def gate_activation_derivative(x):
    """Derivative of :func:`gate_activation`: f(x) * (1 - f(x) / 2).

    Strictly positive with maximum 1/2 at x = 0.
    """
    f = np.asarray(gate_activation(x))
    out = f * (1.0 - 0.5 * f)
    if out.ndim == 0:
        return float(out)
    return out


def _eig2_max_abs(m2: np.ndarray) -> float:
    """Largest eigenvalue modulus of a real 2x2 matrix, closed form."""
    a, b, c, d = m2[0, 0], m2[0, 1], m2[1, 0], m2[1, 1]
    tr = a + d
    det = a * d - b * c
    disc = 0.25 * tr * tr - det
    if disc >= 0.0:
        r = np.sqrt(disc)
        return max(abs(0.5 * tr + r), abs(0.5 * tr - r))
    # complex conjugate pair: |lambda|^2 = det
    return float(np.sqrt(det))


def spectral_radius(
    m: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 10_000,
) -> float:
    """Largest eigenvalue modulus of a square matrix.

    Uses two-column subspace (block power) iteration with QR
    re-orthonormalization.  Two estimators run side by side:

    * the eigenvalues of the 2x2 Rayleigh projection, which converge to
      machine precision for a well-separated dominant eigenvalue and for
      an isolated dominant complex-conjugate pair (where single-vector
      Rayleigh quotients oscillate indefinitely);
    * the geometric mean of the trailing per-step norm growth factors of
      the leading block column, which stays pinned to the dominant
      modulus even when several eigenvalue moduli are clustered too
      tightly for any two-dimensional subspace to separate within the
      budget (the estimate is then accurate to the cluster width).

    Iteration stops as soon as the Rayleigh estimate is stable to ``tol``
    (with an extrapolated-error guard against slow geometric
    convergence); if the budget is exhausted, a plateaued growth estimate
    is accepted at reduced (still better than 1e-3) accuracy.

    Raises
    ------
    SpectralRadiusError
        If neither estimate has stabilized within ``max_iter`` iterations.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    if not np.isfinite(m).all():
        raise ValueError("matrix must be finite")
    n = m.shape[0]
    if n == 1:
        return abs(float(m[0, 0]))
    if not m.any():
        return 0.0

    # Deterministic start block; fixed internal seed keeps the function pure.
    rng = np.random.Generator(np.random.PCG64(0x5EED))
    q = np.linalg.qr(rng.standard_normal((n, 2)))[0]

    est = None
    diffs: list[float] = []
    growth: list[float] = []  # trailing per-step growth of the leading column
    stable = 0
    scale = float(np.max(np.abs(m)))
    for _ in range(max_iter):
        z = m @ q
        # Norm collapse: the block lies in the (numerical) null space.
        if float(np.max(np.abs(z))) <= scale * n * 1e-290:
            return 0.0
        h = q.T @ z  # 2x2 Rayleigh projection onto the current subspace
        # Once the projection has triangularized, the dominant eigenvalue is
        # real and sits in h[0, 0]; reading it directly avoids chasing the
        # second diagonal entry, which for non-normal matrices can keep
        # oscillating above the spectral radius.  A persistent sub-diagonal
        # entry signals a dominant complex pair, where the full 2x2 spectrum
        # is the right estimate.
        hnorm = float(np.max(np.abs(h)))
        if abs(h[1, 0]) <= 1e-9 * max(hnorm, 1e-300):
            new_est = abs(float(h[0, 0]))
        else:
            new_est = _eig2_max_abs(h)
        if est is not None:
            diff = abs(new_est - est)
            diffs.append(diff)
            if diff <= tol * max(new_est, 1e-300):
                # Guard against slow geometric convergence masquerading as
                # stability: extrapolate the remaining error from the decay
                # ratio of recent estimate increments.
                rate = 0.0
                if len(diffs) >= 6:
                    ratios = [
                        diffs[-k] / diffs[-k - 1]
                        for k in range(1, 5)
                        if diffs[-k - 1] > 0
                    ]
                    if ratios:
                        rate = min(max(sorted(ratios)[len(ratios) // 2], 0.0), 0.999)
                err_bound = diff * rate / (1.0 - rate) if rate > 0 else diff
                if err_bound <= tol * max(new_est, 1e-300):
                    stable += 1
                    if stable >= 8:
                        return float(new_est)
                else:
                    stable = 0
            else:
                stable = 0
        est = new_est
        q_new, r = np.linalg.qr(z)
        growth.append(abs(float(r[0, 0])))  # = ||m q1|| for unit q1
        if len(growth) > 4000:
            growth.pop(0)
        # Rank collapse of the block (e.g. nilpotent m): re-inject a fresh
        # direction orthogonal to the surviving one.
        if abs(r[1, 1]) <= 1e-14 * max(abs(r[0, 0]), 1e-300):
            v = rng.standard_normal(n)
            v -= q_new[:, 0] * (q_new[:, 0] @ v)
            nv = np.linalg.norm(v)
            if nv > 0:
                q_new[:, 1] = v / nv
        q = q_new
    # Clustered dominant moduli (e.g. two complex pairs separated by ~1e-4
    # relative) rotate the block forever and starve the Rayleigh estimate,
    # but the per-step growth factors telescope exactly: the geometric mean
    # over a window of length W equals (||m^W q|| / ||q||)^(1/W), which is
    # pinned to the dominant modulus to within the cluster width plus
    # O(1/W) windowing noise.  Accept the long-window statistic when its
    # sub-windows agree; only a genuinely wandering estimate is an error.
    if len(growth) >= 2000:
        logs = np.log(np.maximum(np.array(growth), 1e-300))
        w = min(1000, len(logs) // 4)
        windows = np.exp(
            [logs[i : i + w].mean() for i in range(0, len(logs) - w + 1, max(w // 4, 1))]
        )
        lo, hi, mid = windows.min(), windows.max(), float(np.median(windows))
        if hi - lo <= 1e-3 * max(mid, 1e-300):
            return float(np.exp(logs.mean()))
    raise SpectralRadiusError(
        f"spectral radius estimate did not stabilize within {max_iter} iterations"
    )


def init_reservoir(config: ModelConfig, rng: np.random.Generator) -> ReservoirParams:
    """Draw fixed reservoir weights for ``config`` from ``rng``.

    ``w_in`` entries are i.i.d. uniform on [-rho_in, rho_in].  ``w_res``
    entries are drawn i.i.d. uniform on [-1, 1] and the whole matrix is
    rescaled by a single constant so its spectral radius equals
    ``rho_hat_res`` (an exact zero matrix when ``rho_hat_res`` is 0).
    """
    w_in = rng.uniform(-config.rho_in, config.rho_in, size=(config.n_res, config.n_in))
    for _ in range(8):
        w = rng.uniform(-1.0, 1.0, size=(config.n_res, config.n_res))
        rho = spectral_radius(w)
        if rho > 0.0:
            return ReservoirParams(w_in=w_in, w_res=w * (config.rho_hat_res / rho), xi=config.xi)
        if config.rho_hat_res == 0.0:
            return ReservoirParams(w_in=w_in, w_res=np.zeros_like(w), xi=config.xi)
        # Practically unreachable for n_res >= 2; draw again from the
        # advanced stream.
    raise RuntimeError("could not sample a reservoir matrix with nonzero spectral radius")


def gate_mask(gate_mode: GateMode) -> tuple[bool, bool]:
    """(input gate has feedback, reservoir gate has feedback)."""
    mode = GateMode(gate_mode)
    return (
        mode == GateMode.DYNAMIC_BOTH or mode == GateMode.STATIC_RESERVOIR_GATE,
        mode == GateMode.DYNAMIC_BOTH or mode == GateMode.STATIC_INPUT_GATE,
    )


def init_gates(config: ModelConfig, rng: np.random.Generator) -> GateParams:
    """Draw initial gate parameters, zeroing entries masked by the gate mode.

    Trainable entries are uniform on [-1/sqrt(n_res), 1/sqrt(n_res)], which
    keeps the feedback projection at O(1) for typical states.  The full
    parameter set is always sampled before masking, so biases agree across
    gate modes for the same stream.
    """
    bound = 1.0 / np.sqrt(config.n_res)
    w_fb_in = rng.uniform(-bound, bound, size=config.n_res)
    b_fb_in = float(rng.uniform(-bound, bound))
    w_fb_res = rng.uniform(-bound, bound, size=config.n_res)
    b_fb_res = float(rng.uniform(-bound, bound))
    if config.gate_mode == GateMode.CONVENTIONAL:
        w_fb_in = np.zeros(config.n_res)
        w_fb_res = np.zeros(config.n_res)
        b_fb_in = 0.0
        b_fb_res = 0.0
    else:
        in_dynamic, res_dynamic = gate_mask(config.gate_mode)
        if not in_dynamic:
            w_fb_in = np.zeros(config.n_res)
        if not res_dynamic:
            w_fb_res = np.zeros(config.n_res)
    return GateParams(w_fb_in=w_fb_in, b_fb_in=b_fb_in, w_fb_res=w_fb_res, b_fb_res=b_fb_res)


def gate_values(gates: GateParams, x: np.ndarray, gate_mode: GateMode) -> tuple[float, float]:
    """Gate pair (g_in, g_res) computed from state ``x``."""
    if gate_mode == GateMode.CONVENTIONAL:
        return 1.0, 1.0
    g_in = float(gate_activation(gates.w_fb_in @ x + gates.b_fb_in))
    g_res = float(gate_activation(gates.w_fb_res @ x + gates.b_fb_res))
    return g_in, g_res


def step(
    res: ReservoirParams,
    gates: GateParams,
    readout: ReadoutParams,
    x_prev: np.ndarray,
    u_t: np.ndarray,
    gate_mode: GateMode,
) -> tuple[np.ndarray, float, float, np.ndarray]:
    """One state update.

    The gate values applied in the update are computed from ``x_prev``
    (they are the gates of the previous step); the returned gate pair is
    computed from the new state and is what the *next* step will apply.

    Returns
    -------
    (x_t, g_in_t, g_res_t, y_t)
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    u_t = np.atleast_1d(np.asarray(u_t, dtype=np.float64))
    if x_prev.shape != (res.n_res,):
        raise ValueError(f"x_prev must have shape ({res.n_res},), got {x_prev.shape}")
    if u_t.shape != (res.n_in,):
        raise ValueError(f"u_t must have shape ({res.n_in},), got {u_t.shape}")
    g_in_prev, g_res_prev = gate_values(gates, x_prev, gate_mode)
    x_t = np.tanh(g_res_prev * (res.w_res @ x_prev) + g_in_prev * (res.w_in @ u_t) + res.xi)
    y_t = readout.w_out @ x_t + readout.b_out
    g_in_t, g_res_t = gate_values(gates, x_t, gate_mode)
    return x_t, g_in_t, g_res_t, y_t


def run(
    res: ReservoirParams,
    gates: GateParams,
    readout: ReadoutParams,
    inputs: np.ndarray,
    gate_mode: GateMode,
    washout: int = 0,
) -> Trajectory:
    """Drive the model over an input sequence from x(0) = 0.

    ``inputs`` is (T, n_in) or (T,) for scalar input.  The initial gate
    values are those computed at the zero state, i.e. f(bias).

    Raises
    ------
    FloatingPointError
        If a non-finite state appears; the message carries the step index.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    T = inputs.shape[0]
    if T == 0:
        raise ValueError("inputs must be nonempty")
    if inputs.shape[1] != res.n_in:
        raise ValueError(f"inputs must have {res.n_in} channels, got {inputs.shape[1]}")
    if not 0 <= washout < T:
        raise ValueError("washout must satisfy 0 <= washout < T")

    n = res.n_res
    states = np.empty((T, n))
    g_in_series = np.empty(T)
    g_res_series = np.empty(T)
    x = np.zeros(n)
    g_in, g_res = gate_values(gates, x, gate_mode)
    conventional = gate_mode == GateMode.CONVENTIONAL
    for t in range(T):
        x = np.tanh(g_res * (res.w_res @ x) + g_in * (res.w_in @ inputs[t]) + res.xi)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite reservoir state at step {t}")
        if conventional:
            g_in = 1.0
            g_res = 1.0
        else:
            g_in = float(gate_activation(gates.w_fb_in @ x + gates.b_fb_in))
            g_res = float(gate_activation(gates.w_fb_res @ x + gates.b_fb_res))
        states[t] = x
        g_in_series[t] = g_in
        g_res_series[t] = g_res
    outputs = states @ readout.w_out.T + readout.b_out
    return Trajectory(
        states=states,
        gates_in=g_in_series,
        gates_res=g_res_series,
        outputs=outputs,
        washout=washout,
    )


def batch_step(
    res: ReservoirParams,
    gates: GateParams,
    gate_mode: GateMode,
    x_prev: np.ndarray,
    u_t: np.ndarray,
) -> np.ndarray:
    """State update applied to a batch of states sharing one input.

    ``x_prev`` is (B, n_res); every row advances independently with its own
    gate values computed from that row.  Used by the perturbation-ensemble
    analysis where many perturbed copies evolve under the same input.
    """
    u_t = np.atleast_1d(np.asarray(u_t, dtype=np.float64))
    drive = res.w_in @ u_t  # (n_res,)
    if gate_mode == GateMode.CONVENTIONAL:
        return np.tanh(x_prev @ res.w_res.T + drive + res.xi)
    g_in = gate_activation(x_prev @ gates.w_fb_in + gates.b_fb_in)
    g_res = gate_activation(x_prev @ gates.w_fb_res + gates.b_fb_res)
    return np.tanh(
        g_res[:, None] * (x_prev @ res.w_res.T) + g_in[:, None] * drive + res.xi
    )


def _hash_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(*keys) -> np.random.SeedSequence:
    """Stable seed derivation from a tuple of ints and strings.

    Strings are hashed with SHA-256 so the mapping is identical across
    platforms and sessions; child streams for (seed, "train", 3) etc. are
    therefore reproducible and mutually independent.
    """
    return np.random.SeedSequence([_hash_key(k) for k in keys])


def derive_rng(*keys) -> np.random.Generator:
    """PCG64 generator seeded from :func:`seed_sequence`."""
    return np.random.Generator(np.random.PCG64(seed_sequence(*keys)))
