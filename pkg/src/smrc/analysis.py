"""Perturbation-ensemble sensitivity analysis and evaluation metrics.

The sensitivity (time-resolved local Lyapunov) profile measures how a
small perturbation of the reservoir state is magnified after a fixed
number of steps:

    lambda(t)     = (1 / (t_p N_p)) * sum_j ln(||x_base(t+t_p) - x_pj(t+t_p)|| / eps)
    lambda_max(t) = (1 / t_p) * max_j ln(||x_base(t+t_p) - x_pj(t+t_p)|| / eps)

where the N_p perturbation directions are drawn uniformly from the unit
ball with a Metropolis-Hastings chain and rescaled to norm eps.  The
gates are recomputed from the perturbed states during propagation; they
are dependent variables of the reservoir state, never perturbed on their
own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import GateMode, Model, batch_step, gate_activation, run

DISTANCE_FLOOR = 1e-300


@dataclass(frozen=True)
class SensitivityConfig:
    """Perturbation-ensemble settings."""

    t_p: int = 2
    epsilon: float = 1e-8
    n_p: int = 200
    mh_proposal_scale: float = 0.2
    mh_burn_in: int = 100
    mh_thinning: int = 10

    def __post_init__(self):
        if self.t_p < 1:
            raise ValueError("t_p must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.n_p < 1:
            raise ValueError("n_p must be >= 1")
        if self.mh_proposal_scale <= 0:
            raise ValueError("mh_proposal_scale must be positive")
        if self.mh_burn_in < 0 or self.mh_thinning < 1:
            raise ValueError("invalid MH chain settings")


@dataclass(frozen=True)
class SensitivityProfile:
    """Mean and max log-magnification per timestep.

    ``lambda_mean[k]`` / ``lambda_max[k]`` describe a perturbation applied
    to the state at trajectory index ``k`` and propagated ``t_p`` steps;
    ``floor_hits[k]`` counts distance evaluations clamped at the numeric
    floor (identical reference and perturbed states).
    """

    lambda_mean: np.ndarray
    lambda_max: np.ndarray
    floor_hits: np.ndarray
    config: SensitivityConfig = field(default_factory=SensitivityConfig)

    def __post_init__(self):
        if not (
            self.lambda_mean.shape == self.lambda_max.shape == self.floor_hits.shape
        ):
            raise ValueError("profile series must share one length")
        if np.any(self.lambda_max < self.lambda_mean - 1e-12):
            raise ValueError("lambda_max must dominate lambda_mean")

    def __len__(self) -> int:
        return self.lambda_mean.shape[0]


def sample_perturbations(
    n_dim: int,
    n_p: int,
    epsilon: float,
    cfg: SensitivityConfig | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Perturbation directions of exact norm ``epsilon``, shape (n_p, n_dim).

    A Metropolis-Hastings chain with isotropic Gaussian proposals targets
    the uniform density on the unit ball; because the target is flat, a
    proposal is accepted exactly when it stays inside the ball.  After
    burn-in and thinning each retained point is rescaled to the
    epsilon-sphere, whose uniform distribution is the result regardless
    of chain tuning.

    ``mh_proposal_scale`` is the typical proposal step *length*; the
    per-coordinate standard deviation is scale/sqrt(n_dim), which keeps
    the acceptance rate dimension-independent (a fixed per-coordinate
    scale would make every proposal from a 100-dimensional ball land
    outside it and freeze the chain).
    """
    if n_dim < 1:
        raise ValueError("n_dim must be >= 1")
    cfg = cfg or SensitivityConfig(epsilon=epsilon)
    rng = rng if rng is not None else np.random.default_rng(0)
    step = cfg.mh_proposal_scale / np.sqrt(n_dim)
    out = np.empty((n_p, n_dim))
    x = np.zeros(n_dim)
    # burn-in
    for _ in range(cfg.mh_burn_in):
        prop = x + step * rng.standard_normal(n_dim)
        if prop @ prop <= 1.0:
            x = prop
    kept = 0
    while kept < n_p:
        for _ in range(cfg.mh_thinning):
            prop = x + step * rng.standard_normal(n_dim)
            if prop @ prop <= 1.0:
                x = prop
        norm = float(np.linalg.norm(x))
        if norm == 0.0:
            continue  # chain still at the origin; advance until it moves
        out[kept] = x * (epsilon / norm)
        kept += 1
    return out


def sensitivity(
    model: Model,
    inputs: np.ndarray,
    cfg: SensitivityConfig | None = None,
    rng: np.random.Generator | None = None,
) -> SensitivityProfile:
    """Sensitivity profile of ``model`` along one reference input sequence.

    For every trajectory index k (0-based; k + t_p within range), every
    perturbed state x_base(k) + p_j is clamped to the tanh range and
    propagated t_p steps under the same inputs, with gate values
    recomputed from the perturbed states.  Distances below the numeric
    floor are clamped and counted in ``floor_hits``.
    """
    cfg = cfg or SensitivityConfig()
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    t_total = inputs.shape[0]
    if t_total <= cfg.t_p:
        raise ValueError("sequence must be longer than t_p")

    base = run(
        model.reservoir,
        model.gates,
        model.readout,
        inputs,
        model.config.gate_mode,
        washout=0,
    )
    states = base.states  # (T, N)
    n = states.shape[1]
    perts = sample_perturbations(n, cfg.n_p, cfg.epsilon, cfg, rng)

    n_points = t_total - cfg.t_p
    lam_mean = np.empty(n_points)
    lam_max = np.empty(n_points)
    floor_hits = np.zeros(n_points, dtype=np.int64)
    for k in range(n_points):
        x = states[k][None, :] + perts  # (n_p, N)
        np.clip(x, -1.0, 1.0, out=x)
        for s in range(1, cfg.t_p + 1):
            x = batch_step(
                model.reservoir, model.gates, model.config.gate_mode, x, inputs[k + s]
            )
        d = np.linalg.norm(x - states[k + cfg.t_p][None, :], axis=1)
        hits = d < DISTANCE_FLOOR
        if hits.any():
            floor_hits[k] = int(hits.sum())
            d = np.maximum(d, DISTANCE_FLOOR)
        logs = np.log(d / cfg.epsilon)
        lam_mean[k] = logs.mean() / cfg.t_p
        lam_max[k] = logs.max() / cfg.t_p
    return SensitivityProfile(
        lambda_mean=lam_mean, lambda_max=lam_max, floor_hits=floor_hits, config=cfg
    )


def mse_report(predictions, targets, washout: int = 0) -> float:
    """Mean squared error over post-washout steps, pooled across sequences.

    ``predictions`` and ``targets`` are single (T, n_out) arrays or lists
    of them; the divisor counts every (step, sequence, channel) term.
    """
    if isinstance(predictions, np.ndarray):
        predictions = [predictions]
        targets = [targets]
    if len(predictions) != len(targets):
        raise ValueError("predictions and targets must pair up")
    total = 0.0
    count = 0
    for pred, tgt in zip(predictions, targets):
        pred = np.atleast_1d(np.asarray(pred, dtype=np.float64))
        tgt = np.atleast_1d(np.asarray(tgt, dtype=np.float64))
        if pred.shape != tgt.shape:
            raise ValueError(f"shape mismatch {pred.shape} vs {tgt.shape}")
        if not 0 <= washout < pred.shape[0]:
            raise ValueError("washout must satisfy 0 <= washout < T")
        diff = pred[washout:] - tgt[washout:]
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def modulated_spectral_radius_series(model: Model, trajectory) -> np.ndarray:
    """rho_res(t) = g_res(t-1) * rho_hat_res aligned with the trajectory.

    Index k of the result modulates the step that produced state k; the
    first entry uses the gate value at the zero initial state.
    """
    if model.config.gate_mode == GateMode.CONVENTIONAL:
        g0 = 1.0
    else:
        g0 = float(gate_activation(model.gates.b_fb_res))
    g_prev = np.concatenate([[g0], trajectory.gates_res[:-1]])
    return g_prev * model.config.rho_hat_res


def ensemble_stats(
    model: Model,
    input_generator: Callable[[int], np.ndarray],
    n_realizations: int,
    quantity: str = "gates",
    cfg: SensitivityConfig | None = None,
    rng_for_sensitivity: np.random.Generator | None = None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-timestep mean and standard deviation over input realizations.

    ``input_generator(i)`` must return the i-th input sequence (fresh
    noise, fixed jitter).  With ``quantity='gates'`` the returned mapping
    holds the input-gate series and the modulated spectral radius series;
    with ``quantity='sensitivity'`` it holds the lambda mean/max series.
    """
    if n_realizations < 2:
        raise ValueError("n_realizations must be >= 2")
    if quantity not in ("gates", "sensitivity"):
        raise ValueError("quantity must be 'gates' or 'sensitivity'")
    series: dict[str, list[np.ndarray]] = {}

    def push(name: str, values: np.ndarray):
        series.setdefault(name, []).append(np.asarray(values, dtype=np.float64))

    for i in range(n_realizations):
        inputs = input_generator(i)
        if quantity == "gates":
            traj = run(
                model.reservoir,
                model.gates,
                model.readout,
                inputs,
                model.config.gate_mode,
                washout=0,
            )
            push("g_in", traj.gates_in)
            push("rho_res", modulated_spectral_radius_series(model, traj))
        else:
            profile = sensitivity(model, inputs, cfg, rng_for_sensitivity)
            push("lambda_mean", profile.lambda_mean)
            push("lambda_max", profile.lambda_max)
    out = {}
    for name, rows in series.items():
        stack = np.stack(rows)
        out[name] = (stack.mean(axis=0), stack.std(axis=0))
    return out
