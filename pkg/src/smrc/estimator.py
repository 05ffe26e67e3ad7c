"""Scikit-learn style estimator wrapping the gated reservoir model.

``SMRCRegressor`` follows the sklearn conventions (``get_params`` /
``set_params`` via ``BaseEstimator``, fitted attributes with trailing
underscores, ``clone``-ability) so the model composes with pipelines and
model-selection utilities.  Inputs are sequences: ``X`` is a single
(T, n_features) array treated as one sequence, or a list of such arrays;
``y`` matches ``X`` sequence by sequence.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .analysis import mse_report
from .core import GateMode, ModelConfig, run
from .tasks import TaskSample
from .training import ReadoutMode, SnapshotSelection, TrainConfig, train_restarts


def as_sequence_list(X) -> list[np.ndarray]:
    """Normalize input to a list of (T, n_features) float arrays."""
    if isinstance(X, np.ndarray) and X.ndim <= 2:
        X = [X]
    out = []
    for i, seq in enumerate(X):
        arr = np.asarray(seq, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError(f"sequence {i} must be 1-D or 2-D, got ndim={arr.ndim}")
        if not np.isfinite(arr).all():
            raise ValueError(f"sequence {i} contains non-finite values")
        out.append(arr)
    return out


def check_paired_sequences(X, y) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Validate that X and y are equally many sequences of equal lengths."""
    xs = as_sequence_list(X)
    ys = as_sequence_list(y)
    if len(xs) != len(ys):
        raise ValueError(f"X has {len(xs)} sequences but y has {len(ys)}")
    for i, (a, b) in enumerate(zip(xs, ys)):
        if a.shape[0] != b.shape[0]:
            raise ValueError(
                f"sequence {i}: X length {a.shape[0]} != y length {b.shape[0]}"
            )
    widths_x = {a.shape[1] for a in xs}
    widths_y = {b.shape[1] for b in ys}
    if len(widths_x) > 1 or len(widths_y) > 1:
        raise ValueError("all sequences must share the same channel counts")
    return xs, ys


class SMRCRegressor(BaseEstimator, RegressorMixin):
    """Self-modulated reservoir regressor for sequence-to-sequence tasks.

    Parameters mirror the model and training configurations; see
    :class:`smrc.ModelConfig` and :class:`smrc.TrainConfig`.  With
    ``gate_mode='conventional'`` this is a plain echo-state network whose
    fit is a single least-squares solve.

    Examples
    --------
    >>> import numpy as np
    >>> from smrc import SMRCRegressor
    >>> t = np.linspace(0, 8 * np.pi, 400)
    >>> X, y = np.sin(t)[:, None], np.sin(t + 0.5)[:, None]
    >>> est = SMRCRegressor(n_res=50, gate_mode="conventional", washout=50)
    >>> pred = est.fit(X, y).predict(X)[0]
    >>> pred.shape
    (400, 1)
    """

    def __init__(
        self,
        n_res: int = 100,
        rho_in: float = 0.12,
        rho_hat_res: float = 0.9,
        xi: float = 0.0,
        gate_mode: str = "dynamic_both",
        epochs: int = 2000,
        learning_rate: float = 1e-3,
        n_restarts: int = 1,
        washout: int = 200,
        ridge_lambda: float = 0.0,
        readout_mode: str = "pseudo_inverse",
        snapshot_selection: str = "best_train_mse",
        n_jobs: int = 1,
        random_state: int = 0,
    ):
        self.n_res = n_res
        self.rho_in = rho_in
        self.rho_hat_res = rho_hat_res
        self.xi = xi
        self.gate_mode = gate_mode
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.n_restarts = n_restarts
        self.washout = washout
        self.ridge_lambda = ridge_lambda
        self.readout_mode = readout_mode
        self.snapshot_selection = snapshot_selection
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _samples(self, X, y) -> list[TaskSample]:
        xs, ys = check_paired_sequences(X, y)
        min_len = min(a.shape[0] for a in xs)
        if self.washout >= min_len:
            raise ValueError(
                f"washout={self.washout} must be shorter than the shortest "
                f"sequence (length {min_len})"
            )
        return [
            TaskSample(inputs=a, targets=b, washout=self.washout)
            for a, b in zip(xs, ys)
        ]

    def fit(self, X, y) -> "SMRCRegressor":
        """Train on sequences; keeps the best restart by train MSE."""
        samples = self._samples(X, y)
        config = ModelConfig(
            n_res=self.n_res,
            n_in=samples[0].inputs.shape[1],
            n_out=samples[0].targets.shape[1],
            rho_in=self.rho_in,
            rho_hat_res=self.rho_hat_res,
            xi=self.xi,
            gate_mode=GateMode(self.gate_mode),
            seed=self.random_state,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            n_restarts=self.n_restarts,
            washout=self.washout,
            ridge_lambda=self.ridge_lambda,
            readout_mode=ReadoutMode(self.readout_mode),
            snapshot_selection=SnapshotSelection(self.snapshot_selection),
        )
        outcome = train_restarts(config, samples, train_cfg, workers=self.n_jobs)
        self.model_ = outcome.best.model
        self.train_mse_ = outcome.best.train_mse
        self.train_curve_ = outcome.best.curve
        self.restart_index_ = outcome.best_index
        self.n_features_in_ = config.n_in
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict/score")

    def predict(self, X) -> list[np.ndarray]:
        """Outputs for each input sequence (full length, washout included)."""
        self._check_fitted()
        xs = as_sequence_list(X)
        model = self.model_
        out = []
        for seq in xs:
            if seq.shape[1] != self.n_features_in_:
                raise ValueError(
                    f"expected {self.n_features_in_} input channels, "
                    f"got {seq.shape[1]}"
                )
            traj = run(
                model.reservoir,
                model.gates,
                model.readout,
                seq,
                model.config.gate_mode,
                washout=0,
            )
            out.append(traj.outputs)
        return out

    def score(self, X, y) -> float:
        """Negative post-washout MSE (higher is better)."""
        self._check_fitted()
        xs, ys = check_paired_sequences(X, y)
        preds = self.predict(xs)
        return -mse_report(preds, ys, washout=self.washout)
