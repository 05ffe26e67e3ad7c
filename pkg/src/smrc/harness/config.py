"""Experiment configuration: flat key=value text with dotted sections.

The format is line-oriented and diff-friendly::

    schema_version=1
    seed=42
    task=attention
    task.sigma_in=0.1
    model.n_res=100
    model.gate_mode=dynamic_both
    train.epochs=2000
    sweep.n_res=100,200,300

Unknown keys are errors.  ``render_config`` produces a canonical form
(sorted keys, full-precision floats) whose SHA-256 prefix is the config
hash used to key cells, checkpoints, and output files.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace

from ..core import GateMode, ModelConfig
from ..training import ReadoutMode, SnapshotSelection, TrainConfig

SCHEMA_VERSION = 1


class Task(str, enum.Enum):
    ATTENTION = "attention"
    NARMA5 = "narma5"
    NARMA10 = "narma10"
    LORENZ = "lorenz"


@dataclass(frozen=True)
class TaskParams:
    sigma_in: float = 0.1
    n_forward: int = 20
    n_train: int = 100
    n_test: int = 100
    total_length: int = 400  # attention sequence length
    length: int = 2000  # narma kept steps
    shared_normalization: bool = False  # lorenz normalization switch


@dataclass(frozen=True)
class SweepAxes:
    n_res: tuple[int, ...] = ()
    sigma_in: tuple[float, ...] = ()
    n_forward: tuple[int, ...] = ()
    gate_mode: tuple[str, ...] = ()

    def present(self) -> dict[str, tuple]:
        return {
            name: getattr(self, name)
            for name in ("n_res", "sigma_in", "n_forward", "gate_mode")
            if getattr(self, name)
        }


@dataclass(frozen=True)
class HpoParams:
    search: str = "random"  # random | grid
    budget: int = 60
    validation_fraction: float = 0.2


@dataclass(frozen=True)
class SensitivityParams:
    t_p: tuple[int, ...] = (2,)
    epsilon: float = 1e-8
    n_p: int = 200
    n_realizations: int = 100
    mh_proposal_scale: float = 0.2
    mh_burn_in: int = 100
    mh_thinning: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = ""
    workers: int = 1
    task: Task = Task.ATTENTION
    task_params: TaskParams = field(default_factory=TaskParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepAxes = field(default_factory=SweepAxes)
    hpo: HpoParams = field(default_factory=HpoParams)
    sensitivity: SensitivityParams = field(default_factory=SensitivityParams)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported schema_version {self.schema_version}; "
                f"this build reads version {SCHEMA_VERSION}"
            )

    @property
    def narma_order(self) -> int:
        return {Task.NARMA5: 5, Task.NARMA10: 10}[self.task]


PRESETS = {
    "desk": {"train.epochs": "2000", "train.n_restarts": "10"},
    "paper": {"train.epochs": "10000", "train.n_restarts": "50"},
}


def _parse_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _parse_tuple(v: str, conv):
    if not v.strip():
        raise ValueError("sweep axis must be a nonempty comma-separated list")
    return tuple(conv(x.strip()) for x in v.split(","))


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse key=value lines (with # comments); overrides win over file keys."""
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in kv:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        kv[key] = value
    if overrides:
        kv.update({k: str(v) for k, v in overrides.items()})
    return config_from_mapping(kv)


def config_from_mapping(kv: dict[str, str]) -> ExperimentConfig:
    kv = dict(kv)

    def pop(key, default=None):
        return kv.pop(key, default)

    schema_version = int(pop("schema_version", SCHEMA_VERSION))
    seed = int(pop("seed", "0"))
    out = pop("out", "")
    workers = int(pop("workers", "1"))
    task = Task(pop("task", "attention"))

    tp = TaskParams(
        sigma_in=float(pop("task.sigma_in", "0.1")),
        n_forward=int(pop("task.n_forward", "20")),
        n_train=int(pop("task.n_train", "100")),
        n_test=int(pop("task.n_test", "100")),
        total_length=int(pop("task.total_length", "400")),
        length=int(pop("task.length", "2000")),
        shared_normalization=_parse_bool(pop("task.shared_normalization", "false")),
    )
    model = ModelConfig(
        n_res=int(pop("model.n_res", "100")),
        n_in=int(pop("model.n_in", "1")),
        n_out=int(pop("model.n_out", "1")),
        rho_in=float(pop("model.rho_in", "0.12")),
        rho_hat_res=float(pop("model.rho_hat_res", "0.9")),
        xi=float(pop("model.xi", "0.0")),
        gate_mode=GateMode(pop("model.gate_mode", "dynamic_both")),
        seed=seed,
    )
    train = TrainConfig(
        epochs=int(pop("train.epochs", "10000")),
        learning_rate=float(pop("train.learning_rate", "0.001")),
        n_restarts=int(pop("train.n_restarts", "50")),
        washout=int(pop("train.washout", "200")),
        ridge_lambda=float(pop("train.ridge_lambda", "0.0")),
        readout_mode=ReadoutMode(pop("train.readout_mode", "pseudo_inverse")),
        adam_beta1=float(pop("train.adam_beta1", "0.9")),
        adam_beta2=float(pop("train.adam_beta2", "0.999")),
        adam_epsilon=float(pop("train.adam_epsilon", "1e-8")),
        snapshot_selection=SnapshotSelection(
            pop("train.snapshot_selection", "best_train_mse")
        ),
    )
    sweep = SweepAxes(
        n_res=_parse_tuple(pop("sweep.n_res"), int) if "sweep.n_res" in kv else (),
        sigma_in=_parse_tuple(pop("sweep.sigma_in"), float)
        if "sweep.sigma_in" in kv
        else (),
        n_forward=_parse_tuple(pop("sweep.n_forward"), int)
        if "sweep.n_forward" in kv
        else (),
        gate_mode=tuple(
            GateMode(m).value for m in _parse_tuple(pop("sweep.gate_mode"), str)
        )
        if "sweep.gate_mode" in kv
        else (),
    )
    hpo = HpoParams(
        search=pop("hpo.search", "random"),
        budget=int(pop("hpo.budget", "60")),
        validation_fraction=float(pop("hpo.validation_fraction", "0.2")),
    )
    sens = SensitivityParams(
        t_p=_parse_tuple(pop("sensitivity.t_p", "2"), int),
        epsilon=float(pop("sensitivity.epsilon", "1e-8")),
        n_p=int(pop("sensitivity.n_p", "200")),
        n_realizations=int(pop("sensitivity.n_realizations", "100")),
        mh_proposal_scale=float(pop("sensitivity.mh_proposal_scale", "0.2")),
        mh_burn_in=int(pop("sensitivity.mh_burn_in", "100")),
        mh_thinning=int(pop("sensitivity.mh_thinning", "10")),
    )
    if hpo.search not in ("random", "grid"):
        raise ValueError(f"hpo.search must be random or grid, got {hpo.search!r}")
    if kv:
        raise ValueError(f"unknown config keys: {sorted(kv)}")
    return ExperimentConfig(
        schema_version=schema_version,
        seed=seed,
        out=out,
        workers=workers,
        task=task,
        task_params=tp,
        model=model,
        train=train,
        sweep=sweep,
        hpo=hpo,
        sensitivity=sens,
    )


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, enum.Enum):
        return str(v.value)
    return str(v)


def render_config(cfg: ExperimentConfig, include_execution: bool = True) -> str:
    """Canonical text form: every key explicit, sorted, full precision.

    ``include_execution`` False drops the out/workers keys, which describe
    where and how a run executes rather than what it computes; persisted
    config echoes use that form so reruns into different directories stay
    byte-identical.
    """
    kv = {
        "schema_version": cfg.schema_version,
        "seed": cfg.seed,
        "out": cfg.out,
        "workers": cfg.workers,
        "task": cfg.task.value,
        "task.sigma_in": cfg.task_params.sigma_in,
        "task.n_forward": cfg.task_params.n_forward,
        "task.n_train": cfg.task_params.n_train,
        "task.n_test": cfg.task_params.n_test,
        "task.total_length": cfg.task_params.total_length,
        "task.length": cfg.task_params.length,
        "task.shared_normalization": cfg.task_params.shared_normalization,
        "model.n_res": cfg.model.n_res,
        "model.n_in": cfg.model.n_in,
        "model.n_out": cfg.model.n_out,
        "model.rho_in": cfg.model.rho_in,
        "model.rho_hat_res": cfg.model.rho_hat_res,
        "model.xi": cfg.model.xi,
        "model.gate_mode": cfg.model.gate_mode.value,
        "train.epochs": cfg.train.epochs,
        "train.learning_rate": cfg.train.learning_rate,
        "train.n_restarts": cfg.train.n_restarts,
        "train.washout": cfg.train.washout,
        "train.ridge_lambda": cfg.train.ridge_lambda,
        "train.readout_mode": cfg.train.readout_mode.value,
        "train.adam_beta1": cfg.train.adam_beta1,
        "train.adam_beta2": cfg.train.adam_beta2,
        "train.adam_epsilon": cfg.train.adam_epsilon,
        "train.snapshot_selection": cfg.train.snapshot_selection.value,
        "hpo.search": cfg.hpo.search,
        "hpo.budget": cfg.hpo.budget,
        "hpo.validation_fraction": cfg.hpo.validation_fraction,
        "sensitivity.t_p": ",".join(str(t) for t in cfg.sensitivity.t_p),
        "sensitivity.epsilon": cfg.sensitivity.epsilon,
        "sensitivity.n_p": cfg.sensitivity.n_p,
        "sensitivity.n_realizations": cfg.sensitivity.n_realizations,
        "sensitivity.mh_proposal_scale": cfg.sensitivity.mh_proposal_scale,
        "sensitivity.mh_burn_in": cfg.sensitivity.mh_burn_in,
        "sensitivity.mh_thinning": cfg.sensitivity.mh_thinning,
    }
    for name, values in cfg.sweep.present().items():
        kv[f"sweep.{name}"] = ",".join(_fmt(v) for v in values)
    if not include_execution:
        del kv["out"]
        del kv["workers"]
    lines = [f"{k}={_fmt(v)}" for k, v in sorted(kv.items())]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """12-hex-digit identity of the configuration.

    ``out`` and ``workers`` never affect results, so they never enter
    the hash.
    """
    text = render_config(cfg, include_execution=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def apply_preset(kv: dict[str, str], preset: str) -> dict[str, str]:
    """Overlay a named preset; explicit file/CLI keys still win."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = dict(PRESETS[preset])
    merged.update(kv)
    return merged


def cell_config(cfg: ExperimentConfig, **axis_values) -> ExperimentConfig:
    """Resolve one sweep cell: apply axis values, drop the sweep axes."""
    model = cfg.model
    tp = cfg.task_params
    if "n_res" in axis_values:
        model = replace(model, n_res=int(axis_values["n_res"]))
    if "gate_mode" in axis_values:
        model = replace(model, gate_mode=GateMode(axis_values["gate_mode"]))
    if "sigma_in" in axis_values:
        tp = replace(tp, sigma_in=float(axis_values["sigma_in"]))
    if "n_forward" in axis_values:
        tp = replace(tp, n_forward=int(axis_values["n_forward"]))
    return replace(cfg, model=model, task_params=tp, sweep=SweepAxes())
