"""Experiment orchestration: datasets, training runs, HPO, sweeps.

Everything here is a pure function of (config, seed): datasets come from
seeds derived per purpose ("data", "hpo", "sens", ...), restarts from
(model seed, restart index), so any command rerun with the same config
reproduces identical bytes.  Wall-clock timings are kept in memory only;
persisting them would break the byte-identical rerun contract.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..analysis import SensitivityConfig, ensemble_stats, mse_report, sensitivity
from ..core import GateMode, Model, ModelConfig, derive_rng, gate_activation, run, seed_sequence
from ..tasks import Dataset, TaskSample, gen_attention, gen_lorenz, gen_narma
from ..training import (
    TrainConfig,
    TrainResult,
    forward_with_cache,
    restart_seed_for,
    train_once,
    train_restarts,
)
from .config import ExperimentConfig, Task, cell_config, config_hash, render_config
from .formats import (
    CheckpointProvenance,
    checkpoint_payload,
    load_checkpoint,
    read_json,
    save_checkpoint,
    write_json,
    write_sample,
    write_series,
    atomic_write,
)


@dataclass
class RunRecord:
    """Outcome of one restart, as persisted (timings stay in memory)."""

    config_hash: str
    restart: int
    curve: np.ndarray
    selected_epoch: int
    train_mse: float
    test_mse: float
    degraded: bool
    checkpoint: dict
    wallclock_seconds: float = 0.0


RESULTS_COLUMNS = [
    "config_hash",
    "task",
    "n_res",
    "sigma_in",
    "n_forward",
    "gate_mode",
    "restart",
    "selected_epoch",
    "train_mse",
    "test_mse",
    "degraded",
]


def data_seed(cfg: ExperimentConfig) -> np.random.SeedSequence:
    return seed_sequence(cfg.seed, "data", cfg.task.value)


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    """Materialize the configured task deterministically from the seed."""
    tp = cfg.task_params
    ss = data_seed(cfg)
    if cfg.task == Task.ATTENTION:
        return gen_attention(
            tp.sigma_in,
            n_train=tp.n_train,
            n_test=tp.n_test,
            total_length=tp.total_length,
            rng=ss,
        )
    if cfg.task in (Task.NARMA5, Task.NARMA10):
        return gen_narma(cfg.narma_order, length=tp.length, rng=ss)
    if cfg.task == Task.LORENZ:
        return gen_lorenz(
            tp.n_forward,
            tp.sigma_in,
            n_train=tp.n_train,
            n_test=tp.n_test,
            rng=ss,
            shared_normalization=tp.shared_normalization,
        )
    raise ValueError(f"unknown task {cfg.task}")


def evaluate_model(model: Model, samples) -> tuple[float, list[np.ndarray]]:
    """Pooled post-washout MSE and per-sequence predictions."""
    trajs, _, _ = forward_with_cache(model, samples)
    preds = [t.outputs for t in trajs]
    mse = mse_report(preds, [s.targets for s in samples], washout=samples[0].washout)
    return mse, preds


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def run_generate(cfg: ExperimentConfig, out: Path) -> dict:
    """Write dataset files plus a manifest; returns the manifest."""
    out = Path(out)
    dataset = make_dataset(cfg)
    chash = config_hash(cfg)
    files = []
    for split, samples in (("train", dataset.train), ("test", dataset.test)):
        for i, sample in enumerate(samples):
            rel = f"data/{split}_{i:03d}.csv"
            write_sample(out / rel, sample, meta={"index": i, "task": cfg.task.value})
            files.append(rel)
    manifest = {
        "kind": "smrc-dataset-manifest",
        "schema_version": cfg.schema_version,
        "config_hash": chash,
        "task": cfg.task.value,
        "seed": cfg.seed,
        "n_train": len(dataset.train),
        "n_test": len(dataset.test),
        "normalization": dataset.normalization,
        "files": files,
    }
    write_json(out / "manifest.json", manifest)
    atomic_write(out / "config.txt", render_config(cfg, include_execution=False))
    return manifest


def load_dataset_dir(path: Path) -> tuple[list[TaskSample], list[TaskSample]]:
    from .formats import read_sample

    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(
            f"no dataset manifest at {manifest_path}; run `smrc generate` first"
        )
    manifest = read_json(manifest_path)
    train, test = [], []
    for rel in manifest["files"]:
        sample = read_sample(path / rel)
        (train if "train_" in rel else test).append(sample)
    return train, test


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _record_path(out: Path, chash: str, restart: int) -> Path:
    return out / "restarts" / f"{chash}_r{restart:03d}.json"


def _record_to_payload(rec: RunRecord) -> dict:
    return {
        "kind": "smrc-run-record",
        "config_hash": rec.config_hash,
        "restart": rec.restart,
        "curve": [float(x) for x in rec.curve],
        "selected_epoch": rec.selected_epoch,
        "train_mse": rec.train_mse,
        "test_mse": rec.test_mse,
        "degraded": rec.degraded,
        "checkpoint": rec.checkpoint,
    }


def _record_from_payload(p: dict) -> RunRecord:
    return RunRecord(
        config_hash=p["config_hash"],
        restart=p["restart"],
        curve=np.array(p["curve"]),
        selected_epoch=p["selected_epoch"],
        train_mse=p["train_mse"],
        test_mse=p["test_mse"],
        degraded=p["degraded"],
        checkpoint=p["checkpoint"],
    )


def _result_to_record(
    cfg: ExperimentConfig,
    chash: str,
    index: int,
    result: TrainResult,
    test_samples,
    wallclock: float,
) -> RunRecord:
    # test MSE is computed exactly once per restart, on the selected snapshot
    test_mse, _ = evaluate_model(result.model, test_samples)
    provenance = CheckpointProvenance(
        seed=cfg.seed,
        restart_index=index,
        restart_seed=result.restart_seed,
        selected_epoch=result.selected_epoch,
        selection=cfg.train.snapshot_selection.value,
        train_mse=result.train_mse,
        config_hash=chash,
    )
    return RunRecord(
        config_hash=chash,
        restart=index,
        curve=result.curve,
        selected_epoch=result.selected_epoch,
        train_mse=result.train_mse,
        test_mse=test_mse,
        degraded=result.degraded,
        checkpoint=checkpoint_payload(result.model, provenance),
        wallclock_seconds=wallclock,
    )


def _train_one_restart(args) -> tuple[int, "RunRecord"]:
    cfg, chash, index, train_samples, test_samples = args
    t0 = time.perf_counter()
    result = train_once(cfg.model, train_samples, cfg.train, restart_seed_for(cfg.model, index))
    rec = _result_to_record(
        cfg, chash, index, result, test_samples, time.perf_counter() - t0
    )
    return index, rec


def run_train(
    cfg: ExperimentConfig,
    out: Path,
    resume: bool = False,
    workers: int | None = None,
) -> list[RunRecord]:
    """Train all restarts (restart-level idempotent), persist records and
    the best checkpoint, and write the records CSV."""
    out = Path(out)
    workers = workers if workers is not None else cfg.workers
    chash = config_hash(cfg)
    dataset = make_dataset(cfg)
    train_samples = list(dataset.train)
    test_samples = list(dataset.test)

    records: dict[int, RunRecord] = {}
    pending = []
    for index in range(cfg.train.n_restarts):
        path = _record_path(out, chash, index)
        if resume and path.exists():
            records[index] = _record_from_payload(read_json(path))
        else:
            pending.append(index)

    jobs = [(cfg, chash, i, train_samples, test_samples) for i in pending]
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        from ..training import _limit_blas_threads

        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(
            max_workers=min(workers, len(jobs)),
            mp_context=ctx,
            initializer=_limit_blas_threads,
        ) as pool:
            for index, rec in pool.map(_train_one_restart, jobs):
                records[index] = rec
                write_json(_record_path(out, chash, index), _record_to_payload(rec))
    else:
        for job in jobs:
            index, rec = _train_one_restart(job)
            records[index] = rec
            write_json(_record_path(out, chash, index), _record_to_payload(rec))

    ordered = [records[i] for i in range(cfg.train.n_restarts)]
    finite = [r for r in ordered if np.isfinite(r.train_mse)]
    if not finite:
        raise RuntimeError(
            "all restarts diverged: "
            + "; ".join(f"r{r.restart} degraded={r.degraded}" for r in ordered)
        )
    best = min(finite, key=lambda r: (r.train_mse, r.restart))
    write_json(out / f"checkpoint_{chash}.json", best.checkpoint)
    write_results_csv(out / f"records_{chash}.csv", cfg, ordered)
    atomic_write(out / "config.txt", render_config(cfg, include_execution=False))
    return ordered


def write_results_csv(path: Path, cfg: ExperimentConfig, records: list[RunRecord]) -> None:
    from .formats import fmt_float

    lines = [",".join(RESULTS_COLUMNS)]
    for r in records:
        lines.append(
            ",".join(
                [
                    r.config_hash,
                    cfg.task.value,
                    str(cfg.model.n_res),
                    fmt_float(cfg.task_params.sigma_in),
                    str(cfg.task_params.n_forward),
                    cfg.model.gate_mode.value,
                    str(r.restart),
                    str(r.selected_epoch),
                    fmt_float(r.train_mse),
                    fmt_float(r.test_mse),
                    "true" if r.degraded else "false",
                ]
            )
        )
    atomic_write(path, "\n".join(lines) + "\n")


def best_record(records: list[RunRecord]) -> RunRecord:
    finite = [r for r in records if np.isfinite(r.train_mse)]
    return min(finite, key=lambda r: (r.train_mse, r.restart))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def run_evaluate(
    cfg: ExperimentConfig,
    checkpoint_path: Path,
    out: Path,
    data_dir: Path | None = None,
) -> dict:
    """Test-set metrics plus per-sequence prediction files for a checkpoint."""
    out = Path(out)
    model, provenance = load_checkpoint(checkpoint_path)
    if model.config.n_in != cfg.model.n_in or model.config.n_out != cfg.model.n_out:
        raise ValueError("checkpoint dimensions do not match the config")
    if data_dir is not None:
        _, test_samples = load_dataset_dir(Path(data_dir))
    else:
        test_samples = list(make_dataset(cfg).test)
    test_mse, preds = evaluate_model(model, test_samples)
    metrics = {
        "kind": "smrc-metrics",
        "config_hash": config_hash(cfg),
        "checkpoint_config_hash": provenance.config_hash,
        "test_mse": test_mse,
        "n_sequences": len(test_samples),
        "washout": test_samples[0].washout,
    }
    write_json(out / "metrics.json", metrics)
    for i, (sample, pred) in enumerate(zip(test_samples, preds)):
        rows = [
            [t] + [pred[t, j] for j in range(pred.shape[1])]
            + [sample.targets[t, j] for j in range(sample.targets.shape[1])]
            for t in range(len(sample))
        ]
        cols = (
            ["t"]
            + [f"yhat{j}" for j in range(pred.shape[1])]
            + [f"y{j}" for j in range(sample.targets.shape[1])]
        )
        write_series(
            out / "predictions" / f"test_{i:03d}.csv",
            "prediction",
            cols,
            rows,
            meta={"index": i, "config_hash": config_hash(cfg)},
        )
    return metrics


# ---------------------------------------------------------------------------
# hpo
# ---------------------------------------------------------------------------


def _hpo_space(cfg: ExperimentConfig, trial: int, rng: np.random.Generator):
    """One (rho_in, rho_hat_res, xi) triple from the search box."""
    log_lo, log_hi = np.log(0.01), np.log(2.0)
    if cfg.hpo.search == "random":
        rho_in = float(np.exp(rng.uniform(log_lo, log_hi)))
        rho_res = float(rng.uniform(0.1, 1.6))
        xi = float(rng.uniform(0.0, 1.0)) if cfg.task == Task.LORENZ else 0.0
        return rho_in, rho_res, xi
    # grid: near-cubic (or square) lattice over the box, trial-indexed
    dims = 3 if cfg.task == Task.LORENZ else 2
    per_dim = max(2, int(round(cfg.hpo.budget ** (1.0 / dims))))
    ii = trial
    coords = []
    for _ in range(dims):
        coords.append(ii % per_dim)
        ii //= per_dim
    frac = [c / (per_dim - 1) for c in coords]
    rho_in = float(np.exp(log_lo + frac[0] * (log_hi - log_lo)))
    rho_res = float(0.1 + frac[1] * 1.5)
    xi = float(frac[2]) if dims == 3 else 0.0
    return rho_in, rho_res, xi


def _hpo_validation_mse(cfg: ExperimentConfig, dataset: Dataset, model_cfg: ModelConfig) -> float:
    """Fit a conventional readout on the training portion, score held-out data.

    Multi-sequence tasks hold out a fraction of the sequences; the
    single-sequence NARMA task splits its one sequence in time instead.
    """
    from ..training import fit_readout

    train_cfg = cfg.train
    samples = list(dataset.train)
    result = None
    if len(samples) > 1:
        n_val = max(1, int(round(cfg.hpo.validation_fraction * len(samples))))
        fit_part = samples[:-n_val]
        val_part = samples[-n_val:]
        result = train_once(
            model_cfg,
            fit_part,
            replace(train_cfg, epochs=1, n_restarts=1),
            restart_seed_for(model_cfg, 0),
        )
        val_mse, _ = evaluate_model(result.model, val_part)
        return val_mse
    # single sequence: fit on the leading part, validate on the tail
    sample = samples[0]
    split = int(round(len(sample) * (1.0 - cfg.hpo.validation_fraction)))
    if split <= sample.washout or split >= len(sample):
        raise ValueError("validation fraction leaves no usable split")
    result = train_once(
        model_cfg,
        [TaskSample(inputs=sample.inputs[:split], targets=sample.targets[:split],
                    washout=sample.washout)],
        replace(train_cfg, epochs=1, n_restarts=1),
        restart_seed_for(model_cfg, 0),
    )
    traj = run(
        result.model.reservoir,
        result.model.gates,
        result.model.readout,
        sample.inputs,
        result.model.config.gate_mode,
    )
    tail_pred = traj.outputs[split:]
    tail_true = sample.targets[split:]
    return mse_report(tail_pred, tail_true, washout=0)


def run_hpo(cfg: ExperimentConfig, out: Path) -> dict:
    """Search conventional-RC hyperparameters, select by validation MSE."""
    if cfg.hpo.budget < 1:
        raise ValueError("hpo budget must be >= 1")
    out = Path(out)
    base = replace(cfg, model=replace(cfg.model, gate_mode=GateMode.CONVENTIONAL))
    dataset = make_dataset(base)
    trials = []
    for trial in range(cfg.hpo.budget):
        rng = derive_rng(cfg.seed, "hpo", trial)
        rho_in, rho_res, xi = _hpo_space(cfg, trial, rng)
        model_cfg = replace(
            base.model, rho_in=rho_in, rho_hat_res=rho_res, xi=xi,
            seed=int(seed_sequence(cfg.seed, "hpo-model", trial).generate_state(1, np.uint64)[0]),
        )
        val_mse = _hpo_validation_mse(base, dataset, model_cfg)
        trials.append(
            {"trial": trial, "rho_in": rho_in, "rho_hat_res": rho_res, "xi": xi,
             "val_mse": val_mse}
        )
    best = min(trials, key=lambda t: (t["val_mse"], t["trial"]))
    payload = {
        "kind": "smrc-hpo-result",
        "config_hash": config_hash(cfg),
        "search": cfg.hpo.search,
        "budget": cfg.hpo.budget,
        "best": best,
        "trials": trials,
    }
    write_json(out / "hpo.json", payload)
    from .formats import fmt_float

    lines = ["trial,rho_in,rho_hat_res,xi,val_mse"]
    for t in trials:
        lines.append(
            f"{t['trial']},{fmt_float(t['rho_in'])},{fmt_float(t['rho_hat_res'])},"
            f"{fmt_float(t['xi'])},{fmt_float(t['val_mse'])}"
        )
    atomic_write(out / "hpo_trials.csv", "\n".join(lines) + "\n")
    return payload


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------


def jitter_free_attention_inputs(cfg: ExperimentConfig, realization: int) -> np.ndarray:
    """Fresh-noise, zero-jitter attention input for ensemble statistics."""
    from ..tasks import ATTENTION_PULSE_END, ATTENTION_PULSE_START

    tp = cfg.task_params
    gen = np.random.Generator(
        np.random.PCG64(seed_sequence(cfg.seed, "sens-input", realization))
    )
    u = gen.normal(0.0, tp.sigma_in, size=tp.total_length)
    u[ATTENTION_PULSE_START : ATTENTION_PULSE_END + 1] = 1.0
    return u[:, None]


def probe_inputs_for_task(cfg: ExperimentConfig, realization: int) -> np.ndarray:
    if cfg.task == Task.ATTENTION:
        return jitter_free_attention_inputs(cfg, realization)
    # other tasks are allowed but flagged experimental in the CLI;
    # use a fresh test-like sequence per realization
    ss = seed_sequence(cfg.seed, "sens-input", realization)
    probe_cfg = replace(cfg, seed=int(ss.generate_state(1, np.uint64)[0]))
    ds = make_dataset(probe_cfg)
    return ds.test[realization % len(ds.test)].inputs


def run_sensitivity(
    cfg: ExperimentConfig, checkpoint_path: Path, out: Path
) -> dict[int, dict]:
    """Ensemble gate/sensitivity statistics for a trained checkpoint.

    Writes one profile file per requested propagation horizon plus the
    gate statistics series (input gate and modulated spectral radius).
    """
    out = Path(out)
    model, _ = load_checkpoint(checkpoint_path)
    chash = config_hash(cfg)
    sp = cfg.sensitivity

    gate_stats = ensemble_stats(
        model,
        lambda i: probe_inputs_for_task(cfg, i),
        n_realizations=sp.n_realizations,
        quantity="gates",
    )
    g_mean, g_std = gate_stats["g_in"]
    rho_mean, rho_std = gate_stats["rho_res"]
    rows = [
        [t, g_mean[t], g_std[t], rho_mean[t], rho_std[t]] for t in range(len(g_mean))
    ]
    write_series(
        out / "gates.csv",
        "gate-stats",
        ["t", "g_in_mean", "g_in_std", "rho_res_mean", "rho_res_std"],
        rows,
        meta={"config_hash": chash, "n_realizations": sp.n_realizations},
    )

    results = {}
    for t_p in sp.t_p:
        scfg = SensitivityConfig(
            t_p=t_p,
            epsilon=sp.epsilon,
            n_p=sp.n_p,
            mh_proposal_scale=sp.mh_proposal_scale,
            mh_burn_in=sp.mh_burn_in,
            mh_thinning=sp.mh_thinning,
        )
        lam_rows = []
        floor_total = 0
        profiles = []
        for i in range(sp.n_realizations):
            prof = sensitivity(
                model,
                probe_inputs_for_task(cfg, i),
                scfg,
                rng=derive_rng(cfg.seed, "sens-pert", t_p, i),
            )
            profiles.append(prof)
            floor_total += int(prof.floor_hits.sum())
        lam_mean = np.stack([p.lambda_mean for p in profiles])
        lam_max = np.stack([p.lambda_max for p in profiles])
        for t in range(lam_mean.shape[1]):
            lam_rows.append(
                [
                    t,
                    lam_mean[:, t].mean(),
                    lam_mean[:, t].std(),
                    lam_max[:, t].mean(),
                    lam_max[:, t].std(),
                ]
            )
        write_series(
            out / f"sensitivity_tp{t_p}.csv",
            "sensitivity-stats",
            ["t", "lambda_mean", "lambda_mean_std", "lambda_max", "lambda_max_std"],
            lam_rows,
            meta={
                "config_hash": chash,
                "t_p": t_p,
                "epsilon": sp.epsilon,
                "n_p": sp.n_p,
                "n_realizations": sp.n_realizations,
                "floor_hits_total": floor_total,
            },
        )
        results[t_p] = {
            "lambda_mean": lam_mean.mean(axis=0),
            "lambda_mean_std": lam_mean.std(axis=0),
            "lambda_max": lam_max.mean(axis=0),
            "lambda_max_std": lam_max.std(axis=0),
            "floor_hits_total": floor_total,
        }
    return results


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def sweep_cells(cfg: ExperimentConfig) -> list[tuple[dict, ExperimentConfig]]:
    axes = cfg.sweep.present()
    if not axes:
        raise ValueError("sweep requires at least one sweep.* axis")
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        values = dict(zip(names, combo))
        cells.append((values, cell_config(cfg, **values)))
    return cells


def run_sweep(
    cfg: ExperimentConfig,
    out: Path,
    resume: bool = False,
    workers: int | None = None,
) -> dict:
    """Run the cross product of sweep axes; aggregate results and plot data.

    Each cell trains under ``cells/<cell-hash>/`` with restart-level
    resume, so an interrupted sweep continues where it stopped and a
    finished sweep reruns with zero work.
    """
    out = Path(out)
    cells = sweep_cells(cfg)
    aggregate_rows = []
    failures = []
    cell_summaries = []
    for values, ccfg in cells:
        chash = config_hash(ccfg)
        cell_dir = out / "cells" / chash
        try:
            records = run_train(ccfg, cell_dir, resume=resume, workers=workers)
        except Exception as exc:  # noqa: BLE001 - report and continue per contract
            failures.append({"cell": values, "config_hash": chash, "error": str(exc)})
            continue
        for r in records:
            aggregate_rows.append((values, ccfg, r))
        best = best_record(records)
        cell_summaries.append(
            {
                "cell": values,
                "config_hash": chash,
                "gate_mode": ccfg.model.gate_mode.value,
                "n_res": ccfg.model.n_res,
                "sigma_in": ccfg.task_params.sigma_in,
                "n_forward": ccfg.task_params.n_forward,
                "best_test_mse": best.test_mse,
                "mean_test_mse": float(np.mean([r.test_mse for r in records])),
                "std_test_mse": float(np.std([r.test_mse for r in records])),
                "best_train_mse": best.train_mse,
                "n_restarts": len(records),
            }
        )

    _write_aggregate_csv(out, cfg, aggregate_rows)
    _write_plot_data(out, cfg, cell_summaries, aggregate_rows)
    summary = {
        "kind": "smrc-sweep-summary",
        "config_hash": config_hash(cfg),
        "cells": cell_summaries,
        "failures": failures,
    }
    write_json(out / "sweep.json", summary)
    atomic_write(out / "config.txt", render_config(cfg, include_execution=False))
    return summary


def _write_aggregate_csv(out: Path, cfg: ExperimentConfig, rows) -> None:
    from .formats import fmt_float

    lines = [",".join(RESULTS_COLUMNS)]
    for values, ccfg, r in rows:
        lines.append(
            ",".join(
                [
                    r.config_hash,
                    ccfg.task.value,
                    str(ccfg.model.n_res),
                    fmt_float(ccfg.task_params.sigma_in),
                    str(ccfg.task_params.n_forward),
                    ccfg.model.gate_mode.value,
                    str(r.restart),
                    str(r.selected_epoch),
                    fmt_float(r.train_mse),
                    fmt_float(r.test_mse),
                    "true" if r.degraded else "false",
                ]
            )
        )
    atomic_write(out / "results.csv", "\n".join(lines) + "\n")


def _write_plot_data(out: Path, cfg: ExperimentConfig, cells: list[dict], rows) -> None:
    from .formats import fmt_float

    chash = config_hash(cfg)

    def header(figure: str) -> list[str]:
        return [f"# figure-analog: {figure}; config_hash: {chash}"]

    # MSE versus reservoir size, one series per (gate_mode, sigma_in, n_forward)
    lines = header("mse-vs-reservoir-size (conventional curves + gated reference lines)")
    lines.append("gate_mode,sigma_in,n_forward,n_res,n_restarts,best_test_mse,mean_test_mse,std_test_mse")
    for c in sorted(
        cells, key=lambda c: (c["gate_mode"], c["sigma_in"], c["n_forward"], c["n_res"])
    ):
        lines.append(
            f"{c['gate_mode']},{fmt_float(c['sigma_in'])},{c['n_forward']},{c['n_res']},"
            f"{c['n_restarts']},{fmt_float(c['best_test_mse'])},"
            f"{fmt_float(c['mean_test_mse'])},{fmt_float(c['std_test_mse'])}"
        )
    atomic_write(out / "plot_mse_vs_size.csv", "\n".join(lines) + "\n")

    # MSE per gate mode (ablation bars)
    lines = header("mse-by-gate-mode (gate ablation bars)")
    lines.append("gate_mode,sigma_in,n_forward,n_res,best_test_mse,mean_test_mse,std_test_mse")
    for c in sorted(
        cells, key=lambda c: (c["sigma_in"], c["n_forward"], c["n_res"], c["gate_mode"])
    ):
        lines.append(
            f"{c['gate_mode']},{fmt_float(c['sigma_in'])},{c['n_forward']},{c['n_res']},"
            f"{fmt_float(c['best_test_mse'])},{fmt_float(c['mean_test_mse'])},"
            f"{fmt_float(c['std_test_mse'])}"
        )
    atomic_write(out / "plot_mse_by_gate_mode.csv", "\n".join(lines) + "\n")

    # learning curves per restart (training-stability panels)
    lines = header("per-restart learning curves (training stability)")
    lines.append("config_hash,gate_mode,n_res,restart,epoch,train_mse")
    for values, ccfg, r in rows:
        if ccfg.model.gate_mode == GateMode.CONVENTIONAL:
            continue
        for epoch, mse in enumerate(r.curve):
            lines.append(
                f"{r.config_hash},{ccfg.model.gate_mode.value},{ccfg.model.n_res},"
                f"{r.restart},{epoch},{fmt_float(mse)}"
            )
    atomic_write(out / "plot_learning_curves.csv", "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def run_report(out: Path) -> str:
    """Summarize results found under an output directory."""
    out = Path(out)
    pieces = []
    sweep_path = out / "sweep.json"
    if sweep_path.exists():
        summary = read_json(sweep_path)
        pieces.append(f"sweep {summary['config_hash']}: {len(summary['cells'])} cells")
        for c in summary["cells"]:
            pieces.append(
                f"  {c['gate_mode']:>22s} n_res={c['n_res']:<5d} "
                f"sigma_in={c['sigma_in']:<5g} n_forward={c['n_forward']:<3d} "
                f"best_test_mse={c['best_test_mse']:.6g} "
                f"mean={c['mean_test_mse']:.6g} std={c['std_test_mse']:.6g}"
            )
        if summary["failures"]:
            pieces.append(f"  failures: {summary['failures']}")
    for csv_path in sorted(out.glob("records_*.csv")):
        lines = csv_path.read_text().strip().splitlines()
        pieces.append(f"{csv_path.name}: {len(lines) - 1} restart records")
    for path in sorted(out.glob("hpo.json")):
        h = read_json(path)
        b = h["best"]
        pieces.append(
            f"hpo best: rho_in={b['rho_in']:.4g} rho_hat_res={b['rho_hat_res']:.4g} "
            f"xi={b['xi']:.4g} val_mse={b['val_mse']:.6g}"
        )
    report = "\n".join(pieces) + "\n" if pieces else "no results found\n"
    atomic_write(out / "report.txt", report)
    return report
