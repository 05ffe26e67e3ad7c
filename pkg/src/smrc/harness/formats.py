"""On-disk formats: columnar samples/series, JSON checkpoints, manifests.

Every float is written with ``repr``;  CPython's shortest-round-trip
printing guarantees that parse(write(x)) == x bit-exactly, which is what
makes the checkpoint round-trip and rerun-determinism contracts hold at
the byte level.  All writes go through a write-temp-then-rename so a
crash never leaves a truncated file behind.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import (
    GateMode,
    GateParams,
    Model,
    ModelConfig,
    ReadoutParams,
    ReservoirParams,
)
from ..tasks import TaskSample

COLUMNAR_MAGIC = "# smrc-columnar v1"
CHECKPOINT_KIND = "smrc-checkpoint"
CHECKPOINT_VERSION = 1


def atomic_write(path: str | Path, data: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    tmp.write_text(data, encoding="utf-8")
    os.replace(tmp, path)


def fmt_float(x) -> str:
    return repr(float(x))


def _fmt_meta_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def _parse_meta_value(v: str):
    if v == "true":
        return True
    if v == "false":
        return False
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def render_sample(sample: TaskSample, meta: dict | None = None) -> str:
    """Columnar text for one sample.

    Grammar::

        file    = header columns row*
        header  = "# smrc-columnar v1 kind=sample" (" " key "=" value)*
        columns = "# columns: t,u0[,u1...],y0[,y1...]"
        row     = int ("," float)+

    Floats use shortest-round-trip decimal form.
    """
    meta_all = {"kind": "sample", "washout": sample.washout}
    meta_all.update(sample.meta)
    if meta:
        meta_all.update(meta)
    head = COLUMNAR_MAGIC + "".join(
        f" {k}={_fmt_meta_value(v)}" for k, v in sorted(meta_all.items())
    )
    n_in = sample.inputs.shape[1]
    n_out = sample.targets.shape[1]
    cols = (
        "# columns: t,"
        + ",".join(f"u{i}" for i in range(n_in))
        + ","
        + ",".join(f"y{i}" for i in range(n_out))
    )
    lines = [head, cols]
    for t in range(len(sample)):
        row = (
            [str(t)]
            + [fmt_float(v) for v in sample.inputs[t]]
            + [fmt_float(v) for v in sample.targets[t]]
        )
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def parse_sample(text: str) -> TaskSample:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(COLUMNAR_MAGIC):
        raise ValueError("not an smrc columnar sample file")
    meta = {}
    for token in lines[0][len(COLUMNAR_MAGIC) :].split():
        k, _, v = token.partition("=")
        meta[k] = _parse_meta_value(v)
    if meta.pop("kind", None) != "sample":
        raise ValueError("columnar file is not a sample")
    columns = lines[1]
    if not columns.startswith("# columns: "):
        raise ValueError("missing columns header")
    names = columns[len("# columns: ") :].split(",")
    n_in = sum(1 for c in names if c.startswith("u"))
    n_out = sum(1 for c in names if c.startswith("y"))
    washout = int(meta.pop("washout"))
    rows = [ln.split(",") for ln in lines[2:] if ln]
    data = np.array([[float(v) for v in row[1:]] for row in rows])
    return TaskSample(
        inputs=data[:, :n_in],
        targets=data[:, n_in : n_in + n_out],
        washout=washout,
        meta=meta,
    )


def write_sample(path: str | Path, sample: TaskSample, meta: dict | None = None) -> None:
    atomic_write(path, render_sample(sample, meta))


def read_sample(path: str | Path) -> TaskSample:
    return parse_sample(Path(path).read_text(encoding="utf-8"))


def render_series(kind: str, columns: list[str], rows, meta: dict | None = None) -> str:
    """Columnar text for a derived series (profiles, gate statistics)."""
    meta_all = {"kind": kind}
    if meta:
        meta_all.update(meta)
    head = COLUMNAR_MAGIC + "".join(
        f" {k}={_fmt_meta_value(v)}" for k, v in sorted(meta_all.items())
    )
    lines = [head, "# columns: " + ",".join(columns)]
    for row in rows:
        out = []
        for v in row:
            if isinstance(v, (int, np.integer)):
                out.append(str(int(v)))
            else:
                out.append(fmt_float(v))
        lines.append(",".join(out))
    return "\n".join(lines) + "\n"


def write_series(path, kind, columns, rows, meta=None) -> None:
    atomic_write(path, render_series(kind, columns, rows, meta))


def parse_series(text: str) -> tuple[dict, list[str], np.ndarray]:
    """Inverse of :func:`render_series`: (meta, column names, value matrix)."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith(COLUMNAR_MAGIC):
        raise ValueError("not an smrc columnar series file")
    meta = {}
    for token in lines[0][len(COLUMNAR_MAGIC) :].split():
        k, _, v = token.partition("=")
        meta[k] = _parse_meta_value(v)
    if not lines[1].startswith("# columns: "):
        raise ValueError("missing columns header")
    columns = lines[1][len("# columns: ") :].split(",")
    data = np.array(
        [[float(v) for v in ln.split(",")] for ln in lines[2:] if ln]
    )
    return meta, columns, data


def read_series(path) -> tuple[dict, list[str], np.ndarray]:
    return parse_series(Path(path).read_text(encoding="utf-8"))


def write_profile(path, profile, meta: dict | None = None) -> None:
    """Serialize a sensitivity profile as (t, lambda_mean, lambda_max, floor_hits)."""
    rows = [
        [t, profile.lambda_mean[t], profile.lambda_max[t], int(profile.floor_hits[t])]
        for t in range(len(profile))
    ]
    write_series(
        path,
        "sensitivity-profile",
        ["t", "lambda_mean", "lambda_max", "floor_hits"],
        rows,
        meta,
    )


def read_profile(path):
    from ..analysis import SensitivityProfile

    meta, columns, data = read_series(path)
    if meta.get("kind") != "sensitivity-profile":
        raise ValueError(f"{path}: not a sensitivity profile")
    return SensitivityProfile(
        lambda_mean=data[:, columns.index("lambda_mean")],
        lambda_max=data[:, columns.index("lambda_max")],
        floor_hits=data[:, columns.index("floor_hits")].astype(np.int64),
    )


def json_dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def write_json(path: str | Path, obj) -> None:
    atomic_write(path, json_dumps_canonical(obj) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class CheckpointProvenance:
    seed: int
    restart_index: int
    restart_seed: int
    selected_epoch: int
    selection: str
    train_mse: float
    config_hash: str


def checkpoint_payload(model: Model, provenance: CheckpointProvenance) -> dict:
    return {
        "kind": CHECKPOINT_KIND,
        "schema_version": CHECKPOINT_VERSION,
        "model": {
            "n_res": model.config.n_res,
            "n_in": model.config.n_in,
            "n_out": model.config.n_out,
            "rho_in": model.config.rho_in,
            "rho_hat_res": model.config.rho_hat_res,
            "xi": model.config.xi,
            "gate_mode": model.config.gate_mode.value,
            "seed": model.config.seed,
        },
        "reservoir": {
            "w_in": model.reservoir.w_in.tolist(),
            "w_res": model.reservoir.w_res.tolist(),
            "xi": model.reservoir.xi,
        },
        "gates": {
            "w_fb_in": model.gates.w_fb_in.tolist(),
            "b_fb_in": model.gates.b_fb_in,
            "w_fb_res": model.gates.w_fb_res.tolist(),
            "b_fb_res": model.gates.b_fb_res,
        },
        "readout": {
            "w_out": model.readout.w_out.tolist(),
            "b_out": model.readout.b_out.tolist(),
        },
        "provenance": {
            "seed": provenance.seed,
            "restart_index": provenance.restart_index,
            "restart_seed": provenance.restart_seed,
            "selected_epoch": provenance.selected_epoch,
            "selection": provenance.selection,
            "train_mse": provenance.train_mse,
            "config_hash": provenance.config_hash,
        },
    }


def save_checkpoint(path, model: Model, provenance: CheckpointProvenance) -> None:
    write_json(path, checkpoint_payload(model, provenance))


def load_checkpoint(path) -> tuple[Model, CheckpointProvenance]:
    payload = read_json(path)
    if payload.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not an smrc checkpoint")
    if payload.get("schema_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint schema {payload.get('schema_version')} "
            f"not supported (this build reads {CHECKPOINT_VERSION})"
        )
    m = payload["model"]
    config = ModelConfig(
        n_res=m["n_res"],
        n_in=m["n_in"],
        n_out=m["n_out"],
        rho_in=m["rho_in"],
        rho_hat_res=m["rho_hat_res"],
        xi=m["xi"],
        gate_mode=GateMode(m["gate_mode"]),
        seed=m["seed"],
    )
    reservoir = ReservoirParams(
        w_in=np.array(payload["reservoir"]["w_in"]),
        w_res=np.array(payload["reservoir"]["w_res"]),
        xi=payload["reservoir"]["xi"],
    )
    gates = GateParams(
        w_fb_in=np.array(payload["gates"]["w_fb_in"]),
        b_fb_in=payload["gates"]["b_fb_in"],
        w_fb_res=np.array(payload["gates"]["w_fb_res"]),
        b_fb_res=payload["gates"]["b_fb_res"],
    )
    readout = ReadoutParams(
        w_out=np.array(payload["readout"]["w_out"]),
        b_out=np.array(payload["readout"]["b_out"]),
    )
    p = payload["provenance"]
    provenance = CheckpointProvenance(
        seed=p["seed"],
        restart_index=p["restart_index"],
        restart_seed=p["restart_seed"],
        selected_epoch=p["selected_epoch"],
        selection=p["selection"],
        train_mse=p["train_mse"],
        config_hash=p["config_hash"],
    )
    model = Model(config=config, reservoir=reservoir, gates=gates, readout=readout)
    return model, provenance
