"""Operation handlers behind the service routes and the CLI.

Each handler takes a request model and returns a response model; everything it
writes stays under the request's output directory. Run manifests are written
before compute starts and carry the fully resolved configuration, so any run
can be replayed bit-identically from its manifest alone.
"""

from __future__ import annotations

import datetime
import json
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from hashlib import sha256
from pathlib import Path

import numpy as np

from .. import __version__
from ..data import Dataset, GeneratorSpec, export_delimited, generate, load_delimited
from ..errors import DataError, MetricError, TandensError
from ..metrics import anomaly_scores, average_precision, grid_score, mean_ll_report
from ..model import ModelSpec, build_model, load_checkpoint
from ..rng import RandomStream
from ..train import PROFILES, TrainConfig, train
from . import schemas

DECAY_CHOICES = (0.1, 0.5)

_GENERATOR_DEFAULT_D = {"markov": 32, "star": 32, "trimodal": 3}


def output_root() -> Path:
    return Path(os.environ.get("TANDENS_OUTPUT_ROOT", "."))


def resolve_out(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def default_workers() -> int:
    return int(os.environ.get("TANDENS_WORKERS", "1"))


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_manifest(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# generate


def do_generate(req: schemas.GenerateRequest) -> schemas.GenerateResponse:
    d = req.d if req.d is not None else _GENERATOR_DEFAULT_D[req.kind]
    spec = GeneratorSpec(kind=req.kind, d=d, n=req.n, sigma=req.sigma, eps=req.eps,
                         seed=req.seed, fractions=req.fractions)
    dataset = generate(spec)
    out = resolve_out(req.out_dir)
    dataset.save(out)
    return schemas.GenerateResponse(
        dataset_dir=str(out),
        d=dataset.d,
        rows={name: int(getattr(dataset, name).shape[0]) for name in ("train", "val", "test")},
    )


# ---------------------------------------------------------------------------
# train


def _model_spec(req: schemas.TrainOptions, preset: str, conditional: str, d: int) -> ModelSpec:
    base = ModelSpec(preset=preset, conditional=conditional, d=d, seed=req.seed)
    overrides = {
        name: getattr(req, name)
        for name in ("mixture_components", "hidden_width", "gru_units", "rnn_hidden",
                     "shift_state", "shift_hidden", "coupling_hidden", "leak")
        if getattr(req, name) is not None
    }
    return replace(base, **overrides)


def _train_config(req: schemas.TrainOptions, decay_factor: float) -> TrainConfig:
    base = PROFILES[req.profile]
    overrides = {
        name: getattr(req, name)
        for name in ("iterations", "batch_size", "learning_rate", "decay_every",
                     "clip_norm", "val_every")
        if getattr(req, name) is not None
    }
    return replace(base, decay_factor=decay_factor, seed=req.seed, **overrides).validate()


def _single_training_run(spec: ModelSpec, config: TrainConfig, dataset: Dataset, run_dir: Path):
    model = build_model(spec)
    result = train(model, dataset.train, dataset.val, config, run_dir)
    result.history.to_csv(run_dir / "history.csv")
    config.to_file(run_dir / "config.txt")
    return result


def do_train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    dataset = Dataset.load(resolve_out(req.dataset_dir))
    spec = _model_spec(req, req.preset, req.conditional, dataset.d)
    build_model(spec)  # validate preset/conditional names before any compute
    run_dir = resolve_out(req.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    auto_decay = req.decay_factor is None
    factors = DECAY_CHOICES if auto_decay else (req.decay_factor,)
    manifest_path = run_dir / "manifest.json"
    manifest = {
        "command": "train",
        "created_at": _now(),
        "finished_at": None,
        "status": "running",
        "seed": req.seed,
        "request": req.model_dump(),
        "resolved": {
            "model_spec": asdict(spec),
            "train_configs": [asdict(_train_config(req, f)) for f in factors],
            "dataset_dir": str(resolve_out(req.dataset_dir)),
            "decay_mode": "auto" if auto_decay else "fixed",
        },
        "artifacts": {
            "checkpoint": str(run_dir / "best.ckpt"),
            "history": str(run_dir / "history.csv"),
            "config_file": str(run_dir / "config.txt"),
        },
    }
    _write_manifest(manifest_path, manifest)

    try:
        results = []
        for factor in factors:
            config = _train_config(req, factor)
            sub_dir = run_dir if not auto_decay else run_dir / f"decay-{factor}"
            results.append((factor, config, sub_dir,
                            _single_training_run(spec, config, dataset, sub_dir)))
        best = min(results, key=lambda item: item[3].best_val_nll)
        factor, config, sub_dir, result = best
        if auto_decay:
            shutil.copyfile(sub_dir / "best.ckpt", run_dir / "best.ckpt")
            shutil.copyfile(sub_dir / "history.csv", run_dir / "history.csv")
            shutil.copyfile(sub_dir / "config.txt", run_dir / "config.txt")
        manifest["status"] = "complete"
        manifest["finished_at"] = _now()
        manifest["resolved"]["decay_factor_chosen"] = factor
        _write_manifest(manifest_path, manifest)
    except Exception:
        manifest["status"] = "failed"
        manifest["finished_at"] = _now()
        _write_manifest(manifest_path, manifest)
        raise

    return schemas.TrainResponse(
        run_dir=str(run_dir),
        checkpoint=str(run_dir / "best.ckpt"),
        history=str(run_dir / "history.csv"),
        manifest=str(manifest_path),
        config_file=str(run_dir / "config.txt"),
        preset=spec.preset,
        conditional=spec.conditional,
        d=spec.d,
        decay_factor=factor,
        best_iteration=result.best_iteration,
        best_val_nll=result.best_val_nll,
    )


# ---------------------------------------------------------------------------
# eval / sample / anomaly


def _load_eval_data(dataset_dir, data_file, split, d):
    if (dataset_dir is None) == (data_file is None):
        raise DataError("provide exactly one of dataset_dir or data_file")
    if dataset_dir is not None:
        dataset = Dataset.load(resolve_out(dataset_dir))
        data = dataset.split(split)
        dataset_id = f"{Path(dataset_dir).name}:{split}"
    else:
        data = load_delimited(resolve_out(data_file))
        dataset_id = Path(data_file).name
    if data.ndim != 2 or data.shape[1] != d:
        raise DataError(
            f"data dimension {data.shape[1] if data.ndim == 2 else '?'} "
            f"does not match model dimension {d}"
        )
    return data, dataset_id


def do_eval(req: schemas.EvalRequest) -> schemas.EvalResponse:
    model, _ = load_checkpoint(resolve_out(req.checkpoint))
    data, dataset_id = _load_eval_data(req.dataset_dir, req.data_file, req.split, model.d)
    model_id = f"{model.spec.preset} & {model.spec.conditional}"
    report = mean_ll_report(model, data, model_id=model_id, dataset_id=dataset_id)
    report_file = None
    if req.out_file:
        out = resolve_out(req.out_file)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("model,dataset,mean_ll,two_se,n\n" + report.row() + "\n")
        report_file = str(out)
    return schemas.EvalResponse(
        mean_ll=report.mean_ll,
        two_se=report.two_se,
        n=report.n,
        model_id=model_id,
        dataset_id=dataset_id,
        report_file=report_file,
        text=report.text(),
    )


def do_sample(req: schemas.SampleRequest) -> schemas.SampleResponse:
    model, _ = load_checkpoint(resolve_out(req.checkpoint))
    samples = model.sample(req.n, RandomStream(req.seed).split("sample"))
    out = resolve_out(req.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_delimited(samples, out)
    return schemas.SampleResponse(out_file=str(out), n=req.n, d=model.d)


def do_anomaly(req: schemas.AnomalyRequest) -> schemas.AnomalyResponse:
    model, _ = load_checkpoint(resolve_out(req.checkpoint))
    data, _ = _load_eval_data(req.dataset_dir, req.data_file, req.split, model.d)
    scores = anomaly_scores(model, data)
    out = resolve_out(req.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_delimited(scores[:, None], out)

    ap = None
    ap_error = None
    if req.labels_file is not None:
        labels = load_delimited(resolve_out(req.labels_file)).reshape(-1)
        if labels.shape[0] != scores.shape[0]:
            raise DataError(
                f"labels file has {labels.shape[0]} rows, scores have {scores.shape[0]}"
            )
        try:
            ap = average_precision(scores, labels.astype(np.int64))
        except MetricError as err:
            ap_error = str(err)
    return schemas.AnomalyResponse(
        scores_file=str(out),
        n=int(scores.shape[0]),
        average_precision=ap,
        ap_error=ap_error,
    )


# ---------------------------------------------------------------------------
# grid


def _cell_key(dataset_dir: str, preset: str, conditional: str, seed: int) -> str:
    digest = sha256(f"{dataset_dir}\x00{preset}\x00{conditional}\x00{seed}".encode())
    return digest.hexdigest()[:16]


def _run_grid_cell(payload: dict) -> dict:
    """Train and score one (dataset, preset, conditional) cell; self-contained
    so it can run in a worker process."""
    cell_dir = Path(payload["cell_dir"])
    cell_file = cell_dir / "cell.json"
    record = {
        "dataset": payload["dataset_dir"],
        "preset": payload["preset"],
        "conditional": payload["conditional"],
        "run_dir": str(cell_dir),
        "status": "failed",
        "test_ll": None,
        "error": None,
    }
    try:
        req = schemas.TrainRequest(**payload["train_request"])
        response = do_train(req)
        evaluation = do_eval(schemas.EvalRequest(
            checkpoint=response.checkpoint,
            dataset_dir=payload["dataset_dir"],
            split="test",
        ))
        record["status"] = "complete"
        record["test_ll"] = evaluation.mean_ll
    except TandensError as err:
        record["error"] = str(err)
    cell_dir.mkdir(parents=True, exist_ok=True)
    cell_file.write_text(json.dumps(record, indent=2) + "\n")
    return record


def do_grid(req: schemas.GridRequest) -> schemas.GridResponse:
    if not (req.dataset_dirs and req.presets and req.conditionals):
        raise DataError("grid needs at least one dataset, preset, and conditional")
    out_dir = resolve_out(req.out_dir)
    cells_dir = out_dir / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)

    train_fields = schemas.TrainOptions(**req.model_dump(include=set(
        schemas.TrainOptions.model_fields))).model_dump()
    pending = []
    reused: list[dict] = []
    for dataset_dir in req.dataset_dirs:
        for preset in req.presets:
            for conditional in req.conditionals:
                key = _cell_key(str(resolve_out(dataset_dir)), preset, conditional, req.seed)
                cell_dir = cells_dir / key
                cell_file = cell_dir / "cell.json"
                if cell_file.exists():
                    record = json.loads(cell_file.read_text())
                    if record.get("status") == "complete":
                        record["status"] = "reused"
                        reused.append(record)
                        continue
                pending.append({
                    "dataset_dir": dataset_dir,
                    "preset": preset,
                    "conditional": conditional,
                    "cell_dir": str(cell_dir),
                    "train_request": {
                        **train_fields,
                        "dataset_dir": dataset_dir,
                        "preset": preset,
                        "conditional": conditional,
                        "out_dir": str(cell_dir / "run"),
                    },
                })

    workers = req.workers if req.workers is not None else default_workers()
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            executed = list(pool.map(_run_grid_cell, pending))
    else:
        executed = [_run_grid_cell(p) for p in pending]

    records = reused + executed
    by_key = {(r["dataset"], r["preset"], r["conditional"]): r for r in records}
    cells = [
        schemas.GridCell(**by_key[(ds, t, m)])
        for ds in req.dataset_dirs
        for t in req.presets
        for m in req.conditionals
    ]
    failed = sum(1 for c in cells if c.status == "failed")

    tables: dict[str, str] = {}
    tables_dir = out_dir / "tables"
    tables_dir.mkdir(parents=True, exist_ok=True)
    for ds in req.dataset_dirs:
        name = Path(ds).name
        lines = ["transformation," + ",".join(req.conditionals)]
        for t in req.presets:
            row = [t]
            for m in req.conditionals:
                cell = by_key[(ds, t, m)]
                row.append("" if cell["test_ll"] is None else repr(cell["test_ll"]))
            lines.append(",".join(row))
        table_path = tables_dir / f"{name}.csv"
        table_path.write_text("\n".join(lines) + "\n")
        tables[ds] = str(table_path)

    scores_file = out_dir / "scores.csv"
    if failed == 0:
        lls = {
            (t, m, ds): by_key[(ds, t, m)]["test_ll"]
            for ds in req.dataset_dirs
            for t in req.presets
            for m in req.conditionals
        }
        scores = grid_score(lls, req.presets, req.conditionals, req.dataset_dirs)
        lines = ["transformation," + ",".join(req.conditionals)]
        for t in req.presets:
            lines.append(",".join([t] + [repr(scores[(t, m)]) for m in req.conditionals]))
        scores_file.write_text("\n".join(lines) + "\n")
    else:
        scores_file.write_text("")

    _write_manifest(out_dir / "grid_manifest.json", {
        "command": "grid",
        "created_at": _now(),
        "request": req.model_dump(),
        "failed": failed,
        "cells": [c.model_dump() for c in cells],
    })
    return schemas.GridResponse(
        out_dir=str(out_dir),
        cells=cells,
        failed=failed,
        tables=tables,
        scores_file=str(scores_file),
    )


def health() -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", version=__version__)
