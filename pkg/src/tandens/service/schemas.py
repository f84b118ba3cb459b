"""Pydantic request/response models for every operation the service exposes."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class GenerateRequest(BaseModel):
    kind: Literal["markov", "star", "trimodal"]
    out_dir: str
    d: Optional[int] = None  # defaults: markov/star 32, trimodal 3
    n: int = Field(default=100000, ge=1)
    seed: int = 0
    sigma: float = 0.1
    eps: float = 0.1
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)


class GenerateResponse(BaseModel):
    dataset_dir: str
    d: int
    rows: dict[str, int]


class ModelSizeOptions(BaseModel):
    """Architecture overrides; None keeps the standard sizes."""

    mixture_components: Optional[int] = None
    hidden_width: Optional[int] = None
    gru_units: Optional[int] = None
    rnn_hidden: Optional[int] = None
    shift_state: Optional[int] = None
    shift_hidden: Optional[int] = None
    coupling_hidden: Optional[int] = None
    leak: Optional[float] = None


class TrainOptions(ModelSizeOptions):
    """Training overrides; None falls back to the selected profile's value.

    decay_factor None means: run both 0.1 and 0.5 and keep the better
    validation NLL.
    """

    profile: Literal["default", "large"] = "default"
    iterations: Optional[int] = None
    batch_size: Optional[int] = None
    learning_rate: Optional[float] = None
    decay_factor: Optional[float] = None
    decay_every: Optional[int] = None
    clip_norm: Optional[float] = None
    val_every: Optional[int] = None
    seed: int = 0


class TrainRequest(TrainOptions):
    dataset_dir: str
    preset: str
    conditional: str
    out_dir: str


class TrainResponse(BaseModel):
    run_dir: str
    checkpoint: str
    history: str
    manifest: str
    config_file: str
    preset: str
    conditional: str
    d: int
    decay_factor: float
    best_iteration: int
    best_val_nll: float


class EvalRequest(BaseModel):
    checkpoint: str
    dataset_dir: Optional[str] = None
    data_file: Optional[str] = None
    split: Literal["train", "val", "test"] = "test"
    out_file: Optional[str] = None


class EvalResponse(BaseModel):
    mean_ll: float
    two_se: float
    n: int
    model_id: str
    dataset_id: str
    report_file: Optional[str] = None
    text: str


class SampleRequest(BaseModel):
    checkpoint: str
    out_file: str
    n: int = Field(default=1000, ge=0)
    seed: int = 0


class SampleResponse(BaseModel):
    out_file: str
    n: int
    d: int


class AnomalyRequest(BaseModel):
    checkpoint: str
    out_file: str
    dataset_dir: Optional[str] = None
    data_file: Optional[str] = None
    split: Literal["train", "val", "test"] = "test"
    labels_file: Optional[str] = None


class AnomalyResponse(BaseModel):
    scores_file: str
    n: int
    average_precision: Optional[float] = None
    ap_error: Optional[str] = None


class GridRequest(TrainOptions):
    dataset_dirs: list[str]
    presets: list[str]
    conditionals: list[str]
    out_dir: str
    workers: Optional[int] = None  # None: TANDENS_WORKERS or 1


class GridCell(BaseModel):
    dataset: str
    preset: str
    conditional: str
    status: Literal["complete", "failed", "reused"]
    test_ll: Optional[float] = None
    error: Optional[str] = None
    run_dir: str


class GridResponse(BaseModel):
    out_dir: str
    cells: list[GridCell]
    failed: int
    tables: dict[str, str]
    scores_file: str


class HealthResponse(BaseModel):
    status: str
    version: str
