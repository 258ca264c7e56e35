"""Request and response models for the job service."""

from typing import Literal, Optional

from pydantic import BaseModel, Field


class ModelParams(BaseModel):
    """Model hyperparameters; unset fields fall back to the dataclass defaults."""

    kind: Literal["arne", "wren"] = "arne"
    height: Optional[int] = None
    width: Optional[int] = None
    d_model: Optional[int] = None
    n_encoder_layers: Optional[int] = None
    n_heads: Optional[int] = None
    d_k: Optional[int] = None
    d_v: Optional[int] = None
    d_hidden: Optional[int] = None
    g_layers: Optional[int] = None
    f_dims: Optional[list[int]] = None
    g_dims: Optional[list[int]] = None
    f_dropout: Optional[float] = None
    use_delimiter: Optional[bool] = None
    dropout_p: Optional[float] = None
    attn_dropout_p: Optional[float] = None
    desk: bool = Field(False, description="start from the CPU-sized preset instead of full scale")

    def overrides(self):
        skip = {"kind", "desk"}
        wren_only = {"g_dims"}
        arne_only = {"n_encoder_layers", "n_heads", "d_k", "d_v", "d_hidden",
                     "g_layers", "use_delimiter", "dropout_p", "attn_dropout_p"}
        out = {}
        for name, value in self.model_dump().items():
            if name in skip or value is None:
                continue
            if self.kind == "arne" and name in wren_only:
                continue
            if self.kind == "wren" and name in arne_only:
                continue
            out[name] = tuple(value) if isinstance(value, list) else value
        return out


class TrainParams(BaseModel):
    batch_size: Optional[int] = None
    lr: Optional[float] = None
    beta: Optional[float] = None
    scheduler_trigger_loss: Optional[float] = None
    scheduler_decay: Optional[float] = None
    early_stop_patience: Optional[int] = None
    grad_clip: Optional[float] = None
    seed: Optional[int] = None
    max_epochs: Optional[int] = None

    def overrides(self):
        return {k: v for k, v in self.model_dump().items() if v is not None}


class GenerateRequest(BaseModel):
    out: str
    n: int = Field(gt=0)
    seed: int = 0
    panel_size: int = 32
    min_rules: int = 1
    max_rules: int = 4
    split: Literal["train", "val", "test"] = "train"
    orientation: Literal["row", "column"] = "row"


class TrainRequest(BaseModel):
    run_dir: str
    train_path: str
    val_path: str
    test_path: Optional[str] = None
    model: ModelParams = ModelParams()
    train: TrainParams = TrainParams()


class EvalRequest(BaseModel):
    run_dir: str
    data_path: str
    checkpoint: Optional[str] = None
    beta: float = 10.0
    batch_size: int = 64
    threshold: float = 0.5
    out_dir: Optional[str] = None


class SweepRequest(BaseModel):
    run_dir: str
    train_path: str
    val_path: str
    test_path: str
    fractions: list[float] = [0.05, 0.1, 0.2, 0.35, 0.5, 1.0]
    model_kinds: list[Literal["arne", "wren"]] = ["arne", "wren"]
    arne: ModelParams = ModelParams(kind="arne")
    wren: ModelParams = ModelParams(kind="wren")
    train: TrainParams = TrainParams()
    shuffle_seed: int = 0


class AblateRequest(BaseModel):
    run_dir: str
    train_path: str
    val_path: str
    test_path: str
    dropout_p: Optional[list[float]] = None
    lr: Optional[list[float]] = None
    use_delimiter: Optional[list[bool]] = None
    beta: Optional[list[float]] = None
    fraction: list[float] = [1.0]
    model: ModelParams = ModelParams(kind="arne")
    train: TrainParams = TrainParams()
    shuffle_seed: int = 0


class GradcheckRequest(BaseModel):
    seed: int = 0
    eps: float = 1e-5
    tol_ops: float = 1e-4
    tol_layers: float = 1e-3
    max_entries: int = 3


class DumpMapsRequest(BaseModel):
    run_dir: str
    data_path: str
    sample_index: int = 0
    out_dir: str
    layer_index: int = 3


class JobCreated(BaseModel):
    job_id: str
    kind: str


class JobStatus(BaseModel):
    job_id: str
    kind: str
    state: Literal["queued", "running", "done", "error"]
    error: Optional[str] = None
    result: Optional[dict] = None


class HealthResponse(BaseModel):
    status: str
    version: str
