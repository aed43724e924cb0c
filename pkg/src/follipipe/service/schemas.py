"""Request/response models for the HTTP service (and the CLI thin client)."""
from __future__ import annotations

from pydantic import BaseModel, Field


class SynthRequest(BaseModel):
    out_dir: str
    seed: int = 0
    n_slides: int = 15
    n_test: int = 2
    width: int = 384
    height: int = 384
    patch_size: int = 64
    n_follicle_clusters: int = 3
    n_colloid_blobs: int = 4
    follicular_fraction_target: float = 0.08
    t_follicular: float = 0.05
    t_colloid: float = 0.05
    noise_level: float = 6.0


class SynthResponse(BaseModel):
    manifest: str
    n_train: int
    n_test: int
    slides: list[str]


class TrainRequest(BaseModel):
    manifest: str
    checkpoint: str
    metrics_csv: str | None = None
    seed: int = 0
    patch_size: int = 64
    epochs: int = 14
    batch_size: int = 8
    learning_rate: float = 0.5
    loss_mode: str = "adaptive:miou"
    joint_weight: float = Field(default=0.5, ge=0.0, le=1.0)
    ref_patch: str | None = None


class TrainResponse(BaseModel):
    checkpoint: str
    metrics_csv: str
    steps: int
    final_cross_entropy: float
    final_M: float
    final_adaptive: float
    final_cls: float
    final_joint: float


class EvalRequest(BaseModel):
    manifest: str
    checkpoint: str | None = None
    patch_size: int = 64
    role: str | None = "wsi-test"
    oracle: bool = False
    ref_patch: str | None = None


class EvalResponse(BaseModel):
    pacc: float
    macc: float
    miou: float
    fwiou: float
    classifier_accuracy: float
    n_patches: int


class InferWsiRequest(BaseModel):
    slide: str
    checkpoint: str
    out_mask: str
    report_out: str | None = None
    gated: bool = True
    patch_size: int = 64
    ref_patch: str | None = None
    workers: int = Field(default=1, ge=1)
    gt_mask: str | None = None
    compare_ungated: bool = False


class InferWsiResponse(BaseModel):
    slide: str
    total_patches: int
    skipped_noninfo: int
    skipped_colloid: int
    segmented: int
    gated: bool
    mask_path: str
    wall_time_gated: float | None
    wall_time_ungated: float | None
    criteria: dict[str, float] | None


class GradcheckRequest(BaseModel):
    seeds: int = Field(default=20, ge=1)
    threshold: float = 1e-5


class GradcheckEntryModel(BaseModel):
    name: str
    max_error: float


class GradcheckResponse(BaseModel):
    entries: list[GradcheckEntryModel]
    max_error: float
    ok: bool
