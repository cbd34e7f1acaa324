"""Request/response schemas for the tracking service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class TrackRequest(BaseModel):
    sequence_dir: str
    output_dir: str
    config: dict = Field(default_factory=dict)
    pipelined: bool = False


class TrackResponse(BaseModel):
    output_dir: str
    n_frames: int
    fps: float
    pipelined: bool
    latencies: dict[int, int]
    timings: dict[str, float]


class SynthRequest(BaseModel):
    output_dir: str
    preset: str = "small"
    n_frames: int = 30
    seed: int = 0
    with_skirt: bool = True
    with_cloth_motion: bool = True
    image_size: int = 256
    sigma2d: float = 1.0
    sigma3d: float = 0.008
    dropout2d: float = 0.0
    dropout3d: float = 0.0
    image_noise: float = 0.0
    script: dict | None = None


class SynthResponse(BaseModel):
    output_dir: str
    n_frames: int
    n_vertices: int
    n_triangles: int


class EvalRequest(BaseModel):
    sequence_dir: str
    result_dir: str
    use_smoothed: bool = True


class EvalResponse(BaseModel):
    n_frames: int
    vertex_error: float
    vertex_error_by_class: dict[str, float]
    joint_error: float
    mean_iou: float


class GradcheckRequest(BaseModel):
    n_configs: int = 25
    step: float = 1e-6
    tolerance: float = 1e-4
    seed: int = 2024
    image_size: int = 128


class GradcheckResponse(BaseModel):
    passed: bool
    max_rel_error: float
    elapsed: float
    n_configs: int
    worst_by_block: dict[str, float]
