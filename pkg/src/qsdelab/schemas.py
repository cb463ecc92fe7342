"""Request/response models for the validation service."""

from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Field

from .prng import DEFAULT_SEED, DEFAULT_STREAM


class ModelRequest(BaseModel):
    """Base for requests that name a built-in model or carry a problem
    document {N, m, T, x0, model: {kind, params}, bounds: {...}}."""

    model: str = "ou"
    problem: Optional[dict] = None
    seed: int = DEFAULT_SEED
    stream_id: int = DEFAULT_STREAM


class ValidateBoundsRequest(ModelRequest):
    samples: int = Field(33, ge=2)


class CheckRow(BaseModel):
    name: str
    measured: float
    declared: float
    passed: bool


class ValidateBoundsResponse(BaseModel):
    model: str
    rows: List[CheckRow]
    passed: bool
    csv: str


class SeriesErrorRequest(ModelRequest):
    eps: List[float] = Field(default_factory=lambda: [1e-2])
    k_offset: int = 0  # negative values weaken the order (negative control)


class SeriesErrorRow(BaseModel):
    model: str
    eps_target: float
    K: int
    r: int
    M: int
    measured_error: float
    bound: float
    passed: bool


class SeriesErrorResponse(BaseModel):
    rows: List[SeriesErrorRow]
    passed: bool
    csv: str


class HistoryRequest(ModelRequest):
    eps: float = 0.1
    padded: bool = False
    R: int = Field(0, ge=0)
    sample: int = Field(1, ge=1)
    qlss_mode: str = "honest"
    sqrt_mode: str = "honest"
    n_samples: int = Field(1, ge=1)
    delta: float = Field(0.1, gt=0, lt=1)


class HistoryResponse(BaseModel):
    model: str
    deviation: float
    budget: float
    prefactor: float
    u_b: float
    qlss_eps: float
    K: int
    r: int
    M: float
    per_step: List[float]
    checks: dict
    passed: bool
    csv: str


class EmConvergenceRequest(ModelRequest):
    r_list: List[int] = Field(default_factory=lambda: [8, 16, 32, 64, 128])
    paths: int = Field(200, ge=2)


class EmConvergenceResponse(BaseModel):
    model: str
    rows: List[dict]
    slope: float
    slope_band: List[float]
    passed: bool
    csv: str


class ObservableSpec(BaseModel):
    d: int = Field(ge=1)
    entries: List[dict]


class EstimateRequest(ModelRequest):
    algorithm: str = "multi"   # multi | terminal | em
    observable: ObservableSpec
    eps: Optional[float] = None
    eps_prime_target: Optional[float] = Field(
        None, description="derive eps from a per-sample accuracy target")
    delta: float = Field(0.2, gt=0, lt=1)
    repeats: int = Field(1, ge=1)
    oe_mode: str = "shot"
    conv_paths: int = Field(100, ge=2, description="paths for the step-constant estimate")


class EstimateResponse(BaseModel):
    algorithm: str
    model: str
    mu_hat: float
    eps: float
    delta: float
    plan: dict
    query_ledger: dict
    truth: Optional[float]
    abs_error: Optional[float]
    repeats: int
    coverage: Optional[float]
    passed: bool


class KhintchineRequest(BaseModel):
    kmax: int = Field(3, ge=1, le=6)
    lmax: int = Field(5, ge=1, le=8)


class KhintchineResponse(BaseModel):
    rows: List[dict]
    passed: bool
    csv: str


class ReportRequest(ModelRequest):
    pass


class ReportResponse(BaseModel):
    model: str
    sections: dict
    passed: bool


class ErrorBody(BaseModel):
    category: str   # config | bound | internal
    message: str
