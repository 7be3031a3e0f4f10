"""Pydantic request/response models for the HTTP API."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

MeasureName = Literal[
    "l2",
    "cosine",
    "correlation",
    "overlap",
    "volume",
    "robust_volume",
    "vendi",
    "dispersion",
    "difference",
]

CorruptionName = Literal["gaussian", "scale", "mask", "shift"]
StrategyName = Literal["random_directions", "shuffled_buyer", "foreign_dataset"]


class HealthResponse(BaseModel):
    status: str
    version: str


class GenerateRequest(BaseModel):
    """Create a synthetic labeled mixture and write it server-side."""

    out_path: str
    classes: int = 10
    dim: int = 512
    per_class: int = 1000
    mean_scale: float = 1.0
    class_scale: float = 0.3
    seed: int = 0
    labeled: bool = True


class GenerateResponse(BaseModel):
    path: str
    n: int
    dim: int
    classes: int


class MeasureRequest(BaseModel):
    """Compare a buyer file against a seller file with every measure."""

    buyer_path: str
    seller_path: str
    k: int = 10
    center: bool = False
    omega: Optional[float] = Field(default=None, gt=0)
    jitter: float = 1e-10


class MeasureValue(BaseModel):
    kind: MeasureName
    value: Optional[float] = None
    error: Optional[str] = None


class MeasureResponse(BaseModel):
    buyer_n: int
    seller_n: int
    k: int
    omega: float
    values: list[MeasureValue]


class RemoteQueryRequest(BaseModel):
    """Query a TCP seller service as the buyer."""

    address: str
    buyer_path: str
    k: int = 10
    omega: Optional[float] = Field(default=None, gt=0)
    center: bool = False
    timeout_ms: int = 5000


class RemoteQueryResponse(BaseModel):
    seller_id: str
    query_id: str
    n_points: int
    values: list[MeasureValue]


class ScreenRequest(BaseModel):
    """Run the decoy-query honesty screen against a TCP seller."""

    address: str
    buyer_path: str
    decoys: int = 4
    strategies: list[StrategyName] = ["random_directions"]
    foreign_paths: list[str] = []
    quantile: float = Field(default=0.75, ge=0.0, le=1.0)
    threshold: float = 1.2
    seed: int = 0
    k: int = 10
    center: bool = False
    timeout_ms: int = 5000


class ScreenVerdict(BaseModel):
    kind: MeasureName
    ratio: Optional[float] = None
    mu_real: Optional[float] = None
    accepted: Optional[bool] = None
    error: Optional[str] = None


class ScreenResponse(BaseModel):
    seller_id: str
    verdicts: list[ScreenVerdict]


class ScenarioPayload(BaseModel):
    """A scenario, inline or by server-side path (exactly one)."""

    scenario: Optional[dict] = None
    scenario_path: Optional[str] = None
    seed: Optional[int] = None  # overrides the scenario seed when set


class RankingRequest(ScenarioPayload):
    minimize_difference: bool = False


class DuplicateSweepRequest(ScenarioPayload):
    factors: list[int] = [1, 10, 100, 200]


class NoiseSweepRequest(ScenarioPayload):
    corruptions: list[CorruptionName] = ["gaussian"]
    severities: list[int] = [1, 2, 3, 4, 5]


class SizeSweepRequest(ScenarioPayload):
    seller_sizes: Optional[list[int]] = None
    buyer_sizes: Optional[list[int]] = None


class CorrelationRequest(ScenarioPayload):
    task: Literal["binary", "clustering"] = "clustering"


class RowsResponse(BaseModel):
    rows: list[dict]
