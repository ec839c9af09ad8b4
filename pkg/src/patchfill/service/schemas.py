"""Pydantic request/response models for the inpainting service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class SamplerOptions(BaseModel):
    k1: int | str = 20  # cells per iteration, or "all"
    k2: int = Field(default=200, ge=1)
    n_samples: int = Field(default=1, ge=1, le=16)
    seed: int = 0


class CreateSessionRequest(BaseModel):
    image: str  # base64 PNG, RGB
    mask: str  # base64 PNG, grayscale; 0 = missing
    semantic: str | None = None  # base64 PNG, single channel of category ids
    sketch: str | None = None  # base64 PNG, binary strokes
    config: SamplerOptions = SamplerOptions()


class GridInfo(BaseModel):
    h: int
    w: int


class CreateSessionResponse(BaseModel):
    session_id: str
    grid: GridInfo
    masked_cells: int
    iterations_expected: int
    complete: bool


class CellRef(BaseModel):
    i: int
    j: int


class StepResponse(BaseModel):
    iteration: int
    filled_cells: list[CellRef]
    previews: list[str]  # base64 PNG per sample
    complete: bool


class ResultResponse(BaseModel):
    images: list[str]  # base64 PNG per sample
    token_grids: list[list[list[int]]]
    iterations: int


class InpaintResponse(BaseModel):
    images: list[str]
    token_grids: list[list[list[int]]]
    iterations: int
    masked_cells: int


class ModelInfo(BaseModel):
    r: int
    D: int
    K: int
    K_prime: int
    grid: GridInfo
    with_conditions: bool


class HealthResponse(BaseModel):
    status: str
    model_loaded: bool
