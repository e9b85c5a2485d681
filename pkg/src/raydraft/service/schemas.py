"""Pydantic request/response models for the review service API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class StudyCreated(BaseModel):
    study_id: str


class BBoxModel(BaseModel):
    row_min: int
    col_min: int
    row_max: int
    col_max: int


class FindingModel(BaseModel):
    disease: str
    probability: float
    bbox: BBoxModel | None = None
    sentences: list[list[str]]
    used_shared_decoder: bool = False
    warnings: list[str] = Field(default_factory=list)
    heatmap_png: str
    heatmap_raw_png: str
    crop_png: str


class SentenceModel(BaseModel):
    tokens: list[str]
    source: str
    disease: str | None = None


class ReportModel(BaseModel):
    sentences: list[SentenceModel]
    text: str


class InterpretationModel(BaseModel):
    study_id: str
    threshold: float
    probabilities: dict[str, float]
    present: list[str]
    is_normal: bool
    findings: list[FindingModel]
    report: ReportModel
    provenance: dict


class EditModel(BaseModel):
    edited_at: str
    text: str


class SessionModel(BaseModel):
    study_id: str
    draft_report: str
    status: str
    created_at: str
    updated_at: str
    audit: list[EditModel]
    audit_length: int


class ReportEdit(BaseModel):
    text: str = Field(min_length=1)


class HealthModel(BaseModel):
    status: str
    version: str
