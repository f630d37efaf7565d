"""Pydantic request/response models for the HTTP API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class OrganInfo(BaseModel):
    id: int
    name: str


class ModelInfo(BaseModel):
    classes: list[OrganInfo]
    alpha: float
    beta: float
    checkpoint_hash: str
    refine_checkpoint_hash: str = ""
    palette: dict[int, str]


class VolumeInfo(BaseModel):
    id: str
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    has_labels: bool


class ParseRequest(BaseModel):
    prompt: str


class RelationInfo(BaseModel):
    anchor: int
    target: int
    anchor_name: str
    target_name: str


class ParseResponse(BaseModel):
    presence: list[int]
    mentioned: list[OrganInfo]
    relations: list[RelationInfo]
    fallback_visual_only: bool


class SegmentRequest(BaseModel):
    volume_id: str
    prompt: str
    restrict: bool = False


class SegmentResponse(BaseModel):
    mask_id: str
    voxel_counts: dict[int, int] = Field(
        description="per-class voxel counts of the predicted mask"
    )
    alpha_bias: list[float]
    presence: list[int]
    relations_used: list[RelationInfo]
    skipped_relations: list[RelationInfo]
    fallback_visual_only: bool
