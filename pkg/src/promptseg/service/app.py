"""FastAPI application exposing parse / segment / slice endpoints.

All model state is read-only after startup; the mask store is append-only,
so identical requests always produce byte-identical responses.
"""

from __future__ import annotations

import os

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..errors import IndexOutOfRange, PromptsegError
from ..grids import AXES
from ..prompts import parse_prompt
from .render import PALETTE, mask_slice_png, volume_slice_png
from .schemas import (
    ModelInfo,
    OrganInfo,
    ParseRequest,
    ParseResponse,
    RelationInfo,
    SegmentRequest,
    SegmentResponse,
    VolumeInfo,
)
from .state import ServiceState


def _relation_infos(state: ServiceState, pairs) -> list[RelationInfo]:
    return [
        RelationInfo(
            anchor=a,
            target=t,
            anchor_name=state.lexicon.entry(a).canonical_name,
            target_name=state.lexicon.entry(t).canonical_name,
        )
        for a, t in pairs
    ]


def create_app(state: ServiceState, console_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="promptseg", version="0.1.0")

    # malformed request bodies are 400; 422 is reserved for the
    # zero-organ-prompt-under-restrict case
    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc.errors())})

    @app.get("/api/model", response_model=ModelInfo)
    def model_info():
        return ModelInfo(
            classes=[
                OrganInfo(id=e.id, name=e.canonical_name)
                for e in state.lexicon.entries
            ],
            alpha=float(state.fusion.alpha),
            beta=float(state.fusion.beta),
            checkpoint_hash=state.checkpoint_hash,
            refine_checkpoint_hash=state.refine_hash,
            palette=PALETTE,
        )

    @app.get("/api/volumes", response_model=list[VolumeInfo])
    def list_volumes():
        out = []
        for vol_id, entry in sorted(state.volumes.items()):
            vol = entry.volume()
            out.append(
                VolumeInfo(
                    id=vol_id,
                    dims=vol.dims,
                    spacing=vol.spacing,
                    has_labels=entry.labels_path is not None,
                )
            )
        return out

    def _check_axis(axis: str):
        if axis not in AXES:
            raise HTTPException(400, f"axis must be one of {AXES}")

    @app.get("/api/volumes/{vol_id}/slice")
    def volume_slice(vol_id: str, axis: str = "axial", index: int = 0):
        if vol_id not in state.volumes:
            raise HTTPException(404, f"unknown volume {vol_id!r}")
        _check_axis(axis)
        try:
            png = volume_slice_png(state.volumes[vol_id].volume(), axis, index)
        except IndexOutOfRange as exc:
            raise HTTPException(404, str(exc)) from exc
        return Response(content=png, media_type="image/png")

    @app.post("/api/parse", response_model=ParseResponse)
    def parse(req: ParseRequest):
        parsed = parse_prompt(req.prompt, state.lexicon)
        mentioned = [
            OrganInfo(id=c, name=state.lexicon.entry(c).canonical_name)
            for c in parsed.mentioned()
        ]
        return ParseResponse(
            presence=list(parsed.presence),
            mentioned=mentioned,
            relations=_relation_infos(state, parsed.relations),
            fallback_visual_only=not mentioned,
        )

    @app.post("/api/segment", response_model=SegmentResponse)
    def segment(req: SegmentRequest):
        if req.volume_id not in state.volumes:
            raise HTTPException(404, f"unknown volume {req.volume_id!r}")
        parsed = parse_prompt(req.prompt, state.lexicon)
        if req.restrict and not parsed.mentioned():
            raise HTTPException(
                422, "prompt mentions no organ; nothing would remain under restrict"
            )
        try:
            mask_id, result = state.segment(req.volume_id, req.prompt, req.restrict)
        except PromptsegError as exc:
            raise HTTPException(400, str(exc)) from exc
        ids, counts = np.unique(result.mask.data, return_counts=True)
        return SegmentResponse(
            mask_id=mask_id,
            voxel_counts={int(i): int(n) for i, n in zip(ids, counts)},
            alpha_bias=[float(v) for v in result.alpha_bias],
            presence=list(result.presence_used),
            relations_used=_relation_infos(state, result.relations_used),
            skipped_relations=_relation_infos(state, result.skipped_relations),
            fallback_visual_only=result.fallback_visual_only,
        )

    @app.get("/api/masks/{mask_id}/slice")
    def mask_slice(mask_id: str, axis: str = "axial", index: int = 0):
        if mask_id not in state.masks:
            raise HTTPException(404, f"unknown mask {mask_id!r}")
        _check_axis(axis)
        try:
            png = mask_slice_png(state.masks[mask_id], axis, index)
        except IndexOutOfRange as exc:
            raise HTTPException(404, str(exc)) from exc
        return Response(content=png, media_type="image/png")

    @app.get("/api/masks/{mask_id}/file")
    def mask_file(mask_id: str):
        if mask_id not in state.masks:
            raise HTTPException(404, f"unknown mask {mask_id!r}")
        mask = state.masks[mask_id]
        return Response(
            content=mask.data.astype(np.uint8).tobytes(order="C"),
            media_type="application/octet-stream",
            headers={
                "X-Dims": ",".join(str(d) for d in mask.dims),
                "X-Spacing": ",".join(repr(s) for s in mask.spacing),
                "X-Dtype": "u8",
            },
        )

    if console_dir and os.path.isdir(console_dir):
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=console_dir, html=True), name="console")

    return app
