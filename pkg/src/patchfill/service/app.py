"""FastAPI service exposing session-based and one-shot inpainting.

Model weights are loaded once and shared read-only across requests; each
session serializes its own mutations behind a lock. Stepwise and one-shot
paths run the same sampler code with the same seed derivation, so equal
seeds produce bitwise-equal outputs either way.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import time

import numpy as np
from fastapi import FastAPI, HTTPException, Request

from .. import imageio as IO
from .. import sampler as S
from .. import tensor as T
from ..vqvae import PROV_PENDING
from . import schemas
from .sessions import SessionStore

log = logging.getLogger("patchfill.service")

MAX_FIELD_BYTES = 16 * 1024 * 1024


def _b64_png(field, value, expect):
    """Decode a base64 PNG field; HTTP 400 on malformed input, 413 on oversize."""
    if len(value) > MAX_FIELD_BYTES:
        raise HTTPException(413, detail=f"field '{field}' exceeds {MAX_FIELD_BYTES} bytes")
    try:
        blob = base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError):
        raise HTTPException(400, detail=f"field '{field}': invalid base64")
    try:
        arr = IO.png_bytes_to_array(blob)
    except IO.FormatError as exc:
        raise HTTPException(400, detail=f"field '{field}': {exc}")
    if expect == "rgb" and arr.ndim != 3:
        raise HTTPException(400, detail=f"field '{field}': expected an RGB image")
    if expect == "gray" and arr.ndim != 2:
        raise HTTPException(400, detail=f"field '{field}': expected a single-channel image")
    return arr


def _encode_png(image):
    return base64.b64encode(IO.image_to_png_bytes(image)).decode("ascii")


def create_app(vqvae, transformer, encoders=None, session_ttl=900.0):
    app = FastAPI(title="patchfill inpainting service")
    store = SessionStore(ttl=session_ttl)
    grid_h, grid_w = vqvae.config.grid
    r = vqvae.config.patch_size

    @app.middleware("http")
    async def request_log(request: Request, call_next):
        started = time.monotonic()
        response = await call_next(request)
        log.info(json.dumps({
            "method": request.method,
            "path": request.url.path,
            "status": response.status_code,
            "ms": round((time.monotonic() - started) * 1000, 2),
        }))
        return response

    def parse_inputs(req: schemas.CreateSessionRequest):
        img_arr = _b64_png("image", req.image, "rgb")
        mask_arr = _b64_png("mask", req.mask, "gray")
        if img_arr.shape[:2] != tuple(vqvae.config.image_size):
            raise HTTPException(
                400,
                detail=f"field 'image': size {img_arr.shape[:2]} does not match "
                f"model {tuple(vqvae.config.image_size)}",
            )
        if mask_arr.shape != img_arr.shape[:2]:
            raise HTTPException(
                400, detail=f"field 'mask': size {mask_arr.shape} does not match the image"
            )
        vals = np.unique(mask_arr)
        if not np.all(np.isin(vals, (0, 255))):
            raise HTTPException(
                422, detail=f"field 'mask': must be binary 0/255, found values {vals[:6].tolist()}"
            )
        image = (img_arr.astype(np.float32) / 255.0).astype(T.current_dtype())
        mask = (mask_arr > 0).astype(T.current_dtype())[..., None]

        sem_f = str_f = None
        if req.semantic is not None or req.sketch is not None:
            if not transformer.config.with_conditions:
                raise HTTPException(
                    400, detail="model was trained without condition support"
                )
            if encoders is None:
                raise HTTPException(400, detail="no condition encoders loaded")
            if req.semantic is not None:
                sem_arr = _b64_png("semantic", req.semantic, "gray")
                if sem_arr.shape != img_arr.shape[:2]:
                    raise HTTPException(400, detail="field 'semantic': size mismatch")
                limit = encoders.num_known + encoders.num_unknown
                if sem_arr.max(initial=0) >= limit:
                    raise HTTPException(
                        400, detail=f"field 'semantic': id {sem_arr.max()} >= limit {limit}"
                    )
                sem_f = encoders.semantic_features(sem_arr.astype(np.int64)).data[0]
            if req.sketch is not None:
                sk_arr = _b64_png("sketch", req.sketch, "gray")
                if sk_arr.shape != img_arr.shape[:2]:
                    raise HTTPException(400, detail="field 'sketch': size mismatch")
                str_f = encoders.sketch_features((sk_arr > 0).astype(np.float32)).data[0]

        try:
            config = S.SamplerConfig(
                k1=None if str(req.config.k1).lower() == "all" else int(req.config.k1),
                k2=req.config.k2,
                n_samples=req.config.n_samples,
                seed=req.config.seed,
            )
        except ValueError as exc:
            raise HTTPException(400, detail=f"field 'config': {exc}")
        return image, mask, config, sem_f, str_f

    def render_preview(sample, image, mask):
        """Current decode with still-pending patches painted white."""
        rows = vqvae.lookup(sample.tokens[None])
        masked = image * mask
        out = np.asarray(vqvae.decode(rows, mask[None], masked[None]).data[0])
        pending_px = np.kron(sample.provenance == PROV_PENDING, np.ones((r, r), bool))
        white = pending_px[..., None] & (mask == 0.0)
        out = np.where(white, 1.0, out)
        return _encode_png(out)

    # -- endpoints -----------------------------------------------------

    @app.get("/v1/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", model_loaded=True)

    @app.get("/v1/model", response_model=schemas.ModelInfo)
    def model_info():
        return schemas.ModelInfo(
            r=r,
            D=vqvae.config.feature_dim,
            K=vqvae.codebook.size,
            K_prime=vqvae.codebook.size_masked,
            grid=schemas.GridInfo(h=grid_h, w=grid_w),
            with_conditions=transformer.config.with_conditions,
        )

    @app.post("/v1/sessions", response_model=schemas.CreateSessionResponse)
    def create_session(req: schemas.CreateSessionRequest):
        image, mask, config, sem_f, str_f = parse_inputs(req)
        samples = [
            S.start_session(
                vqvae, image, mask, S.sample_rng(config.seed, i),
                sem_features=sem_f, str_features=str_f,
            )
            for i in range(config.n_samples)
        ]
        masked_cells = samples[0].masked_total
        expected = S.iteration_count(masked_cells, config.k1)
        session = store.create(
            samples=samples, config=config, image=image, mask=mask,
            iterations_expected=expected, masked_cells=masked_cells,
        )
        return schemas.CreateSessionResponse(
            session_id=session.id,
            grid=schemas.GridInfo(h=grid_h, w=grid_w),
            masked_cells=masked_cells,
            iterations_expected=expected,
            complete=session.complete,
        )

    def _get_or_404(sid):
        session = store.get(sid)
        if session is None:
            raise HTTPException(404, detail=f"unknown session {sid!r}")
        return session

    @app.post("/v1/sessions/{sid}/step", response_model=schemas.StepResponse)
    def step_session(sid: str):
        session = _get_or_404(sid)
        with session.lock:
            if session.complete:
                raise HTTPException(409, detail="session already complete")
            filled = None
            for sample in session.samples:
                cells = S.step(sample, vqvae, transformer, session.config.k1, session.config.k2)
                if filled is None:
                    filled = cells  # first sample's picks; all fill equal counts
            previews = [render_preview(s, session.image, session.mask) for s in session.samples]
            return schemas.StepResponse(
                iteration=session.samples[0].iteration,
                filled_cells=[schemas.CellRef(i=i, j=j) for i, j in filled],
                previews=previews,
                complete=session.complete,
            )

    @app.get("/v1/sessions/{sid}/result", response_model=schemas.ResultResponse)
    def session_result(sid: str):
        session = _get_or_404(sid)
        with session.lock:
            if not session.complete:
                raise HTTPException(409, detail="session incomplete: keep stepping")
            images = [
                S.finish(s, vqvae, session.image, session.mask) for s in session.samples
            ]
            return schemas.ResultResponse(
                images=[_encode_png(im) for im in images],
                token_grids=[s.tokens.tolist() for s in session.samples],
                iterations=session.samples[0].iteration,
            )

    @app.delete("/v1/sessions/{sid}")
    def delete_session(sid: str):
        if not store.delete(sid):
            raise HTTPException(404, detail=f"unknown session {sid!r}")
        return {"deleted": sid}

    @app.post("/v1/inpaint", response_model=schemas.InpaintResponse)
    def one_shot(req: schemas.CreateSessionRequest):
        image, mask, config, sem_f, str_f = parse_inputs(req)
        result = S.inpaint(
            vqvae, transformer, image, mask, config,
            sem_features=sem_f, str_features=str_f,
        )
        return schemas.InpaintResponse(
            images=[_encode_png(im) for im in result.images],
            token_grids=[g.tolist() for g in result.token_grids],
            iterations=result.iterations,
            masked_cells=result.masked_cells,
        )

    app.state.store = store
    return app
