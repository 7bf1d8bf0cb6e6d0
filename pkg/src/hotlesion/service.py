"""HTTP facade for the triage session workflow.

Endpoints (JSON over HTTP/1.1, images as multipart uploads):
  POST /v1/sessions                    clinical upload -> 201 session+decision
  POST /v1/sessions/{id}/dermoscopic   follow-up upload -> 200 combined decision
  GET  /v1/taxonomy                    label tree
  GET  /v1/model                       variant/modalities/thresholds/digest
  GET  /v1/health                      503 until the checkpoint is loaded

Decision payloads carry exactly the engine's decision fields; the service
never post-processes model outputs.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, Request, UploadFile, File
from fastapi.responses import JSONResponse

from .errors import (
    DuplicateDermoscopic,
    MissingThresholds,
    ModalityMismatch,
    UnknownSession,
)
from .inference import Engine, SessionStore, TriageSession, load_image_array

DEFAULT_MAX_UPLOAD = 8 * 1024 * 1024


@dataclass
class ApiConfig:
    checkpoint: str | Path
    bind: str = "127.0.0.1:8000"
    max_upload_bytes: int = DEFAULT_MAX_UPLOAD
    session_ttl_s: float = 3600.0

    def __post_init__(self):
        env = os.environ.get("HOT_MAX_UPLOAD_BYTES")
        if env:
            self.max_upload_bytes = int(env)
        if self.session_ttl_s <= 0:
            raise ValueError("session TTL must be positive")


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": code, "message": message})


def _session_payload(session: TriageSession) -> dict:
    body = {
        "session_id": session.session_id,
        "decision": session.clinical.to_dict(),
        "status": "complete" if session.combined is not None else "awaiting_decision",
    }
    if session.combined is not None:
        body["combined"] = session.combined.to_dict()
    return body


def create_app(config: ApiConfig, engine: Engine | None = None, defer_load: bool = False) -> FastAPI:
    """Build the app. The engine loads eagerly unless provided or deferred;
    a failed load leaves the service in the 503 not-loaded state."""
    app = FastAPI(title="hot triage service")
    state = {"engine": engine, "started": time.time(), "load_error": None}
    sessions = SessionStore(ttl_seconds=config.session_ttl_s)

    if engine is None and not defer_load:
        try:
            state["engine"] = Engine.load(config.checkpoint)
        except Exception as exc:  # surfaced via /v1/health
            state["load_error"] = str(exc)

    def ready() -> Engine | None:
        return state["engine"]

    async def read_upload(upload: UploadFile | None, request: Request):
        """Returns (array, error_response)."""
        eng = ready()
        if upload is None:
            return None, _error(400, "bad_request", "missing image upload")
        data = await upload.read()
        if len(data) > config.max_upload_bytes:
            return None, _error(413, "too_large", f"upload exceeds {config.max_upload_bytes} bytes")
        if not data:
            return None, _error(400, "undecodable", "empty upload")
        try:
            arr = load_image_array(data, eng.image_size())
        except Exception:
            return None, _error(400, "undecodable", "upload is not a decodable image")
        return arr, None

    @app.post("/v1/sessions")
    async def open_session(request: Request, clinical: UploadFile | None = File(None)):
        eng = ready()
        if eng is None:
            return _error(503, "not_loaded", "model checkpoint not loaded")
        arr, err = await read_upload(clinical, request)
        if err is not None:
            return err
        try:
            session = sessions.open_session(eng, arr)
        except MissingThresholds as exc:
            return _error(503, "not_calibrated", str(exc))
        return JSONResponse(status_code=201, content=_session_payload(session))

    @app.post("/v1/sessions/{session_id}/dermoscopic")
    async def submit_dermoscopic(
        session_id: str, request: Request, dermoscopic: UploadFile | None = File(None)
    ):
        eng = ready()
        if eng is None:
            return _error(503, "not_loaded", "model checkpoint not loaded")
        arr, err = await read_upload(dermoscopic, request)
        if err is not None:
            return err
        try:
            session = sessions.submit_dermoscopic(eng, session_id, arr)
        except UnknownSession as exc:
            return _error(404, "unknown_session", str(exc))
        except DuplicateDermoscopic as exc:
            return _error(409, "duplicate", str(exc))
        except ModalityMismatch as exc:
            return _error(503, "no_multimodal_model", str(exc))
        return JSONResponse(status_code=200, content=_session_payload(session))

    @app.get("/v1/taxonomy")
    def taxonomy():
        eng = ready()
        if eng is None:
            return _error(503, "not_loaded", "model checkpoint not loaded")
        tax = eng.taxonomy
        return {
            "level1": list(tax.level1_names),
            "level2": [
                {"name": n, "parent": tax.level1_names[p]}
                for n, p in zip(tax.level2_names, tax.level2_parents)
            ],
            "level3": [
                {"name": n, "parent": tax.level2_names[p], "id": bool(f)}
                for n, p, f in zip(tax.level3_names, tax.level3_parents, tax.id_flags)
            ],
        }

    @app.get("/v1/model")
    def model_info():
        eng = ready()
        if eng is None:
            return _error(503, "not_loaded", "model checkpoint not loaded")
        cfg = eng.configs.get("clinical") or next(iter(eng.configs.values()))
        body = {
            "variant": cfg.variant,
            "modalities": sorted(eng.models.keys()),
            "image_size": cfg.image_size,
            "checkpoint_digest": eng.checkpoint_digest,
            "thresholds": None,
        }
        if eng.thresholds is not None:
            body["thresholds"] = {
                "t_ood": eng.thresholds.t_ood,
                "t_triage": eng.thresholds.t_triage,
            }
        return body

    @app.get("/v1/health")
    def health():
        eng = ready()
        if eng is None:
            detail = {"status": "loading"}
            if state["load_error"]:
                detail["error"] = state["load_error"]
            return JSONResponse(status_code=503, content=detail)
        return {"status": "ok", "uptime_s": time.time() - state["started"]}

    return app


def serve(config: ApiConfig) -> None:
    import uvicorn

    host, _, port = config.bind.partition(":")
    app = create_app(config)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or "8000"), log_level="warning")
