"""HTTP facade over session stores for the browser review client.

Every body is JSON; images travel as base64 PNG strings. Errors come
back as {"error": {"code", "message"}} with codes from {PROTOCOL,
PARSE, BACKEND, VALIDATION} so clients can branch on them.
"""

import base64
import binascii
import uuid
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .agents import BBox, Decision, REVIEW_STEP, SessionStore, accept_question
from .errors import (
    BackendError,
    IcforgeError,
    NotFoundError,
    ParseError,
    ProtocolError,
    ValidationError,
)
from .imageio import decode_png

_ERROR_MAP = [
    (ProtocolError, 409, "PROTOCOL"),
    (ParseError, 400, "PARSE"),
    (BackendError, 502, "BACKEND"),
    (NotFoundError, 404, "VALIDATION"),
    (ValidationError, 400, "VALIDATION"),
    (IcforgeError, 400, "VALIDATION"),
]


def snapshot(store: SessionStore, session) -> dict:
    """Everything the review client renders, keyed off one fetch."""
    base = f"/sessions/{session.id}/artifacts"
    artifacts = {"ref": f"{base}/ref", "tgt": f"{base}/tgt"}
    if session.bbox_ref is not None:
        artifacts["crop_ref"] = f"{base}/crop_ref"
    if session.bbox_tgt is not None:
        artifacts["crop_tgt"] = f"{base}/crop_tgt"
    if session.corrected is not None:
        artifacts["corrected"] = f"{base}/corrected"
    pending = REVIEW_STEP.get(session.state)
    completions = [e for e in session.history if e.get("action") == "complete"]
    return {
        "id": session.id,
        "state": session.state,
        "revision": session.revision,
        "tag": session.tag,
        "bbox_tgt": session.bbox_tgt.to_list() if session.bbox_tgt else None,
        "bbox_ref": session.bbox_ref.to_list() if session.bbox_ref else None,
        "pending_step": pending,
        "question": accept_question(pending) if pending else None,
        "message": completions[0]["message"] if completions else None,
        "artifacts": artifacts,
        "history": session.history,
    }


def _decode_image_field(payload: dict, key: str) -> bytes:
    value = payload.get(key)
    if not isinstance(value, str) or not value:
        raise ValidationError(f"'{key}' must be a base64 PNG string")
    try:
        blob = base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ValidationError(f"'{key}' is not valid base64") from exc
    try:
        decode_png(blob)
    except Exception as exc:
        raise ValidationError(f"'{key}' is not a decodable PNG") from exc
    return blob


def _parse_decision(payload: dict) -> tuple[Decision, int | None]:
    if not isinstance(payload, dict):
        raise ValidationError("decision body must be a JSON object")
    verdict = payload.get("verdict")
    if not isinstance(verdict, str):
        raise ValidationError("decision needs a 'verdict' string")
    bbox = payload.get("bbox")
    tag = payload.get("tag")
    revision = payload.get("revision")
    if revision is not None and not isinstance(revision, int):
        raise ValidationError("'revision' must be an integer")
    decision = Decision(
        verdict,
        bbox=BBox.from_seq(bbox) if bbox is not None else None,
        tag=tag if tag else None,
    )
    return decision, revision


def create_app(store: SessionStore, ui_dir=None) -> FastAPI:
    app = FastAPI(title="icforge session service", docs_url=None,
                  redoc_url=None)

    def _register(exc_type, status, code):
        def handler(request: Request, exc: Exception) -> JSONResponse:
            return JSONResponse(
                status_code=status,
                content={"error": {"code": code, "message": str(exc)}},
            )
        app.add_exception_handler(exc_type, handler)

    for exc_type, status, code in _ERROR_MAP:
        _register(exc_type, status, code)

    @app.get("/health")
    def health() -> dict:
        return {"ok": True}

    @app.get("/sessions")
    def list_sessions() -> dict:
        return {"sessions": store.list_ids()}

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request) -> dict:
        payload = await request.json()
        if not isinstance(payload, dict):
            raise ValidationError("session body must be a JSON object")
        ref_blob = _decode_image_field(payload, "image_ref")
        tgt_blob = _decode_image_field(payload, "image_tgt")
        tag = payload.get("tag") or "object"
        session_id = payload.get("session_id")
        sid = session_id or uuid.uuid4().hex[:12]
        ref_path = store.root / f"{sid}_ref.png"
        tgt_path = store.root / f"{sid}_tgt.png"
        ref_path.write_bytes(ref_blob)
        tgt_path.write_bytes(tgt_blob)
        session = store.create(ref_path, tgt_path, tag=tag, session_id=sid)
        return snapshot(store, session)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        return snapshot(store, store.load(session_id))

    @app.post("/sessions/{session_id}/decision")
    async def post_decision(session_id: str, request: Request) -> dict:
        payload = await request.json()
        decision, revision = _parse_decision(payload)
        session = store.decide(session_id, decision,
                               expected_revision=revision)
        return snapshot(store, session)

    @app.get("/sessions/{session_id}/artifacts/{name}")
    def get_artifact(session_id: str, name: str) -> Response:
        return Response(content=store.artifact(session_id, name),
                        media_type="image/png")

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
