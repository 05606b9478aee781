"""HTTP service: authenticated scan upload, analysis, and trend queries.

Bearer tokens (issued per user with a configured TTL) guard every endpoint
except user creation and token issuance. Uploads run the full analysis
pipeline and persist atomically: nothing is appended until decoding, grading,
and validation all succeed. Re-sending a submission with the same
idempotency key (or the same image and capture time) replays the original
record instead of storing a duplicate.
"""

from __future__ import annotations

import secrets
import threading
from datetime import datetime, timedelta, timezone
from pathlib import Path

from fastapi import Depends, FastAPI, File, Form, Header, HTTPException, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .config import AppConfig
from .errors import (
    BadParams,
    CorruptData,
    DuplicateScan,
    StoreError,
    TooSmall,
    UnknownUser,
    UnsupportedFormat,
    ValidationError,
)
from .grading import METRIC_NAMES, severity_map
from .imaging import decode_image
from .interpretation import interpret_with_fallback
from .pipeline import AllAdaptersFailed, analyze_image
from .trends import TrendStore, make_scan_record, parse_timestamp

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class TokenTable:
    """In-memory bearer tokens; expired entries are rejected and purged."""

    def __init__(self, ttl_seconds: int):
        self.ttl = timedelta(seconds=ttl_seconds)
        self._tokens: dict[str, tuple] = {}
        self._lock = threading.Lock()

    def issue(self, user_id: str) -> tuple:
        token = secrets.token_hex(24)
        expires_at = datetime.now(timezone.utc) + self.ttl
        with self._lock:
            self._tokens[token] = (user_id, expires_at)
        return token, expires_at

    def resolve(self, token: str) -> str | None:
        with self._lock:
            entry = self._tokens.get(token)
            if entry is None:
                return None
            user_id, expires_at = entry
            if expires_at <= datetime.now(timezone.utc):
                del self._tokens[token]
                return None
            return user_id


class CreateUserBody(BaseModel):
    display_name: str


class TokenBody(BaseModel):
    user_id: str


class NoteBody(BaseModel):
    text: str


def create_app(
    config: AppConfig | None = None,
    store: TrendStore | None = None,
    interpretation_transport=None,
) -> FastAPI:
    config = config or AppConfig()
    store = store or TrendStore(config.store_dir)
    tokens = TokenTable(config.token_ttl_seconds)
    images_dir = Path(config.store_dir) / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    app = FastAPI(title="fundustrack", version="0.1.0")

    def require_user(authorization: str | None = Header(default=None)) -> str:
        if not authorization or not authorization.startswith("Bearer "):
            raise HTTPException(status_code=401, detail="missing bearer token")
        user_id = tokens.resolve(authorization.removeprefix("Bearer "))
        if user_id is None:
            raise HTTPException(status_code=401, detail="invalid or expired token")
        return user_id

    def owned_scan(scan_id: str, user_id: str):
        try:
            record = store.get_scan(scan_id)
        except StoreError:
            raise HTTPException(status_code=404, detail="scan not found") from None
        if record.user_id != user_id:
            # same shape as unknown: no existence leak across users
            raise HTTPException(status_code=404, detail="scan not found")
        return record

    @app.post("/users")
    def create_user(body: CreateUserBody):
        if not body.display_name.strip():
            raise HTTPException(status_code=400, detail="display_name must be non-empty")
        return store.create_user(body.display_name.strip()).to_dict()

    @app.post("/auth/token")
    def issue_token(body: TokenBody):
        try:
            store.get_user(body.user_id)
        except UnknownUser:
            raise HTTPException(status_code=401, detail="bad credentials") from None
        token, expires_at = tokens.issue(body.user_id)
        return {
            "token": token,
            "user_id": body.user_id,
            "expires_at": expires_at.isoformat(),
        }

    def _replay_response(record):
        return {
            "scan": record.to_dict(),
            "severities": severity_map(record.flat_metrics()),
            "alerts": [],
            "replay": True,
        }

    @app.post("/scans")
    async def upload_scan(
        image: UploadFile = File(...),
        captured_at: str | None = Form(default=None),
        idempotency_key: str | None = Form(default=None),
        user_id: str = Depends(require_user),
    ):
        data = await image.read()
        try:
            decoded = decode_image(data)
        except (UnsupportedFormat, CorruptData, TooSmall, BadParams) as exc:
            raise HTTPException(status_code=400, detail=f"undecodable image: {exc}")

        try:
            when = parse_timestamp(captured_at) if captured_at else datetime.now(timezone.utc)
        except BadParams as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        if when > datetime.now(timezone.utc) + timedelta(seconds=1):
            raise HTTPException(status_code=400, detail="captured_at lies in the future")

        replay = store.find_replay(
            user_id,
            image_ref=decoded.source_id,
            captured_at=when,
            idempotency_key=idempotency_key,
        )
        if replay is not None:
            return _replay_response(replay)

        ext = "png" if data[:8] == _PNG_MAGIC else "ppm"
        image_path = images_dir / f"{decoded.source_id}.{ext}"
        if not image_path.exists():
            image_path.write_bytes(data)

        try:
            analysis = analyze_image(
                decoded, config.pipeline, config.adapters, str(image_path)
            )
        except ValidationError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except AllAdaptersFailed as exc:
            raise HTTPException(status_code=502, detail=str(exc))

        record = make_scan_record(
            user_id,
            when,
            decoded.source_id,
            analysis.metrics,
            analysis.pixel.report.summary(),
            idempotency_key=idempotency_key,
        )
        try:
            store.append_scan(user_id, record)
        except DuplicateScan as exc:
            return _replay_response(store.get_scan(exc.scan_id))

        stored = store.get_scan(record.scan_id)
        new_alerts = [
            a.to_dict()
            for a in store.alerts(user_id, config.change_policy)
            if a.at == record.captured_at
        ]
        return {
            "scan": stored.to_dict(),
            "severities": analysis.severities,
            "alerts": new_alerts,
            "replay": False,
        }

    @app.get("/scans/{scan_id}")
    def get_scan(scan_id: str, user_id: str = Depends(require_user)):
        record = owned_scan(scan_id, user_id)
        return {
            "scan": record.to_dict(),
            "severities": severity_map(record.flat_metrics()),
        }

    @app.post("/scans/{scan_id}/notes")
    def add_note(scan_id: str, body: NoteBody, user_id: str = Depends(require_user)):
        owned_scan(scan_id, user_id)
        try:
            note = store.add_note(scan_id, body.text)
        except BadParams as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return note.to_dict()

    @app.get("/scans/{scan_id}/interpretation")
    def get_interpretation(scan_id: str, locale: str = "en",
                           user_id: str = Depends(require_user)):
        record = owned_scan(scan_id, user_id)
        result = interpret_with_fallback(
            config.interpretation,
            record.flat_metrics(),
            locale=locale,
            transport=interpretation_transport,
        )
        return {
            "text": result.text,
            "source": result.source,
            "disclaimer_included": result.disclaimer_included,
        }

    def _same_user(path_user: str, token_user: str):
        try:
            store.get_user(path_user)
        except UnknownUser:
            raise HTTPException(status_code=404, detail="unknown user") from None
        if path_user != token_user:
            # cross-user reads look identical to unknown users
            raise HTTPException(status_code=404, detail="unknown user")

    @app.get("/users/{path_user}/history")
    def history(path_user: str, from_ts: str | None = None, to_ts: str | None = None,
                user_id: str = Depends(require_user)):
        _same_user(path_user, user_id)
        try:
            records = store.get_history(path_user, from_ts, to_ts)
        except BadParams as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"scans": [r.to_dict() for r in records]}

    @app.get("/users/{path_user}/trends")
    def trends(path_user: str, metric: str, user_id: str = Depends(require_user)):
        _same_user(path_user, user_id)
        if metric not in METRIC_NAMES:
            raise HTTPException(status_code=400, detail=f"unknown metric {metric!r}")
        series = store.series(path_user, metric)
        return {
            "metric": metric,
            "points": [
                {"at": at.isoformat(), "value": value} for at, value in series.points
            ],
        }

    @app.get("/users/{path_user}/alerts")
    def alerts(path_user: str, from_ts: str | None = None, to_ts: str | None = None,
               user_id: str = Depends(require_user)):
        _same_user(path_user, user_id)
        found = store.alerts(path_user, config.change_policy, from_ts, to_ts)
        return {"alerts": [a.to_dict() for a in found]}

    @app.get("/users/{path_user}/calendar")
    def calendar(path_user: str, year: int, month: int, utc_offset_minutes: int = 0,
                 user_id: str = Depends(require_user)):
        _same_user(path_user, user_id)
        try:
            view = store.calendar_view(
                path_user, year, month, utc_offset_minutes, config.change_policy
            )
        except BadParams as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {
            "year": year,
            "month": month,
            "days": {str(day): cell for day, cell in view.items()},
        }

    _REPORT_TYPES = {
        "json": "application/json",
        "csv": "text/csv; charset=utf-8",
        "markdown": "text/markdown; charset=utf-8",
    }

    @app.get("/users/{path_user}/report")
    def report(path_user: str, from_ts: str, to_ts: str, format: str = "json",
               user_id: str = Depends(require_user)):
        _same_user(path_user, user_id)
        if format not in _REPORT_TYPES:
            raise HTTPException(status_code=400, detail=f"unknown format {format!r}")
        try:
            body = store.export_report(path_user, from_ts, to_ts, format)
        except BadParams as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return Response(content=body, media_type=_REPORT_TYPES[format])

    @app.exception_handler(UnknownUser)
    def _unknown_user(request, exc):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(RequestValidationError)
    def _invalid_body(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    return app
