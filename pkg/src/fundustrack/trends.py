"""Per-user scan persistence, trend queries, change detection, and reports.

Persistence is an append-only JSON-lines log per record family (users, scans,
notes), each file starting with a ``{"schema": 1}`` header line. Appends are
flushed and fsynced before returning, and the in-memory index is rebuilt from
the logs on startup, so a crash immediately after an acknowledged append
loses nothing. A single writer lock serializes appends; queries read the
in-memory index.
"""

from __future__ import annotations

import calendar
import csv
import io
import json
import os
import threading
import uuid
from dataclasses import dataclass, replace
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

from .errors import BadParams, DuplicateScan, StoreError, UnknownUser
from .grading import (
    METRIC_NAMES,
    GradingMetrics,
    flatten_metrics,
    severity_map,
    validate_metrics,
    worst_severity,
)
from .interpretation import DISCLAIMER

SCHEMA_VERSION = 1

MAX_NOTE_CHARS = 4096

# absolute shift considered an abnormal change, per metric
DEFAULT_CHANGE_THRESHOLDS = {
    "avg_tortuosity": 0.15,
    "max_tortuosity": 0.15,
    "retinopathy_grade": 1.0,
    "edema_risk": 1.0,
    "glaucoma_score": 1.0,
    "drusen_score": 1.0,
    "pigmentary_abnormalities": 1.0,
    "late_amd": 1.0,
    "geographic_atrophy": 1.0,
    "central_geographic_atrophy": 1.0,
    "amd_grade": 1.0,
}


def parse_timestamp(value) -> datetime:
    if isinstance(value, datetime):
        ts = value
    else:
        try:
            ts = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
        except ValueError as exc:
            raise BadParams(f"bad timestamp: {value!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat()


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    display_name: str
    created_at: datetime

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "display_name": self.display_name,
            "created_at": format_timestamp(self.created_at),
        }


@dataclass(frozen=True)
class NoteEntry:
    text: str
    created_at: datetime

    def to_dict(self) -> dict:
        return {"text": self.text, "created_at": format_timestamp(self.created_at)}


@dataclass(frozen=True)
class ScanRecord:
    scan_id: str
    user_id: str
    captured_at: datetime
    image_ref: str
    metrics: GradingMetrics
    tortuosity: dict
    notes: tuple = ()
    idempotency_key: str | None = None

    def flat_metrics(self) -> dict:
        return flatten_metrics(self.metrics, self.tortuosity)

    def to_dict(self) -> dict:
        return {
            "scan_id": self.scan_id,
            "user_id": self.user_id,
            "captured_at": format_timestamp(self.captured_at),
            "image_ref": self.image_ref,
            "metrics": self.metrics.to_dict(),
            "tortuosity": dict(self.tortuosity),
            "notes": [n.to_dict() for n in self.notes],
            "idempotency_key": self.idempotency_key,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScanRecord":
        return cls(
            scan_id=doc["scan_id"],
            user_id=doc["user_id"],
            captured_at=parse_timestamp(doc["captured_at"]),
            image_ref=doc["image_ref"],
            metrics=validate_metrics(doc["metrics"]),
            tortuosity=dict(doc["tortuosity"]),
            notes=tuple(
                NoteEntry(n["text"], parse_timestamp(n["created_at"]))
                for n in doc.get("notes", ())
            ),
            idempotency_key=doc.get("idempotency_key"),
        )


@dataclass(frozen=True)
class TrendSeries:
    metric_name: str
    points: tuple  # time-ordered (datetime, float) pairs, strictly increasing

    def __post_init__(self):
        for (a, _), (b, _) in zip(self.points, self.points[1:]):
            if not a < b:
                raise BadParams("series timestamps must be strictly increasing")


@dataclass(frozen=True)
class TrendAlert:
    metric_name: str
    at: datetime
    baseline: float
    observed: float
    delta: float
    direction: str  # "up" or "down"

    def to_dict(self) -> dict:
        return {
            "metric_name": self.metric_name,
            "at": format_timestamp(self.at),
            "baseline": self.baseline,
            "observed": self.observed,
            "delta": self.delta,
            "direction": self.direction,
        }


@dataclass(frozen=True)
class ChangePolicy:
    thresholds: dict = None
    baseline_window: int = 3

    def __post_init__(self):
        if self.thresholds is None:
            object.__setattr__(self, "thresholds", dict(DEFAULT_CHANGE_THRESHOLDS))
        if any(t <= 0 for t in self.thresholds.values()):
            raise BadParams("change thresholds must be > 0")
        if self.baseline_window < 1:
            raise BadParams("baseline window must be >= 1")


def detect_changes(series: TrendSeries, policy: ChangePolicy) -> list:
    """Alerts for points deviating from the rolling-mean baseline.

    For each point with at least one predecessor, the baseline is the mean of
    up to ``baseline_window`` immediately preceding values; an alert fires
    iff ``|observed - baseline| >= threshold`` for the series' metric.
    """
    threshold = policy.thresholds.get(series.metric_name)
    if threshold is None:
        return []
    alerts = []
    values = [v for _, v in series.points]
    for i in range(1, len(series.points)):
        window = values[max(0, i - policy.baseline_window): i]
        baseline = sum(window) / len(window)
        observed = values[i]
        delta = observed - baseline
        if abs(delta) >= threshold:
            alerts.append(
                TrendAlert(
                    metric_name=series.metric_name,
                    at=series.points[i][0],
                    baseline=baseline,
                    observed=observed,
                    delta=delta,
                    direction="up" if delta > 0 else "down",
                )
            )
    return alerts


# ---------------------------------------------------------------------------
# store
# ---------------------------------------------------------------------------

class TrendStore:
    """Append-only JSON-lines store with an in-memory index."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._users: dict[str, UserProfile] = {}
        self._scans: dict[str, ScanRecord] = {}
        self._by_user: dict[str, list] = {}
        self._notes: dict[str, list] = {}
        self._dedupe: dict = {}
        self._load()

    def _path(self, family: str) -> Path:
        return self.root / f"{family}.jsonl"

    def _load(self) -> None:
        for family, apply in (
            ("users", self._index_user),
            ("scans", self._index_scan),
            ("notes", self._index_note),
        ):
            path = self._path(family)
            if not path.exists():
                with open(path, "w", encoding="utf-8") as f:
                    f.write(json.dumps({"schema": SCHEMA_VERSION}) + "\n")
                    f.flush()
                    os.fsync(f.fileno())
                continue
            with open(path, "r", encoding="utf-8") as f:
                lines = f.read().split("\n")
            if not lines or not lines[0]:
                raise StoreError(f"{path} is missing its schema header")
            header = json.loads(lines[0])
            if header.get("schema") != SCHEMA_VERSION:
                raise StoreError(f"{path} has unsupported schema {header}")
            body = [ln for ln in lines[1:] if ln]
            for i, line in enumerate(body):
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError:
                    if i == len(body) - 1:
                        break  # torn final line from a crash mid-write
                    raise StoreError(f"{path} line {i + 2} is corrupt")
                apply(doc)

    def _index_user(self, doc: dict) -> None:
        profile = UserProfile(
            user_id=doc["user_id"],
            display_name=doc["display_name"],
            created_at=parse_timestamp(doc["created_at"]),
        )
        self._users[profile.user_id] = profile
        self._by_user.setdefault(profile.user_id, [])

    def _index_scan(self, doc: dict) -> None:
        record = ScanRecord.from_dict(doc)
        self._scans[record.scan_id] = record
        self._by_user.setdefault(record.user_id, []).append(record.scan_id)
        self._dedupe[(record.user_id, record.image_ref, record.captured_at)] = record.scan_id
        if record.idempotency_key:
            self._dedupe[(record.user_id, "key", record.idempotency_key)] = record.scan_id

    def _index_note(self, doc: dict) -> None:
        note = NoteEntry(doc["text"], parse_timestamp(doc["created_at"]))
        self._notes.setdefault(doc["scan_id"], []).append(note)

    def _append_line(self, family: str, doc: dict) -> None:
        with open(self._path(family), "a", encoding="utf-8") as f:
            f.write(json.dumps(doc, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())

    # -- users --

    def create_user(self, display_name: str, user_id: str | None = None) -> UserProfile:
        if not display_name:
            raise BadParams("display_name must be non-empty")
        with self._lock:
            uid = user_id or uuid.uuid4().hex[:12]
            if uid in self._users:
                raise StoreError(f"user id already exists: {uid}")
            profile = UserProfile(
                user_id=uid,
                display_name=display_name,
                created_at=datetime.now(timezone.utc),
            )
            self._append_line("users", profile.to_dict())
            self._index_user(profile.to_dict())
            return profile

    def get_user(self, user_id: str) -> UserProfile:
        with self._lock:
            profile = self._users.get(user_id)
        if profile is None:
            raise UnknownUser(user_id)
        return profile

    # -- scans --

    def append_scan(self, user_id: str, record: ScanRecord) -> str:
        with self._lock:
            if user_id not in self._users:
                raise UnknownUser(user_id)
            if record.user_id != user_id:
                raise BadParams("record.user_id does not match target user")
            if record.captured_at > datetime.now(timezone.utc) + timedelta(seconds=1):
                raise BadParams("captured_at lies in the future")
            if record.scan_id in self._scans:
                raise DuplicateScan(record.scan_id)
            existing = self._dedupe.get((user_id, record.image_ref, record.captured_at))
            if existing is not None:
                raise DuplicateScan(existing)
            if record.idempotency_key:
                existing = self._dedupe.get((user_id, "key", record.idempotency_key))
                if existing is not None:
                    raise DuplicateScan(existing)
            doc = record.to_dict()
            doc["notes"] = []  # notes are their own log family
            self._append_line("scans", doc)
            self._index_scan(doc)
            return record.scan_id

    def find_replay(self, user_id: str, image_ref: str = None, captured_at=None,
                    idempotency_key: str = None) -> ScanRecord | None:
        """Previously stored scan matching either idempotency key, if any."""
        with self._lock:
            scan_id = None
            if idempotency_key:
                scan_id = self._dedupe.get((user_id, "key", idempotency_key))
            if scan_id is None and image_ref is not None and captured_at is not None:
                scan_id = self._dedupe.get((user_id, image_ref, parse_timestamp(captured_at)))
            return self._with_notes(self._scans[scan_id]) if scan_id else None

    def get_scan(self, scan_id: str) -> ScanRecord:
        with self._lock:
            record = self._scans.get(scan_id)
            if record is None:
                raise StoreError(f"unknown scan: {scan_id}")
            return self._with_notes(record)

    def _with_notes(self, record: ScanRecord) -> ScanRecord:
        notes = tuple(self._notes.get(record.scan_id, ()))
        return replace(record, notes=notes)

    def add_note(self, scan_id: str, text: str) -> NoteEntry:
        if not text:
            raise BadParams("note must be non-empty")
        if len(text) > MAX_NOTE_CHARS:
            raise BadParams(f"note exceeds {MAX_NOTE_CHARS} characters")
        with self._lock:
            if scan_id not in self._scans:
                raise StoreError(f"unknown scan: {scan_id}")
            note = NoteEntry(text=text, created_at=datetime.now(timezone.utc))
            self._append_line("notes", {"scan_id": scan_id, **note.to_dict()})
            self._notes.setdefault(scan_id, []).append(note)
            return note

    def get_history(self, user_id: str, from_ts=None, to_ts=None) -> list:
        lo = parse_timestamp(from_ts) if from_ts is not None else None
        hi = parse_timestamp(to_ts) if to_ts is not None else None
        if lo is not None and hi is not None and lo > hi:
            raise BadParams("history range start exceeds end")
        with self._lock:
            if user_id not in self._users:
                raise UnknownUser(user_id)
            records = [self._with_notes(self._scans[s]) for s in self._by_user[user_id]]
        records = [
            r for r in records
            if (lo is None or r.captured_at >= lo) and (hi is None or r.captured_at <= hi)
        ]
        records.sort(key=lambda r: (r.captured_at, r.scan_id))
        return records

    # -- trends --

    def series(self, user_id: str, metric_name: str) -> TrendSeries:
        if metric_name not in METRIC_NAMES:
            raise BadParams(f"unknown metric: {metric_name}")
        history = self.get_history(user_id)
        points = []
        for record in history:
            value = record.flat_metrics().get(metric_name)
            if value is None:
                continue
            # equal capture timestamps: the later record (by scan-id
            # tie-break) supersedes the earlier point
            if points and points[-1][0] == record.captured_at:
                points[-1] = (record.captured_at, float(value))
            else:
                points.append((record.captured_at, float(value)))
        return TrendSeries(metric_name=metric_name, points=tuple(points))

    def alerts(self, user_id: str, policy: ChangePolicy | None = None,
               from_ts=None, to_ts=None) -> list:
        policy = policy or ChangePolicy()
        lo = parse_timestamp(from_ts) if from_ts is not None else None
        hi = parse_timestamp(to_ts) if to_ts is not None else None
        out = []
        for metric in METRIC_NAMES:
            if metric not in policy.thresholds:
                continue
            for alert in detect_changes(self.series(user_id, metric), policy):
                if (lo is None or alert.at >= lo) and (hi is None or alert.at <= hi):
                    out.append(alert)
        out.sort(key=lambda a: (a.at, a.metric_name))
        return out

    def calendar_view(self, user_id: str, year: int, month: int,
                      utc_offset_minutes: int = 0,
                      policy: ChangePolicy | None = None) -> dict:
        """Per-day scan count, worst severity, and alert count for a month."""
        if not 1 <= month <= 12:
            raise BadParams(f"month must be 1..12, got {month}")
        if not 1 <= year <= 9999:
            raise BadParams(f"year out of range: {year}")
        offset = timedelta(minutes=utc_offset_minutes)
        days = calendar.monthrange(year, month)[1]
        view = {
            day: {"scans": 0, "worst_severity": "none", "alerts": 0}
            for day in range(1, days + 1)
        }

        def local_date(ts: datetime) -> date:
            return (ts + offset).date()

        for record in self.get_history(user_id):
            d = local_date(record.captured_at)
            if d.year == year and d.month == month:
                cell = view[d.day]
                cell["scans"] += 1
                worst = worst_severity(severity_map(record.flat_metrics()).values())
                cell["worst_severity"] = worst_severity(
                    [cell["worst_severity"], worst]
                )
        for alert in self.alerts(user_id, policy):
            d = local_date(alert.at)
            if d.year == year and d.month == month:
                view[d.day]["alerts"] += 1
        return view

    # -- reports --

    def export_report(self, user_id: str, from_ts, to_ts, format: str = "json") -> bytes:
        profile = self.get_user(user_id)
        records = self.get_history(user_id, from_ts, to_ts)
        alerts = self.alerts(user_id, from_ts=from_ts, to_ts=to_ts)
        if format == "json":
            return self._report_json(profile, records, alerts, from_ts, to_ts)
        if format == "csv":
            return self._report_csv(profile, records, alerts)
        if format == "markdown":
            return self._report_markdown(profile, records, alerts, from_ts, to_ts)
        raise BadParams(f"unknown report format: {format!r}")

    def _report_json(self, profile, records, alerts, from_ts, to_ts) -> bytes:
        doc = {
            "profile": profile.to_dict(),
            "range": {
                "from": format_timestamp(parse_timestamp(from_ts)),
                "to": format_timestamp(parse_timestamp(to_ts)),
            },
            "scans": [r.to_dict() for r in records],
            "alerts": [a.to_dict() for a in alerts],
            "disclaimer": DISCLAIMER,
        }
        return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8")

    def _report_csv(self, profile, records, alerts) -> bytes:
        """RFC-4180 rows, one per (scan, metric); alert deltas are joined onto
        their (scan, metric) row so the row count stays scans x metrics."""
        alert_index = {}
        for a in alerts:
            alert_index[(a.at, a.metric_name)] = a
        buf = io.StringIO(newline="")
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(
            ["user_id", "display_name", "scan_id", "captured_at", "metric",
             "value", "severity", "alert_delta", "disclaimer"]
        )
        for record in records:
            flat = record.flat_metrics()
            severities = severity_map(flat)
            for metric in METRIC_NAMES:
                value = flat[metric]
                alert = alert_index.get((record.captured_at, metric))
                writer.writerow([
                    profile.user_id,
                    profile.display_name,
                    record.scan_id,
                    format_timestamp(record.captured_at),
                    metric,
                    "" if value is None else value,
                    severities[metric],
                    "" if alert is None else alert.delta,
                    DISCLAIMER,
                ])
        return buf.getvalue().encode("utf-8")

    def _report_markdown(self, profile, records, alerts, from_ts, to_ts) -> bytes:
        lines = [
            f"# Scan report: {profile.display_name}",
            "",
            "## Profile",
            "",
            f"- user id: {profile.user_id}",
            f"- created: {format_timestamp(profile.created_at)}",
            f"- range: {format_timestamp(parse_timestamp(from_ts))}"
            f" to {format_timestamp(parse_timestamp(to_ts))}",
            "",
            "## Scans",
            "",
        ]
        if not records:
            lines.append("No scans in range.")
            lines.append("")
        for record in records:
            flat = record.flat_metrics()
            severities = severity_map(flat)
            lines.append(
                f"### {format_timestamp(record.captured_at)} (scan {record.scan_id})"
            )
            lines.append("")
            lines.append("| metric | value | severity |")
            lines.append("| --- | --- | --- |")
            for metric in METRIC_NAMES:
                value = flat[metric]
                shown = "-" if value is None else value
                lines.append(f"| {metric} | {shown} | {severities[metric]} |")
            for note in record.notes:
                lines.append(f"- note ({format_timestamp(note.created_at)}): {note.text}")
            lines.append("")
        lines.append("## Alerts")
        lines.append("")
        if not alerts:
            lines.append("No abnormal shifts detected in range.")
        for a in alerts:
            lines.append(
                f"- {format_timestamp(a.at)}: {a.metric_name} moved {a.direction}"
                f" to {a.observed:g} (baseline {a.baseline:g}, delta {a.delta:+g})"
            )
        lines.append("")
        lines.append("## Disclaimer")
        lines.append("")
        lines.append(DISCLAIMER)
        lines.append("")
        return "\n".join(lines).encode("utf-8")


def make_scan_record(
    user_id: str,
    captured_at,
    image_ref: str,
    metrics: GradingMetrics,
    tortuosity_summary: dict,
    idempotency_key: str | None = None,
    scan_id: str | None = None,
) -> ScanRecord:
    return ScanRecord(
        scan_id=scan_id or uuid.uuid4().hex[:16],
        user_id=user_id,
        captured_at=parse_timestamp(captured_at),
        image_ref=image_ref,
        metrics=metrics,
        tortuosity=dict(tortuosity_summary),
        idempotency_key=idempotency_key,
    )
