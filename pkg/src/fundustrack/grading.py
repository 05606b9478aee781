"""Per-scan disease-metric schema and the external grading-adapter protocol.

Grading models run as external processes: the adapter command is launched
with the image path substituted for ``{image}`` and must print one JSON
document on stdout (exit code 0). Documents are validated against the fixed
metric ranges before anything downstream sees them. A deterministic stub
derived from the image content hash stands in for real models in tests and
demos.
"""

from __future__ import annotations

import base64
import hashlib
import json
import shlex
import subprocess
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import (
    AdapterBadOutput,
    AdapterCrashed,
    AdapterTimeout,
    BadParams,
    MissingField,
    OutOfRange,
    UnknownMetric,
)
from .imaging import FundusImage, png_to_mask

STUB_ADAPTER_ID = "stub"
_STUB_TIMESTAMP = "1970-01-01T00:00:00+00:00"  # fixed so stub output is byte-stable

# canonical per-scan metric vector: 3 tortuosity + 3 core + 6 AMD fields
METRIC_NAMES = (
    "avg_tortuosity",
    "max_tortuosity",
    "segments_used",
    "retinopathy_grade",
    "edema_risk",
    "glaucoma_score",
    "drusen_score",
    "pigmentary_abnormalities",
    "late_amd",
    "geographic_atrophy",
    "central_geographic_atrophy",
    "amd_grade",
)

_CORE_RANGES = {
    "retinopathy_grade": (0, 3),
    "edema_risk": (0, 2),
    "glaucoma_score": (0, 1),
}
_AMD_RANGES = {
    "drusen_score": (0, 2),
    "pigmentary_abnormalities": (0, 1),
    "late_amd": (0, 1),
    "geographic_atrophy": (0, 1),
    "central_geographic_atrophy": (0, 1),
    "amd_grade": (0, 5),
}

SEVERITY_LEVELS = ("none", "low", "moderate", "high")

DEFAULT_TORTUOSITY_THRESHOLDS = (1.10, 1.25, 1.45)  # low / moderate / high

_GRADED_SEVERITIES = {
    "retinopathy_grade": ("none", "low", "moderate", "high"),
    "edema_risk": ("none", "moderate", "high"),
    "glaucoma_score": ("none", "high"),
    "drusen_score": ("none", "low", "moderate"),
    "pigmentary_abnormalities": ("none", "low"),
    "late_amd": ("none", "high"),
    "geographic_atrophy": ("none", "high"),
    "central_geographic_atrophy": ("none", "high"),
    "amd_grade": ("none", "low", "low", "moderate", "high", "high"),
}


@dataclass(frozen=True)
class AmdMetrics:
    drusen_score: int = 0
    pigmentary_abnormalities: int = 0
    late_amd: int = 0
    geographic_atrophy: int = 0
    central_geographic_atrophy: int = 0
    amd_grade: int = 0
    defaulted: bool = False  # true when the adapter omitted the AMD block

    def to_dict(self) -> dict:
        doc = {k: getattr(self, k) for k in _AMD_RANGES}
        doc["defaulted"] = self.defaulted
        return doc


@dataclass(frozen=True)
class GradingMetrics:
    retinopathy_grade: int
    edema_risk: int
    glaucoma_score: int
    amd: AmdMetrics
    produced_by: str
    produced_at: str
    extras: tuple = ()  # unknown adapter fields, preserved as sorted (key, value)

    def to_dict(self) -> dict:
        doc = {
            "retinopathy_grade": self.retinopathy_grade,
            "edema_risk": self.edema_risk,
            "glaucoma_score": self.glaucoma_score,
            "amd": self.amd.to_dict(),
            "produced_by": self.produced_by,
            "produced_at": self.produced_at,
        }
        for key, value in self.extras:
            if key.startswith("amd."):
                doc["amd"][key[4:]] = json.loads(value)
            else:
                doc[key] = json.loads(value)
        return doc


@dataclass(frozen=True)
class AdapterSpec:
    """External grading process: argument vector with an {image} placeholder."""

    id: str
    command: tuple
    timeout: float = 30.0
    expected_kinds: frozenset = frozenset({"grading"})

    def __post_init__(self):
        if not self.id:
            raise BadParams("adapter id must be non-empty")
        if not self.command:
            raise BadParams("adapter command must be non-empty")
        if not 1 <= self.timeout <= 600:
            raise BadParams(f"adapter timeout must be in [1, 600], got {self.timeout}")

    @classmethod
    def from_config(cls, adapter_id: str, command, timeout: float = 30.0,
                    kinds=("grading",)) -> "AdapterSpec":
        if isinstance(command, str):
            command = shlex.split(command)
        return cls(
            id=adapter_id,
            command=tuple(command),
            timeout=float(timeout),
            expected_kinds=frozenset(kinds),
        )


def _require_int(field_name: str, value, lo: int, hi: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise OutOfRange(field_name, value, "expected an integer")
    if not lo <= value <= hi:
        raise OutOfRange(field_name, value, f"expected {lo}..{hi}")
    return value


def validate_metrics(raw: dict, produced_by: str = "unknown") -> GradingMetrics:
    """Validate a raw adapter document into :class:`GradingMetrics`.

    The three core grades are required; the AMD block is optional and
    defaults to all zeros with its ``defaulted`` flag set. Unknown fields are
    preserved verbatim in ``extras``. Central geographic atrophy implies
    geographic atrophy; violations are rejected.
    """
    if not isinstance(raw, dict):
        raise BadParams("metrics document must be a JSON object")

    for name in _CORE_RANGES:
        if name not in raw:
            raise MissingField(name)
    core = {
        name: _require_int(name, raw[name], lo, hi)
        for name, (lo, hi) in _CORE_RANGES.items()
    }

    extras = []
    amd_raw = raw.get("amd")
    if amd_raw is None:
        amd = AmdMetrics(defaulted=True)
    else:
        if not isinstance(amd_raw, dict):
            raise OutOfRange("amd", amd_raw, "expected an object")
        fields = {}
        for name, (lo, hi) in _AMD_RANGES.items():
            if name in amd_raw:
                fields[name] = _require_int(name, amd_raw[name], lo, hi)
        for key, value in amd_raw.items():
            if key not in _AMD_RANGES and key != "defaulted":
                extras.append((f"amd.{key}", json.dumps(value, sort_keys=True)))
        defaulted = bool(amd_raw.get("defaulted", False)) or not fields
        amd = AmdMetrics(defaulted=defaulted, **fields)

    if amd.central_geographic_atrophy == 1 and amd.geographic_atrophy == 0:
        raise OutOfRange(
            "central_geographic_atrophy", 1, "implies geographic_atrophy = 1"
        )

    known = set(_CORE_RANGES) | {"amd", "produced_by", "produced_at", "kind"}
    for key, value in raw.items():
        if key not in known:
            extras.append((key, json.dumps(value, sort_keys=True)))

    return GradingMetrics(
        **core,
        amd=amd,
        produced_by=str(raw.get("produced_by", produced_by)),
        produced_at=str(raw.get("produced_at", _utc_now())),
        extras=tuple(sorted(extras)),
    )


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------

def run_adapter(spec: AdapterSpec, image_path: str) -> dict:
    """Launch the adapter process and return its parsed stdout document."""
    argv = [arg.replace("{image}", str(image_path)) for arg in spec.command]
    try:
        proc = subprocess.run(
            argv,
            capture_output=True,
            timeout=spec.timeout,
        )
    except subprocess.TimeoutExpired as exc:
        raise AdapterTimeout(f"adapter {spec.id} exceeded {spec.timeout}s") from exc
    except OSError as exc:
        raise AdapterCrashed(f"adapter {spec.id} failed to launch: {exc}") from exc
    if proc.returncode != 0:
        detail = proc.stderr.decode("utf-8", "replace").strip()[:500]
        raise AdapterCrashed(
            f"adapter {spec.id} exited {proc.returncode}: {detail}"
        )
    try:
        doc = json.loads(proc.stdout.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise AdapterBadOutput(f"adapter {spec.id} stdout is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise AdapterBadOutput(f"adapter {spec.id} emitted {type(doc).__name__}, not an object")
    return doc


def decode_vessel_mask_response(doc: dict) -> np.ndarray:
    """Decode a kind:"vessel_mask" adapter response into a boolean mask."""
    if doc.get("kind") != "vessel_mask":
        raise AdapterBadOutput('expected a kind:"vessel_mask" document')
    payload = doc.get("mask_png_base64")
    if not isinstance(payload, str):
        raise AdapterBadOutput("vessel_mask document lacks mask_png_base64")
    try:
        return png_to_mask(base64.b64decode(payload, validate=True))
    except Exception as exc:
        raise AdapterBadOutput(f"undecodable mask payload: {exc}") from exc


def stub_adapter(image: FundusImage) -> GradingMetrics:
    """Deterministic grading derived from the image content hash.

    Every field is a hash byte reduced into its legal range, so outputs
    always validate; the implied central-GA constraint holds by
    construction. ``produced_at`` is a fixed epoch timestamp to keep
    repeated runs byte-identical.
    """
    digest = hashlib.sha256(image.source_id.encode("ascii")).digest()
    ga = digest[5] % 2
    doc = {
        "retinopathy_grade": digest[0] % 4,
        "edema_risk": digest[1] % 3,
        "glaucoma_score": digest[2] % 2,
        "amd": {
            "drusen_score": digest[3] % 3,
            "pigmentary_abnormalities": digest[4] % 2,
            "geographic_atrophy": ga,
            "central_geographic_atrophy": digest[6] % 2 if ga else 0,
            "late_amd": digest[7] % 2,
            "amd_grade": digest[8] % 6,
        },
        "produced_by": STUB_ADAPTER_ID,
        "produced_at": _STUB_TIMESTAMP,
    }
    return validate_metrics(doc, produced_by=STUB_ADAPTER_ID)


# ---------------------------------------------------------------------------
# severity levels
# ---------------------------------------------------------------------------

def severity_level(
    metric_name: str,
    value,
    tortuosity_thresholds=DEFAULT_TORTUOSITY_THRESHOLDS,
) -> str:
    """Map a metric value onto none/low/moderate/high."""
    if metric_name in ("avg_tortuosity", "max_tortuosity"):
        low, moderate, high = tortuosity_thresholds
        if value is None or value < low:
            return "none"
        if value < moderate:
            return "low"
        if value < high:
            return "moderate"
        return "high"
    if metric_name == "segments_used":
        return "none"  # a count, not a finding
    table = _GRADED_SEVERITIES.get(metric_name)
    if table is None:
        raise UnknownMetric(metric_name)
    idx = int(value)
    if not 0 <= idx < len(table):
        lo, hi = 0, len(table) - 1
        raise OutOfRange(metric_name, value, f"expected {lo}..{hi}")
    return table[idx]


def worst_severity(levels) -> str:
    """Highest severity in an iterable, "none" when empty."""
    worst = 0
    for level in levels:
        worst = max(worst, SEVERITY_LEVELS.index(level))
    return SEVERITY_LEVELS[worst]


def flatten_metrics(metrics: GradingMetrics, tortuosity_summary: dict) -> dict:
    """The canonical 12-entry metric vector for trends, prompts, and reports."""
    return {
        "avg_tortuosity": tortuosity_summary.get("avg_tortuosity"),
        "max_tortuosity": tortuosity_summary.get("max_tortuosity"),
        "segments_used": tortuosity_summary.get("segments_used", 0),
        "retinopathy_grade": metrics.retinopathy_grade,
        "edema_risk": metrics.edema_risk,
        "glaucoma_score": metrics.glaucoma_score,
        "drusen_score": metrics.amd.drusen_score,
        "pigmentary_abnormalities": metrics.amd.pigmentary_abnormalities,
        "late_amd": metrics.amd.late_amd,
        "geographic_atrophy": metrics.amd.geographic_atrophy,
        "central_geographic_atrophy": metrics.amd.central_geographic_atrophy,
        "amd_grade": metrics.amd.amd_grade,
    }


def severity_map(flat_metrics: dict) -> dict:
    """Severity level for every metric in a flattened metric vector."""
    return {name: severity_level(name, flat_metrics[name]) for name in METRIC_NAMES}
