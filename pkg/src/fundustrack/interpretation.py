"""Plain-language interpretation of scan metrics.

Builds the structured interpretation prompt, posts it to a configurable
chat-completions-style endpoint, and degrades to a deterministic rule-based
summary when the endpoint is unreachable, errors, or times out. Every result,
from either path, carries the fixed non-professional disclaimer exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import httpx

from .errors import (
    EndpointError,
    EndpointUnreachable,
    InterpretationError,
    InterpretationTimeout,
)
from .grading import METRIC_NAMES, SEVERITY_LEVELS, severity_map, worst_severity

DISCLAIMER = (
    "This interpretation is automatically generated and does not represent "
    "a medical professional. Consult a qualified clinician for diagnosis."
)

_MAX_ATTEMPTS = 2  # one retry; the client never retries more than twice

_CONDITION_NOTES = {
    "retinopathy_grade": "Diabetic retinopathy involves damage to retinal blood vessels from diabetes.",
    "edema_risk": "Macular edema is fluid buildup in the central retina that can blur vision.",
    "glaucoma_score": "Glaucoma is optic-nerve damage often linked to elevated eye pressure.",
    "avg_tortuosity": "Elevated vessel tortuosity (curved vessels) correlates with several age-related conditions.",
    "max_tortuosity": "A sharply curved vessel segment can indicate local vascular change.",
    "drusen_score": "Drusen are deposits under the retina associated with macular degeneration.",
    "pigmentary_abnormalities": "Pigmentary changes in the macula can be an early macular degeneration sign.",
    "late_amd": "Late age-related macular degeneration affects central vision.",
    "geographic_atrophy": "Geographic atrophy is a late, dry form of macular degeneration.",
    "central_geographic_atrophy": "Geographic atrophy involving the fovea affects central vision directly.",
    "amd_grade": "The macular degeneration grade summarizes drusen and pigment findings.",
}

_ACTIONS = {
    "none": "Continue routine monitoring and regular photo uploads.",
    "low": "Continue regular photo uploads and watch the trend views for changes.",
    "moderate": "Consider scheduling a routine eye examination to review these findings.",
    "high": "Promptly consult an eye-care professional about the highlighted findings.",
}


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str
    credential: str | None = None
    timeout: float = 10.0


@dataclass(frozen=True)
class InterpretationRequest:
    metrics: dict  # canonical flattened metric vector
    locale: str
    prompt_text: str


@dataclass(frozen=True)
class InterpretationResult:
    text: str
    source: str  # "remote" or "fallback"
    disclaimer_included: bool = True


def ensure_disclaimer(text: str) -> str:
    return text if DISCLAIMER in text else text.rstrip() + "\n\n" + DISCLAIMER


def _metric_lines(flat: dict) -> list:
    severities = severity_map(flat)
    lines = []
    for name in METRIC_NAMES:
        value = flat.get(name)
        shown = "unavailable" if value is None else f"{value:g}" if isinstance(value, float) else str(value)
        lines.append(f"- {name}: {shown} ({severities[name]})")
    return lines


def build_prompt(flat_metrics: dict, locale: str = "en") -> str:
    """Deterministic three-part interpretation prompt over all scan metrics."""
    lines = [
        "You are given metrics extracted from a retinal fundus photograph.",
        f"Respond in locale '{locale}'. Produce exactly three parts, in order:",
        "1. A bullet-point interpretation of each metric.",
        "2. A brief summary of the pertinent medical conditions.",
        "3. Suggested courses of action.",
        "Do not present yourself as a medical professional.",
        "",
        "Metrics (name: value (severity)):",
    ]
    lines.extend(_metric_lines(flat_metrics))
    return "\n".join(lines)


def make_request(flat_metrics: dict, locale: str = "en") -> InterpretationRequest:
    return InterpretationRequest(
        metrics=dict(flat_metrics),
        locale=locale,
        prompt_text=build_prompt(flat_metrics, locale),
    )


def request_interpretation(
    endpoint: EndpointConfig,
    request: InterpretationRequest,
    timeout: float | None = None,
    transport: httpx.BaseTransport | None = None,
) -> InterpretationResult:
    """POST the prompt to a chat-completions endpoint; return the first
    completion with the disclaimer appended when the response lacks it.

    Raises EndpointUnreachable, EndpointError, or InterpretationTimeout; all
    three signal the caller to use :func:`fallback_interpretation`.
    """
    timeout = endpoint.timeout if timeout is None else timeout
    body = {
        "model": endpoint.model,
        "messages": [{"role": "user", "content": request.prompt_text}],
    }
    headers = {}
    if endpoint.credential:
        headers["Authorization"] = f"Bearer {endpoint.credential}"

    last_error: InterpretationError | None = None
    for _ in range(_MAX_ATTEMPTS):
        try:
            with httpx.Client(transport=transport, timeout=timeout) as client:
                response = client.post(endpoint.url, json=body, headers=headers)
        except httpx.TimeoutException as exc:
            last_error = InterpretationTimeout(str(exc))
            continue
        except httpx.TransportError as exc:
            last_error = EndpointUnreachable(str(exc))
            continue
        if response.status_code // 100 != 2:
            raise EndpointError(response.status_code, response.text[:500])
        try:
            text = response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise EndpointError(response.status_code, f"malformed completion: {exc}")
        return InterpretationResult(text=ensure_disclaimer(str(text)), source="remote")
    raise last_error


def fallback_interpretation(flat_metrics: dict, locale: str = "en") -> InterpretationResult:
    """Deterministic rule-based summary used when the endpoint is down."""
    severities = severity_map(flat_metrics)
    parts = ["Metric interpretation:"]
    parts.extend(_metric_lines(flat_metrics))

    parts.append("")
    parts.append("Pertinent conditions:")
    notable = [
        name for name in METRIC_NAMES
        if SEVERITY_LEVELS.index(severities[name]) >= SEVERITY_LEVELS.index("moderate")
    ]
    if notable:
        for name in notable:
            parts.append(f"- {_CONDITION_NOTES[name]}")
    else:
        parts.append("- No metric reached a moderate or high severity level.")

    parts.append("")
    parts.append("Suggested actions:")
    parts.append(f"- {_ACTIONS[worst_severity(severities.values())]}")
    return InterpretationResult(
        text=ensure_disclaimer("\n".join(parts)), source="fallback"
    )


def interpret_with_fallback(
    endpoint: EndpointConfig | None,
    flat_metrics: dict,
    locale: str = "en",
    transport: httpx.BaseTransport | None = None,
) -> InterpretationResult:
    """Remote interpretation when configured and healthy, fallback otherwise."""
    request = make_request(flat_metrics, locale)
    if endpoint is not None:
        try:
            return request_interpretation(endpoint, request, transport=transport)
        except InterpretationError:
            pass
    return fallback_interpretation(flat_metrics, locale)
