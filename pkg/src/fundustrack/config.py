"""Service configuration: TOML file plus environment for credentials."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

try:  # 3.11+ stdlib, tomli backport below
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

from .errors import BadParams
from .grading import AdapterSpec, STUB_ADAPTER_ID
from .interpretation import EndpointConfig
from .pipeline import DEFAULT_ADAPTERS, PipelineConfig
from .trends import ChangePolicy

DEFAULT_CREDENTIAL_ENV = "FUNDUSTRACK_INTERPRETATION_KEY"


@dataclass(frozen=True)
class AppConfig:
    port: int = 8000
    workers: int = 4
    store_dir: str = "data"
    token_ttl_seconds: int = 3600
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    adapters: tuple = DEFAULT_ADAPTERS
    change_policy: ChangePolicy = field(default_factory=ChangePolicy)
    interpretation: EndpointConfig | None = None

    def adapter_by_id(self, adapter_id: str) -> AdapterSpec:
        for spec in self.adapters:
            if spec.id == adapter_id:
                return spec
        if adapter_id == STUB_ADAPTER_ID:
            return DEFAULT_ADAPTERS[0]
        raise BadParams(f"no adapter with id {adapter_id!r} configured")


def _pipeline_from(doc: dict) -> PipelineConfig:
    known = {
        "tile", "clip", "fov_threshold", "scales", "beta", "c", "invert",
        "binarize_method", "fixed_threshold", "min_component_px", "min_arc_px",
    }
    unknown = set(doc) - known
    if unknown:
        raise BadParams(f"unknown [pipeline] keys: {sorted(unknown)}")
    if "scales" in doc:
        doc = {**doc, "scales": tuple(float(s) for s in doc["scales"])}
    return PipelineConfig(**doc)


def _adapters_from(doc: dict) -> tuple:
    adapters = []
    for adapter_id, body in doc.items():
        if body.get("builtin") == STUB_ADAPTER_ID or adapter_id == STUB_ADAPTER_ID:
            adapters.append(AdapterSpec(id=STUB_ADAPTER_ID, command=("builtin",)))
            continue
        if "command" not in body:
            raise BadParams(f"adapter {adapter_id!r} needs a command")
        adapters.append(
            AdapterSpec.from_config(
                adapter_id,
                body["command"],
                timeout=body.get("timeout", 30.0),
                kinds=tuple(body.get("kinds", ("grading",))),
            )
        )
    return tuple(adapters)


def _interpretation_from(doc: dict, env=os.environ) -> EndpointConfig:
    if "url" not in doc or "model" not in doc:
        raise BadParams("[interpretation] needs url and model")
    credential = env.get(doc.get("credential_env", DEFAULT_CREDENTIAL_ENV))
    return EndpointConfig(
        url=doc["url"],
        model=doc["model"],
        credential=credential,
        timeout=float(doc.get("timeout", 10.0)),
    )


def load_config(path: str | Path | None = None, env=os.environ) -> AppConfig:
    """Parse the TOML config file; every section is optional."""
    if path is None:
        return AppConfig()
    raw = Path(path).read_bytes()
    try:
        doc = _toml.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, _toml.TOMLDecodeError) as exc:
        raise BadParams(f"config parse error: {exc}") from exc

    service = doc.get("service", {})
    changes = doc.get("changes", {})
    thresholds = changes.get("thresholds")
    policy = ChangePolicy(
        thresholds=dict(thresholds) if thresholds else None,
        baseline_window=int(changes.get("baseline_window", 3)),
    )
    return AppConfig(
        port=int(service.get("port", 8000)),
        workers=int(service.get("workers", 4)),
        store_dir=str(service.get("store_dir", "data")),
        token_ttl_seconds=int(service.get("token_ttl_seconds", 3600)),
        pipeline=_pipeline_from(doc.get("pipeline", {})),
        adapters=_adapters_from(doc["adapters"]) if "adapters" in doc else DEFAULT_ADAPTERS,
        change_policy=policy,
        interpretation=(
            _interpretation_from(doc["interpretation"], env)
            if "interpretation" in doc
            else None
        ),
    )
