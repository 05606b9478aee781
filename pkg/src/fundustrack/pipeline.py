"""End-to-end single-image analysis: preprocessing, segmentation, thinning,
tortuosity, and grading through configured adapters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AdapterError, ValidationError
from .grading import (
    AdapterSpec,
    GradingMetrics,
    STUB_ADAPTER_ID,
    decode_vessel_mask_response,
    flatten_metrics,
    run_adapter,
    severity_map,
    stub_adapter,
    validate_metrics,
)
from .imaging import (
    DEFAULT_CLIP,
    DEFAULT_FOV_THRESHOLD,
    DEFAULT_TILE,
    FundusImage,
    detect_fov_mask,
    extract_green_channel,
    normalize_illumination,
)
from .skeleton import (
    SkeletonGraph,
    TortuosityReport,
    default_min_arc_px,
    extract_graph,
    skeletonize,
    tortuosity_report,
)
from .vesselness import (
    VesselnessParams,
    binarize,
    cleanup,
    default_min_component_px,
    vesselness,
)


class AllAdaptersFailed(AdapterError):
    """Every configured grading adapter crashed, timed out, or emitted junk."""

    def __init__(self, failures):
        lines = "; ".join(f"{aid}: {msg}" for aid, msg in failures)
        super().__init__(f"all grading adapters failed ({lines})")
        self.failures = failures


@dataclass(frozen=True)
class PipelineConfig:
    tile: int = DEFAULT_TILE
    clip: float = DEFAULT_CLIP
    fov_threshold: float = DEFAULT_FOV_THRESHOLD
    scales: tuple = (1.0, 2.0, 3.0, 4.0)
    beta: float = 0.5
    c: float = 15.0
    invert: bool = True
    binarize_method: str = "otsu"
    fixed_threshold: float = 0.5
    min_component_px: int | None = None  # None: scaled to image width
    min_arc_px: float | None = None

    def vessel_params(self) -> VesselnessParams:
        return VesselnessParams(
            scales=tuple(self.scales), beta=self.beta, c=self.c, invert=self.invert
        )


@dataclass(frozen=True)
class PixelPipelineResult:
    image: FundusImage
    gray: np.ndarray
    normalized: np.ndarray
    fov: np.ndarray
    vessel_map: np.ndarray
    mask: np.ndarray
    skeleton: np.ndarray
    graph: SkeletonGraph
    report: TortuosityReport


def segment_vessels(
    image: FundusImage,
    config: PipelineConfig = PipelineConfig(),
    vessel_mask: np.ndarray | None = None,
):
    """(normalized gray, fov, vesselness map, cleaned mask) for an image.

    ``vessel_mask`` overrides the built-in filter with an externally supplied
    mask (e.g. from a kind:"vessel_mask" adapter); it is still FOV-clipped
    and cleaned.
    """
    gray = extract_green_channel(image)
    normalized = normalize_illumination(gray, tile=config.tile, clip=config.clip)
    fov = detect_fov_mask(image, threshold=config.fov_threshold)
    if vessel_mask is None:
        vmap = vesselness(normalized, config.vessel_params(), fov=fov)
        mask = binarize(
            vmap,
            method=config.binarize_method,
            threshold=config.fixed_threshold,
            fov=fov,
        )
    else:
        vmap = np.zeros_like(normalized)
        mask = vessel_mask & fov
    min_px = config.min_component_px
    if min_px is None:
        min_px = default_min_component_px(image.width)
    mask = cleanup(mask, min_px)
    return gray, normalized, fov, vmap, mask


def run_pixel_pipeline(
    image: FundusImage,
    config: PipelineConfig = PipelineConfig(),
    vessel_mask: np.ndarray | None = None,
) -> PixelPipelineResult:
    gray, normalized, fov, vmap, mask = segment_vessels(image, config, vessel_mask)
    skel = skeletonize(mask)
    graph = extract_graph(skel)
    min_arc = config.min_arc_px
    if min_arc is None:
        min_arc = default_min_arc_px(image.width)
    report = tortuosity_report(graph, min_arc_px=min_arc)
    return PixelPipelineResult(
        image=image,
        gray=gray,
        normalized=normalized,
        fov=fov,
        vessel_map=vmap,
        mask=mask,
        skeleton=skel,
        graph=graph,
        report=report,
    )


def grade_with_adapters(
    adapters,
    image: FundusImage,
    image_path: str | None = None,
) -> GradingMetrics:
    """First successful grading adapter wins, in configuration order.

    Crashes, timeouts, and unparseable output fail over to the next adapter
    (AllAdaptersFailed when none is left); schema violations (OutOfRange,
    MissingField) escalate immediately since retrying other models would
    silently mask a misconfigured adapter.
    """
    failures = []
    for spec in adapters:
        if "grading" not in spec.expected_kinds:
            continue
        if spec.id == STUB_ADAPTER_ID:
            return stub_adapter(image)
        if image_path is None:
            failures.append((spec.id, "no image path for external adapter"))
            continue
        try:
            raw = run_adapter(spec, image_path)
        except AdapterError as exc:
            failures.append((spec.id, str(exc)))
            continue
        return validate_metrics(raw, produced_by=spec.id)
    raise AllAdaptersFailed(failures)


def external_vessel_mask(adapters, image_path: str | None):
    """Mask from the first working vessel_mask adapter, None otherwise."""
    if image_path is None:
        return None
    for spec in adapters:
        if "vessel_mask" not in spec.expected_kinds or spec.id == STUB_ADAPTER_ID:
            continue
        try:
            doc = run_adapter(spec, image_path)
            return decode_vessel_mask_response(doc)
        except AdapterError:
            continue  # built-in filter still produces a mask
    return None


@dataclass(frozen=True)
class ScanAnalysis:
    pixel: PixelPipelineResult
    metrics: GradingMetrics
    flat_metrics: dict
    severities: dict

    def document(self) -> dict:
        """The per-scan metrics document emitted by the CLI and the service."""
        return {
            "image": {
                "source_id": self.pixel.image.source_id,
                "width": self.pixel.image.width,
                "height": self.pixel.image.height,
            },
            "tortuosity": self.pixel.report.summary(),
            "metrics": self.metrics.to_dict(),
            "severities": dict(self.severities),
        }


def analyze_image(
    image: FundusImage,
    config: PipelineConfig = PipelineConfig(),
    adapters=(AdapterSpec(id=STUB_ADAPTER_ID, command=("builtin",)),),
    image_path: str | None = None,
) -> ScanAnalysis:
    """Full scan analysis: pixel pipeline plus adapter grading."""
    vessel_mask = external_vessel_mask(adapters, image_path)
    pixel = run_pixel_pipeline(image, config, vessel_mask=vessel_mask)
    metrics = grade_with_adapters(adapters, image, image_path)
    flat = flatten_metrics(metrics, pixel.report.summary())
    return ScanAnalysis(
        pixel=pixel,
        metrics=metrics,
        flat_metrics=flat,
        severities=severity_map(flat),
    )


DEFAULT_ADAPTERS = (AdapterSpec(id=STUB_ADAPTER_ID, command=("builtin",)),)
