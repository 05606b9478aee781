"""Retinal-fundus monitoring: vessel tortuosity metrics from photographs,
pluggable disease-grading adapters, and longitudinal per-user trend tracking.
"""

from .errors import FundustrackError
from .estimators import (
    GreenChannelExtractor,
    IlluminationNormalizer,
    Skeletonizer,
    TortuosityExtractor,
    TortuosityPipeline,
    VesselSegmenter,
)
from .grading import (
    AdapterSpec,
    AmdMetrics,
    GradingMetrics,
    METRIC_NAMES,
    run_adapter,
    severity_level,
    stub_adapter,
    validate_metrics,
)
from .imaging import FundusImage, decode_image, encode_png, encode_ppm
from .interpretation import (
    DISCLAIMER,
    EndpointConfig,
    build_prompt,
    fallback_interpretation,
    request_interpretation,
)
from .pipeline import PipelineConfig, analyze_image, run_pixel_pipeline
from .skeleton import extract_graph, segment_tortuosity, skeletonize, tortuosity_report
from .trends import ChangePolicy, TrendStore, detect_changes, make_scan_record
from .vesselness import VesselnessParams, binarize, cleanup, vesselness

__version__ = "0.1.0"
