"""scikit-learn compatible wrappers around the pixel pipeline.

Each transformer is stateless (``fit`` only validates parameters) and
operates on a single image array, matching the scikit-image convention:
grayscale float arrays in [0, 1] in, boolean masks or feature vectors out.
``get_params``/``set_params``/``clone`` behave as sklearn expects, so the
steps compose with ``sklearn.pipeline.Pipeline`` and downstream estimators.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .imaging import FundusImage, detect_fov_mask, normalize_illumination
from .pipeline import PipelineConfig, run_pixel_pipeline
from .skeleton import default_min_arc_px, extract_graph, skeletonize, tortuosity_report
from .validation import check_gray_array, check_mask_array, check_rgb_array
from .vesselness import (
    VesselnessParams,
    binarize,
    cleanup,
    default_min_component_px,
    vesselness,
)

TORTUOSITY_FEATURE_NAMES = ("avg_tortuosity", "max_tortuosity", "segments_used")


class GreenChannelExtractor(BaseEstimator, TransformerMixin):
    """(H, W, 3) uint8 RGB -> (H, W) float green channel in [0, 1]."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return check_rgb_array(X)[:, :, 1].astype(np.float64) / 255.0


class IlluminationNormalizer(BaseEstimator, TransformerMixin):
    """Tile-based clipped histogram equalization of a grayscale image."""

    def __init__(self, tile=32, clip=2.0):
        self.tile = tile
        self.clip = clip

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return normalize_illumination(check_gray_array(X), tile=self.tile, clip=self.clip)


class VesselSegmenter(BaseEstimator, TransformerMixin):
    """Grayscale image -> boolean vessel mask via the multiscale ridge filter.

    The field of view is taken from the input brightness itself
    (``fov_threshold``); pass ``fov_threshold=None`` to treat the whole frame
    as inside.
    """

    def __init__(self, scales=(1.0, 2.0, 3.0, 4.0), beta=0.5, c=15.0, invert=True,
                 method="otsu", threshold=0.5, min_component_px=None,
                 fov_threshold=0.06):
        self.scales = scales
        self.beta = beta
        self.c = c
        self.invert = invert
        self.method = method
        self.threshold = threshold
        self.min_component_px = min_component_px
        self.fov_threshold = fov_threshold

    def _params(self) -> VesselnessParams:
        return VesselnessParams(
            scales=tuple(self.scales), beta=self.beta, c=self.c, invert=self.invert
        )

    def fit(self, X, y=None):
        self._params()
        return self

    def transform(self, X):
        gray = check_gray_array(X)
        fov = None
        if self.fov_threshold is not None:
            fov = gray > self.fov_threshold
        vmap = vesselness(gray, self._params(), fov=fov)
        mask = binarize(vmap, method=self.method, threshold=self.threshold, fov=fov)
        min_px = self.min_component_px
        if min_px is None:
            min_px = default_min_component_px(gray.shape[1])
        return cleanup(mask, min_px)


class Skeletonizer(BaseEstimator, TransformerMixin):
    """Boolean mask -> one-pixel-wide skeleton."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return skeletonize(check_mask_array(X))


class TortuosityExtractor(BaseEstimator, TransformerMixin):
    """Skeleton (or mask) -> feature vector [avg, max, segments_used].

    Absent summaries (no qualifying segment) become NaN so the vector shape
    stays fixed for downstream tabular estimators.
    """

    def __init__(self, min_arc_px=None, assume_skeleton=True):
        self.min_arc_px = min_arc_px
        self.assume_skeleton = assume_skeleton

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        arr = check_mask_array(X)
        if not self.assume_skeleton:
            arr = skeletonize(arr)
        min_arc = self.min_arc_px
        if min_arc is None:
            min_arc = default_min_arc_px(arr.shape[1])
        report = tortuosity_report(extract_graph(arr), min_arc_px=min_arc)
        return np.array(
            [
                np.nan if report.average_tortuosity is None else report.average_tortuosity,
                np.nan if report.max_tortuosity is None else report.max_tortuosity,
                float(report.segments_used),
            ]
        )


class TortuosityPipeline(BaseEstimator, TransformerMixin):
    """One-shot estimator: RGB fundus raster -> tortuosity feature vector.

    ``transform`` accepts an (H, W, 3) uint8 array or a
    :class:`~fundustrack.imaging.FundusImage` and runs the full chain
    (green channel, illumination normalization, FOV detection, vesselness,
    thresholding, cleanup, thinning, graph tortuosity). ``analyze`` exposes
    every intermediate of the same run.
    """

    def __init__(self, tile=32, clip=2.0, fov_threshold=0.06,
                 scales=(1.0, 2.0, 3.0, 4.0), beta=0.5, c=15.0, invert=True,
                 binarize_method="otsu", fixed_threshold=0.5,
                 min_component_px=None, min_arc_px=None):
        self.tile = tile
        self.clip = clip
        self.fov_threshold = fov_threshold
        self.scales = scales
        self.beta = beta
        self.c = c
        self.invert = invert
        self.binarize_method = binarize_method
        self.fixed_threshold = fixed_threshold
        self.min_component_px = min_component_px
        self.min_arc_px = min_arc_px

    def _config(self) -> PipelineConfig:
        return PipelineConfig(
            tile=self.tile,
            clip=self.clip,
            fov_threshold=self.fov_threshold,
            scales=tuple(self.scales),
            beta=self.beta,
            c=self.c,
            invert=self.invert,
            binarize_method=self.binarize_method,
            fixed_threshold=self.fixed_threshold,
            min_component_px=self.min_component_px,
            min_arc_px=self.min_arc_px,
        )

    def fit(self, X, y=None):
        self._config().vessel_params()
        return self

    def analyze(self, X):
        image = X if isinstance(X, FundusImage) else FundusImage.from_array(X)
        return run_pixel_pipeline(image, self._config())

    def transform(self, X):
        report = self.analyze(X).report
        return np.array(
            [
                np.nan if report.average_tortuosity is None else report.average_tortuosity,
                np.nan if report.max_tortuosity is None else report.max_tortuosity,
                float(report.segments_used),
            ]
        )
