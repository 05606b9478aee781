"""Multiscale ridge (vesselness) filtering of grayscale fundus images.

A deterministic classical substitute for a learned vessel-segmentation model:
per-scale Hessian eigenvalue analysis with gamma-normalized Gaussian
derivatives, a tubularity score combining blob discrimination and
structureness, Otsu or fixed thresholding, and small-component cleanup.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .errors import BadParams
from .validation import check_gray_array, check_mask_array, check_same_shape

_TRUNCATE = 4.0  # Gaussian kernels cut at 4 sigma
_BINS = 256

_BOX = np.ones((3, 3), dtype=bool)
_NEIGHBOR_KERNEL = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=np.uint8)


@dataclass(frozen=True)
class VesselnessParams:
    """Filter parameters; defaults follow the conventional tuning for this
    filter family on [0, 255]-scaled retinal images."""

    scales: tuple = (1.0, 2.0, 3.0, 4.0)
    beta: float = 0.5
    c: float = 15.0
    invert: bool = True  # vessels darker than background

    def __post_init__(self):
        if len(self.scales) == 0:
            raise BadParams("scales must be non-empty")
        if any(s < 0.5 for s in self.scales):
            raise BadParams(f"every scale must be >= 0.5, got {self.scales}")
        if not self.beta > 0:
            raise BadParams(f"beta must be > 0, got {self.beta}")
        if not self.c > 0:
            raise BadParams(f"c must be > 0, got {self.c}")


def _gaussian_derivative_kernels(sigma: float):
    """Sampled Gaussian and its first/second derivatives, truncated at
    4 sigma. The smoothing kernel is normalized to unit sum; the derivative
    kernels are corrected to exactly zero DC response, so filter output is
    invariant under adding a constant to the image."""
    radius = int(_TRUNCATE * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    phi = np.exp(-(x**2) / (2.0 * sigma**2))
    phi /= phi.sum()
    d1 = -(x / sigma**2) * phi  # antisymmetric, zero-sum by construction
    d2 = ((x**2 - sigma**2) / sigma**4) * phi
    d2 -= d2.sum() / d2.size
    return phi, d1, d2


def hessian_eigenvalues(gray: np.ndarray, sigma: float):
    """Eigenvalues of the gamma-normalized Gaussian-derivative Hessian.

    Second derivatives are computed at scale ``sigma`` (reflected boundaries,
    kernels truncated at 4 sigma) and multiplied by ``sigma**2`` (gamma = 2).
    Returns ``(lam1, lam2)`` ordered so ``|lam1| <= |lam2|`` at every pixel.
    """
    gray = check_gray_array(gray)
    if sigma < 0.5:
        raise BadParams(f"sigma must be >= 0.5, got {sigma}")
    h, w = gray.shape
    if min(h, w) < 4 * sigma:
        raise BadParams(f"image {w}x{h} too small for sigma {sigma} (needs >= 4*sigma)")

    phi, d1, d2 = _gaussian_derivative_kernels(sigma)

    def _sep(img, ky, kx):
        out = ndimage.correlate1d(img, ky, axis=0, mode="reflect")
        return ndimage.correlate1d(out, kx, axis=1, mode="reflect")

    ixx = _sep(gray, phi, d2) * sigma**2
    iyy = _sep(gray, d2, phi) * sigma**2
    ixy = _sep(gray, d1, d1) * sigma**2

    half_trace = (ixx + iyy) / 2.0
    root = np.sqrt(((ixx - iyy) / 2.0) ** 2 + ixy**2)
    hi = half_trace + root
    lo = half_trace - root
    swap = np.abs(hi) < np.abs(lo)
    lam1 = np.where(swap, hi, lo)
    lam2 = np.where(swap, lo, hi)
    return lam1, lam2


def vesselness(
    gray: np.ndarray,
    params: VesselnessParams | None = None,
    fov: np.ndarray | None = None,
) -> np.ndarray:
    """Per-pixel tubularity in [0, 1], maximum response over the scale set.

    At each scale, eigenvalues of the [0, 255]-scaled image are screened by
    the sign of the dominant eigenvalue (positive for dark vessels), then
    scored ``exp(-R_B^2 / 2 beta^2) * (1 - exp(-S^2 / 2 c^2))`` where
    ``R_B = |lam1| / |lam2|`` and ``S = sqrt(lam1^2 + lam2^2)``. Pixels
    outside ``fov`` are zeroed; a nonzero result is rescaled to peak at 1.
    """
    gray = check_gray_array(gray)
    params = params or VesselnessParams()
    if fov is not None:
        fov = check_mask_array(fov, "fov")
        check_same_shape(gray, fov, "gray and fov")

    best = np.zeros_like(gray)
    two_beta_sq = 2.0 * params.beta**2
    two_c_sq = 2.0 * params.c**2
    for sigma in params.scales:
        lam1, lam2 = hessian_eigenvalues(gray, sigma)
        lam1 = lam1 * 255.0
        lam2 = lam2 * 255.0
        keep = lam2 > 0 if params.invert else lam2 < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            rb_sq = np.where(lam2 != 0, (lam1 / np.where(lam2 != 0, lam2, 1.0)) ** 2, 0.0)
        s_sq = lam1**2 + lam2**2
        score = np.exp(-rb_sq / two_beta_sq) * (1.0 - np.exp(-s_sq / two_c_sq))
        score[~keep] = 0.0
        np.maximum(best, score, out=best)

    if fov is not None:
        best[~fov] = 0.0
    peak = best.max()
    if peak > 0:
        best /= peak
    return best


# ---------------------------------------------------------------------------
# thresholding
# ---------------------------------------------------------------------------

def _value_bins(values: np.ndarray) -> np.ndarray:
    return np.minimum((values * _BINS).astype(np.int64), _BINS - 1)


def otsu_threshold_bin(vmap: np.ndarray, fov: np.ndarray | None = None) -> int | None:
    """Otsu bin index over a 256-bin histogram of in-FOV map values.

    Pixels outside ``fov`` are excluded from the histogram (all pixels count
    when no FOV is supplied). Between-class variance is compared in exact
    integer arithmetic so the argmax is unambiguous; ties resolve to the
    lowest bin. Returns ``None`` when fewer than two occupied bins exist.
    """
    vmap = check_gray_array(vmap, "map")
    if fov is not None:
        values = vmap[check_mask_array(fov, "fov")]
    else:
        values = vmap.reshape(-1)
    if values.size == 0:
        return None
    hist = np.bincount(_value_bins(values), minlength=_BINS)
    if np.count_nonzero(hist) < 2:
        return None

    counts = [int(c) for c in hist]
    total = sum(counts)
    total_sum = sum(i * c for i, c in enumerate(counts))
    best_k, best_num, best_den = None, 0, 1
    w0 = 0
    s0 = 0
    for k in range(_BINS - 1):
        w0 += counts[k]
        s0 += k * counts[k]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        # between-class variance ~ (s0*w1 - s1*w0)^2 / (w0*w1), exact ints
        num = (s0 * w1 - (total_sum - s0) * w0) ** 2
        den = w0 * w1
        if best_k is None or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def binarize(
    vmap: np.ndarray,
    method: str = "otsu",
    threshold: float | None = None,
    fov: np.ndarray | None = None,
) -> np.ndarray:
    """Threshold a vesselness map into a boolean vessel mask.

    ``method="otsu"`` picks the bin maximizing between-class variance over
    positive values (restricted to ``fov`` when given); ``method="fixed"``
    uses ``threshold`` in (0, 1). An all-zero map yields an empty mask.
    """
    vmap = check_gray_array(vmap, "map")
    if fov is not None:
        fov = check_mask_array(fov, "fov")
        check_same_shape(vmap, fov, "map and fov")

    if method == "fixed":
        if threshold is None or not 0.0 < threshold < 1.0:
            raise BadParams(f"fixed threshold must be in (0, 1), got {threshold}")
        mask = vmap > threshold
    elif method == "otsu":
        k = otsu_threshold_bin(vmap, fov)
        if k is None:
            # single occupied bin: nothing separable, empty mask (not an error)
            mask = np.zeros(vmap.shape, dtype=bool)
        else:
            mask = _value_bins(vmap) > k
    else:
        raise BadParams(f"unknown binarize method: {method!r}")

    if fov is not None:
        mask &= fov
    return mask


def brute_force_otsu_bin(vmap: np.ndarray, fov: np.ndarray | None = None) -> int | None:
    """Independent oracle: sweep every bin, exact rational variance."""
    vmap = check_gray_array(vmap, "map")
    if fov is not None:
        values = vmap[check_mask_array(fov, "fov")]
    else:
        values = vmap.reshape(-1)
    if values.size == 0:
        return None
    hist = np.bincount(_value_bins(values), minlength=_BINS)
    if np.count_nonzero(hist) < 2:
        return None
    total = int(hist.sum())
    best_k, best_var = None, Fraction(-1)
    for k in range(_BINS - 1):
        w0 = int(hist[: k + 1].sum())
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        mu0 = Fraction(int((hist[: k + 1] * np.arange(k + 1)).sum()), w0)
        mu1 = Fraction(int((hist[k + 1:] * np.arange(k + 1, _BINS)).sum()), w1)
        var = Fraction(w0, total) * Fraction(w1, total) * (mu0 - mu1) ** 2
        if var > best_var:
            best_k, best_var = k, var
    return best_k


# ---------------------------------------------------------------------------
# mask cleanup
# ---------------------------------------------------------------------------

def cleanup(mask: np.ndarray, min_component_px: int = 30) -> np.ndarray:
    """Drop 8-connected components below ``min_component_px`` and fill
    single-pixel holes (off pixels with >= 7 of 8 neighbors on), iterated to
    a fixed point so the operation is idempotent."""
    mask = check_mask_array(mask)
    if min_component_px < 1:
        raise BadParams(f"min_component_px must be >= 1, got {min_component_px}")

    out = mask.copy()
    if out.any() and min_component_px > 1:
        labels, n = ndimage.label(out, structure=_BOX)
        if n:
            sizes = np.bincount(labels.reshape(-1))
            sizes[0] = min_component_px  # background never removed
            out &= sizes[labels] >= min_component_px

    while True:
        counts = ndimage.convolve(out.astype(np.uint8), _NEIGHBOR_KERNEL,
                                  mode="constant", cval=0)
        holes = ~out & (counts >= 7)
        if not holes.any():
            break
        out |= holes
    return out


def default_min_component_px(image_width: int, base: int = 30, base_width: int = 512) -> int:
    """Component-size floor scaled proportionally to image width."""
    return max(1, round(base * image_width / base_width))
