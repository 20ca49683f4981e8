"""Full-reference metrics (PSNR, SSIM) and the no-reference IQA registry."""

import math

import numpy as np

from .errors import DimensionError, MetricError

LUMA = np.array([0.299, 0.587, 0.114])

# builtin_iqa weights: exposure, RMS contrast, gradient entropy
IQA_WEIGHTS = (4.0, 1.0, 0.25)
IQA_ENTROPY_BINS = 32


def _as_array(img):
    return np.asarray(img, dtype=np.float64)


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are equal."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img, win):
    k = len(win)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ win
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ win


def ssim(a, b, peak=1.0, window=11, sigma=1.5):
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5).

    Statistics are computed over every fully-contained window position and
    the SSIM map is averaged over positions and channels.  Accepts (H,W) or
    (C,H,W) arrays.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise DimensionError(f"ssim: image {a.shape[-2:]} smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def luminance(img):
    img = _as_array(img)
    if img.ndim == 2:
        return img
    if img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=(0, 0))
    return img.mean(axis=0)


def gradient_entropy(lum, bins=IQA_ENTROPY_BINS):
    """Normalised Shannon entropy of the gradient-magnitude histogram, in [0, 1]."""
    gx = np.diff(lum, axis=-1)[:-1, :] if lum.shape[0] > 1 else np.diff(lum, axis=-1)
    gy = np.diff(lum, axis=-2)[:, :-1] if lum.shape[1] > 1 else np.diff(lum, axis=-2)
    if gx.size == 0 or gy.size == 0:
        return 0.0
    mag = np.clip(np.sqrt(gx * gx + gy * gy), 0.0, 1.0)
    hist, _ = np.histogram(mag, bins=bins, range=(0.0, 1.0))
    p = hist[hist > 0] / mag.size
    return float(-(p * np.log(p)).sum() / math.log(bins))


def builtin_iqa(image):
    """Statistical no-reference quality score; higher is better.

    ``4 * -(mean_luma - 0.5)^2 + 1 * rms_contrast + 0.25 * gradient_entropy``
    """
    lum = luminance(image)
    w_exp, w_con, w_ent = IQA_WEIGHTS
    exposure = -((float(lum.mean()) - 0.5) ** 2)
    contrast = float(lum.std())
    return w_exp * exposure + w_con * contrast + w_ent * gradient_entropy(lum)


def mean_brightness(image):
    return float(_as_array(image).mean())


_REGISTRY = {"builtin": builtin_iqa, "brightness": mean_brightness}


def register_metric(name, fn):
    """Make ``fn(image) -> float`` available to rank-mode inference as ``name``."""
    if not callable(fn):
        raise MetricError(f"metric {name!r} is not callable")
    _REGISTRY[name] = fn


def get_metric(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise MetricError(f"unknown IQA metric {name!r}; registered: {sorted(_REGISTRY)}") from None


def available_metrics():
    return sorted(_REGISTRY)
