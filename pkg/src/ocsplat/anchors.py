"""Self-supervised noise labels from a histogram of corrected assessments.

Two anchors are read off the histogram: the Otsu-style split ``T_o`` and the
centroid ``T_b`` of the class below it.  Blending them gives a clean
threshold ``T_b2o`` and a noise threshold ``T_o2b``; values between the two
are left unsupervised.  When the split is weak (small maximal inter-class
variance) fixed percentile thresholds are used instead.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

BINS = 1000
EPS = 1e-8
FALLBACK_K = 2000.0
NORM_PERCENTILE = 99.5
MIN_SAMPLES = 1000


class EmptyInputError(ValueError):
    pass


class EmptyBackgroundClass(ValueError):
    pass


class InvalidLambda(ValueError):
    pass


@dataclass
class AssessmentHistogram:
    bins: np.ndarray
    total: int
    normalization_scale: float

    @property
    def n_bins(self) -> int:
        return len(self.bins)


@dataclass
class ThresholdAnchors:
    t_star: int
    sigma2_max: float
    T_o: float
    T_b: float
    T_b2o: float
    T_o2b: float
    mode: str  # "dynamic" | "fixed_fallback"
    normalization_scale: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdAnchors":
        return cls(int(d["t_star"]), *(float(d[k]) for k in ("sigma2_max", "T_o", "T_b", "T_b2o", "T_o2b")),
                   str(d["mode"]), float(d["normalization_scale"]))


def normalization_scale(values, percentile: float = NORM_PERCENTILE) -> float:
    s = float(np.percentile(values, percentile))
    return s if s > 0 else 1.0


def bin_index(values, scale: float, n_bins: int = BINS) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64) / scale, 0.0, 1.0)
    return np.clip(np.floor(v * (n_bins - 1) + 0.5), 0, n_bins - 1).astype(np.int64)


def build_histogram(values, n_bins: int = BINS, min_samples: int = MIN_SAMPLES) -> AssessmentHistogram:
    values = np.ravel(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise EmptyInputError("no assessment values to histogram")
    if values.size < min_samples:
        raise EmptyInputError(f"need at least {min_samples} samples, got {values.size}")
    scale = normalization_scale(values)
    counts = np.bincount(bin_index(values, scale, n_bins), minlength=n_bins)
    return AssessmentHistogram(counts, int(values.size), scale)


def sigma2_curve(bins) -> np.ndarray:
    """Inter-class variance for every split index, in the squared-numerator form."""
    h = np.asarray(bins, dtype=np.float64)
    p = h / h.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(np.arange(len(h)) * p)
    mu_global = mu[-1]
    return (omega * (mu_global - mu)) ** 2 / (omega * (1.0 - omega) + EPS)


def otsu(hist: AssessmentHistogram) -> tuple[int, float, float]:
    """Returns ``(t_star, sigma2_max, T_o)``; ties go to the lowest index."""
    if hist.total <= 0:
        raise EmptyInputError("histogram is empty")
    s2 = sigma2_curve(hist.bins)
    t = int(np.argmax(s2))
    return t, float(s2[t]), t / hist.n_bins


def background_centroid(hist: AssessmentHistogram, t_star: int) -> float:
    p = np.asarray(hist.bins[: t_star + 1], dtype=np.float64) / hist.total
    mass = p.sum()
    if mass <= 0:
        raise EmptyBackgroundClass(f"no mass at or below bin {t_star}")
    c0 = float(np.sum(np.arange(t_star + 1) * p) / mass)
    return c0 / hist.n_bins


def combine_anchors(T_b: float, T_o: float, lambda4: float = 0.25, lambda5: float = 0.25) -> tuple[float, float]:
    if not (0.0 <= lambda4 <= 1.0 and 0.0 <= lambda5 <= 1.0 and lambda4 <= 1.0 - lambda5):
        raise InvalidLambda(f"need 0 <= lambda4, lambda5 <= 1 and lambda4 <= 1 - lambda5; got {lambda4}, {lambda5}")
    return (1.0 - lambda4) * T_b + lambda4 * T_o, lambda5 * T_b + (1.0 - lambda5) * T_o


def make_labels(normalized_values, T_b2o: float, T_o2b: float) -> tuple[np.ndarray, np.ndarray]:
    """``(M_self, M_u)``: clean labels and the supervised region."""
    v = np.asarray(normalized_values)
    clean = v < T_b2o
    return clean, clean | (v > T_o2b)


def select_mode(sigma2_max: float, k: float = FALLBACK_K) -> str:
    return "dynamic" if sigma2_max > k else "fixed_fallback"


def fixed_thresholds(values, bg_percentile: float = 50.0, fg_percentile: float = 90.0) -> tuple[float, float]:
    return float(np.percentile(values, bg_percentile)), float(np.percentile(values, fg_percentile))


def fixed_labels(values, bg_percentile: float = 50.0, fg_percentile: float = 90.0):
    """Clean below the 50th percentile; noise above the 90th."""
    lo, hi = fixed_thresholds(values, bg_percentile, fg_percentile)
    return make_labels(values, lo, hi)


def compute_anchors(
    values,
    lambda4: float = 0.25,
    lambda5: float = 0.25,
    n_bins: int = BINS,
    fallback_k: float = FALLBACK_K,
    bg_percentile: float = 50.0,
    fg_percentile: float = 90.0,
    force_fixed: bool = False,
) -> ThresholdAnchors:
    """Histogram, anchors, and mode for a pool of corrected assessment values.

    All thresholds are expressed on values divided by the histogram's
    normalization scale, so labels come from ``make_labels(v / scale, ...)``.
    """
    values = np.ravel(np.asarray(values, dtype=np.float64))
    hist = build_histogram(values, n_bins)
    t_star, s2, T_o = otsu(hist)
    mode = "fixed_fallback" if force_fixed else select_mode(s2, fallback_k)
    T_b = float("nan")
    if mode == "dynamic":
        try:
            T_b = background_centroid(hist, t_star)
        except EmptyBackgroundClass:
            mode = "fixed_fallback"
    if mode == "dynamic":
        T_b2o, T_o2b = combine_anchors(T_b, T_o, lambda4, lambda5)
    else:
        lo, hi = fixed_thresholds(values / hist.normalization_scale, bg_percentile, fg_percentile)
        T_b2o, T_o2b = lo, hi
        if not np.isfinite(T_b):
            T_b = 0.0
    return ThresholdAnchors(t_star, s2, T_o, T_b, T_b2o, T_o2b, mode, hist.normalization_scale)


def labels_for(values, anchors: ThresholdAnchors):
    return make_labels(np.asarray(values) / anchors.normalization_scale, anchors.T_b2o, anchors.T_o2b)
