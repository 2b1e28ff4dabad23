"""Per-view noise assessment maps and observation correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HYBRID_WEIGHT = 0.5
OCR_GAIN = 3.0
OCR_OC_CEILING = 0.3
BETA_PERCENTILE = 99.5


@dataclass
class AssessmentMaps:
    residual: np.ndarray
    beta: np.ndarray
    hybrid: np.ndarray
    texture: np.ndarray
    ocr: np.ndarray
    corrected: np.ndarray
    oc_pixels: np.ndarray


def residual_map(rendered, reference) -> np.ndarray:
    """Per-pixel mean absolute color difference."""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {reference.shape}")
    return np.abs(rendered - reference).mean(axis=1)


def normalize_beta(beta, scale: float) -> np.ndarray:
    return np.clip(np.asarray(beta) / scale, 0.0, 1.0)


def beta_scale(beta_maps) -> float:
    """Robust scale for beta: its 99.5th percentile over the given maps."""
    values = np.concatenate([np.ravel(b) for b in beta_maps])
    s = float(np.percentile(values, BETA_PERCENTILE))
    return s if s > 0 else 1.0


def hybrid_map(residual, beta_norm, weight: float = HYBRID_WEIGHT) -> np.ndarray:
    return weight * np.asarray(residual) + (1.0 - weight) * np.asarray(beta_norm)


def texture_map(reference) -> np.ndarray:
    """Central-difference edge strength, normalized to a per-view maximum of 1."""
    img = np.asarray(reference, dtype=np.float64)
    if len(img) < 3:
        raise ValueError("texture needs at least 3 pixels")
    pad = np.concatenate([img[:1], img, img[-1:]])
    resp = (np.abs(pad[2:] - pad[:-2]) / 2.0).mean(axis=1)
    peak = resp.max()
    if peak < 1e-12:
        return np.zeros(len(img))
    return resp / peak


def occ_correct(hybrid, oc_pixels, texture, gain: float = OCR_GAIN, ceiling: float = OCR_OC_CEILING):
    """Down-weight the assessment where textured regions are under-observed.

    Returns ``(ocr, corrected)``.
    """
    o = np.clip(np.asarray(oc_pixels, dtype=np.float64), 0.0, ceiling)
    ocr = np.clip(1.0 - gain * (ceiling - o) * np.asarray(texture), 0.0, 1.0)
    return ocr, np.asarray(hybrid) * ocr


def assess(rendered, reference, beta, beta_norm_scale, oc_pixels, texture=None,
           use_residual=True, use_beta=True, use_occ=True) -> AssessmentMaps:
    """Build all maps for one view.

    The ``use_*`` switches implement the ablations: without the residual or
    without beta the hybrid map is the remaining term alone; without OCC the
    correction ratio is one.
    """
    r = residual_map(rendered, reference)
    b_norm = normalize_beta(beta, beta_norm_scale)
    if use_residual and use_beta:
        h = hybrid_map(r, b_norm)
    elif use_residual:
        h = r.copy()
    elif use_beta:
        h = b_norm.copy()
    else:
        raise ValueError("at least one of residual and beta must be used")
    s = texture_map(reference) if texture is None else np.asarray(texture)
    if use_occ:
        ocr, corrected = occ_correct(h, oc_pixels, s)
    else:
        ocr, corrected = np.ones_like(h), h.copy()
    return AssessmentMaps(r, np.asarray(beta), h, s, ocr, corrected, np.asarray(oc_pixels))
