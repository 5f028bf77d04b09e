"""Pixel uncertainty maps and their superpixel-level fusion.

Model uncertainty is the normalized single-term entropy of the MC-dropout
expectation; vesselness uncertainty is the normalized quadratic s(1-s).
Both are normalized by the map's own maximum so values land in [0, 1] (an
all-confident map stays identically zero instead of dividing by ~0).  The
two are fused pixel-wise by a weighted maximum whose weight decays linearly
over iterations, then averaged per superpixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GrayImage
from .layersep import VesselnessMap
from .segmodel import ExpectationMap
from .superpixel import SuperpixelPartition

_NORM_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class UncertaintyMap:
    values: np.ndarray  # (h, w) in [0, 1]
    kind: str  # model | vesselness | fused-pixelwise


@dataclass(frozen=True, eq=False)
class SuperpixelUncertainty:
    values: np.ndarray  # (n_superpixels,)
    partition: SuperpixelPartition


def _normalize(raw: np.ndarray, kind: str) -> UncertaintyMap:
    peak = raw.max() if raw.size else 0.0
    if peak < _NORM_EPS:
        return UncertaintyMap(np.zeros_like(raw), kind)
    return UncertaintyMap(raw / peak, kind)


def model_uncertainty(expectation: ExpectationMap, entropy: str = "single") -> UncertaintyMap:
    """Normalized entropy of the MC expectation.

    ``entropy="single"`` uses the one-term -E ln E (peaks at E = 1/e);
    ``"full"`` uses the two-term binary entropy (peaks at E = 1/2).
    """
    e = expectation.values
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(e > 0.0, -e * np.log(e), 0.0)
        if entropy == "full":
            raw = raw + np.where(e < 1.0, -(1.0 - e) * np.log(1.0 - e), 0.0)
        elif entropy != "single":
            raise ValueError("entropy must be 'single' or 'full'")
    return _normalize(raw, "model")


def vesselness_uncertainty(vmap: VesselnessMap) -> UncertaintyMap:
    s = vmap.values
    return _normalize(s * (1.0 - s), "vesselness")


def eta(k: int, theta: float = 0.4) -> float:
    """Linear soft switch from vesselness to model uncertainty."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    if k < 1.0 + 1.0 / theta:
        return 1.0 - theta * (k - 1)
    return 0.0


def fuse_mvu(
    model_map: UncertaintyMap,
    vessel_map: UncertaintyMap,
    eta_value: float,
    partition: SuperpixelPartition,
) -> SuperpixelUncertainty:
    """Per-pixel ``max(eta * G, (1 - eta) * M)`` averaged over superpixels."""
    m, g = model_map.values, vessel_map.values
    if m.shape != g.shape or m.shape != partition.assignment.shape:
        raise ValueError("uncertainty maps and partition dimensions differ")
    fused = np.maximum(eta_value * g, (1.0 - eta_value) * m)
    sums = np.bincount(partition.assignment.ravel(), weights=fused.ravel(), minlength=partition.n_superpixels)
    return SuperpixelUncertainty(sums / partition.sizes(), partition)


def uncertainty_to_image(umap: UncertaintyMap) -> GrayImage:
    """Heat image for PGM export / UI overlays."""
    return GrayImage(np.clip(umap.values, 0.0, 1.0))
