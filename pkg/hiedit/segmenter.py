"""
Deterministic region segmentation: luminance thresholding against the border
background estimate, 4-connected components, small components merged into the
background, regions numbered by their first pixel in raster order.
"""
import logging
from typing import Dict, List, Protocol, Tuple

import numpy as np
from scipy import ndimage

from .edit_models import SegmentationMap

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class Segmenter(Protocol):
    def segment_regions(self, img: np.ndarray) -> SegmentationMap:
        ...


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 3:
        return img @ LUMA
    return img.mean(axis=-1)


def border_median(lum: np.ndarray) -> float:
    border = np.concatenate([lum[0, :], lum[-1, :], lum[1:-1, 0], lum[1:-1, -1]])
    return float(np.median(border))


class LuminanceSegmenter:
    """
    Stand-in for a promptable segmenter.

    Pixels whose luminance differs from the border median by more than ``tau``
    are foreground; foreground components smaller than ``min_area`` pixels
    fall back to the background label.
    """

    name = "luminance-cc"

    def __init__(self, tau: float = 0.1, min_area: int = 4):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.tau = tau
        self.min_area = min_area

    def segment_regions(self, img: np.ndarray) -> SegmentationMap:
        lum = luminance(img)
        foreground = np.abs(lum - border_median(lum)) > self.tau
        raw, count = ndimage.label(foreground, structure=FOUR_CONNECTED)
        labels = np.zeros(raw.shape, dtype=np.int64)
        if count:
            flat = raw.reshape(-1)
            areas = np.bincount(flat, minlength=count + 1)
            kept = [k for k in range(1, count + 1) if areas[k] >= self.min_area]
            first_pixel = {k: int(np.argmax(flat == k)) for k in kept}
            for new_label, k in enumerate(sorted(kept, key=first_pixel.get), start=1):
                labels[raw == k] = new_label
            n_regions = len(kept) + 1
            if len(kept) < count:
                logger.debug(f"Merged {count - len(kept)} components below {self.min_area}px into background")
        else:
            n_regions = 1
        return SegmentationMap(labels=labels, n_regions=n_regions)

    def __call__(self, img: np.ndarray) -> SegmentationMap:
        return self.segment_regions(img)


def region_stats(seg: SegmentationMap) -> List[Tuple[int, Tuple[float, float], int]]:
    """(label, centroid (row, col), area) for every foreground region."""
    regions = list(range(1, seg.n_regions))
    if not regions:
        return []
    ones = np.ones(seg.labels.shape)
    centroids = ndimage.center_of_mass(ones, seg.labels, regions)
    areas = ndimage.sum(ones, seg.labels, regions)
    return [(k, (float(c[0]), float(c[1])), int(a)) for k, c, a in zip(regions, centroids, areas)]


SEGMENTERS: Dict[str, type] = {LuminanceSegmenter.name: LuminanceSegmenter}


def build_segmenter(name: str, tau: float, min_area: int) -> Segmenter:
    try:
        cls = SEGMENTERS[name]
    except KeyError:
        raise ValueError(f"unknown segmenter {name!r}; available: {sorted(SEGMENTERS)}") from None
    return cls(tau=tau, min_area=min_area)
