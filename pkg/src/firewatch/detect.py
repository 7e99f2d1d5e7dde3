"""
Reference fire detector, sensor fusion, geolocation and detection metrics.

The detector is a deterministic stand-in for a trained network: threshold
above the median background, 8-connected components, one box per blob.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .scene import KM_PER_DEG_LAT, KM_PER_DEG_LON, Band, FireTruth, Raster, RasterMeta

logger = logging.getLogger(__name__)

EIGEN_TOL = 1e-12
DETECTION_MODES = ("band6", "band7", "early", "late")


class GeolocationError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    confidence: float
    source_model: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.w < 0 or self.h < 0:
            raise ValueError("box extents must be non-negative")

    @property
    def area(self) -> float:
        return self.w * self.h

    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    def contains(self, col: float, row: float) -> bool:
        x0, y0, x1, y1 = self.bounds()
        return x0 <= col <= x1 and y0 <= row <= y1


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    lat: float
    lon: float
    time: datetime
    satellite: str = ""

    @property
    def confidence(self) -> float:
        return self.box.confidence

    def to_dict(self) -> dict:
        return {"box": asdict(self.box), "lat": self.lat, "lon": self.lon,
                "time": self.time.isoformat(), "satellite": self.satellite}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(BoundingBox(**d["box"]), float(d["lat"]), float(d["lon"]),
                   datetime.fromisoformat(d["time"]), str(d.get("satellite", "")))


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    f_score: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "DetectionMetrics":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(p, r, f, tp, fp, fn)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DetectorProfile:
    threshold: float = 0.15
    min_blob_px: int = 1
    confidence_gain: float = 1.0
    map_value: float = 0.7
    # likelihood fed to the Bayes update when a covered target is not re-detected
    miss_confidence: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 < self.map_value < 1.0:
            raise ValueError("map_value must lie in (0, 1)")
        if not 0.0 < self.miss_confidence <= 1.0:
            raise ValueError("miss_confidence must lie in (0, 1]")
        if self.min_blob_px < 1:
            raise ValueError("min_blob_px must be >= 1")

    @property
    def false_rate(self) -> float:
        return 1.0 - self.map_value

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def blob_mask(raster: Raster, profile: DetectorProfile) -> tuple[np.ndarray, float]:
    level = float(np.median(raster.pixels)) + profile.threshold
    return raster.pixels > level, level


def label_blobs(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(mask, structure=np.ones((3, 3), dtype=int))


def detect_blobs(raster: Raster, profile: DetectorProfile | None = None, source_model: int = 1) -> list[BoundingBox]:
    """One box per 8-connected above-threshold blob, highest confidence first."""
    profile = profile or DetectorProfile()
    mask, level = blob_mask(raster, profile)
    labels, n = label_blobs(mask)
    h, w = raster.pixels.shape
    boxes = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        member = labels[sl] == k
        area = int(member.sum())
        if area < profile.min_blob_px:
            continue
        peak = float(raster.pixels[sl][member].max())
        r0 = max(sl[0].start - 1, 0)
        r1 = min(sl[0].stop + 1, h)
        c0 = max(sl[1].start - 1, 0)
        c1 = min(sl[1].stop + 1, w)
        conf = profile.confidence_gain * (peak - level) * (1.0 - 1.0 / (1.0 + area))
        conf = min(max(conf, 0.0), 0.99)
        # pixel (r, c) covers [c-0.5, c+0.5]; box edges sit on pixel borders
        boxes.append(BoundingBox((c0 + c1 - 1) / 2.0, (r0 + r1 - 1) / 2.0, float(c1 - c0), float(r1 - r0),
                                 conf, source_model))
    boxes.sort(key=lambda b: (-b.confidence, b.y, b.x))
    return boxes


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def pca_weights(images: Sequence[np.ndarray]) -> np.ndarray:
    """Leading-eigenvector weights of the image covariance, non-negative and summing to 1."""
    m = np.stack([np.asarray(im, float).ravel() for im in images])
    f = m.shape[0]
    if m.shape[1] < 2:
        return np.full(f, 1.0 / f)
    cov = np.atleast_2d(np.cov(m))
    vals, vecs = np.linalg.eigh(cov)
    if vals[-1] <= EIGEN_TOL:
        return np.full(f, 1.0 / f)
    top = vals[-1]
    if len(vals) > 1 and top - vals[-2] <= EIGEN_TOL * max(1.0, abs(top)):
        # repeated leading eigenvalue: eigenvector not unique
        return np.full(f, 1.0 / f)
    pc = np.abs(vecs[:, -1])
    total = pc.sum()
    if total <= EIGEN_TOL:
        return np.full(f, 1.0 / f)
    return pc / total


def early_fuse(rasters: Sequence[Raster]) -> Raster:
    if len(rasters) < 2:
        raise ValueError("early fusion needs at least two rasters")
    shape = rasters[0].pixels.shape
    if any(r.pixels.shape != shape for r in rasters):
        raise ValueError("raster dimensions differ")
    images = [r.pixels for r in rasters]
    if all(np.array_equal(images[0], im) for im in images[1:]):
        return Raster(images[0].copy(), Band.FUSED, rasters[0].meta)
    w = pca_weights(images)
    fused = np.tensordot(w, np.stack(images), axes=1)
    lo = np.min(images, axis=0)
    hi = np.max(images, axis=0)
    return Raster(np.clip(fused, lo, hi), Band.FUSED, rasters[0].meta)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.bounds()
    bx0, by0, bx1, by1 = b.bounds()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 1.0 if a == b else 0.0
    return min(1.0, max(0.0, inter / union))


def cluster_boxes(boxes: Sequence[BoundingBox], iou_threshold: float) -> list[list[BoundingBox]]:
    clusters: list[list[BoundingBox]] = []
    for box in boxes:
        for cl in clusters:
            if iou(cl[0], box) > iou_threshold:
                cl.append(box)
                break
        else:
            clusters.append([box])
    return clusters


def late_fuse(boxes: Sequence[BoundingBox], n_models: int, iou_threshold: float = 0.5) -> list[BoundingBox]:
    """Weighted box fusion over boxes from ``n_models`` detectors."""
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    for b in boxes:
        if not 1 <= b.source_model <= n_models:
            raise ValueError(f"source_model {b.source_model} outside 1..{n_models}")
    fused = []
    for cl in cluster_boxes(boxes, iou_threshold):
        c = np.array([b.confidence for b in cl])
        csum = c.sum()
        wts = c / csum if csum > 0 else np.full(len(cl), 1.0 / len(cl))
        a = len(cl)
        x, y, w, h = (float(np.dot(wts, [getattr(b, k) for b in cl])) for k in "xywh")
        conf = min(a, n_models) * csum / (a * n_models)
        fused.append(BoundingBox(x, y, w, h, float(min(conf, 1.0)), 0))
    return fused


# ---------------------------------------------------------------------------
# Geolocation
# ---------------------------------------------------------------------------

def pixel_offsets(box: BoundingBox, meta: RasterMeta) -> tuple[float, float]:
    """(dx, dy) from the image center with +x right and +y up."""
    return box.x - meta.center, meta.center - box.y


def geolocate(box: BoundingBox, meta: RasterMeta) -> tuple[float, float]:
    dx, dy = pixel_offsets(box, meta)
    return geolocate_offsets(dx, dy, meta.lat0, meta.lon0, meta.gsd, meta.heading)


def geolocate_offsets(dx: float, dy: float, lat0: float, lon0: float, gsd_km: float,
                      theta_deg: float) -> tuple[float, float]:
    if dx == 0.0 and dy == 0.0:
        return lat0, lon0
    phi = math.degrees(math.atan2(dy, dx))
    psi = math.radians(theta_deg + phi - 90.0)
    dist = gsd_km * math.hypot(dx, dy)
    dlat = dist * math.sin(psi) / KM_PER_DEG_LAT
    lat = lat0 + dlat
    if abs(lat) >= 90.0:
        raise GeolocationError(f"latitude {lat:.4f} reaches the pole")
    dlon = dist * math.cos(psi) / (KM_PER_DEG_LON * math.cos(math.radians(lat)))
    lon = (lon0 + dlon + 180.0) % 360.0 - 180.0
    if lon == -180.0:
        lon = 180.0
    return lat, lon


def to_detections(boxes: Iterable[BoundingBox], meta: RasterMeta) -> list[Detection]:
    out = []
    for b in boxes:
        try:
            lat, lon = geolocate(b, meta)
        except GeolocationError:
            logger.warning("dropping box at (%.1f, %.1f): polar geolocation", b.x, b.y)
            continue
        out.append(Detection(b, lat, lon, meta.time, meta.satellite))
    return out


def run_detector(band6: Raster, band7: Raster, profile: DetectorProfile | None = None, mode: str = "late",
                 iou_threshold: float = 0.5) -> list[BoundingBox]:
    """Boxes for one observation under the chosen fusion ``mode``."""
    profile = profile or DetectorProfile()
    if mode == "band6":
        return detect_blobs(band6, profile)
    if mode == "band7":
        return detect_blobs(band7, profile)
    if mode == "early":
        return detect_blobs(early_fuse([band6, band7]), profile)
    if mode == "late":
        boxes = detect_blobs(band6, profile, 1) + detect_blobs(band7, profile, 2)
        return sorted(late_fuse(boxes, 2, iou_threshold), key=lambda b: (-b.confidence, b.y, b.x))
    raise ValueError(f"unknown detection mode {mode!r}; expected one of {DETECTION_MODES}")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def chebyshev(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    dlon = abs((lon1 - lon2 + 180.0) % 360.0 - 180.0)
    return max(abs(lat1 - lat2), dlon)


def match_detections(points: Sequence[tuple[float, float]], truth: Sequence[tuple[float, float]],
                     radius: float) -> list[tuple[int, int]]:
    pairs = []
    for i, (la, lo) in enumerate(points):
        for j, (tla, tlo) in enumerate(truth):
            d = chebyshev(la, lo, tla, tlo)
            if d <= radius:
                pairs.append((d, i, j))
    pairs.sort()
    used_i, used_j, out = set(), set(), []
    for _, i, j in pairs:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        out.append((i, j))
    return out


def score_detections(dets: Sequence[Detection], truth: Sequence[FireTruth], match_radius: float = 0.5) -> DetectionMetrics:
    if match_radius <= 0:
        raise ValueError("match_radius must be positive")
    matches = match_detections([(d.lat, d.lon) for d in dets], [(f.lat, f.lon) for f in truth], match_radius)
    tp = len(matches)
    return DetectionMetrics.from_counts(tp, len(dets) - tp, len(truth) - tp)


def write_detections(path: str | Path, dets: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")


def read_detections(path: str | Path) -> list[Detection]:
    with open(path, encoding="utf-8") as fh:
        return [Detection.from_dict(json.loads(line)) for line in fh if line.strip()]
