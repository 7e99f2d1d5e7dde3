"""
Multi-pass Bayesian confidence tracking of candidate fires.

Every detection is matched to an auxiliary target within a Chebyshev
radius; repeat sightings update the target's confidence through Bayes'
rule with the detector's false-alarm rate. Targets whose confidence climbs
above the promotion threshold join the priority set for good.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable

from .detect import Detection, DetectorProfile, chebyshev


def bayes_update(prior: float, likelihood: float, false_rate: float) -> float:
    if not 0.0 <= prior <= 1.0:
        raise ValueError(f"prior {prior} outside [0, 1]")
    if not 0.0 <= likelihood <= 1.0:
        raise ValueError(f"likelihood {likelihood} outside [0, 1]")
    if not 0.0 < false_rate < 1.0:
        raise ValueError(f"false_rate {false_rate} outside (0, 1)")
    num = likelihood * prior
    den = num + false_rate * (1.0 - prior)
    if den <= 0.0:
        raise ValueError("degenerate Bayes update: zero evidence")
    return min(1.0, max(0.0, num / den))


@dataclass
class TrackedTarget:
    id: str
    lat: float
    lon: float
    confidence: float
    n_interpretations: int = 1
    promoted: bool = False
    history: list[tuple[datetime, float]] = field(default_factory=list)
    weight: float = 0.0  # accumulated confidence behind the centroid

    def to_dict(self) -> dict:
        return {
            "id": self.id, "lat": self.lat, "lon": self.lon, "confidence": self.confidence,
            "n_interpretations": self.n_interpretations, "promoted": self.promoted,
            "history": [[t.isoformat(), c] for t, c in self.history], "weight": self.weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrackedTarget":
        return cls(str(d["id"]), float(d["lat"]), float(d["lon"]), float(d["confidence"]),
                   int(d["n_interpretations"]), bool(d["promoted"]),
                   [(datetime.fromisoformat(t), float(c)) for t, c in d.get("history", [])],
                   float(d.get("weight", 0.0)))


@dataclass
class TargetRegistry:
    auxiliary: list[TrackedTarget] = field(default_factory=list)
    priority: list[TrackedTarget] = field(default_factory=list)
    promotion_threshold: float = 0.95
    cluster_radius: float = 0.5
    top_k: int = 50
    _counter: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.promotion_threshold < 1.0:
            raise ValueError("promotion_threshold must lie in (0, 1)")
        if self.cluster_radius <= 0:
            raise ValueError("cluster_radius must be positive")

    def nearest(self, lat: float, lon: float) -> TrackedTarget | None:
        best, best_d = None, None
        for tgt in self.auxiliary:
            d = chebyshev(lat, lon, tgt.lat, tgt.lon)
            if d <= self.cluster_radius and (best_d is None or d < best_d):
                best, best_d = tgt, d
        return best

    def get(self, target_id: str) -> TrackedTarget:
        for tgt in self.auxiliary:
            if tgt.id == target_id:
                return tgt
        raise KeyError(target_id)

    def new_id(self) -> str:
        self._counter += 1
        return f"aux-{self._counter:04d}"

    def _promote(self) -> list[TrackedTarget]:
        fresh = []
        for tgt in self.auxiliary:
            if not tgt.promoted and tgt.confidence > self.promotion_threshold:
                tgt.promoted = True
                self.priority.append(tgt)
                fresh.append(tgt)
        return fresh

    def to_dict(self) -> dict:
        return {
            "promotion_threshold": self.promotion_threshold,
            "cluster_radius": self.cluster_radius,
            "top_k": self.top_k,
            "counter": self._counter,
            "auxiliary": [t.to_dict() for t in self.auxiliary],
            "priority": [t.id for t in self.priority],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TargetRegistry":
        reg = cls(promotion_threshold=float(d["promotion_threshold"]), cluster_radius=float(d["cluster_radius"]),
                  top_k=int(d["top_k"]))
        reg._counter = int(d.get("counter", 0))
        reg.auxiliary = [TrackedTarget.from_dict(t) for t in d["auxiliary"]]
        by_id = {t.id: t for t in reg.auxiliary}
        reg.priority = [by_id[i] for i in d["priority"]]
        return reg


def register_detection(registry: TargetRegistry, det: Detection, profile: DetectorProfile) -> TrackedTarget:
    """Fold one detection into the registry and return the target it updated or created."""
    conf = det.confidence
    tgt = registry.nearest(det.lat, det.lon)
    if tgt is None:
        tgt = TrackedTarget(registry.new_id(), det.lat, det.lon, conf, 1, False, [(det.time, conf)], conf)
        registry.auxiliary.append(tgt)
    else:
        tgt.confidence = bayes_update(tgt.confidence, conf, profile.false_rate)
        tgt.n_interpretations += 1
        tgt.history.append((det.time, conf))
        total = tgt.weight + conf
        if total > 0:
            # centroid in an unwrapped longitude frame around the current estimate
            dlon = (det.lon - tgt.lon + 180.0) % 360.0 - 180.0
            tgt.lat = (tgt.lat * tgt.weight + det.lat * conf) / total
            lon = tgt.lon + dlon * conf / total
            tgt.lon = (lon + 180.0) % 360.0 - 180.0
        tgt.weight = total
    registry._promote()
    return tgt


def register_miss(registry: TargetRegistry, target: TrackedTarget, profile: DetectorProfile,
                  time: datetime) -> TrackedTarget:
    """Bayes update for an imaged target that produced no detection."""
    target.confidence = bayes_update(target.confidence, profile.miss_confidence, profile.false_rate)
    target.n_interpretations += 1
    target.history.append((time, 0.0))
    return target


def register_all(registry: TargetRegistry, dets: Iterable[Detection], profile: DetectorProfile) -> None:
    for det in sorted(dets, key=lambda d: (d.time, -d.confidence, d.lat, d.lon)):
        register_detection(registry, det, profile)


def select_auxiliary(registry: TargetRegistry) -> list[tuple[TrackedTarget, float]]:
    pool = [t for t in registry.auxiliary if not t.promoted]
    order = sorted(range(len(pool)), key=lambda i: (-pool[i].confidence, i))
    return [(pool[i], pool[i].confidence ** 2) for i in order[: registry.top_k]]


def save_registry(path: str | Path, registry: TargetRegistry) -> None:
    Path(path).write_text(json.dumps(registry.to_dict(), indent=2, sort_keys=True) + "\n")


def load_registry(path: str | Path) -> TargetRegistry:
    return TargetRegistry.from_dict(json.loads(Path(path).read_text()))
