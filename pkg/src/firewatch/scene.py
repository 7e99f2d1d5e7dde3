"""
Ground-truth fire ingestion and synthetic two-band nadir rasters.

Each burning fire inside the footprint is drawn as a Gaussian blob on a
flat background with seeded uniform noise.  Image geometry is the local
tangent-plane model used for geolocation: +x (columns) points to the image
right, +y (up, decreasing rows) points along the satellite heading, and one
pixel spans one ground sample distance.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .orbit import DEFAULT_FRAME, R_EARTH, EarthFrame, StateVector, inclination_of, subpoint, wrap180
from .visibility import DEFAULT_HALF_ANGLE, is_daylight

ACRE_KM2 = 0.00404686
KM_PER_DEG_LAT = 110.574
KM_PER_DEG_LON = 111.320
FIRMS_COLUMNS = ("latitude", "longitude", "acq_date", "acq_time", "brightness", "confidence")
ACCEPTED_CONFIDENCE = {"n", "nominal", "h", "high"}


class Band(str, enum.Enum):
    BAND6 = "band6"
    BAND7 = "band7"
    FUSED = "fused"


class FireDataError(ValueError):
    pass


@dataclass(frozen=True)
class FireTruth:
    id: str
    lat: float
    lon: float
    start_time: datetime
    area: float = 2500.0  # acres
    brightness: float = 1.0

    def to_dict(self) -> dict:
        return {"id": self.id, "lat": self.lat, "lon": self.lon, "start_time": self.start_time.isoformat(),
                "area": self.area, "brightness": self.brightness}

    @classmethod
    def from_dict(cls, d: dict) -> "FireTruth":
        return cls(str(d["id"]), float(d["lat"]), float(d["lon"]), datetime.fromisoformat(d["start_time"]),
                   float(d.get("area", 2500.0)), float(d.get("brightness", 1.0)))


@dataclass(frozen=True)
class ClutterSource:
    """Bright non-fire ground feature (sunlit islands, specular glint)."""

    lat: float
    lon: float
    intensity: float
    sigma_px: float = 0.8
    band6_gain: float = 1.0
    band7_gain: float = 1.0
    day_only: bool = False
    night_only: bool = False


@dataclass
class SceneConfig:
    n_pixels: int = 128
    half_angle: float = DEFAULT_HALF_ANGLE
    band6_gain: float = 1.0
    band7_gain: float = 0.85
    background_day: float = 0.12
    background_night: float = 0.03
    noise: float = 0.04
    psf_sigma_px: float = 0.7

    def gain(self, band: Band) -> float:
        return self.band6_gain if Band(band) is Band.BAND6 else self.band7_gain


@dataclass
class RasterMeta:
    time: datetime
    position: np.ndarray
    velocity: np.ndarray
    lat0: float
    lon0: float
    altitude: float
    inclination: float
    gsd: float
    half_angle: float
    n_pixels: int
    daylight: bool
    satellite: str = ""

    @property
    def heading(self) -> float:
        """Angle from East to the direction of travel (deg): +i ascending, -i descending."""
        return self.inclination if self.velocity[2] >= 0.0 else -self.inclination

    @property
    def center(self) -> float:
        return float(self.n_pixels // 2)

    def to_dict(self) -> dict:
        return {
            "time": self.time.isoformat(),
            "position": [float(x) for x in self.position],
            "velocity": [float(x) for x in self.velocity],
            "lat0": self.lat0, "lon0": self.lon0, "altitude": self.altitude,
            "inclination": self.inclination, "gsd": self.gsd, "half_angle": self.half_angle,
            "n_pixels": self.n_pixels, "daylight": self.daylight, "satellite": self.satellite,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RasterMeta":
        return cls(datetime.fromisoformat(d["time"]), np.array(d["position"], float), np.array(d["velocity"], float),
                   float(d["lat0"]), float(d["lon0"]), float(d["altitude"]), float(d["inclination"]),
                   float(d["gsd"]), float(d["half_angle"]), int(d["n_pixels"]), bool(d["daylight"]),
                   str(d.get("satellite", "")))


@dataclass
class Raster:
    pixels: np.ndarray
    band: Band
    meta: RasterMeta

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=float)
        self.band = Band(self.band)
        if self.pixels.ndim != 2:
            raise ValueError("raster pixels must be 2-D")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("raster pixels must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def gsd(state: StateVector, half_angle: float = DEFAULT_HALF_ANGLE, n_pixels: int = 128) -> float:
    alt = float(np.linalg.norm(state.position)) - R_EARTH
    if alt <= 0.0:
        raise ValueError("altitude must be positive")
    return 2.0 * alt * math.tan(math.radians(half_angle)) / n_pixels


def make_meta(state: StateVector, config: SceneConfig | None = None, satellite: str = "",
              frame: EarthFrame = DEFAULT_FRAME) -> RasterMeta:
    config = config or SceneConfig()
    lat0, lon0, alt = subpoint(state, frame)
    return RasterMeta(
        time=state.time, position=np.asarray(state.position, float), velocity=np.asarray(state.velocity, float),
        lat0=lat0, lon0=lon0, altitude=alt, inclination=inclination_of(state),
        gsd=gsd(state, config.half_angle, config.n_pixels), half_angle=config.half_angle,
        n_pixels=config.n_pixels, daylight=is_daylight(lat0, lon0, state.time, frame), satellite=satellite,
    )


def project_to_pixel(lat: float, lon: float, meta: RasterMeta) -> tuple[float, float]:
    """Ground point -> (column, row) in pixel coordinates; inverse of geolocation."""
    north = (lat - meta.lat0) * KM_PER_DEG_LAT
    east = wrap180(lon - meta.lon0) * KM_PER_DEG_LON * math.cos(math.radians(lat))
    dist = math.hypot(north, east) / meta.gsd
    if dist == 0.0:
        return meta.center, meta.center
    phi = math.atan2(north, east) - math.radians(meta.heading) + math.pi / 2.0
    return meta.center + dist * math.cos(phi), meta.center - dist * math.sin(phi)


def in_footprint(col: float, row: float, n_pixels: int) -> bool:
    return -0.5 <= col < n_pixels - 0.5 and -0.5 <= row < n_pixels - 0.5


def fire_sigma_px(area_acres: float, gsd_km: float, psf_sigma_px: float = 0.0) -> float:
    core = math.sqrt(area_acres * ACRE_KM2) / gsd_km / 2.0
    return math.hypot(core, psf_sigma_px)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _noise_rng(seed: int, band: Band, meta: RasterMeta) -> np.random.Generator:
    stamp = int(round(meta.time.timestamp()))
    sat = sum(ord(c) * (i + 1) for i, c in enumerate(meta.satellite))
    return np.random.default_rng([seed, list(Band).index(band), stamp, sat])


def _blob(grid_c: np.ndarray, grid_r: np.ndarray, col: float, row: float, sigma: float, peak: float) -> np.ndarray:
    return peak * np.exp(-0.5 * ((grid_c - col) ** 2 + (grid_r - row) ** 2) / sigma**2)


def render_clean(meta: RasterMeta, fires: Iterable[FireTruth], band: Band | str,
                 config: SceneConfig | None = None, clutter: Sequence[ClutterSource] = ()) -> np.ndarray:
    """Background plus fires, before noise and clamping."""
    config = config or SceneConfig()
    band = Band(band)
    n = config.n_pixels
    rows, cols = np.mgrid[0:n, 0:n].astype(float)
    img = np.full((n, n), config.background_day if meta.daylight else config.background_night)
    for fire in fires:
        if fire.start_time > meta.time:
            continue
        c, r = project_to_pixel(fire.lat, fire.lon, meta)
        if not in_footprint(c, r, n):
            continue
        sigma = fire_sigma_px(fire.area, meta.gsd, config.psf_sigma_px)
        img += _blob(cols, rows, c, r, sigma, fire.brightness * config.gain(band))
    for src in clutter:
        if (src.day_only and not meta.daylight) or (src.night_only and meta.daylight):
            continue
        c, r = project_to_pixel(src.lat, src.lon, meta)
        if not in_footprint(c, r, n):
            continue
        gain = src.band6_gain if band is Band.BAND6 else src.band7_gain
        img += _blob(cols, rows, c, r, src.sigma_px, src.intensity * gain)
    return img


def render(state: StateVector, fires: Iterable[FireTruth], band: Band | str, t: datetime | None = None,
           seed: int = 0, config: SceneConfig | None = None, clutter: Sequence[ClutterSource] = (),
           satellite: str = "", frame: EarthFrame = DEFAULT_FRAME) -> Raster:
    """Synthetic nadir raster of one band; deterministic for a given seed."""
    config = config or SceneConfig()
    band = Band(band)
    if t is not None and abs((t - state.time).total_seconds()) > 1e-6:
        raise ValueError("render time must match the state epoch")
    meta = make_meta(state, config, satellite, frame)
    img = render_clean(meta, fires, band, config, clutter)
    img += _noise_rng(seed, band, meta).uniform(0.0, config.noise, size=img.shape)
    return Raster(np.clip(img, 0.0, 1.0), band, meta)


# ---------------------------------------------------------------------------
# Fire data
# ---------------------------------------------------------------------------

def _parse_time(date_s: str, time_s: str) -> datetime:
    hhmm = time_s.strip().zfill(4)
    d = datetime.strptime(date_s.strip(), "%Y-%m-%d")
    return d.replace(hour=int(hhmm[:2]), minute=int(hhmm[2:]), tzinfo=timezone.utc)


def _accept_confidence(raw: str) -> bool:
    raw = raw.strip().lower()
    if raw in ACCEPTED_CONFIDENCE:
        return True
    try:
        # numeric (MODIS-style) confidence: 30+ counts as nominal
        return float(raw) >= 30.0
    except ValueError:
        return False


def ingest_fires(path: str | Path, window: tuple[datetime, datetime] | None = None, seed: int = 0,
                 dedup_deg: float = 0.05, area_range: tuple[float, float] = (1000.0, 5000.0)) -> list[FireTruth]:
    """Read a FIRMS-style CSV into FireTruth records.

    Rows outside ``window`` or below nominal confidence are dropped, then
    rows sharing a ``dedup_deg`` grid cell collapse to the earliest one.
    Brightness is normalized by the file maximum; areas are drawn from
    ``area_range`` with ``seed``.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        for col in FIRMS_COLUMNS:
            if col not in header:
                raise FireDataError(f"{path}: missing column '{col}'")
        for lineno, raw in enumerate(reader, start=2):
            raw = {k.strip(): (v or "") for k, v in raw.items() if k is not None}
            try:
                rows.append((
                    float(raw["latitude"]), float(raw["longitude"]),
                    _parse_time(raw["acq_date"], raw["acq_time"]),
                    float(raw["brightness"]), raw["confidence"],
                ))
            except (ValueError, KeyError) as exc:
                raise FireDataError(f"{path}: line {lineno}: cannot parse row ({exc})") from exc
    if not rows:
        return []
    bmax = max(r[3] for r in rows) or 1.0
    start, end = window if window else (None, None)
    kept: dict[tuple[int, int], tuple] = {}
    for lat, lon, when, bright, conf in rows:
        if start is not None and not (start <= when <= end):
            continue
        if not _accept_confidence(conf):
            continue
        key = (round(lat / dedup_deg), round(lon / dedup_deg))
        if key not in kept or when < kept[key][2]:
            kept[key] = (lat, lon, when, bright)
    rng = np.random.default_rng(seed)
    out = []
    for n, (lat, lon, when, bright) in enumerate(sorted(kept.values(), key=lambda r: (r[2], r[0], r[1]))):
        area = float(rng.uniform(*area_range))
        out.append(FireTruth(f"fire-{n:04d}", lat, lon, when, area, min(1.0, max(bright / bmax, 1e-6))))
    return out


def generate_fires(n: int, lat_range: tuple[float, float], lon_range: tuple[float, float],
                   start: datetime, end: datetime | None = None, seed: int = 0,
                   brightness_range: tuple[float, float] = (0.6, 1.0)) -> list[FireTruth]:
    """Random fires; ignition times uniform in [start, end] (all at ``start`` if end is None)."""
    rng = np.random.default_rng(seed)
    span = (end - start).total_seconds() if end else 0.0
    out = []
    for k in range(n):
        lat = float(rng.uniform(*lat_range))
        lon = float(rng.uniform(*lon_range))
        offset = float(rng.uniform(0.0, span)) if span else 0.0
        when = start.fromtimestamp(start.timestamp() + round(offset), tz=timezone.utc)
        out.append(FireTruth(f"fire-{k:04d}", lat, lon, when, float(rng.uniform(1000, 5000)),
                             float(rng.uniform(*brightness_range))))
    return out


def write_firms_csv(path: str | Path, fires: Sequence[FireTruth], brightness_scale: float = 400.0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIRMS_COLUMNS)
        for f in fires:
            w.writerow([repr(f.lat), repr(f.lon), f.start_time.strftime("%Y-%m-%d"), f.start_time.strftime("%H%M"),
                        repr(f.brightness * brightness_scale), "h"])


# ---------------------------------------------------------------------------
# PGM export
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, raster: Raster) -> None:
    """16-bit binary PGM plus ``<path>.json`` sidecar with band and meta."""
    path = Path(path)
    data = np.round(raster.pixels * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{raster.width} {raster.height}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())
    sidecar = {"band": raster.band.value, "meta": raster.meta.to_dict()}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_pgm(path: str | Path) -> Raster:
    path = Path(path)
    blob = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    pixels = np.frombuffer(blob[pos:], dtype=dtype, count=w * h).reshape(h, w).astype(float) / maxval
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return Raster(pixels, Band(side["band"]), RasterMeta.from_dict(side["meta"]))
