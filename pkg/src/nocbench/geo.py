"""Distances for the positive-match radius and sun elevation for query routing.

Solar position follows the NOAA solar calculator spreadsheet (Julian
century formulation). Elevations are geometric unless ``refraction=True``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone

import numpy as np
from scipy.optimize import brentq

from .errors import DataError

EARTH_RADIUS_M = 6_371_000.0
SUNRISE_ELEVATION_DEG = -0.833

_MIN_YEAR, _MAX_YEAR = 1900, 2100


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if math.isnan(lat) or math.isnan(lon):
            raise DataError("GeoPoint coordinates must not be NaN")
        if not -90.0 <= lat <= 90.0:
            raise DataError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise DataError(f"longitude {lon} outside [-180, 180]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)


@dataclass(frozen=True)
class PlanarPoint:
    x_m: float
    y_m: float

    def __post_init__(self):
        x, y = float(self.x_m), float(self.y_m)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DataError("PlanarPoint coordinates must be finite")
        object.__setattr__(self, "x_m", x)
        object.__setattr__(self, "y_m", y)


class DomainTag(str, enum.Enum):
    DAY = "day"
    TWILIGHT = "twilight"
    NIGHT = "night"

    @classmethod
    def parse(cls, value) -> "DomainTag":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DataError(f"unknown domain tag {value!r}") from None


@dataclass(frozen=True)
class SolarConfig:
    """Elevation thresholds separating Day / Twilight / Night."""

    day_elevation_deg: float = 0.0
    night_elevation_deg: float = -6.0

    def __post_init__(self):
        if not self.night_elevation_deg < self.day_elevation_deg:
            raise DataError("night_elevation_deg must be below day_elevation_deg")


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on a sphere of radius 6,371 km."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, h)))


def haversine_many(lat0, lon0, lats, lons) -> np.ndarray:
    """Vectorized :func:`haversine_m` from one point to arrays of points."""
    phi1 = np.radians(lat0)
    phi2 = np.radians(np.asarray(lats, dtype=np.float64))
    dphi = phi2 - phi1
    dlmb = np.radians(np.asarray(lons, dtype=np.float64) - lon0)
    h = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(1.0, h)))


def planar_m(a: PlanarPoint, b: PlanarPoint) -> float:
    return math.hypot(b.x_m - a.x_m, b.y_m - a.y_m)


def distance_m(a, b) -> float:
    """Distance between two points of the same coordinate mode."""
    if isinstance(a, GeoPoint) and isinstance(b, GeoPoint):
        return haversine_m(a, b)
    if isinstance(a, PlanarPoint) and isinstance(b, PlanarPoint):
        return planar_m(a, b)
    raise DataError("cannot mix geographic and planar coordinates")


def as_utc(t) -> datetime:
    """Coerce a datetime or ISO-8601 string to an aware UTC datetime.

    Naive datetimes are taken to already be UTC.
    """
    if isinstance(t, str):
        s = t.strip()
        if s.endswith("Z"):
            s = s[:-1] + "+00:00"
        try:
            t = datetime.fromisoformat(s)
        except ValueError:
            raise DataError(f"unparseable timestamp {t!r}") from None
    if not isinstance(t, datetime):
        raise DataError(f"expected a datetime, got {type(t).__name__}")
    if t.tzinfo is None:
        return t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def format_utc(t: datetime) -> str:
    return as_utc(t).isoformat().replace("+00:00", "Z")


def _julian_day(t: datetime) -> float:
    t = as_utc(t)
    if not _MIN_YEAR <= t.year <= _MAX_YEAR:
        raise DataError(f"timestamp year {t.year} outside {_MIN_YEAR}-{_MAX_YEAR}")
    return t.timestamp() / 86400.0 + 2440587.5


def _sun_terms(jd):
    """Declination (deg) and equation of time (min) for Julian day(s) ``jd``."""
    jc = (np.asarray(jd, dtype=np.float64) - 2451545.0) / 36525.0
    l0 = np.mod(280.46646 + jc * (36000.76983 + jc * 0.0003032), 360.0)
    m = 357.52911 + jc * (35999.05029 - 0.0001537 * jc)
    e = 0.016708634 - jc * (0.000042037 + 0.0000001267 * jc)
    m_r = np.radians(m)
    center = (np.sin(m_r) * (1.914602 - jc * (0.004817 + 0.000014 * jc))
              + np.sin(2 * m_r) * (0.019993 - 0.000101 * jc)
              + np.sin(3 * m_r) * 0.000289)
    omega = np.radians(125.04 - 1934.136 * jc)
    app_long = l0 + center - 0.00569 - 0.00478 * np.sin(omega)
    mean_obliq = 23.0 + (26.0 + (21.448 - jc * (46.815 + jc * (0.00059 - jc * 0.001813))) / 60.0) / 60.0
    obliq = np.radians(mean_obliq + 0.00256 * np.cos(omega))
    decl = np.degrees(np.arcsin(np.sin(obliq) * np.sin(np.radians(app_long))))
    y = np.tan(obliq / 2) ** 2
    l0_r = np.radians(l0)
    eqtime = 4.0 * np.degrees(
        y * np.sin(2 * l0_r)
        - 2 * e * np.sin(m_r)
        + 4 * e * y * np.sin(m_r) * np.cos(2 * l0_r)
        - 0.5 * y * y * np.sin(4 * l0_r)
        - 1.25 * e * e * np.sin(2 * m_r)
    )
    return decl, eqtime


def _refraction_deg(elev):
    """NOAA's standard atmospheric refraction correction."""
    elev = np.asarray(elev, dtype=np.float64)
    te = np.tan(np.radians(elev))
    with np.errstate(divide="ignore", invalid="ignore"):
        arcsec = np.where(
            elev > 85.0, 0.0,
            np.where(elev > 5.0, 58.1 / te - 0.07 / te**3 + 0.000086 / te**5,
                     np.where(elev > -0.575,
                              1735.0 + elev * (-518.2 + elev * (103.4 + elev * (-12.79 + elev * 0.711))),
                              -20.774 / te)))
    return arcsec / 3600.0


def _elevation_from_jd(lat, lon, jd, refraction=False):
    decl, eqtime = _sun_terms(jd)
    minutes = np.mod(np.asarray(jd) - 0.5, 1.0) * 1440.0
    tst = np.mod(minutes + eqtime + 4.0 * lon, 1440.0)
    ha = np.radians(tst / 4.0 - 180.0)
    lat_r, decl_r = np.radians(lat), np.radians(decl)
    cos_zen = np.sin(lat_r) * np.sin(decl_r) + np.cos(lat_r) * np.cos(decl_r) * np.cos(ha)
    elev = 90.0 - np.degrees(np.arccos(np.clip(cos_zen, -1.0, 1.0)))
    if refraction:
        elev = elev + _refraction_deg(elev)
    return elev


def solar_elevation_deg(p: GeoPoint, utc, refraction: bool = False) -> float:
    """Sun elevation above the horizon in degrees.

    Parameters
    ----------
    p : GeoPoint
        Observer position.
    utc : datetime or str
        Instant; naive datetimes are read as UTC. Years 1900-2100 only.
    refraction : bool
        Add NOAA's approximate atmospheric refraction. Off by default so the
        value is geometric, which is what the -0.833 deg sunrise convention
        assumes.
    """
    return float(_elevation_from_jd(p.lat, p.lon, _julian_day(utc), refraction))


def classify_elevation(elevation_deg: float, cfg: SolarConfig = SolarConfig()) -> DomainTag:
    if elevation_deg > cfg.day_elevation_deg:
        return DomainTag.DAY
    if elevation_deg < cfg.night_elevation_deg:
        return DomainTag.NIGHT
    return DomainTag.TWILIGHT


def classify_domain(p: GeoPoint, utc, cfg: SolarConfig = SolarConfig()) -> DomainTag:
    return classify_elevation(solar_elevation_deg(p, utc), cfg)


def sun_crossings(p: GeoPoint, day: date, elevation_deg: float = SUNRISE_ELEVATION_DEG,
                  step_minutes: float = 10.0):
    """Times when the geometric elevation crosses ``elevation_deg``.

    Searches the local solar day around ``day`` (a 24 h window centred on
    approximate local noon) and returns ``(rise, set)`` as UTC datetimes;
    either is ``None`` when the sun does not cross the level (polar day or
    night).
    """
    noon = datetime(day.year, day.month, day.day, 12, tzinfo=timezone.utc) - timedelta(hours=p.lon / 15.0)
    jd_noon = _julian_day(noon)
    offsets = np.arange(-720.0, 720.0 + step_minutes, step_minutes) / 1440.0

    def f(dt_days):
        return float(_elevation_from_jd(p.lat, p.lon, jd_noon + dt_days)) - elevation_deg

    vals = np.array([f(x) for x in offsets])
    rise = sett = None
    for i in range(len(offsets) - 1):
        if vals[i] == 0.0 or np.sign(vals[i]) == np.sign(vals[i + 1]):
            continue
        root = brentq(f, offsets[i], offsets[i + 1], xtol=1e-7)
        when = noon + timedelta(days=root)
        if vals[i] < 0 and rise is None:
            rise = when
        elif vals[i] > 0 and sett is None:
            sett = when
    return rise, sett
