"""
Distances and the day/night split
=================================

Positives are judged by ground distance, and queries are routed to the
day or the night encoder by the sun's elevation. Both live in
``nocbench.geo``.
"""

from datetime import date, datetime, timedelta, timezone

import numpy as np

from nocbench.geo import (
    GeoPoint,
    SolarConfig,
    classify_domain,
    haversine_m,
    solar_elevation_deg,
    sun_crossings,
)

# One degree of latitude on a sphere of radius 6,371 km
print("1 deg of latitude:", round(haversine_m(GeoPoint(0, 0), GeoPoint(1, 0)), 2), "m")

# Two photos across a street in Tokyo are about 20 m apart, inside the 25 m radius
a, b = GeoPoint(35.6812, 139.7671), GeoPoint(35.6813, 139.7673)
print("across the street:", round(haversine_m(a, b), 1), "m")

###############################################################################
# Elevation over one day in Tokyo. Below 0 deg is twilight, below -6 deg night.

day = date(2024, 3, 20)
midnight = datetime(day.year, day.month, day.day, tzinfo=timezone.utc)
for hour in range(0, 24, 3):
    t = midnight + timedelta(hours=hour)
    elev = solar_elevation_deg(a, t)
    print(f"{t:%H:%M} UTC  elevation {elev:6.1f}  -> {classify_domain(a, t).value}")

###############################################################################
# Sunrise and sunset are the crossings of -0.833 deg (the standard horizon
# allowance for refraction and the solar radius).

# The search covers the local solar day, so Tokyo's sunrise falls on the previous UTC date
rise, sett = sun_crossings(a, day)
print("sunrise", f"{rise:%Y-%m-%d %H:%M}", "sunset", f"{sett:%Y-%m-%d %H:%M}", "(UTC)")

# Near the poles the sun may not cross the horizon at all
print("Svalbard in December:", sun_crossings(GeoPoint(78.2, 15.6), date(2024, 12, 21)))

###############################################################################
# Thresholds are configurable. A stricter night (below -12 deg) shifts the
# boundary later into the evening.

strict = SolarConfig(day_elevation_deg=0.0, night_elevation_deg=-12.0)
hours = np.arange(8.0, 12.0, 0.25)
tags = [classify_domain(a, midnight + timedelta(hours=h), strict).value for h in hours]
print("evening in UTC hours, strict night:", list(zip(hours.tolist(), tags))[::2])
