"""Store locations, great-circle distances, the logit link and regional dummies."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0
LOGIT_EPS = 1e-9

REFERENCE_REGION = "London"
# Column order of the regional dummies (after the intercept).
REGIONS = (
    "Northern Ireland",
    "Scotland",
    "Wales",
    "North West",
    "North East",
    "Yorkshire and the Humber",
    "West Midlands",
    "East Midlands",
    "East Anglia",
    "South East",
    "South West",
)
ALL_REGIONS = (REFERENCE_REGION,) + REGIONS
DESIGN_COLUMNS = ("Intercept",) + REGIONS


@dataclass(frozen=True)
class StoreGeo:
    store_id: str
    lat: float
    lon: float
    region: str
    postcode: str = ""

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"invalid coordinates for store {self.store_id}")
        if self.region not in ALL_REGIONS:
            raise ValueError(f"unknown region {self.region!r} for store {self.store_id}")


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance on a sphere of radius 6371 km; broadcasts over arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def store_distance(p: StoreGeo, q: StoreGeo) -> float:
    return float(haversine_km(p.lat, p.lon, q.lat, q.lon))


def coords(stores) -> np.ndarray:
    return np.array([[s.lat, s.lon] for s in stores], dtype=float).reshape(-1, 2)


def distance_matrix(stores_a, stores_b=None) -> np.ndarray:
    a = coords(stores_a)
    b = a if stores_b is None else coords(stores_b)
    out = haversine_km(a[:, None, 0], a[:, None, 1], b[None, :, 0], b[None, :, 1])
    if stores_b is None:
        out = 0.5 * (out + out.T)
        np.fill_diagonal(out, 0.0)
    return out


def logit(p):
    p = np.clip(np.asarray(p, dtype=float), LOGIT_EPS, 1.0 - LOGIT_EPS)
    return np.log(p) - np.log1p(-p)


def inv_logit(x):
    x = np.asarray(x, dtype=float)
    # numerically stable on both tails
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def design_matrix(stores) -> np.ndarray:
    """Intercept plus one dummy per non-London region, London as reference."""
    regions = [s.region if isinstance(s, StoreGeo) else s for s in stores]
    X = np.zeros((len(regions), 1 + len(REGIONS)))
    X[:, 0] = 1.0
    for i, r in enumerate(regions):
        if r == REFERENCE_REGION:
            continue
        if r not in REGIONS:
            raise ValueError(f"unknown region {r!r}")
        X[i, 1 + REGIONS.index(r)] = 1.0
    return X


def read_stores_csv(path) -> list[StoreGeo]:
    """Read ``store_id,postcode,lat,lon,region`` rows."""
    with open(path, newline="") as fh:
        return [
            StoreGeo(row["store_id"], float(row["lat"]), float(row["lon"]), row["region"], row.get("postcode", "") or "")
            for row in csv.DictReader(fh)
        ]


def write_stores_csv(stores, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["store_id", "postcode", "lat", "lon", "region"])
        for s in stores:
            w.writerow([s.store_id, s.postcode, repr(s.lat), repr(s.lon), s.region])


def write_distance_csv(stores, path) -> None:
    dist = distance_matrix(stores)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["store_id"] + [s.store_id for s in stores])
        for s, row in zip(stores, dist):
            w.writerow([s.store_id] + [f"{v:.6f}" for v in row])
