"""Point-level feature channels, cleaning and resampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, TooShortError, ValidationError
from .ingest import GpsPoint, Tripleg

EARTH_RADIUS_M = 6_371_000.0


@dataclass
class FeatureSeries:
    timestamps: np.ndarray
    channels: dict = field(default_factory=dict)
    mode: str | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.channels = {k: np.asarray(v, dtype=np.float64) for k, v in self.channels.items()}
        n = len(self.timestamps)
        for name, values in self.channels.items():
            if len(values) != n:
                raise ValidationError(f"channel {name!r} has {len(values)} values for {n} timestamps")
            if not np.all(np.isfinite(values)):
                raise ValidationError(f"channel {name!r} contains non-finite values")

    def __len__(self):
        return len(self.timestamps)

    def matrix(self, names=None) -> np.ndarray:
        names = list(self.channels) if names is None else names
        return np.stack([self.channels[n] for n in names]) if names else np.zeros((0, len(self)))


# mode -> (max speed m/s, max |accel| m/s^2)
ModeLimits = dict


def validate_limits(limits: ModeLimits) -> ModeLimits:
    for mode, (speed, accel) in limits.items():
        if not (speed > 0 and accel > 0):
            raise ValidationError(f"limits for {mode!r} must be strictly positive")
    return limits


def haversine_distance(p1: GpsPoint, p2: GpsPoint) -> float:
    return float(haversine_array(p1.latitude, p1.longitude, p2.latitude, p2.longitude))


def haversine_array(lat1, lon1, lat2, lon2):
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def compute_point_features(tripleg: Tripleg) -> FeatureSeries:
    """Speed and acceleration per fix, both of length n - 1.

    Acceleration has one natural value fewer than speed; its last value is
    repeated so the channels align.
    """
    pts = tripleg.points
    if len(pts) < 3:
        raise TooShortError(f"tripleg has {len(pts)} points, at least 3 are needed")
    lat = np.array([p.latitude for p in pts])
    lon = np.array([p.longitude for p in pts])
    t = np.array([p.timestamp for p in pts])
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValidationError("timestamps must be strictly increasing")
    speed = haversine_array(lat[:-1], lon[:-1], lat[1:], lon[1:]) / dt
    accel = np.diff(speed) / dt[:-1]
    accel = np.append(accel, accel[-1])
    return FeatureSeries(t[:-1], {"speed": speed, "accel": accel}, tripleg.mode)


def remove_unrealistic(series: FeatureSeries, limits: ModeLimits) -> FeatureSeries:
    if series.mode not in limits:
        raise ConfigError(f"no speed/acceleration limits configured for mode {series.mode!r}")
    max_speed, max_accel = limits[series.mode]
    keep = np.ones(len(series), dtype=bool)
    if "speed" in series.channels:
        keep &= series.channels["speed"] <= max_speed
    if "accel" in series.channels:
        keep &= np.abs(series.channels["accel"]) <= max_accel
    return FeatureSeries(series.timestamps[keep],
                         {k: v[keep] for k, v in series.channels.items()}, series.mode)


def resample_uniform(series: FeatureSeries, period: float = 2.0) -> FeatureSeries:
    """Linear interpolation of every channel onto t0, t0 + period, ... <= t_last."""
    if len(series) < 2:
        raise TooShortError("resampling needs at least 2 timesteps")
    t = series.timestamps
    n = int(math.floor((t[-1] - t[0]) / period + 1e-9)) + 1
    grid = t[0] + period * np.arange(n)
    return FeatureSeries(grid, {k: np.interp(grid, t, v) for k, v in series.channels.items()},
                         series.mode)


def accel_norm(ax, ay, az) -> np.ndarray:
    ax, ay, az = (np.asarray(a, dtype=np.float64) for a in (ax, ay, az))
    if not (ax.shape == ay.shape == az.shape):
        raise ValidationError(f"axis lengths differ: {ax.shape}, {ay.shape}, {az.shape}")
    return np.sqrt(ax * ax + ay * ay + az * az)


def degrade_segment(segment, keep_fraction: float, rng=None):
    """Keep the first ceil(keep_fraction * L) timesteps of an unpadded segment.

    ``rng`` is accepted for call-site symmetry with samplers; the cut itself
    is deterministic once the fraction is drawn.
    """
    if not 0.1 <= keep_fraction <= 1.0:
        raise ValidationError(f"keep_fraction {keep_fraction} outside [0.1, 1]")
    n = max(1, math.ceil(keep_fraction * segment.true_length - 1e-9))
    return replace(segment, data=segment.data[:, :n].copy(), true_length=n)


def tripleg_features(tripleg: Tripleg, limits: ModeLimits, period: float = 2.0) -> FeatureSeries:
    """Full GPS chain: speed/accel, threshold cleaning, uniform resampling."""
    series = remove_unrealistic(compute_point_features(tripleg), limits)
    return resample_uniform(series, period)
