"""Stop-and-go wave analysis: propagation speed and wavelet periods."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks

from .macrofield import FTPS_TO_MPH, MacroField, edie_field

MORLET_W0 = 5.0
PERIOD_PER_SCALE = 2.0 * np.pi / MORLET_W0
ANALYSIS_DT = 5.0
ANALYSIS_DX = 100.0


class WaveError(ValueError):
    pass


class InsufficientDataError(WaveError):
    pass


class NoWaveDetected(WaveError):
    pass


class NoDominantPeriod(WaveError):
    pass


@dataclass(frozen=True)
class SpeedSeries:
    x: float
    t: np.ndarray
    v: np.ndarray
    gaps: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else ANALYSIS_DT

    @property
    def gap_fraction(self) -> float:
        return float(self.gaps.mean()) if len(self.gaps) else 0.0


def extract_speed_series(source, x_location: float, dx: float = ANALYSIS_DX,
                         dt: float = ANALYSIS_DT, max_gap_fraction: float = 0.5,
                         **field_kw) -> SpeedSeries:
    """Edie speed of the column containing ``x_location``, gaps interpolated."""
    fld = source if isinstance(source, MacroField) else edie_field(source, dx, dt, **field_kw)
    i = fld.column(x_location)
    v = fld.v[i].copy()
    gaps = np.isnan(v)
    if gaps.mean() > max_gap_fraction:
        raise InsufficientDataError(
            f"{gaps.mean():.0%} of bins at x = {x_location} are empty")
    if gaps.any():
        tc = fld.t_centers
        v[gaps] = np.interp(tc[gaps], tc[~gaps], v[~gaps])
    return SpeedSeries(float(x_location), fld.t_centers.copy(), v, gaps)


def _values(s):
    return s.v if isinstance(s, SpeedSeries) else np.asarray(s, dtype=np.float64)


def cross_correlation(a, b, max_lag: int) -> tuple:
    """Pearson correlation of ``a[n]`` with ``b[n + k]`` over the overlap at each lag.

    Normalising per lag (rather than by the full-series norms) avoids the
    ``1 - |k| / n`` taper that would pull peaks toward zero lag.
    """
    a = _values(a).astype(np.float64)
    b = _values(b).astype(np.float64)
    if len(a) != len(b):
        raise WaveError("series must share a time grid")
    a = a - a.mean()
    b = b - b.mean()
    if not (np.any(a) and np.any(b)):
        raise NoWaveDetected("a series is constant")
    n = len(a)
    max_lag = min(max_lag, n - 2)
    lags = np.arange(-max_lag, max_lag + 1)
    sxy = np.correlate(b, a, mode="full")[n - 1 + lags]
    ca = np.concatenate(([0.0], np.cumsum(a)))
    cb = np.concatenate(([0.0], np.cumsum(b)))
    ca2 = np.concatenate(([0.0], np.cumsum(a * a)))
    cb2 = np.concatenate(([0.0], np.cumsum(b * b)))
    # overlap: a[i0:i1] pairs with b[i0 + k:i1 + k]
    i0 = np.maximum(0, -lags)
    i1 = np.minimum(n, n - lags)
    m = i1 - i0
    sa, sb = ca[i1] - ca[i0], cb[i1 + lags] - cb[i0 + lags]
    va = ca2[i1] - ca2[i0] - sa * sa / m
    vb = cb2[i1 + lags] - cb2[i0 + lags] - sb * sb / m
    cov = sxy - sa * sb / m
    with np.errstate(invalid="ignore", divide="ignore"):
        r = cov / np.sqrt(va * vb)
    return lags, np.where((va > 0) & (vb > 0), r, 0.0)


def wave_lag(a, b, dt: float, max_lag_s: float = 180.0, prominence: float = 0.2) -> float:
    """Delay (s) of ``b`` relative to ``a`` at the nearest non-trivial peak."""
    va, vb = _values(a), _values(b)
    for v in (va, vb):
        if np.std(v) <= 1e-9 * max(1.0, abs(np.mean(v))):
            raise NoWaveDetected("series has no fluctuation")
    lags, r = cross_correlation(va, vb, int(round(max_lag_s / dt)))
    peaks, _ = find_peaks(r, prominence=prominence)
    peaks = [p for p in peaks if lags[p] != 0 and r[p] > 0]
    if not peaks:
        raise NoWaveDetected("no correlation peak above the prominence threshold away from zero lag")
    p = min(peaks, key=lambda p: (abs(lags[p]), -r[p], -lags[p]))
    # parabolic refinement
    off = 0.0
    if 0 < p < len(r) - 1:
        y0, y1, y2 = r[p - 1], r[p], r[p + 1]
        den = y0 - 2 * y1 + y2
        if den < 0:
            off = 0.5 * (y0 - y2) / den
    return (lags[p] + off) * dt


def wave_speed_crosscorr(series_a, series_b, separation_ft: float, dt: float | None = None,
                         max_lag_s: float = 180.0, prominence: float = 0.2) -> float:
    """Wave speed (mph) from the delay between two speed series.

    ``series_b`` is ``separation_ft`` upstream of ``series_a``; a positive
    result is a wave travelling upstream.
    """
    if not separation_ft > 0:
        raise WaveError("separation must be positive")
    if dt is None:
        dt = series_a.dt if isinstance(series_a, SpeedSeries) else ANALYSIS_DT
    lag = wave_lag(series_a, series_b, dt, max_lag_s, prominence)
    return separation_ft / lag * FTPS_TO_MPH


@dataclass(frozen=True)
class WaveSpeedResult:
    mean: float
    std: float
    speeds: np.ndarray
    pairs: tuple
    dropped: int


def wave_speed_distribution(fld: MacroField, n_pairs: int = 20, seed: int = 0,
                            separation=(400.0, 1000.0), direction: int | None = None,
                            max_lag_s: float = 180.0, prominence: float = 0.2) -> WaveSpeedResult:
    """Seeded random location pairs; mean and std (mph) of per-pair speeds."""
    if n_pairs < 2:
        raise WaveError("need at least 2 location pairs")
    d = direction if direction is not None else (fld.tag.get("direction") or 1)
    rng = np.random.default_rng(seed)
    lo, hi = fld.x0 + 0.5 * fld.dx, fld.x_edges[-1] - 0.5 * fld.dx
    if hi - lo <= separation[0]:
        raise WaveError("field is shorter than the minimum pair separation")
    speeds, pairs, dropped = [], [], 0
    for _ in range(n_pairs):
        sep = rng.uniform(separation[0], min(separation[1], hi - lo))
        x_up = rng.uniform(lo, hi - sep) if d > 0 else rng.uniform(lo + sep, hi)
        x_down = x_up + d * sep
        try:
            a = extract_speed_series(fld, x_down)
            b = extract_speed_series(fld, x_up)
            sep_bins = abs(fld.column(x_down) - fld.column(x_up)) * fld.dx
            speeds.append(wave_speed_crosscorr(a, b, sep_bins, max_lag_s=max_lag_s,
                                               prominence=prominence))
            pairs.append((float(x_down), float(x_up)))
        except (NoWaveDetected, InsufficientDataError):
            dropped += 1
    if not speeds:
        raise NoWaveDetected(f"no wave detected at any of {n_pairs} location pairs")
    s = np.array(speeds)
    return WaveSpeedResult(float(s.mean()), float(s.std(ddof=1)) if len(s) > 1 else 0.0,
                           s, tuple(pairs), dropped)


# --------------------------------------------------------------------------
# wavelets

def morlet(t) -> np.ndarray:
    """Real Morlet mother wavelet ``exp(-t**2 / 2) cos(5 t)``."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-0.5 * t * t) * np.cos(MORLET_W0 * t)


def period_to_scale(period):
    return np.asarray(period, dtype=np.float64) / PERIOD_PER_SCALE


def scale_grid(spec: str = "log:64", period_min: float = 30.0, period_max: float = 1200.0):
    """Scales (s) from ``log:N`` or ``lin:N`` over a period range given in seconds."""
    kind, _, n = spec.partition(":")
    n = int(n or 64)
    if kind == "log":
        periods = np.geomspace(period_min, period_max, n)
    elif kind == "lin":
        periods = np.linspace(period_min, period_max, n)
    else:
        raise WaveError(f"unknown scale grid {spec!r}")
    return period_to_scale(periods)


@dataclass(frozen=True)
class Scaleogram:
    scales: np.ndarray
    times: np.ndarray
    coef: np.ndarray          # (n_scales, n_times), real coefficients
    valid: np.ndarray         # False inside the edge cone or for unresolved scales
    resolved: np.ndarray      # per-scale: scale >= 2 sample intervals
    period_factor: float = PERIOD_PER_SCALE

    @property
    def power(self) -> np.ndarray:
        return self.coef ** 2

    @property
    def periods(self) -> np.ndarray:
        return self.scales * self.period_factor


def cwt_morlet(series, scales, dt: float | None = None, times=None, support: float = 6.0
               ) -> Scaleogram:
    """Direct-convolution continuous wavelet transform with the real Morlet.

    ``X(a, b) = a**-0.5 * sum_n x(t_n) psi((t_n - b) / a) dt`` after removing
    the series mean, with zero padding beyond the ends.
    """
    x = _values(series)
    if dt is None:
        dt = series.dt if isinstance(series, SpeedSeries) else 1.0
    if times is None:
        times = series.t if isinstance(series, SpeedSeries) else dt * np.arange(len(x))
    scales = np.asarray(scales, dtype=np.float64)
    if np.any(scales <= 0):
        raise WaveError("scales must be positive")
    x = x - x.mean()
    n = len(x)
    coef = np.full((len(scales), n), np.nan)
    resolved = scales >= 2 * dt
    edge = np.minimum(np.arange(n), np.arange(n)[::-1]) * dt
    valid = np.zeros((len(scales), n), dtype=bool)
    for i, a in enumerate(scales):
        if not resolved[i]:
            continue
        half = int(math.ceil(support * a / dt))
        k = np.arange(-half, half + 1)
        kern = morlet(k * dt / a) * dt / math.sqrt(a)
        full = np.convolve(x, kern[::-1], mode="full")
        coef[i] = full[half:half + n]
        valid[i] = edge >= math.sqrt(2.0) * a
    return Scaleogram(scales, np.asarray(times, dtype=np.float64), coef, valid, resolved)


def dominant_period(sg: Scaleogram, time_window=None, flat_ratio: float = 1.5) -> float:
    """Period (minutes) of the scale with the largest mean power in the window."""
    tmask = np.ones(len(sg.times), dtype=bool)
    if time_window is not None:
        t0, t1 = time_window
        if t0 < sg.times[0] - 1e-9 or t1 > sg.times[-1] + 1e-9 or t1 <= t0:
            raise WaveError("time window outside the scaleogram")
        tmask = (sg.times >= t0) & (sg.times <= t1)
    m = sg.valid & tmask[None, :]
    usable = m.any(axis=1)
    if not usable.any():
        raise NoDominantPeriod("no scale is free of edge effects inside the window")
    power = np.where(m, np.nan_to_num(sg.power), 0.0)
    mean_power = power.sum(axis=1)[usable] / m.sum(axis=1)[usable]
    med = np.median(mean_power)
    best = int(np.argmax(mean_power))
    if not mean_power[best] > 0 or (med > 0 and mean_power[best] / med < flat_ratio):
        raise NoDominantPeriod("scaleogram power is flat")
    return float(sg.periods[usable][best] / 60.0)


@dataclass(frozen=True)
class WaveProperties:
    speed_mean: float
    speed_std: float
    period_min: float
    fluctuation_mph: float


def wave_properties(fld: MacroField, x_location: float, time_window, n_pairs: int = 20,
                    seed: int = 0, scales=None) -> WaveProperties:
    """Wave speed, dominant period and speed range over an event window."""
    t0, t1 = time_window
    cols = (fld.t_edges[:-1] >= t0 - 1e-9) & (fld.t_edges[1:] <= t1 + 1e-9)
    if not cols.any():
        raise WaveError("time window contains no bins")
    j = np.flatnonzero(cols)
    sub = MacroField(fld.x0, fld.t_edges[j[0]], fld.dx, fld.dt, fld.d[:, j], fld.t[:, j], dict(fld.tag))
    dist = wave_speed_distribution(sub, n_pairs, seed)
    series = extract_speed_series(fld, x_location)
    sg = cwt_morlet(series, scale_grid() if scales is None else scales)
    period = dominant_period(sg, (series.t[j[0]], series.t[j[-1]]))
    v = series.v[j] * FTPS_TO_MPH
    return WaveProperties(dist.mean, dist.std, period, float(v.max() - v.min()))
