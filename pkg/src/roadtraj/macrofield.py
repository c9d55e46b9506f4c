"""Edie aggregation of trajectories onto a space-time grid.

Each inter-sample segment is split exactly where it crosses bin borders, so
the per-bin distance and time totals add up to the trajectory totals.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

FT_PER_MILE = 5280.0
S_PER_HOUR = 3600.0
FTPS_TO_MPH = S_PER_HOUR / FT_PER_MILE
EMPTY_TIME = 1e-6
DEFAULT_DX = 100.0
DEFAULT_DT = 30.0
DEFAULT_LANE_WIDTH = 12.0
GAP_RGBA = (0.55, 0.55, 0.55, 1.0)


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class MacroField:
    """Edie accumulators on an ``(nx, nt)`` grid; ``d`` in ft, ``t`` in s."""

    x0: float
    t0: float
    dx: float
    dt: float
    d: np.ndarray
    t: np.ndarray
    tag: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.d.shape

    @property
    def area(self) -> float:
        return self.dx * self.dt

    @property
    def x_edges(self):
        return self.x0 + self.dx * np.arange(self.shape[0] + 1)

    @property
    def t_edges(self):
        return self.t0 + self.dt * np.arange(self.shape[1] + 1)

    @property
    def x_centers(self):
        return self.x0 + self.dx * (np.arange(self.shape[0]) + 0.5)

    @property
    def t_centers(self):
        return self.t0 + self.dt * (np.arange(self.shape[1]) + 0.5)

    @property
    def nonempty(self) -> np.ndarray:
        return self.t >= EMPTY_TIME

    @property
    def v(self) -> np.ndarray:
        """Space-mean speed d/t (ft/s); NaN where the bin is empty."""
        out = np.full(self.shape, np.nan)
        m = self.nonempty
        out[m] = self.d[m] / self.t[m]
        return out

    @property
    def k(self) -> np.ndarray:
        """Density t/|A| (veh/ft)."""
        return self.t / self.area

    @property
    def q(self) -> np.ndarray:
        """Flow (veh/s); equal to ``k * v`` bin by bin where nonempty."""
        out = self.d / self.area
        m = self.nonempty
        out[m] = self.k[m] * self.v[m]
        return out

    def column(self, x) -> int:
        i = int(math.floor((x - self.x0) / self.dx))
        if not 0 <= i < self.shape[0]:
            raise FieldError(f"x = {x} outside field [{self.x0}, {self.x_edges[-1]})")
        return i

    def coarsen(self, fx: int, ft: int) -> "MacroField":
        nx, nt = self.shape
        if nx % fx or nt % ft:
            raise FieldError("grid is not divisible by the coarsening factors")
        d = self.d.reshape(nx // fx, fx, nt // ft, ft).sum(axis=(1, 3))
        t = self.t.reshape(nx // fx, fx, nt // ft, ft).sum(axis=(1, 3))
        return MacroField(self.x0, self.t0, self.dx * fx, self.dt * ft, d, t, dict(self.tag))

    def __add__(self, other: "MacroField") -> "MacroField":
        if (self.x0, self.t0, self.dx, self.dt, self.shape) != (other.x0, other.t0, other.dx, other.dt, other.shape):
            raise FieldError("fields are on different grids")
        return MacroField(self.x0, self.t0, self.dx, self.dt, self.d + other.d, self.t + other.t, {})


def lane_of(y, direction, lane_width: float = DEFAULT_LANE_WIDTH):
    """1-based lane index counted outward from the median."""
    if not lane_width > 0:
        raise FieldError("lane width must be positive")
    y = np.asarray(y, dtype=np.float64)
    direction = np.asarray(direction)
    if np.any(y * direction < 0):
        raise FieldError("lateral position on the wrong side for the direction of travel")
    lane = np.floor(np.abs(y) / lane_width).astype(np.int64) + 1
    return int(lane) if lane.ndim == 0 else lane


def _segments(dataset, direction=None, lane=None, lane_width=DEFAULT_LANE_WIDTH, max_gap=None):
    ta, tb, xa, xb = [], [], [], []
    for tr in dataset:
        if direction is not None and tr.direction != direction:
            continue
        t, x, y = tr.timestamps, tr.x_positions, tr.y_positions
        if len(t) < 2:
            continue
        keep = np.ones(len(t) - 1, dtype=bool)
        if max_gap is not None:
            keep &= np.diff(t) <= max_gap
        if lane is not None:
            ym = 0.5 * (y[:-1] + y[1:])
            keep &= np.floor(np.abs(ym) / lane_width).astype(np.int64) + 1 == lane
        ta.append(t[:-1][keep])
        tb.append(t[1:][keep])
        xa.append(x[:-1][keep])
        xb.append(x[1:][keep])
    if not ta:
        return (np.zeros(0),) * 4
    return tuple(np.concatenate(a) for a in (ta, tb, xa, xb))


def _crossings(a, b, origin, step):
    """Parameters in (0, 1) where linear a->b crosses lines origin + k*step."""
    ia = np.floor((a - origin) / step)
    ib = np.floor((b - origin) / step)
    lo = np.minimum(ia, ib)
    count = np.abs(ib - ia).astype(np.int64)
    seg = np.repeat(np.arange(len(a)), count)
    if len(seg) == 0:
        return seg, np.zeros(0)
    first = np.cumsum(count) - count
    k = np.arange(len(seg)) - np.repeat(first, count)
    line = origin + (np.repeat(lo, count) + 1 + k) * step
    lam = (line - a[seg]) / (b[seg] - a[seg])
    return seg, lam


def edie_field(dataset, dx: float = DEFAULT_DX, dt: float = DEFAULT_DT, *, direction=None,
               lane=None, lane_width: float = DEFAULT_LANE_WIDTH, x_range=None, t_range=None,
               max_gap=None) -> MacroField:
    """Aggregate trajectories with Edie's definitions.

    ``x_range``/``t_range`` fix the grid; by default it is the data extent
    snapped outward to multiples of ``dx`` and ``dt``.  Pieces outside the
    grid are dropped.  ``max_gap`` skips segments longer than that many
    seconds, so missing data stays visible as empty bins.
    """
    if not (dx > 0 and dt > 0):
        raise FieldError("dx and dt must be positive")
    ta, tb, xa, xb = _segments(dataset, direction, lane, lane_width, max_gap)
    tag = {"direction": direction, "lane": lane}
    if x_range is None:
        if len(xa) == 0:
            x_range = (0.0, dx)
        else:
            lo, hi = min(xa.min(), xb.min()), max(xa.max(), xb.max())
            x_range = (math.floor(lo / dx) * dx, (math.floor(hi / dx) + 1) * dx)
    if t_range is None:
        if len(ta) == 0:
            t_range = (0.0, dt)
        else:
            t_range = (math.floor(ta.min() / dt) * dt, (math.floor(tb.max() / dt) + 1) * dt)
    x0, t0 = float(x_range[0]), float(t_range[0])
    nx = int(round((x_range[1] - x0) / dx))
    nt = int(round((t_range[1] - t0) / dt))
    if nx <= 0 or nt <= 0:
        raise FieldError("empty grid extent")
    d_acc = np.zeros(nx * nt)
    t_acc = np.zeros(nx * nt)
    if len(ta):
        sx, lx = _crossings(xa, xb, x0, dx)
        st, lt = _crossings(ta, tb, t0, dt)
        n = len(ta)
        seg = np.concatenate([np.arange(n), np.arange(n), sx, st])
        lam = np.concatenate([np.zeros(n), np.ones(n), lx, lt])
        order = np.lexsort((lam, seg))
        seg, lam = seg[order], lam[order]
        same = seg[1:] == seg[:-1]
        s = seg[:-1][same]
        l0, l1 = lam[:-1][same], lam[1:][same]
        frac = l1 - l0
        lm = 0.5 * (l0 + l1)
        xm = xa[s] + lm * (xb[s] - xa[s])
        tm = ta[s] + lm * (tb[s] - ta[s])
        ix = np.floor((xm - x0) / dx).astype(np.int64)
        it = np.floor((tm - t0) / dt).astype(np.int64)
        ok = (ix >= 0) & (ix < nx) & (it >= 0) & (it < nt) & (frac > 0)
        flat = ix[ok] * nt + it[ok]
        d_acc += np.bincount(flat, weights=np.abs(xb[s] - xa[s])[ok] * frac[ok], minlength=nx * nt)
        t_acc += np.bincount(flat, weights=(tb[s] - ta[s])[ok] * frac[ok], minlength=nx * nt)
    return MacroField(x0, t0, float(dx), float(dt), d_acc.reshape(nx, nt), t_acc.reshape(nx, nt), tag)


def trajectory_totals(dataset, direction=None, lane=None, lane_width=DEFAULT_LANE_WIDTH,
                      max_gap=None):
    """Total distance travelled and time spent, summed over segments."""
    ta, tb, xa, xb = _segments(dataset, direction, lane, lane_width, max_gap)
    return float(np.sum(np.abs(xb - xa))), float(np.sum(tb - ta))


def lane_fields(dataset, n_lanes: int, dx=DEFAULT_DX, dt=DEFAULT_DT, direction=None,
                lane_width=DEFAULT_LANE_WIDTH, **kw) -> dict:
    """Per-lane fields on a common grid (taken from the all-lane field)."""
    base = edie_field(dataset, dx, dt, direction=direction, lane_width=lane_width, **kw)
    kw.pop("x_range", None)
    kw.pop("t_range", None)
    rng = dict(x_range=(base.x0, base.x_edges[-1]), t_range=(base.t0, base.t_edges[-1]))
    return {ln: edie_field(dataset, dx, dt, direction=direction, lane=ln, lane_width=lane_width,
                           **rng, **kw) for ln in range(1, n_lanes + 1)}


# --------------------------------------------------------------------------
# fundamental diagram

@dataclass(frozen=True)
class FDPoint:
    k: float       # veh/mi
    q: float       # veh/hr
    v: float       # mph
    x: float
    t: float
    region: str = "reference"


def fundamental_diagram_points(fld: MacroField, region, tag: str = "reference") -> list:
    """One point per nonempty bin whose centre lies in ``(x_lo, x_hi, t_lo, t_hi)``."""
    x_lo, x_hi, t_lo, t_hi = region
    if (x_lo < fld.x0 - 1e-9 or x_hi > fld.x_edges[-1] + 1e-9 or t_lo < fld.t0 - 1e-9
            or t_hi > fld.t_edges[-1] + 1e-9 or x_hi <= x_lo or t_hi <= t_lo):
        raise FieldError("region is not inside the field")
    xi = np.flatnonzero((fld.x_centers >= x_lo) & (fld.x_centers < x_hi))
    ti = np.flatnonzero((fld.t_centers >= t_lo) & (fld.t_centers < t_hi))
    m = fld.nonempty
    v, k, q = fld.v, fld.k, fld.q
    pts = []
    for i in xi:
        for j in ti:
            if m[i, j]:
                pts.append(FDPoint(k[i, j] * FT_PER_MILE, q[i, j] * S_PER_HOUR,
                                   v[i, j] * FTPS_TO_MPH, float(fld.x_centers[i]),
                                   float(fld.t_centers[j]), tag))
    return pts


# --------------------------------------------------------------------------
# export and rendering

CSV_HEADER = "x_bin_start,t_bin_start,d_ft,t_s,v_ftps,q_vph,k_vpm"


def field_to_csv(fld: MacroField) -> str:
    buf = io.StringIO()
    tag = ",".join(f"{k}={v}" for k, v in sorted(fld.tag.items()) if v is not None)
    buf.write(f"# dx={fld.dx!r},dt={fld.dt!r},x0={fld.x0!r},t0={fld.t0!r},"
              f"nx={fld.shape[0]},nt={fld.shape[1]}" + (f",{tag}" if tag else "") + "\n")
    buf.write(CSV_HEADER + "\n")
    v, q, k = fld.v, fld.q * S_PER_HOUR, fld.k * FT_PER_MILE
    xe, te = fld.x_edges, fld.t_edges
    for i in range(fld.shape[0]):
        for j in range(fld.shape[1]):
            vv = "" if np.isnan(v[i, j]) else repr(float(v[i, j]))
            buf.write(f"{float(xe[i])!r},{float(te[j])!r},{float(fld.d[i, j])!r},"
                      f"{float(fld.t[i, j])!r},{vv},{float(q[i, j])!r},{float(k[i, j])!r}\n")
    return buf.getvalue()


def field_from_csv(text: str) -> MacroField:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FieldError("field CSV must start with a '# dx=..,dt=..' line")
    meta = dict(kv.split("=", 1) for kv in lines[0][1:].strip().split(","))
    nx, nt = int(meta["nx"]), int(meta["nt"])
    d = np.zeros(nx * nt)
    t = np.zeros(nx * nt)
    rows = [ln for ln in lines[2:] if ln.strip()]
    if len(rows) != nx * nt:
        raise FieldError(f"expected {nx * nt} rows, found {len(rows)}")
    for n, ln in enumerate(rows):
        parts = ln.split(",")
        d[n] = float(parts[2])
        t[n] = float(parts[3])
    tag = {}
    for key in ("direction", "lane"):
        if key in meta:
            tag[key] = int(meta[key])
    return MacroField(float(meta["x0"]), float(meta["t0"]), float(meta["dx"]), float(meta["dt"]),
                      d.reshape(nx, nt), t.reshape(nx, nt), tag)


def speed_rgba(fld: MacroField, cmap: str = "RdYlGn", vmin: float = 0.0, vmax: float = 80.0,
               gap_color=GAP_RGBA) -> np.ndarray:
    """``(nx, nt, 4)`` colours of bin speed in mph; empty bins get ``gap_color``."""
    from matplotlib import colormaps

    mph = fld.v * FTPS_TO_MPH
    norm = np.clip((mph - vmin) / (vmax - vmin), 0.0, 1.0)
    rgba = colormaps[cmap](np.nan_to_num(norm))
    rgba[~fld.nonempty] = gap_color
    return rgba


def raster_timespace(source, resolution=(DEFAULT_DX, DEFAULT_DT), cmap: str = "RdYlGn",
                     vmin: float = 0.0, vmax: float = 80.0, path=None, csv_path=None, **kw):
    """Speed-coloured time-space raster; returns ``(rgba, field)``.

    ``source`` is a dataset or a :class:`MacroField`.  Rows of ``rgba`` run
    along x (increasing), columns along time.  Image files put increasing x
    at the top.
    """
    if isinstance(source, MacroField):
        fld = source
    else:
        fld = edie_field(source, resolution[0], resolution[1], **kw)
    if fld.shape[0] == 0 or fld.shape[1] == 0 or fld.dx <= 0 or fld.dt <= 0:
        raise FieldError("zero-area extent")
    rgba = speed_rgba(fld, cmap, vmin, vmax)
    if path is not None:
        _save_image(rgba, fld, path, cmap, vmin, vmax)
    if csv_path is not None:
        with open(csv_path, "w") as fh:
            fh.write(field_to_csv(fld))
    return rgba, fld


def _save_image(rgba, fld, path, cmap, vmin, vmax):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.cm import ScalarMappable
    from matplotlib.colors import Normalize

    fig, ax = plt.subplots(figsize=(10, 4.5), dpi=120)
    ext = [fld.t0, fld.t_edges[-1], fld.x0 / FT_PER_MILE, fld.x_edges[-1] / FT_PER_MILE]
    ax.imshow(rgba, origin="lower", aspect="auto", extent=ext, interpolation="nearest")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("x (mi)")
    fig.colorbar(ScalarMappable(Normalize(vmin, vmax), cmap), ax=ax, label="speed (mph)")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)
