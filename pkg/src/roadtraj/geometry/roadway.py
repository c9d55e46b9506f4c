"""Curvilinear roadway frame and conversions to state-plane boxes.

Roadway coordinates measure ``x`` as arc length along the median centerline
and ``y`` as signed perpendicular offset, positive on the eastbound side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import make_interp_spline

from .spline import QuadraticSpline

FEET_PER_MILE = 5280.0
CORNER_NAMES = ("bbl", "bbr", "btl", "btr", "fbl", "fbr", "ftl", "ftr")
_BACK = [0, 1, 2, 3]
_FRONT = [4, 5, 6, 7]
_LEFT = [0, 2, 4, 6]
_RIGHT = [1, 3, 5, 7]
_BOTTOM = [0, 1, 4, 5]
_TOP = [2, 3, 6, 7]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)


class GeometryError(ValueError):
    pass


class GeometryRangeError(GeometryError):
    pass


class DegenerateOffsetError(GeometryError):
    pass


def _rot90(v):
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


class Centerline:
    """Arc-length parameterised median curve in state-plane feet.

    Subclasses provide ``point``, ``tangent``, ``curvature`` (signed, positive
    when turning left) and ``closest``.  ``positive_side`` says on which side
    of the direction of increasing ``x`` the positive ``y`` axis lies.
    """

    xr_min: float
    xr_max: float
    positive_side: str = "left"

    @property
    def side_sign(self) -> float:
        return 1.0 if self.positive_side == "left" else -1.0

    def normal(self, xr) -> np.ndarray:
        """Unit vector toward positive roadway ``y``."""
        return self.side_sign * _rot90(self.tangent(xr))

    def check_range(self, xr, tol: float = 1e-7):
        xr = np.asarray(xr, dtype=np.float64)
        bad = (xr < self.xr_min - tol) | (xr > self.xr_max + tol) | ~np.isfinite(xr)
        if np.any(bad):
            first = xr[bad].flat[0]
            raise GeometryRangeError(
                f"roadway x {first!r} outside [{self.xr_min}, {self.xr_max}]")
        return np.clip(xr, self.xr_min, self.xr_max)

    def radius(self, xr) -> np.ndarray:
        k = np.abs(self.curvature(xr))
        with np.errstate(divide="ignore"):
            return np.where(k > 0, 1.0 / k, np.inf)

    def to_stateplane(self, xr, yr) -> np.ndarray:
        """Roadway points to state-plane points, shape ``(..., 2)``."""
        xr = self.check_range(xr)
        yr = np.asarray(yr, dtype=np.float64)
        kappa = self.curvature(xr) * self.side_sign
        if np.any(yr * kappa >= 1.0):
            raise DegenerateOffsetError("lateral offset reaches the local radius of curvature")
        return self.point(xr) + yr[..., None] * self.normal(xr)

    def to_roadway(self, pts):
        """State-plane points ``(..., 2)`` to ``(xr, yr)`` arrays."""
        pts = np.asarray(pts, dtype=np.float64)
        xr = self.closest(pts)
        yr = np.einsum("...i,...i->...", pts - self.point(xr), self.normal(xr))
        return xr, yr


class RoadwayGeometry(Centerline):
    """Centerline built from parametric quadratic splines through control points.

    ``X(u)`` and ``Y(u)`` are interpolated against cumulative chord length
    ``u``, so accuracy does not depend on the heading of the road in the
    state-plane frame.  Roadway ``x`` is arc length of that curve, anchored
    so that control point ``anchor_index`` sits exactly at ``anchor_xr``.
    State-plane x must be strictly monotone along the control points (the
    initial-guess spline is a function of it).
    """

    def __init__(self, control_points, anchor_index: int = 0, anchor_xr: float = 0.0,
                 positive_side: str = "left", min_spacing: float = 200.0,
                 seed_spacing: float = 50.0):
        pts = np.asarray(control_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GeometryError("control points must be an (n, 2) array")
        if len(pts) < 3:
            raise GeometryError("need at least 3 control points")
        if positive_side not in ("left", "right"):
            raise GeometryError("positive_side must be 'left' or 'right'")
        dx = np.diff(pts[:, 0])
        if np.all(dx > 0):
            sigma = 1.0
        elif np.all(dx < 0):
            sigma = -1.0
        else:
            raise GeometryError("state-plane x of the control points must be strictly monotone")
        spacing = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(spacing < min_spacing):
            raise GeometryError(
                f"control points closer than {min_spacing} ft (min {spacing.min():.1f})")
        if not 0 <= anchor_index < len(pts):
            raise GeometryError("anchor_index out of range")

        self.control_points = pts
        self.anchor_index = int(anchor_index)
        self.anchor_xr = float(anchor_xr)
        self.positive_side = positive_side
        self.min_spacing = float(min_spacing)
        self._sigma = sigma
        u_data = np.concatenate(([0.0], np.cumsum(spacing)))
        u_anchor = u_data[self.anchor_index]
        self._fx = QuadraticSpline(u_data, pts[:, 0]).split(u_anchor)
        self._fy = QuadraticSpline(u_data, pts[:, 1]).split(u_anchor)
        self._b = self._fx.x
        self._n = self._fx.n_pieces
        piece_len = np.array([self._arc(i, self._b[i + 1]) for i in range(self._n)])
        cum = np.concatenate(([0.0], np.cumsum(piece_len)))
        # breakpoint arc lengths relative to the anchor, which is itself a breakpoint
        k_anchor = int(np.flatnonzero(self._b == u_anchor)[0])
        self._knot_s = cum - cum[k_anchor]
        self.xr_min = self.anchor_xr + self._knot_s[0]
        self.xr_max = self.anchor_xr + self._knot_s[-1]

        n_seed = max(int(np.ceil((self.xr_max - self.xr_min) / seed_spacing)), 4) + 1
        s = np.linspace(self.xr_min, self.xr_max, n_seed)
        x_st = sigma * self.point(s)[:, 0]
        if np.any(np.diff(x_st) <= 0):
            raise GeometryError("centerline doubles back in state-plane x between control points")
        self._seed_spline = make_interp_spline(x_st, s, k=3)

    # -- arc length --------------------------------------------------------
    def _speed(self, u, piece):
        return np.hypot(self._fx(u, 1, piece=piece), self._fy(u, 1, piece=piece))

    def _arc(self, piece, u_end) -> np.ndarray:
        """Arc length from the start of ``piece`` to ``u_end`` (vectorised)."""
        piece = np.asarray(piece)
        u0 = self._b[piece]
        u_end = np.asarray(u_end, dtype=np.float64)
        half = 0.5 * (u_end - u0)
        nodes = (u0 + half)[..., None] + np.multiply.outer(half, _GL_NODES)
        speed = self._speed(nodes, piece[..., None])
        return half * np.sum(_GL_WEIGHTS * speed, axis=-1)

    def _u_of(self, xr):
        """Chord parameter and piece index at roadway x (Newton on arc length)."""
        xr = np.asarray(xr, dtype=np.float64)
        s = xr - self.anchor_xr
        i = np.clip(np.searchsorted(self._knot_s, s, side="right") - 1, 0, self._n - 1)
        target = s - self._knot_s[i]
        u0 = self._b[i]
        u = u0 + target / self._speed(u0, i)
        for _ in range(30):
            step = (self._arc(i, u) - target) / self._speed(u, i)
            u = u - step
            if np.all(np.abs(step) < 1e-12 * (1.0 + np.abs(u))):
                break
        return u, i

    # -- curve evaluation --------------------------------------------------
    def point(self, xr) -> np.ndarray:
        u, i = self._u_of(xr)
        return np.stack([self._fx(u, piece=i), self._fy(u, piece=i)], axis=-1)

    def tangent(self, xr) -> np.ndarray:
        u, i = self._u_of(xr)
        d = np.stack([self._fx(u, 1, piece=i), self._fy(u, 1, piece=i)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def curvature(self, xr) -> np.ndarray:
        u, i = self._u_of(xr)
        xp, yp = self._fx(u, 1, piece=i), self._fy(u, 1, piece=i)
        xpp, ypp = self._fx(u, 2, piece=i), self._fy(u, 2, piece=i)
        return (xp * ypp - yp * xpp) / np.hypot(xp, yp) ** 3

    def seed(self, x_st) -> np.ndarray:
        """Initial guess of roadway x for a state-plane x."""
        u = self._sigma * np.asarray(x_st, dtype=np.float64)
        return np.clip(self._seed_spline(u), self.xr_min, self.xr_max)

    def closest(self, pts, window: float = 300.0, tol: float = 1e-6) -> np.ndarray:
        """Roadway x of the centerline point nearest each state-plane point.

        Seeds from the x_st -> x_r spline, brackets within ``window`` ft and
        solves the stationarity condition ``(F(s) - p) . F'(s) = 0`` by
        safeguarded Newton iteration.
        """
        pts = np.asarray(pts, dtype=np.float64)
        shape = pts.shape[:-1]
        p = pts.reshape(-1, 2)
        s0 = self.seed(p[:, 0])
        lo = np.maximum(s0 - window, self.xr_min)
        hi = np.minimum(s0 + window, self.xr_max)

        def g(s):
            return np.einsum("ij,ij->i", self.point(s) - p, self.tangent(s))

        eps = 1e-9
        g_lo, g_hi = g(lo), g(hi)
        bad = (g_lo > eps) | (g_hi < -eps)
        if np.any(bad):
            # seed too far off (large offsets on steep sections): bracket the whole range
            lo = np.where(bad, self.xr_min, lo)
            hi = np.where(bad, self.xr_max, hi)
            bad = (g(lo) > eps) | (g(hi) < -eps)
        if np.any(bad):
            raise GeometryRangeError(
                f"{int(bad.sum())} point(s) have no closest centerline point inside the "
                f"geometry (nearest lies beyond the spline ends)")
        s = s0.copy()
        polish = 0
        for _ in range(100):
            r = self.point(s) - p
            t = self.tangent(s)
            gs = np.einsum("ij,ij->i", r, t)
            dg = 1.0 + self.curvature(s) * np.einsum("ij,ij->i", r, _rot90(t))
            lo = np.where(gs <= 0, s, lo)
            hi = np.where(gs >= 0, s, hi)
            newton = s - gs / np.where(dg > 1e-12, dg, np.nan)
            ok = np.isfinite(newton) & (newton >= lo) & (newton <= hi)
            s_new = np.where(ok, newton, 0.5 * (lo + hi))
            step = np.abs(s_new - s)
            s = s_new
            if np.all(step < tol):
                polish += 1
                if polish > 2:
                    break
        return s.reshape(shape)

    # -- persistence ---------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "control_points": self.control_points.tolist(),
            "anchor_index": self.anchor_index,
            "anchor_xr": self.anchor_xr,
            "positive_side": self.positive_side,
            "min_spacing": self.min_spacing,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RoadwayGeometry":
        anchor_xr = doc.get("anchor_xr")
        if anchor_xr is None and "anchor_postmile" in doc:
            anchor_xr = FEET_PER_MILE * float(doc["anchor_postmile"])
        return cls(doc["control_points"], anchor_index=doc.get("anchor_index", 0),
                   anchor_xr=anchor_xr or 0.0,
                   positive_side=doc.get("positive_side", "left"),
                   min_spacing=doc.get("min_spacing", 200.0))


def fit_centerline(control_points, anchor_index: int = 0, anchor_xr: float = 0.0,
                   positive_side: str = "left", min_spacing: float = 200.0) -> RoadwayGeometry:
    return RoadwayGeometry(control_points, anchor_index=anchor_index, anchor_xr=anchor_xr,
                           positive_side=positive_side, min_spacing=min_spacing)


def load_geometry(path) -> RoadwayGeometry:
    return RoadwayGeometry.from_json(json.loads(Path(path).read_text()))


class ArcCenterline(Centerline):
    """Exact circular-arc centerline, mostly useful as an analytic reference."""

    def __init__(self, center, radius: float, start_angle: float, arc_length: float,
                 clockwise: bool = False, anchor_xr: float = 0.0, positive_side: str = "left"):
        self.center = np.asarray(center, dtype=np.float64)
        self.R = float(radius)
        self.theta0 = float(start_angle)
        self.rho = -1.0 if clockwise else 1.0
        self.anchor_xr = float(anchor_xr)
        self.xr_min = self.anchor_xr
        self.xr_max = self.anchor_xr + float(arc_length)
        self.positive_side = positive_side

    def _phi(self, xr):
        return self.theta0 + self.rho * (np.asarray(xr, dtype=np.float64) - self.anchor_xr) / self.R

    def point(self, xr):
        phi = self._phi(xr)
        return self.center + self.R * np.stack([np.cos(phi), np.sin(phi)], axis=-1)

    def tangent(self, xr):
        phi = self._phi(xr)
        return self.rho * np.stack([-np.sin(phi), np.cos(phi)], axis=-1)

    def curvature(self, xr):
        return np.full(np.shape(xr), self.rho / self.R)

    def closest(self, pts):
        d = np.asarray(pts, dtype=np.float64) - self.center
        phi = np.arctan2(d[..., 1], d[..., 0])
        dphi = np.mod(self.rho * (phi - self.theta0) + np.pi, 2 * np.pi) - np.pi
        xr = self.anchor_xr + dphi * self.R
        return self.check_range(xr)


# --------------------------------------------------------------------------
# boxes

@dataclass(frozen=True)
class RoadwayBox:
    """Back-bottom-center roadway position and prism dimensions.

    Fields may be scalars or equal-shape arrays.  ``direction`` defaults to
    the sign of ``y`` (eastbound when ``y == 0``).
    """

    x: np.ndarray
    y: np.ndarray
    l: np.ndarray = 0.0
    w: np.ndarray = 0.0
    h: np.ndarray = 0.0
    direction: np.ndarray | None = None

    def __post_init__(self):
        for name in ("x", "y", "l", "w", "h"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.direction is None:
            object.__setattr__(self, "direction", np.where(self.y < 0, -1.0, 1.0))
        else:
            object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))

    def as_array(self) -> np.ndarray:
        """``[x, y, l, w, h]`` along the last axis."""
        return np.stack(np.broadcast_arrays(self.x, self.y, self.l, self.w, self.h), axis=-1)


@dataclass(frozen=True)
class StatePlaneBox:
    """Eight prism corners ``(..., 8, 3)`` ordered as :data:`CORNER_NAMES`."""

    corners: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64)
        if c.shape[-2:] != (8, 3):
            raise GeometryError("corners must have shape (..., 8, 3)")
        object.__setattr__(self, "corners", c)

    def __getattr__(self, name):
        if name in CORNER_NAMES:
            return self.corners[..., CORNER_NAMES.index(name), :]
        raise AttributeError(name)

    @property
    def back_center(self) -> np.ndarray:
        return self.corners[..., _BACK, :2].mean(axis=-2)

    @classmethod
    def from_footprint(cls, bottom, height) -> "StatePlaneBox":
        """Box from 4 ground points (bbl, bbr, fbl, fbr) lifted by ``height``."""
        bottom = np.asarray(bottom, dtype=np.float64)
        corners = np.zeros(bottom.shape[:-2] + (8, 3))
        corners[..., _BOTTOM, :2] = bottom[..., :, :2]
        corners[..., _TOP, :2] = bottom[..., :, :2]
        corners[..., _TOP, 2] = np.asarray(height)[..., None]
        return cls(corners)


def roadway_to_stateplane(box: RoadwayBox, geometry: Centerline) -> StatePlaneBox:
    """Corners of a roadway box in state-plane coordinates.

    Front corners lie ``l`` ahead along the local tangent for eastbound
    boxes and behind it for westbound ones; left/right are as seen from the
    rear of the vehicle.
    """
    xr, yr, l, w, h, d = np.broadcast_arrays(box.x, box.y, box.l, box.w, box.h, box.direction)
    oc = geometry.to_stateplane(xr, yr)
    t = geometry.tangent(xr)
    heading = d[..., None] * t
    left = -d[..., None] * geometry.normal(xr)
    half_w = 0.5 * w[..., None]
    corners = np.zeros(xr.shape + (8, 3))
    for k, name in enumerate(CORNER_NAMES):
        side = 1.0 if name[2] == "l" else -1.0
        xy = oc + side * half_w * left
        if name[0] == "f":
            xy = xy + l[..., None] * heading
        corners[..., k, :2] = xy
        if name[1] == "t":
            corners[..., k, 2] = h
    return StatePlaneBox(corners)


def _mean_dist(c, a, b):
    return np.linalg.norm(c[..., a, :] - c[..., b, :], axis=-1).mean(axis=-1)


def stateplane_to_roadway(box: StatePlaneBox, geometry: Centerline) -> RoadwayBox:
    c = box.corners
    l = _mean_dist(c, _FRONT, _BACK)
    w = _mean_dist(c, _LEFT, _RIGHT)
    h = _mean_dist(c, _TOP, _BOTTOM)
    xr, yr = geometry.to_roadway(box.back_center)
    return RoadwayBox(xr, yr, l, w, h)


# --------------------------------------------------------------------------
# fixture helpers

EARTH_RADIUS_FT = 20_902_231.0


def lonlat_to_local_feet(lon, lat, lon0: float = -86.67, lat0: float = 36.0,
                         false_easting: float = 1_800_000.0,
                         false_northing: float = 560_000.0) -> np.ndarray:
    """Equirectangular projection to a state-plane-like frame (feet).

    A constant transform for test fixtures only; it is not EPSG 2274.
    """
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    k = np.pi / 180.0 * EARTH_RADIUS_FT
    x = false_easting + (lon - lon0) * k * np.cos(np.radians(lat0))
    y = false_northing + (lat - lat0) * k
    return np.stack([x, y], axis=-1)


def load_pole_locations() -> list:
    """Camera pole table as ``(name, lon, lat)`` tuples."""
    import csv
    path = Path(__file__).resolve().parent.parent / "data" / "poles.csv"
    with open(path, newline="") as fh:
        return [(row["pole"], float(row["longitude"]), float(row["latitude"]))
                for row in csv.DictReader(fh)]
