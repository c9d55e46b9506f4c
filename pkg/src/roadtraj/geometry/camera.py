"""Camera calibration: ground-plane homography, 3x4 projection, box heights.

``H`` maps image pixels (column, row) to state-plane ground points and
``H_inv`` maps back.  ``P`` maps homogeneous 3D state-plane points to pixels;
its columns 1, 2 and 4 are those of ``H_inv`` and column 3 points at the
vertical vanishing point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .roadway import StatePlaneBox, _BOTTOM, _TOP


class CalibrationError(ValueError):
    pass


class DegenerateConfigurationError(CalibrationError):
    pass


class BehindCameraError(CalibrationError):
    pass


class NonConvergenceError(CalibrationError):
    def __init__(self, message, best_residual=None, best_height=None):
        super().__init__(message)
        self.best_residual = best_residual
        self.best_height = best_height


def to_homogeneous(pts):
    pts = np.asarray(pts, dtype=np.float64)
    return np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)


def apply_homography(H, pts) -> np.ndarray:
    """Map ``(..., 2)`` points through a 3x3 homography."""
    q = to_homogeneous(pts) @ np.asarray(H).T
    return q[..., :2] / q[..., 2:3]


def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _check_points(img):
    if len(img) < 4:
        raise CalibrationError(f"need at least 4 correspondences, got {len(img)}")
    scale = np.ptp(img, axis=0).max()
    if scale == 0:
        raise DegenerateConfigurationError("all image points coincide")
    if len(img) > 4:
        return
    for i, j, k in combinations(range(4), 3):
        a, b, c = img[i], img[j], img[k]
        area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area < 1e-9 * scale * scale:
            raise DegenerateConfigurationError(f"image points {i}, {j}, {k} are collinear")


def fit_homography(image_points, ground_points):
    """Fit ``H`` (image -> ground) minimising squared ground-plane error.

    Returns ``(H, H_inv, rms_ft)``.  Hartley-normalised DLT provides the
    start; Levenberg-Marquardt then refines the exact reprojection objective.
    """
    img = np.asarray(image_points, dtype=np.float64)[:, :2]
    gnd = np.asarray(ground_points, dtype=np.float64)[:, :2]
    if img.shape != gnd.shape:
        raise CalibrationError("image and ground point counts differ")
    _check_points(img)
    Ti, Tg = _normalizer(img), _normalizer(gnd)
    a = apply_homography(Ti, img)
    b = apply_homography(Tg, gnd)
    n = len(a)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = a
    A[0::2, 2] = 1
    A[0::2, 6:8] = -b[:, :1] * a
    A[0::2, 8] = -b[:, 0]
    A[1::2, 3:5] = a
    A[1::2, 5] = 1
    A[1::2, 6:8] = -b[:, 1:2] * a
    A[1::2, 8] = -b[:, 1]
    _, sv, vt = np.linalg.svd(A)
    if sv[7] < 1e-10 * sv[0]:
        raise DegenerateConfigurationError("design matrix is rank deficient")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.solve(Tg, Hn @ Ti)
    H = H / np.linalg.norm(H)

    def resid(h):
        return (apply_homography(h.reshape(3, 3), img) - gnd).ravel()

    if n > 4:
        h0 = H.ravel()
        # fix the scale by pinning the largest entry
        pin = int(np.argmax(np.abs(h0)))
        free = [i for i in range(9) if i != pin]

        def r_free(p):
            h = h0.copy()
            h[free] = p
            return resid(h)

        sol = least_squares(r_free, h0[free], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        h0[free] = sol.x
        H = h0.reshape(3, 3) / np.linalg.norm(h0)
    H_inv = np.linalg.inv(H)
    # orient the inverse so ground points have positive projective depth
    if np.median(to_homogeneous(gnd) @ H_inv[2]) < 0:
        H_inv = -H_inv
    H_inv = H_inv / np.linalg.norm(H_inv)
    rms = float(np.sqrt(np.mean(np.sum((apply_homography(H, img) - gnd) ** 2, axis=1))))
    return H, H_inv, rms


def vanishing_point(segments) -> np.ndarray:
    """Least-squares intersection of image line segments ``(n, 2, 2)``."""
    seg = np.asarray(segments, dtype=np.float64)
    if seg.ndim != 3 or seg.shape[1:] != (2, 2) or len(seg) < 2:
        raise CalibrationError("need at least 2 segments given as (n, 2, 2)")
    d = seg[:, 1] - seg[:, 0]
    length = np.linalg.norm(d, axis=1)
    if np.any(length == 0):
        raise CalibrationError("zero-length segment")
    nrm = np.stack([-d[:, 1], d[:, 0]], axis=1) / length[:, None]
    c = np.einsum("ij,ij->i", nrm, seg[:, 0])
    M = nrm.T @ nrm
    ev = np.linalg.eigvalsh(M)
    if ev[0] < 1e-10 * ev[1]:
        raise DegenerateConfigurationError(
            "vertical segments are parallel in the image (vanishing point at infinity)")
    return np.linalg.solve(M, nrm.T @ c)


def project_points(P, pts3) -> np.ndarray:
    """Project ``(..., 3)`` state-plane points to pixels; depth must be positive."""
    q = to_homogeneous(pts3) @ np.asarray(P).T
    if np.any(q[..., 2] <= 0):
        raise BehindCameraError("point with non-positive projective depth")
    return q[..., :2] / q[..., 2:3]


def project_box_to_image(box, P) -> np.ndarray:
    """Pixel coordinates of the 8 box corners, shape ``(..., 8, 2)``."""
    corners = box.corners if isinstance(box, StatePlaneBox) else np.asarray(box)
    return project_points(P, corners)


def _assemble_projection(H_inv, vp, scale):
    P = np.zeros((3, 4))
    P[:, 0] = H_inv[:, 0]
    P[:, 1] = H_inv[:, 1]
    P[:, 3] = H_inv[:, 2]
    P[:, 2] = scale * np.array([vp[0], vp[1], 1.0])
    return P


def fit_projection(H_inv, vertical_segments, height_pixels, height_points):
    """Build ``P`` from ``H_inv``, vertical segments and elevated correspondences.

    ``height_pixels`` is ``(m, 2)`` and ``height_points`` ``(m, 3)`` with at
    least one nonzero ``z``.  Returns ``(P, vanishing_point, rms_px)``.
    """
    H_inv = np.asarray(H_inv, dtype=np.float64)
    vp = vanishing_point(vertical_segments)
    px = np.atleast_2d(np.asarray(height_pixels, dtype=np.float64))
    X = np.atleast_2d(np.asarray(height_points, dtype=np.float64))
    z = X[:, 2]
    if not np.any(np.abs(z) > 0):
        raise CalibrationError("no elevated correspondence; vertical scale is unconstrained")
    up = z != 0
    ground = to_homogeneous(X[up, :2]) @ H_inv.T
    A, w = ground[:, :2], ground[:, 2]
    dv = px[up] - vp
    # per-point scale that puts the projection on the ray toward vp
    lam = np.einsum("ij,ij->i", A - px[up] * w[:, None], dv) / (z[up] * np.einsum("ij,ij->i", dv, dv))
    seed = float(np.median(lam))
    if seed == 0 or not np.isfinite(seed):
        raise DegenerateConfigurationError("elevated points give no usable vertical scale")

    def objective(s):
        q = to_homogeneous(X) @ _assemble_projection(H_inv, vp, s).T
        return float(np.sum((q[:, :2] / q[:, 2:3] - px) ** 2))

    lo, hi = sorted((seed * 0.2, seed * 5.0))
    res = minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                          options={"xatol": abs(seed) * 1e-13, "maxiter": 500})
    P = _assemble_projection(H_inv, vp, res.x)
    rms = float(np.sqrt(res.fun / len(X)))
    return P, vp, rms


def estimate_box_height(image_box, H, P, tolerance_px: float = 1.0, max_height: float = 30.0,
                        return_residual: bool = False):
    """Recover a 3D box from its 8 labelled image corners.

    The bottom corners go through ``H`` to the ground; the height is then
    found by bisection on the mean image extent of the verticals, and the
    fit is accepted when the top corners reproject within ``tolerance_px``
    RMS.
    """
    img = np.asarray(image_box, dtype=np.float64)
    footprint = apply_homography(H, img[_BOTTOM])

    def box_at(h):
        return StatePlaneBox.from_footprint(footprint, h)

    base = project_points(P, box_at(0.0).corners[_BOTTOM])
    probe = project_points(P, box_at(1e-3 * max_height).corners[_TOP])
    direction = probe - base
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    target = np.einsum("ij,ij->i", img[_TOP] - base, direction).mean()

    def extent(h):
        top = project_points(P, box_at(h).corners[_TOP])
        return np.einsum("ij,ij->i", top - base, direction).mean()

    def rms(h):
        top = project_points(P, box_at(h).corners[_TOP])
        return float(np.sqrt(np.mean(np.sum((top - img[_TOP]) ** 2, axis=1))))

    if target <= 0:
        h = 0.0
    elif extent(max_height) <= target:
        h = max_height
    else:
        lo, hi = 0.0, max_height
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if extent(mid) < target:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-12:
                break
        h = 0.5 * (lo + hi)
    r = rms(h)
    if not r <= tolerance_px:
        raise NonConvergenceError(
            f"no height in [0, {max_height}] ft meets {tolerance_px} px (best {r:.4g} px at {h:.4g} ft)",
            best_residual=r, best_height=h)
    box = box_at(h)
    return (box, r) if return_residual else box


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraCalibration:
    H: np.ndarray
    H_inv: np.ndarray
    P: np.ndarray
    vanishing_point: np.ndarray
    residual_ft: float = 0.0
    residual_px: float = 0.0
    correspondences: dict = field(default_factory=dict)

    @property
    def x_vanishing_point(self) -> np.ndarray:
        return self.P[:2, 0] / self.P[2, 0]

    def image_to_ground(self, px):
        return apply_homography(self.H, px)

    def ground_to_image(self, pts):
        return apply_homography(self.H_inv, pts)

    def to_json(self) -> dict:
        return {
            "H": self.H.tolist(),
            "H_inv": self.H_inv.tolist(),
            "P": self.P.tolist(),
            "vanishing_point": list(map(float, self.vanishing_point)),
            "residual_ft": self.residual_ft,
            "residual_px": self.residual_px,
            "correspondences": self.correspondences,
        }

    @classmethod
    def from_json(cls, doc) -> "CameraCalibration":
        return cls(np.array(doc["H"], float), np.array(doc["H_inv"], float),
                   np.array(doc["P"], float), np.array(doc["vanishing_point"], float),
                   float(doc.get("residual_ft", 0.0)), float(doc.get("residual_px", 0.0)),
                   doc.get("correspondences", {}))


def calibrate(image_points, ground_points, vertical_segments, height_pixels, height_points):
    H, H_inv, rms_ft = fit_homography(image_points, ground_points)
    P, vp, rms_px = fit_projection(H_inv, vertical_segments, height_pixels, height_points)
    corr = {
        "image_points": np.asarray(image_points, float).tolist(),
        "ground_points": np.asarray(ground_points, float).tolist(),
        "vertical_segments": np.asarray(vertical_segments, float).tolist(),
        "height_pixels": np.asarray(height_pixels, float).tolist(),
        "height_points": np.asarray(height_points, float).tolist(),
    }
    return CameraCalibration(H, H_inv, P, vp, rms_ft, rms_px, corr)


# --------------------------------------------------------------------------
# synthetic pinhole camera used to generate exact calibration data

def pinhole_projection(position, look_at, focal_px: float = 1500.0,
                       principal=(960.0, 540.0)) -> np.ndarray:
    """3x4 projection of an ideal camera at ``position`` aimed at ``look_at``."""
    c = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(look_at, dtype=np.float64) - c
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    K = np.array([[focal_px, 0, principal[0]], [0, focal_px, principal[1]], [0, 0, 1.0]])
    return K @ np.hstack([R, -R @ c[:, None]])


def synthetic_calibration_data(P_true, ground_points, n_vertical: int = 4, pole_height: float = 20.0,
                               rng=None):
    """Exact correspondences, vertical segments and elevated points from ``P_true``."""
    rng = np.random.default_rng(0) if rng is None else rng
    g = np.asarray(ground_points, dtype=np.float64)[:, :2]
    g3 = np.c_[g, np.zeros(len(g))]
    img = project_points(P_true, g3)
    idx = rng.choice(len(g), size=min(n_vertical, len(g)), replace=False)
    base = g3[idx]
    top = base + [0, 0, pole_height]
    segments = np.stack([project_points(P_true, base), project_points(P_true, top)], axis=1)
    elevated = np.r_[top, base[:1] + [0, 0, 0.5 * pole_height]]
    return img, g, segments, project_points(P_true, elevated), elevated
