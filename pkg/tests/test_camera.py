import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roadtraj.geometry import (BehindCameraError, CalibrationError, CameraCalibration,
                               DegenerateConfigurationError, NonConvergenceError, RoadwayBox,
                               RoadwayGeometry, StatePlaneBox, apply_homography, calibrate,
                               estimate_box_height, fit_homography, fit_projection,
                               pinhole_projection, project_box_to_image, project_points,
                               roadway_to_stateplane, synthetic_calibration_data)

CAM = dict(position=[0.0, -60.0, 70.0], look_at=[200.0, 20.0, 0.0])


def ground_points(n=8, seed=1):
    rng = np.random.default_rng(seed)
    return np.c_[rng.uniform(50, 400, n), rng.uniform(-40, 60, n)]


def camera_oracle(pts3, position, look_at, f=1500.0, c=(960.0, 540.0)):
    # pinhole projection written out per point, without the 3x4 matrix
    pos = np.asarray(position, float)
    fwd = np.asarray(look_at, float) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0, 0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    out = []
    for p in np.asarray(pts3, float).reshape(-1, 3):
        d = p - pos
        zc = d @ fwd
        out.append([c[0] + f * (d @ right) / zc, c[1] + f * (d @ down) / zc])
    return np.array(out)


def make_box(h=4.7021):
    g = RoadwayGeometry(np.c_[np.arange(0, 1000, 250.0), np.zeros(4)])
    return roadway_to_stateplane(RoadwayBox(250.0, 10.0, 15.6381, 6.2, h), g)


@pytest.fixture(scope="module")
def calib():
    P = pinhole_projection(**CAM)
    data = synthetic_calibration_data(P, ground_points())
    return P, calibrate(*data)


# -- homography ----------------------------------------------------------------

def test_identity_homography():
    pts = ground_points(6)
    H, H_inv, rms = fit_homography(pts, pts)
    np.testing.assert_allclose(H / H[2, 2], np.eye(3), atol=1e-9)
    assert rms < 1e-9


def test_synthetic_homography_exact(calib):
    P, cal = calib
    g = ground_points()
    img = camera_oracle(np.c_[g, np.zeros(8)], **CAM)
    assert np.sqrt(np.mean(np.sum((apply_homography(cal.H, img) - g) ** 2, axis=1))) < 1e-6
    assert cal.residual_ft < 1e-6


def test_homography_errors():
    with pytest.raises(CalibrationError):
        fit_homography(ground_points(3), ground_points(3))
    line = np.c_[np.arange(4.0), 2 * np.arange(4.0)]
    with pytest.raises(DegenerateConfigurationError):
        fit_homography(line, ground_points(4))


@given(st.floats(-80, 80), st.floats(40, 120), st.floats(150, 400))
def test_homography_recovers_any_pose(cy, cz, look):
    P = pinhole_projection([0.0, cy, cz], [look, 0.0, 0.0])
    g = ground_points(10, seed=3)
    try:
        img = project_points(P, np.c_[g, np.zeros(len(g))])
    except BehindCameraError:
        return
    H, H_inv, rms = fit_homography(img, g)
    assert rms < 1e-6
    np.testing.assert_allclose(apply_homography(H_inv, g), img, atol=1e-6)


# -- projection ----------------------------------------------------------------

def test_projection_box_rms(calib):
    P, cal = calib
    box = make_box()
    truth = camera_oracle(box.corners, **CAM)
    got = project_box_to_image(box, cal.P).reshape(-1, 2)
    assert np.sqrt(np.mean(np.sum((got - truth) ** 2, axis=1))) < 0.5


def test_flat_box_matches_homography(calib):
    _, cal = calib
    box = make_box(h=0.0)
    np.testing.assert_allclose(project_box_to_image(box, cal.P),
                               apply_homography(cal.H_inv, box.corners[:, :2]), atol=1e-9)


def test_projection_errors(calib):
    P, cal = calib
    img, g, seg, hp, hx = synthetic_calibration_data(P, ground_points())
    flat = hx.copy()
    flat[:, 2] = 0
    with pytest.raises(CalibrationError):
        fit_projection(cal.H_inv, seg, hp, flat)
    parallel = np.array([[[0, 0], [0, 10]], [[5, 0], [5, 10]], [[9, 1], [9, 4]]], float)
    with pytest.raises(DegenerateConfigurationError):
        fit_projection(cal.H_inv, parallel, hp, hx)


def test_project_box_identity_like():
    P = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 0, 1.0]])
    assert project_points(P, [3.5, -2.0, 0.0]) == pytest.approx([3.5, -2.0])


def test_project_box_matches_oracle():
    P = pinhole_projection(**CAM)
    box = make_box()
    np.testing.assert_allclose(project_box_to_image(box, P), camera_oracle(box.corners, **CAM),
                               atol=1e-9)


def test_behind_camera():
    P = pinhole_projection(**CAM)
    with pytest.raises(BehindCameraError):
        project_points(P, [-500.0, -200.0, 0.0])


# -- height recovery -------------------------------------------------------------

def test_planted_height(calib):
    P, cal = calib
    img = project_box_to_image(make_box(4.7021), P)
    box = estimate_box_height(img, cal.H, cal.P)
    assert abs(box.corners[:, 2].max() - 4.7021) < 0.01
    np.testing.assert_allclose(box.corners[[0, 1, 4, 5], 2], 0.0)


def test_zero_height(calib):
    P, cal = calib
    img = project_box_to_image(make_box(4.7021), P)
    img[[2, 3, 6, 7]] = img[[0, 1, 4, 5]]
    assert estimate_box_height(img, cal.H, cal.P).corners[:, 2].max() == pytest.approx(0.0, abs=1e-9)


def test_height_nonconvergence(calib):
    P, cal = calib
    img = project_box_to_image(make_box(4.7021), P)
    img = img + np.random.default_rng(0).normal(0, 2.0, img.shape)
    with pytest.raises(NonConvergenceError) as err:
        estimate_box_height(img, cal.H, cal.P, tolerance_px=0.0)
    assert err.value.best_residual > 0


@given(st.floats(0.5, 14.0))
def test_height_property(h):
    P = pinhole_projection(**CAM)
    cal = calibrate(*synthetic_calibration_data(P, ground_points()))
    box, r = estimate_box_height(project_box_to_image(make_box(h), P), cal.H, cal.P,
                                 return_residual=True)
    assert box.corners[:, 2].max() == pytest.approx(h, abs=1e-3)
    assert r < 0.5


def test_calibration_json(calib):
    _, cal = calib
    back = CameraCalibration.from_json(cal.to_json())
    assert np.array_equal(back.P, cal.P) and np.array_equal(back.H, cal.H)
    assert isinstance(StatePlaneBox.from_footprint(np.zeros((4, 2)), 1.0), StatePlaneBox)
