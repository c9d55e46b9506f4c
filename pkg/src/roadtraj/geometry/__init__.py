"""Roadway, state-plane and image coordinate transforms."""

from .spline import QuadraticSpline
from .roadway import (
    CORNER_NAMES,
    ArcCenterline,
    Centerline,
    DegenerateOffsetError,
    GeometryError,
    GeometryRangeError,
    RoadwayBox,
    RoadwayGeometry,
    StatePlaneBox,
    fit_centerline,
    load_geometry,
    lonlat_to_local_feet,
    load_pole_locations,
    roadway_to_stateplane,
    stateplane_to_roadway,
)
from .camera import (
    BehindCameraError,
    CalibrationError,
    CameraCalibration,
    DegenerateConfigurationError,
    NonConvergenceError,
    apply_homography,
    calibrate,
    estimate_box_height,
    fit_homography,
    fit_projection,
    pinhole_projection,
    project_box_to_image,
    project_points,
    synthetic_calibration_data,
    vanishing_point,
)
