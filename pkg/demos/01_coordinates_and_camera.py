"""
Roadway coordinates and camera geometry
=======================================

A curved centerline is built from a handful of control points, boxes are
moved between the roadway frame and the state plane, and a synthetic camera
is calibrated from ground correspondences before recovering a box height
from its eight image corners.
"""

import numpy as np

from roadtraj.geometry import (RoadwayBox, RoadwayGeometry, calibrate, estimate_box_height,
                               pinhole_projection, project_box_to_image, roadway_to_stateplane,
                               stateplane_to_roadway, synthetic_calibration_data)

# control points every 400 ft on a 4000 ft radius arc
R = 4000.0
phi = -np.pi / 2 + (np.arange(12) - 5.5) * 400.0 / R
pts = np.c_[2.0e6 + R * np.cos(phi), 5.0e5 + R * np.sin(phi)]
geom = RoadwayGeometry(pts, anchor_xr=310000.0)
print(f"centerline covers x_r {geom.xr_min:.1f} .. {geom.xr_max:.1f} ft")

mid = 0.5 * (geom.xr_min + geom.xr_max)
print(f"curvature at the middle: {geom.curvature(mid):.6e} 1/ft (1/R = {1 / R:.6e})")

# a few thousand random boxes, both directions of travel
rng = np.random.default_rng(0)
n = 5000
box = RoadwayBox(rng.uniform(geom.xr_min + 100, geom.xr_max - 100, n),
                 rng.choice([-1, 1], n) * rng.uniform(2, 70, n),
                 rng.uniform(10, 70, n), rng.uniform(5, 9, n), rng.uniform(4, 13, n))
back = stateplane_to_roadway(roadway_to_stateplane(box, geom), geom)
print(f"round trip on {n} boxes: max error {np.abs(back.as_array() - box.as_array()).max():.2e} ft")

# camera 70 ft up a pole, looking down the road
P = pinhole_projection([0.0, -60.0, 70.0], [200.0, 20.0, 0.0])
ground = np.c_[rng.uniform(50, 400, 8), rng.uniform(-40, 60, 8)]
cal = calibrate(*synthetic_calibration_data(P, ground))
print(f"homography residual {cal.residual_ft:.2e} ft, projection residual {cal.residual_px:.2e} px")

straight = RoadwayGeometry(np.c_[np.arange(0, 1000, 250.0), np.zeros(4)])
truck = roadway_to_stateplane(RoadwayBox(250.0, 10.0, 15.6381, 6.2, 4.7021), straight)
corners = project_box_to_image(truck, P)
corners += rng.normal(0, 0.3, corners.shape)      # labelling noise
est = estimate_box_height(corners, cal.H, cal.P)
print(f"planted height 4.7021 ft, recovered {est.corners[:, 2].max():.4f} ft from noisy corners")
