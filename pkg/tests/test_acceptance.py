"""Acceptance criteria, one summary line each (see the terminal summary).

Every check records a PASS/FAIL line before asserting, so a red criterion
still reports what was measured.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from roadtraj import trajdata as td
from roadtraj.geometry import (RoadwayGeometry, apply_homography, calibrate, estimate_box_height,
                               pinhole_projection, project_box_to_image, roadway_to_stateplane,
                               stateplane_to_roadway, synthetic_calibration_data)
from roadtraj.macrofield import FTPS_TO_MPH, edie_field, trajectory_totals
from roadtraj.quality import (detect_missing_bands, evaluate_tracking, feasibility_metrics,
                              mot_summary, positional_error_stats)
from roadtraj.reconcile import (build_graph, chains_from_links, min_cost_flow_links,
                                partition_cost, reconcile_fragments)
from roadtraj.synth import CorruptionSpec, PlantedWave, ScenarioSpec, corrupt, generate_scenario
from roadtraj.waves import (cwt_morlet, dominant_period, extract_speed_series, scale_grid,
                            wave_speed_distribution)

from test_camera import CAM, camera_oracle, ground_points, make_box
from test_geometry import _random_boxes, circle_points, straight
from test_quality import DT as ART_DT, DX as ART_DX, EXTENT as ART_EXTENT
from test_quality import micro_scenario, oracle_summary, scenario as art_scenario
from test_reconcile import brute_force_cost

GRID_STEP = (1200 / 30) ** (1 / 63)


def record(label, ok, detail, status=None):
    status = status or ("PASS" if ok else "FAIL")
    line = f"{label:<34} {status}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


# 1 --------------------------------------------------------------------------------

def test_criterion_1_coordinate_round_trip():
    rng = np.random.default_rng(101)
    curved = RoadwayGeometry(circle_points(3000.0, n=15), anchor_xr=250000.0)
    flat = straight(n=30)
    t0 = time.perf_counter()
    box = _random_boxes(curved, 10_000, rng)
    e_curved = np.max(np.abs(stateplane_to_roadway(roadway_to_stateplane(box, curved), curved)
                             .as_array() - box.as_array()))
    t_curved = time.perf_counter() - t0
    t0 = time.perf_counter()
    box = _random_boxes(flat, 10_000, rng)
    e_flat = np.max(np.abs(stateplane_to_roadway(roadway_to_stateplane(box, flat), flat)
                           .as_array() - box.as_array()))
    t_flat = time.perf_counter() - t0
    ok = e_curved < 1e-3 and e_flat < 1e-9 and max(t_curved, t_flat) < 5.0
    assert record("1 coordinate round trip", ok,
                  f"R=3000 max {e_curved:.2g} ft (<1e-3), straight {e_flat:.2g} ft (<1e-9), "
                  f"{t_curved:.2f}+{t_flat:.2f} s (<5 s each)")


# 2 --------------------------------------------------------------------------------

def test_criterion_2_camera_recovery():
    t0 = time.perf_counter()
    P = pinhole_projection(**CAM)
    g = ground_points()
    cal = calibrate(*synthetic_calibration_data(P, g))
    img = camera_oracle(np.c_[g, np.zeros(len(g))], **CAM)
    h_rms = np.sqrt(np.mean(np.sum((apply_homography(cal.H, img) - g) ** 2, axis=1)))
    box = make_box(4.7021)
    truth = camera_oracle(box.corners, **CAM)
    got = project_box_to_image(box, cal.P).reshape(-1, 2)
    p_rms = np.sqrt(np.mean(np.sum((got - truth) ** 2, axis=1)))
    height = estimate_box_height(truth, cal.H, cal.P).corners[:, 2].max()
    dt = time.perf_counter() - t0
    ok = h_rms < 1e-6 and p_rms < 0.5 and abs(height - 4.7021) < 0.01 and dt < 5.0
    assert record("2 homography / projection", ok,
                  f"H RMS {h_rms:.2g} ft (<1e-6), P box RMS {p_rms:.3g} px (<0.5), "
                  f"height {height:.4f} ft (4.7021 +-0.01), {dt:.2f} s")


# 3 --------------------------------------------------------------------------------

def test_criterion_3_edie_conservation():
    ds = generate_scenario(ScenarioSpec(x_end=4000, duration=1000, n_lanes=3, inflow=1.0,
                                        waves=(PlantedWave(30.0, 19.0, ((0.0, 150.0),)),),
                                        seed=31))
    ext = dict(x_range=(0, 4000), t_range=(0, 1200))
    t0 = time.perf_counter()
    fine = edie_field(ds, 50, 15, **ext)
    coarse = edie_field(ds, 100, 30, **ext)
    dt = time.perf_counter() - t0
    d, t = trajectory_totals(ds)
    rel = max(abs(fine.d.sum() - d) / d, abs(fine.t.sum() - t) / t,
              abs(coarse.d.sum() - d) / d, abs(coarse.t.sum() - t) / t)
    m = coarse.nonempty
    qkv = bool(np.array_equal(coarse.q[m], coarse.k[m] * coarse.v[m]))
    agg = fine.coarsen(2, 2)
    refine = max(np.max(np.abs(agg.d - coarse.d)), np.max(np.abs(agg.t - coarse.t)))
    ok = len(ds) >= 1000 and rel < 1e-6 and qkv and refine < 1e-9 and dt < 10.0
    assert record("3 Edie conservation", ok,
                  f"{len(ds)} vehicles, sum rel err {rel:.2g} (<1e-6), q=kv exact {qkv}, "
                  f"2x2 refinement diff {refine:.2g}, {dt:.2f} s (<10 s)")


# 4 --------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def hour_scenario():
    t0 = time.perf_counter()
    spec = ScenarioSpec(x_end=8000, duration=3600, n_lanes=4, inflow=1.2, drain=False,
                        waves=(PlantedWave(40.0, 13.0 / FTPS_TO_MPH,
                                           ((0.0, 126.0), (1800.0, 402.0))),), seed=21)
    ds = generate_scenario(spec)
    fld = edie_field(ds, 100, 5, x_range=(0, 8000), t_range=(0, 3600))
    return fld, time.perf_counter() - t0


def test_criterion_4_wave_recovery(hour_scenario):
    fld, setup = hour_scenario
    t0 = time.perf_counter()
    res = wave_speed_distribution(fld, n_pairs=20, seed=7)
    sg = cwt_morlet(extract_speed_series(fld, 4050.0), scale_grid())
    pa = dominant_period(sg, (200, 1700))
    pb = dominant_period(sg, (1900, 3500))
    dt = setup + time.perf_counter() - t0
    ra, rb = max(pa / 2.1, 2.1 / pa), max(pb / 6.7, 6.7 / pb)
    ok = (abs(res.mean - 13.0) <= 0.05 * 13.0 and ra <= GRID_STEP + 1e-9
          and rb <= GRID_STEP + 1e-9 and dt < 60.0)
    assert record("4 wave recovery", ok,
                  f"xcorr mean {res.mean:.2f} mph (13.0 +-5%), periods {pa:.2f} / {pb:.2f} min "
                  f"(2.1 / 6.7, step ratio {GRID_STEP:.3f}), {dt:.1f} s (<60 s)")


# 5 --------------------------------------------------------------------------------

def link_scores(fs, chains):
    truth = set()
    by_parent = {}
    for i, p in enumerate(fs.parents):
        by_parent.setdefault(p, []).append(i)
    for idx in by_parent.values():
        idx.sort(key=lambda i: fs.spans[i][0])
        truth |= set(zip(idx[:-1], idx[1:]))
    links = {(a, b) for c in chains for a, b in zip(c[:-1], c[1:])}
    joined = len(truth & links) / len(truth) if truth else 1.0
    cross = sum(fs.parents[a] != fs.parents[b] for a, b in links) / len(links) if links else 0.0
    return joined, cross, len(truth)


def test_criterion_5_reconciliation():
    spec = ScenarioSpec(x_end=5000, duration=240, n_lanes=4, inflow=1.0, drain=False,
                        waves=(PlantedWave(30.0, 19.07, ((0.0, 150.0),)),), seed=51)
    ds = generate_scenario(spec)
    cspec = CorruptionSpec(({"type": "missing_pole", "x": [1500, 1700]},
                            {"type": "overpass", "x": [3000, 3060]},
                            {"type": "packet_drop", "x": [3800, 4300], "t": [60, 120]},
                            {"type": "noise"}), seed=52)
    fs = corrupt(ds, cspec)
    t0 = time.perf_counter()
    out, rep = reconcile_fragments(fs.fragments)
    dt = time.perf_counter() - t0
    pos = {f.id: i for i, f in enumerate(fs.fragments)}
    chains = [[pos[f] for f in c["fragments"]] for c in rep["chains"]]
    joined, cross, n_true = link_scores(fs, chains)
    raw = feasibility_metrics(fs.fragments)["feasible_accel"]
    feas = feasibility_metrics(out)["feasible_accel"]

    # min-cost flow against brute force on small instances drawn from the scenario family
    rng = np.random.default_rng(53)
    worst, n_inst = 0.0, 0
    for seed in range(30):
        small = generate_scenario(ScenarioSpec(x_end=2500, duration=40, n_lanes=2, inflow=0.15,
                                               seed=100 + seed))
        if len(small) == 0:
            continue
        pick = td.Dataset(small.trajectories[:4])
        frs = corrupt(pick, CorruptionSpec(({"type": "missing_pole", "x": [1000, 1200]},
                                            {"type": "noise"}), seed=seed)).fragments
        k = int(rng.integers(1, min(8, len(frs)) + 1))
        graph = build_graph(frs[:k])
        got = partition_cost(chains_from_links(k, min_cost_flow_links(graph)), graph)
        worst = max(worst, abs(got - brute_force_cost(graph)))
        n_inst += 1
    ok = (len(ds) >= 100 and joined >= 0.95 and cross < 0.01 and feas >= 0.99
          and worst < 1e-7 and dt < 120.0)
    assert record("5 reconciliation", ok,
                  f"{len(ds)} vehicles / {len(fs)} fragments, joined {joined:.3f} of {n_true} "
                  f"(>=0.95), cross {cross:.3f} (<0.01), feas accel {raw:.2f} -> {feas:.3f} "
                  f"(>=0.99), MCF-brute max diff {worst:.1g} on {n_inst}, {dt:.1f} s (<120 s)")


# 6 --------------------------------------------------------------------------------

def test_criterion_6_metrics():
    worst = 0.0
    for seed in range(25):
        pred, gt = micro_scenario(seed)
        got = mot_summary(evaluate_tracking(pred, gt))
        ref = oracle_summary(pred, gt)
        worst = max(worst, max(abs(got[k] - v) for k, v in ref.items()))
    _, gt = micro_scenario(3)
    same = mot_summary(evaluate_tracking(gt, gt))
    ones = all(same[k] == 1.0 for k in ("mota", "motp", "precision", "recall", "gt_match_rate",
                                        "pred_match_rate", "per_gt_recall", "per_pred_precision"))
    rng = np.random.default_rng(61)
    g = np.c_[rng.uniform(0, 5000, 10_000), rng.uniform(-60, 60, 10_000),
              np.full(10_000, 15.0), np.full(10_000, 6.0), np.full(10_000, 5.0)]
    p = g.copy()
    p[:, 0] += rng.normal(0, 2.6, len(g))
    p[:, 1] += rng.normal(0, 0.6, len(g))
    s = positional_error_stats(p, g)
    sx, sy = s["x_std"], s["y_std"]
    ok = worst < 1e-12 and ones and abs(sx / 2.6 - 1) < 0.1 and abs(sy / 0.6 - 1) < 0.1
    assert record("6 metrics correctness", ok,
                  f"25 micro-scenarios max diff {worst:.1g}, pred==gt all ones {ones}, "
                  f"sigma_x {sx:.3f} (2.6 +-10%), sigma_y {sy:.3f} (0.6 +-10%)")


# 7 --------------------------------------------------------------------------------

def test_criterion_7_artifact_detection():
    misses, false = [], 0
    planted = (("missing_pole", (1210.0, 1710.0), None), ("overpass", (2845.0, 2905.0), None),
               ("packet_drop", (3733.0, 4233.0), (97.0, 171.0)))
    for seed in range(20):
        ds = art_scenario(seed)
        clean = corrupt(ds, CorruptionSpec(({"type": "noise"},), seed=seed)).to_dataset()
        false += len(detect_missing_bands(edie_field(clean, ART_DX, ART_DT, **ART_EXTENT))
                     ["artifacts"])
        if seed < 5:
            dirs = [{"type": k, "x": list(x)} | ({"t": list(t)} if t else {}) for k, x, t in planted]
            fs = corrupt(ds, CorruptionSpec(tuple(dirs) + ({"type": "noise"},), seed=seed))
            found = detect_missing_bands(edie_field(fs.to_dataset(), ART_DX, ART_DT, **ART_EXTENT))
            found = found["artifacts"]
            if [a.kind for a in found] != [p[0] for p in planted]:
                misses.append(seed)
                continue
            for a, (_, x, t) in zip(found, planted):
                bad = abs(a.x_range[0] - x[0]) > ART_DX or abs(a.x_range[1] - x[1]) > ART_DX
                if t:
                    bad |= abs(a.t_range[0] - t[0]) > ART_DT or abs(a.t_range[1] - t[1]) > ART_DT
                if bad:
                    misses.append(seed)
    ok = not misses and false == 0
    assert record("7 artifact detection", ok,
                  f"3 artifacts x 5 seeds localized within one {ART_DX:g} ft / {ART_DT:g} s bin "
                  f"(misses {misses}), false detections on 20 clean fields: {false}")


# 8 --------------------------------------------------------------------------------

def test_criterion_8a_format_round_trip(example_bytes):
    ds = td.parse_dataset(example_bytes)
    once = td.write_dataset(ds, check=False)
    back = td.parse_dataset(once)
    fields_equal = all(
        np.array_equal(getattr(a, f), getattr(b, f))
        for a, b in zip(ds, back)
        for f in ("timestamps", "x_positions", "y_positions"))
    keys = ("id", "first_timestamp", "last_timestamp", "starting_x", "ending_x", "length",
            "width", "height", "direction")
    scalars_equal = all(getattr(a, k) == getattr(b, k) for a, b in zip(ds, back) for k in keys)
    stable = td.write_dataset(back, check=False) == once
    ok = fields_equal and scalars_equal and stable
    assert record("8a fixture parse/write round trip", ok,
                  f"values bit-identical {fields_equal and scalars_equal}, "
                  f"canonical bytes stable {stable}")


def test_criterion_8b_fixture_validates(example_bytes):
    rep = td.validate_dataset(td.parse_dataset(example_bytes))
    codes = sorted(rep.counts)
    ok = not rep
    record("8b fixture validates clean", ok,
           f"violations {codes}" + ("" if ok else " (printed fixture is abridged; see README)"))
    assert ok, f"fixture violates data-model invariants: {codes}"


def test_criterion_8c_fixture_speed(example_bytes):
    tr = td.parse_dataset(example_bytes)[0]
    v0 = td.difference(tr.x_positions[:5], 1, 0.04)[0]
    ok = abs(v0 - 111.77) < 1e-2
    assert record("8c fixture sample-0 speed", ok, f"{v0:.4f} ft/s (111.77 +-0.01)")


# 9 --------------------------------------------------------------------------------

RELEASED = os.environ.get("ROADTRAJ_RELEASED_DATA", "")


def test_criterion_9_released_data():
    path = Path(RELEASED) if RELEASED else None
    if path is None or not path.is_file():
        record("9 released data (optional)", True, "set ROADTRAJ_RELEASED_DATA to a westbound "
               "dataset file to run", status="SKIP")
        pytest.skip("released dataset not supplied")
    ds = td.read_dataset(path)
    fld = edie_field(ds, 100, 5, direction=-1)
    res = wave_speed_distribution(fld, n_pairs=50, seed=7, direction=-1)
    ok = abs(res.mean - 12.8) <= 1.0
    assert record("9 released data (optional)", ok, f"mean {res.mean:.2f} mph (12.8 +-1.0)")
