import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from roadtraj import trajdata as td
from roadtraj.cli import main, reference_config
from roadtraj.geometry import (RoadwayBox, RoadwayGeometry, pinhole_projection,
                               project_box_to_image, roadway_to_stateplane,
                               synthetic_calibration_data)
from roadtraj.macrofield import FTPS_TO_MPH, edie_field, field_from_csv

SCENARIO = {"x_end": 4000.0, "duration": 600.0, "n_lanes": 2, "inflow": 0.9, "seed": 5,
            "drain": False,
            "waves": [{"amplitude": 35.0, "speed": 13.0 / FTPS_TO_MPH, "periods": [[0, 150]]}]}
CORRUPTION = {"seed": 2, "directives": [{"type": "missing_pole", "x": [1500, 1700]},
                                    {"type": "overpass", "x": [2600, 2660]},
                                    {"type": "noise"}]}


def run(*argv):
    return main([str(a) for a in argv])


def error_line(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    (d / "scenario.json").write_text(json.dumps(SCENARIO))
    (d / "corrupt.json").write_text(json.dumps(CORRUPTION))
    codes = {
        "synth": run("synth", "--spec", d / "scenario.json", "--corrupt", d / "corrupt.json",
                     "-o", d / "truth.json", "-O", d / "frags.json"),
        "reconcile": run("reconcile", d / "frags.json", "--report", d / "rec_report.json",
                         "-o", d / "recon.json"),
        "aggregate": run("aggregate", d / "recon.json", "--dx", 100, "--dt", 5,
                         "-o", d / "field.csv"),
        "aggregate_fine": run("aggregate", d / "frags.json", "--dx", 20, "--dt", 20,
                              "-o", d / "frag_field.csv"),
        "waves": run("waves", "speed", d / "field.csv", "--pairs", 8, "-o", d / "waves.json"),
        "cwt": run("waves", "cwt", d / "field.csv", "--x", 3050, "--window", 60, 540,
                   "-o", d / "cwt.csv"),
        "metrics": run("metrics", "--field", d / "field.csv", "--data", d / "recon.json",
                       "-o", d / "conservation.json"),
        "tracking": run("metrics", "--pred", d / "recon.json", "--gt", d / "truth.json",
                        "-o", d / "tracking.json"),
        "artifacts": run("artifacts", d / "frag_field.csv", "--report", d / "rec_report.json",
                         "-o", d / "bands.json"),
        "tsdiagram": run("tsdiagram", d / "truth.json", "--dx", 50, "--dt", 10,
                         "-o", d / "ts.png", "--csv", d / "ts.csv"),
    }
    return d, codes


def test_pipeline_exit_codes(pipeline):
    _, codes = pipeline
    assert codes == {k: 0 for k in codes}


def test_pipeline_outputs(pipeline):
    d, _ = pipeline
    cons = json.loads((d / "conservation.json").read_text())["conservation"]
    assert cons["ok"] and cons["distance_rel_error"] < 1e-6
    wv = json.loads((d / "waves.json").read_text())
    assert wv["mean_mph"] == pytest.approx(13.0, rel=0.1)
    kinds = [a["kind"] for a in json.loads((d / "bands.json").read_text())["artifacts"]]
    assert kinds == ["missing_pole", "overpass"]
    trk = json.loads((d / "tracking.json").read_text())
    assert trk["tracking"]["gt_match_rate"] > 0.9
    assert trk["feasibility"]["feasible_accel"] >= 0.99
    assert (d / "ts.png").stat().st_size > 1000
    ref = edie_field(td.read_dataset(d / "truth.json"), 50, 10)
    assert field_from_csv((d / "ts.csv").read_text()).shape == ref.shape


def test_run_report(pipeline):
    d, _ = pipeline
    rep = json.loads((d / "field.csv.run.json").read_text())
    assert rep["command"] == "aggregate"
    assert rep["config"]["aggregate"]["dt"] == 5
    digest = __import__("hashlib").sha256((d / "recon.json").read_bytes()).hexdigest()
    assert digest in rep["inputs"].values()


def test_deterministic_outputs(pipeline, tmp_path):
    d, _ = pipeline
    shutil.copy(d / "scenario.json", tmp_path)
    shutil.copy(d / "corrupt.json", tmp_path)
    assert run("synth", "--spec", tmp_path / "scenario.json", "--corrupt", tmp_path / "corrupt.json",
               "-o", tmp_path / "truth.json", "-O", tmp_path / "frags.json") == 0
    assert run("reconcile", tmp_path / "frags.json", "-o", tmp_path / "recon.json") == 0
    assert run("aggregate", tmp_path / "recon.json", "--dx", 100, "--dt", 5,
               "-o", tmp_path / "field.csv") == 0
    for name in ("truth.json", "frags.json", "recon.json", "field.csv"):
        assert (tmp_path / name).read_bytes() == (d / name).read_bytes(), name


def test_validate_codes(tmp_path, capsys, example_bytes):
    good = tmp_path / "good.json"
    td.save_dataset(good, td.Dataset([td.Trajectory.from_samples(
        "a" * 24, np.arange(10) / 25, 100 + 4 * np.arange(10.0), np.full(10, 6.0),
        length=15, width=6, height=5, direction=1)]))
    assert run("validate", good) == 0
    assert json.loads(capsys.readouterr().out)["violations"] == []
    fixture = tmp_path / "fixture.json"
    fixture.write_bytes(example_bytes)
    assert run("validate", fixture, "-o", tmp_path / "v.json") == 2
    assert error_line(capsys).startswith("roadtraj-error code=2 ")
    assert len(json.loads((tmp_path / "v.json").read_text())["violations"]) == 2
    (tmp_path / "broken.json").write_text("[{")
    assert run("validate", tmp_path / "broken.json") == 2


def test_usage_errors(capsys):
    assert run() == 1
    assert "code=1" in error_line(capsys)
    assert run("aggregate") == 1
    assert run("frobnicate") == 1
    assert run("metrics") == 1
    assert run("metrics", "--pred", "p.json") == 1
    assert error_line(capsys).startswith("roadtraj-error code=1 type=UsageError")


def test_missing_file_is_data_error(tmp_path, capsys):
    assert run("aggregate", tmp_path / "nope.json", "-o", tmp_path / "f.csv") == 2
    assert "code=2" in error_line(capsys)
    (tmp_path / "s.json").write_text(json.dumps({"x_end": 3000, "lanes": 2}))
    assert run("synth", "--spec", tmp_path / "s.json", "-o", tmp_path / "t.json") == 2
    (tmp_path / "s.json").write_text(json.dumps({"x_end": 3000}))
    (tmp_path / "c.json").write_text(json.dumps({"events": []}))
    assert run("synth", "--spec", tmp_path / "s.json", "--corrupt", tmp_path / "c.json",
               "-o", tmp_path / "t.json", "-O", tmp_path / "f.json") == 2
    assert "unknown corruption keys" in error_line(capsys)


def test_calibrate_and_nonconvergence(tmp_path, capsys):
    P = pinhole_projection([0.0, -60.0, 70.0], [200.0, 20.0, 0.0])
    rng = np.random.default_rng(1)
    g = np.c_[rng.uniform(50, 400, 8), rng.uniform(-40, 60, 8)]
    img, g, seg, hp, hx = synthetic_calibration_data(P, g)
    geo = RoadwayGeometry(np.c_[np.arange(0, 1000, 250.0), np.zeros(4)])
    box = roadway_to_stateplane(RoadwayBox(250.0, 10.0, 15.6381, 6.2, 4.7021), geo)
    doc = {"image_points": img.tolist(), "ground_points": g.tolist(),
           "vertical_segments": seg.tolist(), "height_pixels": hp.tolist(),
           "height_points": hx.tolist(), "boxes": [project_box_to_image(box, P).tolist()]}
    (tmp_path / "corr.json").write_text(json.dumps(doc))
    assert run("calibrate", tmp_path / "corr.json", "-o", tmp_path / "cal.json") == 0
    out = json.loads((tmp_path / "cal.json").read_text())
    assert out["box_heights"][0]["height"] == pytest.approx(4.7021, abs=0.01)
    (tmp_path / "cfg.json").write_text(json.dumps({"calibrate": {"max_height": 2.0}}))
    assert run("--config", tmp_path / "cfg.json", "calibrate", tmp_path / "corr.json",
               "-o", tmp_path / "cal2.json") == 3
    assert error_line(capsys).startswith("roadtraj-error code=3 type=NonConvergenceError")


def test_convert_round_trip(tmp_path):
    geo = {"control_points": [[0.0, 0.0], [400.0, 30.0], [800.0, 100.0], [1200.0, 210.0]]}
    (tmp_path / "geo.json").write_text(json.dumps(geo))
    boxes = [{"x": 300.0, "y": -12.0, "l": 15.0, "w": 6.0, "h": 5.0, "direction": -1},
             {"x": 650.0, "y": 18.0, "l": 40.0, "w": 8.5, "h": 12.0, "direction": 1}]
    (tmp_path / "boxes.json").write_text(json.dumps(boxes))
    assert run("convert", tmp_path / "boxes.json", "--geometry", tmp_path / "geo.json",
               "--to", "stateplane", "-o", tmp_path / "sp.json") == 0
    assert run("convert", tmp_path / "sp.json", "--geometry", tmp_path / "geo.json",
               "--to", "roadway", "-o", tmp_path / "rw.json") == 0
    back = json.loads((tmp_path / "rw.json").read_text())["boxes"]
    for a, b in zip(boxes, back):
        for k in ("x", "y", "l", "w", "h"):
            assert b[k] == pytest.approx(a[k], abs=1e-6)
        assert b["direction"] == a["direction"]


def test_resample_fixture_phase(tmp_path, example_bytes):
    src = tmp_path / "fixture.json"
    src.write_bytes(example_bytes)
    assert run("resample", src, "--offset", 0.02, "--no-check", "-o", tmp_path / "rs.json") == 0
    a = td.read_dataset(src)[0]
    b = td.read_dataset(tmp_path / "rs.json")[0]
    # the printed table is abridged, so the grid fills the gap; source samples are kept
    idx = np.rint((a.timestamps - b.timestamps[0]) * 25).astype(int)
    assert np.array_equal(b.x_positions[idx], a.x_positions)
    assert len(b) > len(a)


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "roadtraj.cli", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0
    for name in ("validate", "resample", "convert", "calibrate", "synth", "reconcile",
                 "aggregate", "tsdiagram", "waves", "metrics", "artifacts"):
        assert name in out.stdout


def test_reference_config_covers_stages():
    cfg = reference_config()
    assert {"resample", "aggregate", "reconcile", "waves", "metrics", "artifacts"} <= set(cfg)
