"""Command-line entry point: ``roadtraj <subcommand> ...``.

Every subcommand reads and writes plain files (JSON datasets, CSV fields,
PNG images), so stages compose in shell pipelines.  Defaults come from the
reference config shipped in ``roadtraj/data/reference_config.json``; a
``--config`` file overrides any subset of it.  Each run writes a JSON report
with the resolved config and SHA-256 hashes of its inputs, either to
``--run-report`` or next to the primary output as ``<output>.run.json``.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical non-convergence.  Failures print one line on stderr::

    roadtraj-error code=2 type=DatasetSchemaError message="..."

``ROADTRAJ_THREADS`` caps the BLAS/OpenMP thread pools.
"""

from __future__ import annotations

import os

_threads = os.environ.get("ROADTRAJ_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import copy
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import macrofield, quality, reconcile, synth, trajdata, waves
from .geometry import camera, roadway

CONFIG_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def reference_config() -> dict:
    text = resources.files("roadtraj").joinpath("data/reference_config.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if hasattr(obj, "to_json"):
        return _jsonable(obj.to_json())
    return obj


def _dump(doc) -> str:
    return json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n"


def _write_json(path, doc):
    Path(path).write_text(_dump(doc))


# --------------------------------------------------------------------------
# subcommands; each returns (summary dict, primary output path or None)

def cmd_validate(args, cfg):
    ds = trajdata.read_dataset(args.file)
    report = trajdata.validate_dataset(ds)
    doc = report.to_json()
    if args.output:
        _write_json(args.output, doc)
    else:
        sys.stdout.write(_dump(doc))
    if report:
        raise trajdata.DatasetValidationError(report)
    return {"violations": 0, "trajectories": len(ds)}, args.output


def cmd_resample(args, cfg):
    c = cfg["resample"]
    rate = args.rate if args.rate is not None else c["rate_hz"]
    offset = args.offset if args.offset is not None else c["offset"]
    c.update(rate_hz=rate, offset=offset)
    ds = trajdata.read_dataset(args.file)
    out = trajdata.resample_dataset(ds, rate, offset)
    trajdata.save_dataset(args.output, out, check=not args.no_check)
    return {"trajectories": len(out), "rate_hz": rate}, args.output


def cmd_convert(args, cfg):
    geom = roadway.load_geometry(args.geometry)
    doc = json.loads(Path(args.boxes).read_text())
    items = doc["boxes"] if isinstance(doc, dict) else doc
    out = []
    if args.to == "stateplane":
        for b in items:
            box = roadway.RoadwayBox(b["x"], b["y"], b.get("l", 0.0), b.get("w", 0.0),
                                     b.get("h", 0.0), b.get("direction"))
            sp = roadway.roadway_to_stateplane(box, geom)
            out.append({"corners": sp.corners.tolist()})
    else:
        for b in items:
            rb = roadway.stateplane_to_roadway(roadway.StatePlaneBox(np.asarray(b["corners"], float)),
                                               geom)
            out.append({"x": float(rb.x), "y": float(rb.y), "l": float(rb.l), "w": float(rb.w),
                        "h": float(rb.h), "direction": int(rb.direction)})
    _write_json(args.output, {"boxes": out})
    return {"boxes": len(out), "to": args.to}, args.output


def cmd_calibrate(args, cfg):
    doc = json.loads(Path(args.correspondences).read_text())
    try:
        cal = camera.calibrate(doc["image_points"], doc["ground_points"], doc["vertical_segments"],
                               doc["height_pixels"], doc["height_points"])
    except KeyError as exc:
        raise trajdata.DatasetSchemaError(f"correspondence file lacks {exc.args[0]!r}", -1) from None
    out = cal.to_json()
    heights = []
    for box in doc.get("boxes", []):
        sp, r = camera.estimate_box_height(np.asarray(box, float), cal.H, cal.P,
                                           max_height=cfg["calibrate"]["max_height"],
                                           return_residual=True)
        heights.append({"height": float(sp.corners[:, 2].max()), "residual_px": float(r)})
    if heights:
        out["box_heights"] = heights
    _write_json(args.output, out)
    return {"residual_ft": cal.residual_ft, "residual_px": cal.residual_px,
            "boxes": len(heights)}, args.output


def cmd_synth(args, cfg):
    spec = synth.load_spec(args.spec, "scenario")
    truth = synth.generate_scenario(spec)
    trajdata.save_dataset(args.output, truth)
    summary = {"vehicles": len(truth)}
    if args.corrupt:
        if not args.fragments:
            raise UsageError("--corrupt needs -O/--fragments for the fragment output")
        cspec = synth.load_spec(args.corrupt, "corruption")
        cspec.check_extent((spec.x_start, spec.x_end))
        fs = synth.corrupt(truth, cspec)
        trajdata.save_dataset(args.fragments, fs.to_dataset(), check=False)
        summary["fragments"] = len(fs)
    return summary, args.output


def cmd_reconcile(args, cfg):
    c = cfg["reconcile"]
    if args.gating:
        c["gating"] = _merge(c["gating"], json.loads(Path(args.gating).read_text()))
    if args.weights:
        c["weights"] = _merge(c["weights"], json.loads(Path(args.weights).read_text()))
    gating = reconcile.GatingParams.from_json(c["gating"])
    weights = reconcile.ReconciliationWeights.from_json(c["weights"])
    frags = trajdata.read_dataset(args.fragments)
    ds, report = reconcile.reconcile_fragments(list(frags), gating, weights, smooth=not args.no_smooth)
    ds = trajdata.Dataset(ds.trajectories, frags.dataset_id,
                          {"reconcile": {"n_fragments": report["n_fragments"],
                                         "n_chains": report["n_chains"]}})
    trajdata.save_dataset(args.output, ds, check=False)
    if args.report:
        _write_json(args.report, report)
    return {"chains": report["n_chains"], "fragments": report["n_fragments"],
            "total_cost": report["total_cost"]}, args.output


def _field_kw(args, cfg):
    c = cfg["aggregate"]
    for key in ("dx", "dt", "lane_width", "max_gap"):
        v = getattr(args, key, None)
        if v is not None:
            c[key] = v
    return dict(direction=args.direction, lane=args.lane, lane_width=c["lane_width"],
                max_gap=c["max_gap"])


def cmd_aggregate(args, cfg):
    kw = _field_kw(args, cfg)
    c = cfg["aggregate"]
    ds = trajdata.read_dataset(args.file)
    fld = macrofield.edie_field(ds, c["dx"], c["dt"], **kw)
    Path(args.output).write_text(macrofield.field_to_csv(fld))
    return {"shape": list(fld.shape), "nonempty_bins": int(fld.nonempty.sum())}, args.output


def _load_field(path) -> macrofield.MacroField:
    return macrofield.field_from_csv(Path(path).read_text())


def cmd_tsdiagram(args, cfg):
    c = cfg["tsdiagram"]
    for key in ("cmap", "vmin_mph", "vmax_mph"):
        v = getattr(args, key)
        if v is not None:
            c[key] = v
    if str(args.file).endswith(".csv"):
        source = _load_field(args.file)
        kw = {}
    else:
        source = trajdata.read_dataset(args.file)
        kw = _field_kw(args, cfg)
    a = cfg["aggregate"]
    _, fld = macrofield.raster_timespace(source, (a["dx"], a["dt"]), c["cmap"], c["vmin_mph"],
                                         c["vmax_mph"], path=args.output, csv_path=args.csv, **kw)
    return {"shape": list(fld.shape)}, args.output


def cmd_waves_speed(args, cfg):
    c = cfg["waves"]
    for key in ("pairs", "seed", "max_lag_s", "prominence"):
        v = getattr(args, key)
        if v is not None:
            c[key] = v
    fld = _load_field(args.field)
    res = waves.wave_speed_distribution(fld, c["pairs"], c["seed"], tuple(c["separation"]),
                                        args.direction, c["max_lag_s"], c["prominence"])
    doc = {"mean_mph": res.mean, "std_mph": res.std, "speeds_mph": res.speeds,
           "pairs": res.pairs, "dropped": res.dropped}
    if args.output:
        _write_json(args.output, doc)
    else:
        sys.stdout.write(_dump(doc))
    return {"mean_mph": res.mean, "std_mph": res.std, "n": len(res.speeds)}, args.output


def cmd_waves_cwt(args, cfg):
    c = cfg["waves"]
    if args.scales:
        c["scales"] = args.scales
    fld = _load_field(args.field)
    series = waves.extract_speed_series(fld, args.x)
    scales = waves.scale_grid(c["scales"], c["period_min_s"], c["period_max_s"])
    sg = waves.cwt_morlet(series, scales)
    summary = {"x": args.x, "n_scales": len(scales), "n_times": len(sg.times)}
    if args.window:
        summary["dominant_period_min"] = waves.dominant_period(sg, tuple(args.window), c["flat_ratio"])
    out = str(args.output)
    if out.endswith(".png") or out.endswith(".svg"):
        _save_scaleogram(sg, out)
    else:
        lines = ["period_s,time_s,coef,power,valid"]
        for i, p in enumerate(sg.periods):
            for j, t in enumerate(sg.times):
                v = sg.coef[i, j]
                cs = "" if np.isnan(v) else repr(float(v))
                ps = "" if np.isnan(v) else repr(float(v * v))
                lines.append(f"{float(p)!r},{float(t)!r},{cs},{ps},{int(sg.valid[i, j])}")
        Path(out).write_text("\n".join(lines) + "\n")
    return summary, args.output


def _save_scaleogram(sg, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    power = np.where(sg.valid, np.nan_to_num(sg.power), np.nan)
    fig, ax = plt.subplots(figsize=(10, 4), dpi=120)
    ax.pcolormesh(sg.times, sg.periods / 60.0, power, shading="nearest")
    ax.set_yscale("log")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("period (min)")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if path.endswith(".png") else None)
    plt.close(fig)


def cmd_metrics(args, cfg):
    c = cfg["metrics"]
    if args.iou_min is not None:
        c["iou_min"] = args.iou_min
    doc = {}
    if args.pred and args.gt:
        pred = trajdata.read_dataset(args.pred)
        gt = trajdata.read_dataset(args.gt)
        res = quality.evaluate_tracking(pred, gt, c["iou_min"])
        doc["tracking"] = quality.mot_summary(res).to_json()
        if res.pairs_pred:
            doc["positional_error"] = quality.positional_error_stats(res.pairs_pred, res.pairs_gt).to_json()
        doc["feasibility"] = quality.feasibility_metrics(pred, accel_limit=c["accel_limit"],
                                                         heading_limit_deg=c["heading_limit_deg"]).to_json()
    elif args.pred or args.gt:
        raise UsageError("--pred and --gt go together")
    if args.feasibility:
        ds = trajdata.read_dataset(args.feasibility)
        doc["feasibility"] = quality.feasibility_metrics(ds, accel_limit=c["accel_limit"],
                                                         heading_limit_deg=c["heading_limit_deg"]).to_json()
    if args.field:
        if not args.data:
            raise UsageError("--field needs --data")
        fld = _load_field(args.field)
        ds = trajdata.read_dataset(args.data)
        d_tot, t_tot = macrofield.trajectory_totals(ds, fld.tag.get("direction"), fld.tag.get("lane"),
                                                    cfg["aggregate"]["lane_width"])
        d_err = abs(fld.d.sum() - d_tot) / max(d_tot, 1e-300)
        t_err = abs(fld.t.sum() - t_tot) / max(t_tot, 1e-300)
        doc["conservation"] = {"distance_field": float(fld.d.sum()), "distance_data": d_tot,
                               "time_field": float(fld.t.sum()), "time_data": t_tot,
                               "distance_rel_error": d_err, "time_rel_error": t_err,
                               "tolerance": c["conservation_tol"],
                               "ok": bool(d_err < c["conservation_tol"] and t_err < c["conservation_tol"])}
    if not doc:
        raise UsageError("metrics needs --pred/--gt, --feasibility or --field/--data")
    if args.output:
        _write_json(args.output, doc)
    else:
        sys.stdout.write(_dump(doc))
    if "conservation" in doc and not doc["conservation"]["ok"]:
        raise trajdata.DatasetError("field does not conserve trajectory distance and time")
    return {k: sorted(v) for k, v in doc.items()}, args.output


def cmd_artifacts(args, cfg):
    c = cfg["artifacts"]
    for key in ("span_fraction", "pole_width", "min_block_bins", "depleted_ratio", "sparse_ratio"):
        v = getattr(args, key)
        if v is not None:
            c[key] = v
    fld = _load_field(args.field)
    rep = json.loads(Path(args.report).read_text()) if args.report else None
    res = quality.detect_missing_bands(fld, c["span_fraction"], c["pole_width"], c["min_block_bins"], rep,
                                       c["depleted_ratio"], c["sparse_ratio"])
    _write_json(args.output, res)
    return {"artifacts": len(res["artifacts"])}, args.output


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="roadtraj", description="Trajectory dataset pipeline tools.")
    p.add_argument("--config", help="JSON file overriding reference-config defaults")
    p.add_argument("--run-report", help="where to write the run report (default <output>.run.json)")
    p.add_argument("-v", "--verbose", action="store_true", help="print the run summary on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("validate", help="check a dataset against the schema and invariants")
    s.add_argument("file")
    s.add_argument("-o", "--output", help="write the violation report here instead of stdout")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("resample", help="resample every trajectory onto a uniform time grid")
    s.add_argument("file")
    s.add_argument("--rate", type=float, help="grid rate in Hz (default 25)")
    s.add_argument("--offset", type=float, help="grid phase offset in seconds (default 0)")
    s.add_argument("--no-check", action="store_true", help="write even if the result fails validation")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_resample)

    s = sub.add_parser("convert", help="convert boxes between roadway and state-plane frames")
    s.add_argument("boxes")
    s.add_argument("--geometry", required=True, help="centerline geometry JSON")
    s.add_argument("--to", choices=("stateplane", "roadway"), required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("calibrate", help="fit H and P from point correspondences")
    s.add_argument("correspondences")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("synth", help="generate a synthetic scenario and optional fragments")
    s.add_argument("--spec", required=True, help="scenario spec JSON")
    s.add_argument("--corrupt", help="corruption spec JSON")
    s.add_argument("-o", "--output", required=True, help="ground-truth dataset")
    s.add_argument("-O", "--fragments", help="corrupted fragment dataset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("reconcile", help="associate, stitch and smooth fragments")
    s.add_argument("fragments")
    s.add_argument("--weights", help="reconciliation weight JSON")
    s.add_argument("--gating", help="association gating JSON")
    s.add_argument("--no-smooth", action="store_true", help="stitch only")
    s.add_argument("--report", help="chain composition and objective report JSON")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_reconcile)

    def field_opts(s):
        s.add_argument("--dx", type=float, help="bin length in ft (default 100)")
        s.add_argument("--dt", type=float, help="bin duration in s (default 30)")
        s.add_argument("--lane", type=int, help="restrict to lane N (1 = nearest the median)")
        s.add_argument("--direction", type=int, choices=(-1, 1), help="restrict to one direction")
        s.add_argument("--lane-width", type=float, help="lane width in ft (default 12)")
        s.add_argument("--max-gap", type=float, help="skip segments longer than this many seconds")

    s = sub.add_parser("aggregate", help="Edie field CSV from a dataset")
    s.add_argument("file")
    field_opts(s)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("tsdiagram", help="speed time-space diagram image")
    s.add_argument("file", help="dataset JSON or field CSV")
    field_opts(s)
    s.add_argument("--cmap")
    s.add_argument("--vmin-mph", type=float)
    s.add_argument("--vmax-mph", type=float)
    s.add_argument("--csv", help="also write the field CSV")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_tsdiagram)

    s = sub.add_parser("waves", help="traffic wave speed and period analysis")
    wsub = s.add_subparsers(dest="waves_command", parser_class=_Parser)
    w = wsub.add_parser("speed", help="cross-correlation wave speed distribution")
    w.add_argument("field")
    w.add_argument("--pairs", type=int)
    w.add_argument("--seed", type=int)
    w.add_argument("--direction", type=int, choices=(-1, 1))
    w.add_argument("--max-lag-s", type=float)
    w.add_argument("--prominence", type=float)
    w.add_argument("-o", "--output")
    w.set_defaults(func=cmd_waves_speed)
    w = wsub.add_parser("cwt", help="Morlet scaleogram at one location")
    w.add_argument("field")
    w.add_argument("--x", type=float, required=True, help="location in ft")
    w.add_argument("--scales", help="scale grid, log:N or lin:N (default log:64)")
    w.add_argument("--window", type=float, nargs=2, metavar=("T0", "T1"),
                   help="report the dominant period inside this time window")
    w.add_argument("-o", "--output", required=True, help=".csv, .png or .svg")
    w.set_defaults(func=cmd_waves_cwt)

    s = sub.add_parser("metrics", help="tracking, feasibility and conservation metrics")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--iou-min", type=float)
    s.add_argument("--feasibility", help="dataset for feasibility metrics only")
    s.add_argument("--field", help="field CSV for the conservation check")
    s.add_argument("--data", help="dataset the field was aggregated from")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("artifacts", help="locate missing-data bands and blocks in a field")
    s.add_argument("field")
    s.add_argument("--report", help="reconcile report, for the fragmentation rate")
    s.add_argument("--span-fraction", type=float)
    s.add_argument("--pole-width", type=float)
    s.add_argument("--min-block-bins", type=int)
    s.add_argument("--depleted-ratio", type=float)
    s.add_argument("--sparse-ratio", type=float)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_artifacts)
    return p


def _input_paths(args) -> list:
    names = ("file", "boxes", "geometry", "correspondences", "spec", "corrupt", "fragments_in",
             "weights", "gating", "field", "pred", "gt", "feasibility", "data", "report_in",
             "config")
    out = []
    for n in names:
        v = getattr(args, n, None)
        if v and Path(v).is_file():
            out.append(str(v))
    if args.command == "reconcile":
        out.append(args.fragments)
    if args.command == "artifacts" and args.report:
        out.append(args.report)
    return out


def _error(code, exc) -> int:
    msg = str(exc).replace("\n", " ").replace('"', "'")
    sys.stderr.write(f'roadtraj-error code={code} type={type(exc).__name__} message="{msg}"\n')
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None or not hasattr(args, "func"):
            raise UsageError("a subcommand is required")
        cfg = reference_config()
        if args.config:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        hashes = {p: _sha256(p) for p in _input_paths(args)}
        summary, primary = args.func(args, cfg)
    except UsageError as exc:
        return _error(1, exc)
    except (camera.NonConvergenceError, np.linalg.LinAlgError) as exc:
        return _error(3, exc)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _error(2, exc)
    sub = args.command + (f" {args.waves_command}" if args.command == "waves" else "")
    report = {"command": sub, "config_version": cfg.get("version", CONFIG_VERSION),
              "config": cfg, "inputs": hashes, "summary": summary}
    target = args.run_report or (f"{primary}.run.json" if primary else None)
    if target:
        _write_json(target, report)
    if args.verbose:
        sys.stderr.write(_dump(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
