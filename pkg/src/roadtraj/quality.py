"""Tracking metrics against ground truth, physical feasibility and artifact detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .trajdata import difference

ACCEL_LIMIT = 10.0        # ft/s^2
HEADING_LIMIT_DEG = 30.0
DEFAULT_IOU_MIN = 0.1


class MetricsError(ValueError):
    pass


# --------------------------------------------------------------------------
# footprints

def footprint_rect(x, y, length, width, direction):
    """Roadway rectangle ``[x_lo, x_hi, y_lo, y_hi]`` of a back-centre footprint."""
    x, y, length, width, direction = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (x, y, length, width, direction)))
    front = x + np.where(direction < 0, -1.0, 1.0) * length
    return np.stack([np.minimum(x, front), np.maximum(x, front),
                     y - 0.5 * width, y + 0.5 * width], axis=-1)


def footprint_iou(a, b) -> np.ndarray:
    """Intersection over union of ``[x_lo, x_hi, y_lo, y_hi]`` rectangles (broadcasting)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.clip(np.minimum(a[..., 1], b[..., 1]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    iy = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 2], b[..., 2]), 0, None)
    inter = ix * iy
    area_a = (a[..., 1] - a[..., 0]) * (a[..., 3] - a[..., 2])
    area_b = (b[..., 1] - b[..., 0]) * (b[..., 3] - b[..., 2])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    same_point = (union <= 0) & np.all(a == b, axis=-1)
    return np.where(same_point, 1.0, iou)


# --------------------------------------------------------------------------
# matching

def match_timestep(pred_rects, gt_rects, iou_min: float = DEFAULT_IOU_MIN, keep=()):
    """Maximum-total-IOU assignment among pairs with IOU >= ``iou_min``.

    ``keep`` lists ``(pred_index, gt_index)`` pairs carried over from the
    previous timestep; they are retained first when still above threshold.
    Returns sorted ``(pred_index, gt_index, iou)`` triples.
    """
    P = np.asarray(pred_rects, dtype=np.float64).reshape(-1, 4)
    G = np.asarray(gt_rects, dtype=np.float64).reshape(-1, 4)
    if len(P) == 0 or len(G) == 0:
        return []
    iou = footprint_iou(P[:, None, :], G[None, :, :])
    out = []
    used_p, used_g = set(), set()
    for p, g in keep:
        if p < len(P) and g < len(G) and p not in used_p and g not in used_g and iou[p, g] >= iou_min:
            out.append((p, g, float(iou[p, g])))
            used_p.add(p)
            used_g.add(g)
    rp = [i for i in range(len(P)) if i not in used_p]
    rg = [j for j in range(len(G)) if j not in used_g]
    if rp and rg:
        sub = iou[np.ix_(rp, rg)]
        gain = np.where(sub >= iou_min, sub, 0.0)
        r, c = linear_sum_assignment(-gain)
        for i, j in zip(r, c):
            if sub[i, j] >= iou_min:
                out.append((rp[i], rg[j], float(sub[i, j])))
    return sorted(out)


def _rects(traj):
    return footprint_rect(traj.x_positions, traj.y_positions, traj.length, traj.width,
                          traj.direction)


def _by_step(dataset, rate_hz):
    """Map grid step -> list of (trajectory index, sample index)."""
    steps = {}
    for ti, tr in enumerate(dataset):
        for si, k in enumerate(np.rint(np.asarray(tr.timestamps) * rate_hz).astype(np.int64)):
            steps.setdefault(int(k), []).append((ti, si))
    return steps


@dataclass
class MatchResult:
    """Per-timestep matching log plus event counts.

    ``log`` rows are ``(step, n_gt, n_pred, [(gt_id, pred_id, iou), ...])``.
    """

    log: list = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    ious: list = field(default_factory=list)
    gt_lengths: dict = field(default_factory=dict)
    pred_lengths: dict = field(default_factory=dict)
    gt_matched: dict = field(default_factory=dict)
    pred_matched: dict = field(default_factory=dict)
    pairs_pred: list = field(default_factory=list)
    pairs_gt: list = field(default_factory=list)

    @property
    def n_gt(self) -> int:
        return sum(r[1] for r in self.log)


def evaluate_tracking(pred, gt, iou_min: float = DEFAULT_IOU_MIN, rate_hz: float = 25.0
                      ) -> MatchResult:
    """Match predictions to ground truth at every shared grid timestep."""
    pred, gt = list(pred), list(gt)
    pr = [_rects(t) for t in pred]
    gr = [_rects(t) for t in gt]
    ps, gs = _by_step(pred, rate_hz), _by_step(gt, rate_hz)
    res = MatchResult()
    res.gt_lengths = {t.id: len(t) for t in gt}
    res.pred_lengths = {t.id: len(t) for t in pred}
    res.gt_matched = {t.id: 0 for t in gt}
    res.pred_matched = {t.id: 0 for t in pred}
    current = {}      # gt id -> pred id matched at the previous step
    last = {}         # gt id -> most recent pred id ever matched
    for k in sorted(set(ps) | set(gs)):
        P = ps.get(k, [])
        G = gs.get(k, [])
        prect = np.array([pr[t][s] for t, s in P]).reshape(-1, 4)
        grect = np.array([gr[t][s] for t, s in G]).reshape(-1, 4)
        pid = [pred[t].id for t, _ in P]
        gid = [gt[t].id for t, _ in G]
        pidx = {p: i for i, p in enumerate(pid)}
        keep = [(pidx[current[g]], j) for j, g in enumerate(gid)
                if g in current and current[g] in pidx]
        m = match_timestep(prect, grect, iou_min, keep)
        rows = []
        nxt = {}
        for i, j, v in m:
            g, p = gid[j], pid[i]
            if g in last and last[g] != p:
                res.idsw += 1
            last[g] = p
            nxt[g] = p
            rows.append((g, p, v))
            res.ious.append(v)
            res.gt_matched[g] += 1
            res.pred_matched[p] += 1
            tp, sp = P[i]
            tg, sg = G[j]
            res.pairs_pred.append(_state(pred[tp], sp))
            res.pairs_gt.append(_state(gt[tg], sg))
        current = nxt
        res.tp += len(m)
        res.fp += len(P) - len(m)
        res.fn += len(G) - len(m)
        res.log.append((k, len(G), len(P), rows))
    return res


def _state(traj, i):
    return (traj.x_positions[i], traj.y_positions[i], traj.length, traj.width, traj.height)


@dataclass(frozen=True)
class MetricsSummary:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def to_json(self) -> dict:
        return dict(self.values)


def mot_summary(res: MatchResult) -> MetricsSummary:
    n_gt = res.tp + res.fn
    if n_gt == 0:
        raise MetricsError("no ground-truth positions; tracking metrics are undefined")
    n_pred = res.tp + res.fp
    gl, pl = res.gt_lengths, res.pred_lengths
    return MetricsSummary({
        "mota": 1.0 - (res.fn + res.fp + res.idsw) / n_gt,
        "motp": float(np.mean(res.ious)) if res.ious else 0.0,
        "precision": res.tp / n_pred if n_pred else 0.0,
        "recall": res.tp / n_gt,
        "gt_match_rate": float(np.mean([res.gt_matched[g] > 0 for g in gl])) if gl else 0.0,
        "pred_match_rate": float(np.mean([res.pred_matched[p] > 0 for p in pl])) if pl else 0.0,
        "per_gt_recall": float(np.mean([res.gt_matched[g] / gl[g] for g in gl])) if gl else 0.0,
        "per_pred_precision": float(np.mean([res.pred_matched[p] / pl[p] for p in pl])) if pl else 0.0,
        "tp": res.tp, "fp": res.fp, "fn": res.fn, "idsw": res.idsw, "gt_positions": n_gt,
    })


# --------------------------------------------------------------------------
# feasibility

def _overlap_flags(dataset, rate_hz):
    """Boolean per trajectory: footprint overlaps another at some shared timestep."""
    trajs = list(dataset)
    flags = np.zeros(len(trajs), dtype=bool)
    if len(trajs) < 2:
        return flags
    k = np.concatenate([np.rint(t.timestamps * rate_hz).astype(np.int64) for t in trajs])
    owner = np.concatenate([np.full(len(t), i) for i, t in enumerate(trajs)])
    r = np.concatenate([_rects(t) for t in trajs])
    order = np.lexsort((r[:, 0], k))
    k, owner, r = k[order], owner[order], r[order]
    j = 1
    while True:
        a = np.arange(len(k) - j)
        b = a + j
        cand = (k[a] == k[b]) & (r[b, 0] < r[a, 1])
        if not cand.any():
            break
        a, b = a[cand], b[cand]
        hit = (np.minimum(r[a, 3], r[b, 3]) > np.maximum(r[a, 2], r[b, 2])) & \
              (np.minimum(r[a, 1], r[b, 1]) > np.maximum(r[a, 0], r[b, 0])) & (owner[a] != owner[b])
        flags[owner[a[hit]]] = True
        flags[owner[b[hit]]] = True
        j += 1
    return flags


def feasibility_metrics(dataset, rate_hz: float = 25.0, accel_limit: float = ACCEL_LIMIT,
                        heading_limit_deg: float = HEADING_LIMIT_DEG) -> MetricsSummary:
    h = 1.0 / rate_hz
    acc_ok, head_ok, dir_ok, n = 0, 0, 0, 0
    trajs = list(dataset)
    for tr in trajs:
        if len(tr) < 3:
            continue
        vx = difference(tr.x_positions, 1, h)
        vy = difference(tr.y_positions, 1, h)
        ax = difference(tr.x_positions, 2, h)
        acc_ok += int(np.sum(np.abs(ax) < accel_limit))
        head = np.degrees(np.abs(np.arctan2(vy, np.abs(vx))))
        head_ok += int(np.sum(head < heading_limit_deg))
        dir_ok += int(np.sum(vx * tr.direction >= 0))
        n += len(tr)
    overlap = _overlap_flags(trajs, rate_hz)
    return MetricsSummary({
        "feasible_accel": acc_ok / n if n else 1.0,
        "feasible_heading": head_ok / n if n else 1.0,
        "feasible_direction": dir_ok / n if n else 1.0,
        "feasible_overlap": float(np.mean(~overlap)) if len(trajs) else 1.0,
        "samples": n,
    })


def positional_error_stats(pred_states, gt_states) -> MetricsSummary:
    """Errors of matched ``(x, y, l, w, h)`` rows: mean, std, MAE and hit fractions."""
    p = np.asarray(pred_states, dtype=np.float64).reshape(-1, 5)
    g = np.asarray(gt_states, dtype=np.float64).reshape(-1, 5)
    if len(p) == 0 or p.shape != g.shape:
        raise MetricsError("positional error statistics need matched pairs")
    e = p - g
    out = {}
    for i, name in enumerate(("x", "y", "length", "width", "height")):
        out[f"{name}_mean"] = float(e[:, i].mean())
        out[f"{name}_std"] = float(e[:, i].std(ddof=1)) if len(e) > 1 else 0.0
        out[f"{name}_mae"] = float(np.abs(e[:, i]).mean())
    dist = np.hypot(e[:, 0], e[:, 1])
    out["within_1ft"] = float(np.mean(dist < 1.0))
    out["within_3ft"] = float(np.mean(dist < 3.0))
    out["n"] = len(e)
    return MetricsSummary(out)


# --------------------------------------------------------------------------
# artifact detection

@dataclass(frozen=True)
class Artifact:
    kind: str              # missing_pole | overpass | packet_drop
    x_range: tuple
    t_range: tuple
    n_bins: int

    def to_json(self) -> dict:
        return {"kind": self.kind, "x_range": list(self.x_range), "t_range": list(self.t_range),
                "n_bins": self.n_bins}


def _runs(mask):
    edges = np.flatnonzero(np.diff(np.concatenate(([0], mask.astype(np.int8), [0]))))
    return list(zip(edges[0::2], edges[1::2]))


def detect_missing_bands(fld, span_fraction: float = 0.9, pole_width: float = 200.0,
                         min_block_bins: int = 2, reconcile_report=None,
                         depleted_ratio: float = 0.1, sparse_ratio: float = 0.02) -> dict:
    """Locate empty space-time regions of a field and classify them.

    Rows of the grid (x bins) that are empty over at least ``span_fraction``
    of the active time range, or whose total occupancy time is below
    ``depleted_ratio`` times the median row (position noise leaks a few
    samples into the edges of a band), form spatial bands; bands at least
    ``pole_width`` ft wide are missing poles, narrower ones overpasses.  Other
    connected regions of bins holding less than ``sparse_ratio`` times the
    median occupied-bin time, not touching the start or end of the active time
    range, are packet-drop blocks.
    """
    empty = ~fld.nonempty
    active_t = np.flatnonzero((~empty).any(axis=0))
    found = []
    if len(active_t) == 0:
        return {"artifacts": [], "fragmentation_rate": None}
    j0, j1 = active_t[0], active_t[-1] + 1
    sub = empty[:, j0:j1]
    xe, te = fld.x_edges, fld.t_edges
    occ = fld.t[:, j0:j1].sum(axis=1)
    band_rows = (sub.mean(axis=1) >= span_fraction) | (occ < depleted_ratio * np.median(occ))
    nx = sub.shape[0]
    for a, b in _runs(band_rows):
        if a == 0 or b == nx:
            continue
        width = (b - a) * fld.dx
        kind = "missing_pole" if width >= pole_width - 1e-9 else "overpass"
        found.append(Artifact(kind, (float(xe[a]), float(xe[b])), (float(te[j0]), float(te[j1])),
                              int(sub[a:b].sum())))
    tt = fld.t[:, j0:j1]
    sparse = tt < sparse_ratio * np.median(tt[tt > 0])
    rest = sparse & ~band_rows[:, None]
    labels, n = ndimage.label(rest)
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        xs, ts = sl
        comp = labels[sl] == lab
        size = int(comp.sum())
        if ts.start == 0 or ts.stop == sub.shape[1] or size < min_block_bins:
            continue
        if xs.start == 0 or xs.stop == nx:
            continue
        found.append(Artifact("packet_drop", (float(xe[xs.start]), float(xe[xs.stop])),
                              (float(te[j0 + ts.start]), float(te[j0 + ts.stop])), size))
    found.sort(key=lambda a: (a.x_range, a.t_range))
    frag = None
    if reconcile_report:
        frag = reconcile_report.get("fragments_per_chain")
    return {"artifacts": found, "fragmentation_rate": frag}
