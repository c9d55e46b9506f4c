"""Seeded synthetic traffic with planted waves, and artifact injection.

Ground truth comes from a prescribed speed field rather than a car-following
model, so the propagation speed and period of every wave are known exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .trajdata import Dataset, TimeGrid, Trajectory

# class -> (probability, length, width, height) in feet
DEFAULT_CLASS_MIX = {
    0: (0.45, 15.0, 6.0, 4.7),
    1: (0.20, 16.2, 6.2, 5.6),
    2: (0.12, 18.5, 6.7, 6.2),
    3: (0.05, 19.0, 6.6, 7.0),
    4: (0.10, 70.0, 8.5, 13.5),
    5: (0.05, 30.0, 8.0, 11.0),
    6: (0.03, 7.0, 3.0, 4.0),
}

ENTRY_BUFFER_FT = 300.0


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class PlantedWave:
    """Speed dip ``A * max(0, cos(phase))`` moving at ``speed`` ft/s.

    Positive ``speed`` travels upstream (against traffic).  ``periods`` is a
    schedule of ``(tau_start, period_s)`` pairs on the wave's own clock
    ``tau = t + d * (x - x_ref) / speed``; a single entry gives a steady wave.
    """

    amplitude: float
    speed: float
    periods: tuple = ((0.0, 300.0),)
    x_ref: float | None = None
    phase0: float = 0.0

    def __post_init__(self):
        per = tuple(sorted((float(a), float(b)) for a, b in self.periods))
        object.__setattr__(self, "periods", per)
        if not per or any(p <= 0 for _, p in per):
            raise ScenarioError("wave periods must be positive")
        if self.speed == 0:
            raise ScenarioError("wave speed must be nonzero")
        if self.amplitude < 0:
            raise ScenarioError("wave amplitude must be non-negative")

    def phase(self, tau) -> np.ndarray:
        """Continuous phase (radians) of the period schedule at ``tau``."""
        starts = np.array([s for s, _ in self.periods])
        per = np.array([p for _, p in self.periods])
        cycles = np.concatenate(([0.0], np.cumsum(np.diff(starts) / per[:-1])))
        tau = np.asarray(tau, dtype=np.float64)
        i = np.clip(np.searchsorted(starts, tau, side="right") - 1, 0, len(starts) - 1)
        return self.phase0 + 2.0 * np.pi * (cycles[i] + (tau - starts[i]) / per[i])


@dataclass(frozen=True)
class ScenarioSpec:
    x_start: float = 0.0
    x_end: float = 4000.0
    duration: float = 600.0
    start_time: float = 0.0
    n_lanes: int = 4
    lane_width: float = 12.0
    inflow: float = 0.5
    direction: int = 1
    free_flow_speed: float = 100.0
    waves: tuple = ()
    arrivals: str = "poisson"
    class_mix: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_MIX))
    dimension_jitter: float = 0.03
    min_gap: float = 1.0
    rate_hz: float = 25.0
    drain: bool = True
    seed: int = 0

    def __post_init__(self):
        waves = tuple(w if isinstance(w, PlantedWave) else PlantedWave(**w) for w in self.waves)
        object.__setattr__(self, "waves", waves)
        mix = {int(k): tuple(map(float, v)) for k, v in self.class_mix.items()}
        object.__setattr__(self, "class_mix", mix)
        if not self.x_end > self.x_start:
            raise ScenarioError("extent must have x_end > x_start")
        if not (self.duration > 0 and self.free_flow_speed > 0 and self.lane_width > 0
                and self.rate_hz > 0 and self.n_lanes >= 1):
            raise ScenarioError("duration, speeds, lane count/width and rate must be positive")
        if self.inflow < 0:
            raise ScenarioError("inflow must be non-negative")
        if self.direction not in (-1, 1):
            raise ScenarioError("direction must be -1 or +1")
        if sum(w.amplitude for w in waves) >= self.free_flow_speed:
            raise ScenarioError("wave amplitude must stay below the free-flow speed")
        if self.arrivals not in ("poisson", "uniform"):
            raise ScenarioError("arrivals must be 'poisson' or 'uniform'")
        if not mix or any(v[0] < 0 or min(v[1:]) <= 0 for v in mix.values()):
            raise ScenarioError("class mix needs non-negative weights and positive dimensions")

    @property
    def min_speed(self) -> float:
        return self.free_flow_speed - sum(w.amplitude for w in self.waves)

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["waves"] = [dataclasses.asdict(w) for w in self.waves]
        doc["class_mix"] = {str(k): list(v) for k, v in self.class_mix.items()}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ScenarioSpec":
        doc = dict(doc)
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
        doc["waves"] = tuple(PlantedWave(**w) for w in doc.get("waves", ()))
        if "class_mix" in doc:
            doc["class_mix"] = {int(k): tuple(v) for k, v in doc["class_mix"].items()}
        return cls(**doc)


def speed_field(spec: ScenarioSpec):
    """Ground-truth speed ``v(x, t)`` (ft/s, positive) of a scenario."""
    x_mid = 0.5 * (spec.x_start + spec.x_end)
    d = spec.direction

    def v(x, t):
        x = np.asarray(x, dtype=np.float64)
        out = np.full(np.broadcast(x, t).shape, spec.free_flow_speed)
        for w in spec.waves:
            xr = x_mid if w.x_ref is None else w.x_ref
            tau = np.asarray(t) - spec.start_time + d * (x - xr) / w.speed
            out = out - w.amplitude * np.maximum(0.0, np.cos(w.phase(tau)))
        return out

    return v


def _hex_id(rng, taken=None) -> str:
    while True:
        s = rng.bytes(12).hex()
        if taken is None or s not in taken:
            if taken is not None:
                taken.add(s)
            return s


def _arrivals(spec, rng):
    """Per-vehicle (arrival time, lane) sorted by time."""
    if spec.inflow == 0:
        return np.zeros(0), np.zeros(0, dtype=int)
    if spec.arrivals == "uniform":
        h = spec.n_lanes / spec.inflow
        times, lanes = [], []
        for lane in range(1, spec.n_lanes + 1):
            t = np.arange((lane - 1) * h / spec.n_lanes, spec.duration, h)
            times.append(t)
            lanes.append(np.full(len(t), lane))
        t = np.concatenate(times)
        lanes = np.concatenate(lanes)
        order = np.argsort(t, kind="stable")
        return t[order], lanes[order]
    n_guess = int(spec.inflow * spec.duration * 1.5 + 20)
    t = np.cumsum(rng.exponential(1.0 / spec.inflow, size=n_guess))
    while t[-1] < spec.duration:
        t = np.concatenate([t, t[-1] + np.cumsum(rng.exponential(1.0 / spec.inflow, size=n_guess))])
    t = t[t < spec.duration]
    return t, rng.integers(1, spec.n_lanes + 1, size=len(t))


def _dimensions(spec, rng, n):
    classes = np.array(sorted(spec.class_mix))
    w = np.array([spec.class_mix[c][0] for c in classes])
    cls = rng.choice(classes, size=n, p=w / w.sum())
    base = np.array([spec.class_mix[c][1:] for c in cls]).reshape(n, 3)
    jitter = 1.0 + spec.dimension_jitter * np.clip(rng.standard_normal((n, 3)), -3, 3)
    return cls, np.round(base * jitter, 4)


def generate_scenario(spec: ScenarioSpec) -> Dataset:
    """Integrate every vehicle through the speed field on the 25 Hz grid.

    Vehicles enter at the upstream edge in arrival order (queueing if the
    entry is blocked).  Each step is a Heun update of ``dx/dt = d v(x, t)``
    followed by a same-lane leader cap that keeps at least ``min_gap`` ft
    between a vehicle's front and its leader's back.  Arrivals fall in
    ``[0, duration)``; with ``drain`` the run continues until every vehicle
    has left the extent, otherwise it stops at ``duration``.
    """
    rng = np.random.default_rng(spec.seed)
    id_rng = np.random.default_rng([spec.seed, 1])
    dataset_id = _hex_id(np.random.default_rng([spec.seed, 2]))
    meta = {"scenario": spec.to_json()}
    t_arr, lane_arr = _arrivals(spec, rng)
    n = len(t_arr)
    if n == 0:
        return Dataset((), dataset_id, meta)
    cls, dims = _dimensions(spec, rng, n)
    l_max = max(v[1] for v in spec.class_mix.values()) * (1 + 3 * spec.dimension_jitter)
    lane_rate = spec.inflow / spec.n_lanes
    if lane_rate * (l_max + spec.min_gap) / spec.min_speed >= 1.0:
        raise ScenarioError(
            f"inflow {spec.inflow} veh/s cannot keep a {spec.min_gap} ft gap at the "
            f"minimum speed {spec.min_speed} ft/s")
    ids = []
    taken = set()
    for _ in range(n):
        ids.append(_hex_id(id_rng, taken))

    d = spec.direction
    L = spec.x_end - spec.x_start
    x_entry = spec.x_start if d > 0 else spec.x_end
    v = speed_field(spec)
    grid = TimeGrid(spec.rate_hz)
    k0 = grid.ceil_index(spec.start_time)
    n_steps = int(round(spec.duration * spec.rate_hz))
    dt = 1.0 / spec.rate_hz
    # tiny margin so round-off never lands a gap just under min_gap
    gap_need = dims[:, 0] + spec.min_gap + 1e-6
    lane_key = 1e7

    queues = {lane: list(np.flatnonzero(lane_arr == lane)) for lane in range(1, spec.n_lanes + 1)}
    heads = {lane: 0 for lane in queues}
    active = np.zeros(0, dtype=np.int64)      # vehicle indices ordered by (lane, entry)
    s = np.zeros(0)
    offset = np.zeros(0)
    rec_v, rec_k, rec_s = [], [], []

    def layout(active):
        lanes = lane_arr[active]
        order = np.lexsort((np.arange(len(active)), lanes))
        active = active[order]
        lanes = lanes[order]
        c = np.zeros(len(active))
        for lane in np.unique(lanes):
            m = lanes == lane
            c[m] = np.cumsum(gap_need[active[m]])
        return active, order, c - lane_key * lanes

    step = -1
    while True:
        step += 1
        t_rel = step * dt
        t_abs = spec.start_time + t_rel
        changed = False
        new = []
        for lane, q in queues.items():
            h = heads[lane]
            if h >= len(q) or t_arr[q[h]] > t_rel + 1e-9:
                continue
            members = active[lane_arr[active] == lane]
            if len(members):
                last_s = s[np.flatnonzero(active == members[-1])[0]]
                if last_s - gap_need[q[h]] < 0:
                    continue
            new.append(q[h])
            heads[lane] = h + 1
        if new:
            active = np.concatenate([active, np.array(new, dtype=np.int64)])
            s = np.concatenate([s, np.zeros(len(new))])
            changed = True
        if changed:
            active, order, offset = layout(active)
            s = s[order]
        if len(active):
            inside = s <= L + 1e-9
            rec_v.append(active[inside])
            rec_k.append(np.full(int(inside.sum()), step, dtype=np.int64))
            rec_s.append(s[inside])
        pending = any(heads[q] < len(queues[q]) for q in queues)
        if step >= n_steps and not (spec.drain and (pending or np.any(s <= L + 1e-9))):
            break
        # advance
        x = x_entry + d * s
        k1 = v(x, t_abs)
        k2 = v(x + d * dt * k1, t_abs + dt)
        free = s + 0.5 * dt * (k1 + k2)
        s = np.minimum.accumulate(free + offset) - offset
        gone = s > L + ENTRY_BUFFER_FT
        if np.any(gone):
            active, s = active[~gone], s[~gone]
            active, order, offset = layout(active)
            s = s[order]

    if not rec_v:
        return Dataset((), dataset_id, meta)
    veh = np.concatenate(rec_v)
    kk = np.concatenate(rec_k)
    ss = np.concatenate(rec_s)
    order = np.lexsort((kk, veh))
    veh, kk, ss = veh[order], kk[order], ss[order]
    bounds = np.flatnonzero(np.diff(veh)) + 1
    trajs = []
    starts = np.concatenate(([0], bounds))
    stops = np.concatenate((bounds, [len(veh)]))
    for a, b in zip(starts, stops):
        i = int(veh[a])
        if b - a < 2:
            continue
        t = grid.time(k0 + kk[a:b])
        x = x_entry + d * ss[a:b]
        y = np.full(b - a, d * (lane_arr[i] - 0.5) * spec.lane_width)
        trajs.append((t[0], i, Trajectory.from_samples(
            ids[i], t, x, y, length=dims[i, 0], width=dims[i, 1], height=dims[i, 2],
            direction=d, vehicle_class=int(cls[i]))))
    trajs.sort(key=lambda r: (r[0], r[1]))
    meta["lanes"] = {tr.id: int(lane_arr[i]) for _, i, tr in trajs}
    return Dataset(tuple(tr for _, _, tr in trajs), dataset_id, meta)


# --------------------------------------------------------------------------
# corruption

@dataclass(frozen=True)
class CorruptionSpec:
    """Artifact directives.

    Each directive is a dict with a ``type`` among ``missing_pole``,
    ``overpass``, ``packet_drop`` (needs ``t``), ``homography_shift`` (needs
    ``bias``) and ``noise`` (``sigma_x``, ``sigma_y``; defaults 2.6 / 0.6 ft).
    Intervals are ``[start, stop)`` in feet and absolute seconds.
    """

    directives: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "directives", tuple(dict(d) for d in self.directives))
        for d in self.directives:
            kind = d.get("type")
            if kind not in ("missing_pole", "overpass", "packet_drop", "homography_shift", "noise"):
                raise ScenarioError(f"unknown corruption directive {kind!r}")
            if kind != "noise" and len(d.get("x", ())) != 2:
                raise ScenarioError(f"{kind} needs an x interval")
            if kind == "packet_drop" and len(d.get("t", ())) != 2:
                raise ScenarioError("packet_drop needs a t interval")

    def of_type(self, *kinds):
        return [d for d in self.directives if d["type"] in kinds]

    def check_extent(self, x_range):
        lo, hi = x_range
        for d in self.directives:
            if "x" in d and not (lo <= d["x"][0] < d["x"][1] <= hi):
                raise ScenarioError(f"{d['type']} interval {d['x']} outside extent {x_range}")

    def to_json(self) -> dict:
        return {"directives": [dict(d) for d in self.directives], "seed": self.seed}

    @classmethod
    def from_json(cls, doc: dict) -> "CorruptionSpec":
        unknown = set(doc) - {"directives", "seed"}
        if unknown:
            raise ScenarioError(f"unknown corruption keys {sorted(unknown)}")
        return cls(tuple(doc.get("directives", ())), doc.get("seed", 0))


@dataclass(frozen=True)
class FragmentSet:
    """Fragments with their true parents and the corruption log.

    ``spans[i]`` is the ``[start, stop)`` sample range of fragment ``i``
    within its parent.
    """

    fragments: tuple
    parents: tuple
    spans: tuple
    log: tuple = ()
    dataset_id: str | None = None

    def __len__(self):
        return len(self.fragments)

    def by_parent(self) -> dict:
        out = {}
        for frag, p in zip(self.fragments, self.parents):
            out.setdefault(p, []).append(frag)
        return out

    def to_dataset(self) -> Dataset:
        meta = {
            "parents": {f.id: p for f, p in zip(self.fragments, self.parents)},
            "spans": {f.id: list(s) for f, s in zip(self.fragments, self.spans)},
            "corruption_log": list(self.log),
        }
        return Dataset(self.fragments, self.dataset_id, meta)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "FragmentSet":
        parents = ds.metadata.get("parents", {})
        spans = ds.metadata.get("spans", {})
        return cls(tuple(ds), tuple(parents.get(f.id, f.id) for f in ds),
                   tuple(tuple(spans.get(f.id, (0, len(f)))) for f in ds),
                   tuple(ds.metadata.get("corruption_log", ())), ds.dataset_id)


def _in(v, interval):
    return (v >= interval[0]) & (v < interval[1])


def corrupt(dataset: Dataset, spec: CorruptionSpec) -> FragmentSet:
    rng = np.random.default_rng([spec.seed, 3])
    id_rng = np.random.default_rng([spec.seed, 4])
    taken = {t.id for t in dataset}
    bands = spec.of_type("missing_pole", "overpass")
    blocks = spec.of_type("packet_drop")
    shifts = spec.of_type("homography_shift")
    noise = spec.of_type("noise")
    frags, parents, spans, log = [], [], [], []
    for traj in dataset:
        t, x, y = traj.timestamps, traj.x_positions, traj.y_positions.copy()
        drop = np.zeros(len(t), dtype=bool)
        for b in bands:
            drop |= _in(x, b["x"])
        for b in blocks:
            drop |= _in(x, b["x"]) & _in(t, b["t"])
        for b in shifts:
            m = _in(x, b["x"]) & ~drop
            if m.any():
                y[m] += b["bias"]
                log.append({"parent": traj.id, "action": "shift_y", "count": int(m.sum()),
                            "bias": b["bias"]})
        xn = x.copy()
        for b in noise:
            sx, sy = b.get("sigma_x", 2.6), b.get("sigma_y", 0.6)
            xn = xn + sx * rng.standard_normal(len(t))
            y = y + sy * rng.standard_normal(len(t))
            log.append({"parent": traj.id, "action": "noise", "sigma_x": sx, "sigma_y": sy})
        keep = ~drop
        edges = np.flatnonzero(np.diff(np.concatenate(([0], keep.view(np.int8), [0]))))
        runs = list(zip(edges[0::2], edges[1::2]))
        d_edges = np.flatnonzero(np.diff(np.concatenate(([0], drop.view(np.int8), [0]))))
        for a, b in zip(d_edges[0::2], d_edges[1::2]):
            log.append({"parent": traj.id, "action": "delete", "reason": "band_or_block",
                        "start": int(a), "stop": int(b)})
        short = [(a, b) for a, b in runs if b - a < 2]
        for a, b in short:
            log.append({"parent": traj.id, "action": "delete", "reason": "short_fragment",
                        "start": int(a), "stop": int(b)})
        runs = [(a, b) for a, b in runs if b - a >= 2]
        for a, b in runs:
            fid = traj.id if len(runs) == 1 else _hex_id(id_rng, taken)
            frags.append(traj.with_samples(t[a:b], xn[a:b], y[a:b], id=fid))
            parents.append(traj.id)
            spans.append((int(a), int(b)))
            if len(runs) > 1:
                log.append({"parent": traj.id, "action": "fragment", "id": fid,
                            "start": int(a), "stop": int(b)})
    return FragmentSet(tuple(frags), tuple(parents), tuple(spans), tuple(log), dataset.dataset_id)


def reassemble(fragment_set: FragmentSet, parent: Trajectory) -> dict:
    """Sample-index coverage of ``parent`` by its fragments and logged deletions."""
    covered = np.zeros(len(parent), dtype=np.int64)
    for frag, p, (a, b) in zip(fragment_set.fragments, fragment_set.parents, fragment_set.spans):
        if p == parent.id:
            covered[a:b] += 1
    deleted = np.zeros(len(parent), dtype=np.int64)
    for e in fragment_set.log:
        if e["parent"] == parent.id and e["action"] == "delete":
            deleted[e["start"]:e["stop"]] += 1
    return {"emitted": covered, "deleted": deleted}


def load_spec(path, kind="scenario"):
    with open(path) as fh:
        doc = json.load(fh)
    return ScenarioSpec.from_json(doc) if kind == "scenario" else CorruptionSpec.from_json(doc)
