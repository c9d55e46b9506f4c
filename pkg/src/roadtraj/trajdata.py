"""Trajectory records, dataset files, validation and 25 Hz resampling.

A dataset file is a UTF-8 JSON array of trajectory objects.  Positions are
the back-center footprint of the vehicle in roadway coordinates (feet),
times are unix seconds.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_RATE_HZ = 25.0
GAP_THRESHOLD_S = 0.5

VEHICLE_CLASSES = {
    0: "sedan",
    1: "midsize",
    2: "pickup",
    3: "van",
    4: "semi",
    5: "truck",
    6: "motorcycle",
}

# canonical serialized keys, in write order
CANONICAL_KEYS = (
    "_id",
    "coarse_vehicle_class",
    "first_timestamp",
    "last_timestamp",
    "timestamp",
    "x_position",
    "y_position",
    "starting_x",
    "ending_x",
    "length",
    "width",
    "height",
    "direction",
    "configuration_id",
)
KEY_ALIASES = {"vehicle_class": "coarse_vehicle_class"}

_HEX24 = re.compile(r"^[0-9a-fA-F]{24}$")


class DatasetError(ValueError):
    """Base class for dataset reading and writing failures."""


class DatasetParseError(DatasetError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DatasetSchemaError(DatasetError):
    def __init__(self, message: str, record: int, field: str | None = None):
        where = f"record {record}" + (f", field {field!r}" if field else "")
        super().__init__(f"{where}: {message}")
        self.record = record
        self.field = field


class DatasetValidationError(DatasetError):
    def __init__(self, report: "ValidationReport"):
        super().__init__(f"dataset has {len(report)} invariant violation(s): {report.counts}")
        self.report = report


class ResampleError(ValueError):
    pass


class NonUniformSamplingError(ValueError):
    pass


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One vehicle's resampled footprint path plus its static attributes.

    Construction does not enforce the data invariants; use
    :func:`validate_dataset` for that, so that bad records can still be
    represented and reported.
    """

    id: str
    vehicle_class: int
    first_timestamp: float
    last_timestamp: float
    timestamps: np.ndarray
    x_positions: np.ndarray
    y_positions: np.ndarray
    starting_x: float
    ending_x: float
    length: float
    width: float
    height: float
    direction: int
    configuration_id: int = -1

    def __post_init__(self):
        for name in ("timestamps", "x_positions", "y_positions"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        for name in ("first_timestamp", "last_timestamp", "starting_x", "ending_x",
                     "length", "width", "height"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("vehicle_class", "direction", "configuration_id"):
            object.__setattr__(self, name, int(getattr(self, name)))

    @classmethod
    def from_samples(cls, id, timestamps, x_positions, y_positions, *, length, width,
                     height, direction, vehicle_class=0, configuration_id=-1):
        """Build a trajectory whose summary fields are taken from the arrays."""
        t = np.asarray(timestamps, dtype=np.float64)
        x = np.asarray(x_positions, dtype=np.float64)
        return cls(id=id, vehicle_class=vehicle_class, first_timestamp=t[0],
                   last_timestamp=t[-1], timestamps=t, x_positions=x,
                   y_positions=y_positions, starting_x=x[0], ending_x=x[-1],
                   length=length, width=width, height=height, direction=direction,
                   configuration_id=configuration_id)

    def with_samples(self, timestamps, x_positions, y_positions, **changes) -> "Trajectory":
        """Copy with new sample arrays; summary fields follow the arrays."""
        t = np.asarray(timestamps, dtype=np.float64)
        x = np.asarray(x_positions, dtype=np.float64)
        return dataclasses.replace(
            self, timestamps=t, x_positions=x, y_positions=y_positions,
            first_timestamp=t[0], last_timestamp=t[-1], starting_x=x[0], ending_x=x[-1],
            **changes)

    def __len__(self):
        return len(self.timestamps)

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
            elif isinstance(a, float):
                if np.float64(a).tobytes() != np.float64(b).tobytes():
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple = ()
    dataset_id: str | None = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.dataset_id == other.dataset_id
                and dict(self.metadata) == dict(other.metadata)
                and len(self) == len(other)
                and all(a == b for a, b in zip(self, other)))

    __hash__ = None


# --------------------------------------------------------------------------
# parsing and writing

def _as_float(value, record, key):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DatasetSchemaError(f"expected a number, got {type(value).__name__}", record, key)
    return float(value)


def _as_int(value, record, key):
    v = _as_float(value, record, key)
    if not math.isfinite(v) or v != int(v):
        raise DatasetSchemaError(f"expected an integer, got {value!r}", record, key)
    return int(v)


def _as_array(value, record, key):
    if not isinstance(value, list):
        raise DatasetSchemaError("expected an array", record, key)
    for i, v in enumerate(value):
        if v is None:
            raise DatasetSchemaError(f"null at index {i}", record, key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise DatasetSchemaError(f"non-numeric value at index {i}", record, key)
    return np.array(value, dtype=np.float64)


def _as_id(value, record):
    if isinstance(value, dict) and "$oid" in value:
        value = value["$oid"]
    if not isinstance(value, str):
        raise DatasetSchemaError("expected an id string", record, "_id")
    return value


def trajectory_from_record(rec: Mapping[str, Any], index: int = 0) -> Trajectory:
    if not isinstance(rec, dict):
        raise DatasetSchemaError("trajectory record must be an object", index)
    rec = {KEY_ALIASES.get(k, k): v for k, v in rec.items()}
    missing = [k for k in CANONICAL_KEYS if k not in rec]
    if missing:
        raise DatasetSchemaError("missing required field", index, missing[0])
    t = _as_array(rec["timestamp"], index, "timestamp")
    x = _as_array(rec["x_position"], index, "x_position")
    y = _as_array(rec["y_position"], index, "y_position")
    if not (len(t) == len(x) == len(y)):
        bad = "x_position" if len(x) != len(t) else "y_position"
        raise DatasetSchemaError(
            f"array length mismatch (timestamp {len(t)}, x_position {len(x)}, "
            f"y_position {len(y)})", index, bad)
    return Trajectory(
        id=_as_id(rec["_id"], index),
        vehicle_class=_as_int(rec["coarse_vehicle_class"], index, "coarse_vehicle_class"),
        first_timestamp=_as_float(rec["first_timestamp"], index, "first_timestamp"),
        last_timestamp=_as_float(rec["last_timestamp"], index, "last_timestamp"),
        timestamps=t, x_positions=x, y_positions=y,
        starting_x=_as_float(rec["starting_x"], index, "starting_x"),
        ending_x=_as_float(rec["ending_x"], index, "ending_x"),
        length=_as_float(rec["length"], index, "length"),
        width=_as_float(rec["width"], index, "width"),
        height=_as_float(rec["height"], index, "height"),
        direction=_as_int(rec["direction"], index, "direction"),
        configuration_id=_as_int(rec["configuration_id"], index, "configuration_id"),
    )


def trajectory_to_record(traj: Trajectory) -> dict:
    return {
        "_id": traj.id,
        "coarse_vehicle_class": traj.vehicle_class,
        "first_timestamp": traj.first_timestamp,
        "last_timestamp": traj.last_timestamp,
        "timestamp": traj.timestamps.tolist(),
        "x_position": traj.x_positions.tolist(),
        "y_position": traj.y_positions.tolist(),
        "starting_x": traj.starting_x,
        "ending_x": traj.ending_x,
        "length": traj.length,
        "width": traj.width,
        "height": traj.height,
        "direction": traj.direction,
        "configuration_id": traj.configuration_id,
    }


def _decode(source) -> str:
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, (bytes, bytearray, memoryview)):
        raw = bytes(source)
        try:
            return raw.decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise DatasetParseError("invalid UTF-8", exc.start) from None
    return source


def load_json(source) -> Any:
    """``json.loads`` that reports failures as byte offsets."""
    text = _decode(source)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DatasetParseError(exc.msg, offset) from None


def parse_dataset(source, *, dataset_id: str | None = None,
                  metadata: Mapping[str, Any] | None = None) -> Dataset:
    """Parse a dataset document (bytes, str or a binary file object).

    The top level is either an array of trajectory records, or an object with
    a ``trajectories`` array and optional ``dataset_id``/``metadata``.
    """
    doc = load_json(source)
    meta = dict(metadata or {})
    if isinstance(doc, dict):
        if "trajectories" not in doc:
            raise DatasetSchemaError("top-level object lacks 'trajectories'", -1)
        dataset_id = dataset_id or doc.get("dataset_id")
        meta = {**doc.get("metadata", {}), **meta}
        records = doc["trajectories"]
    else:
        records = doc
    if not isinstance(records, list):
        raise DatasetSchemaError("trajectory collection must be an array", -1)
    trajs = [trajectory_from_record(rec, i) for i, rec in enumerate(records)]
    return Dataset(trajs, dataset_id=dataset_id, metadata=meta)


def write_dataset(dataset: Dataset, *, check: bool = True) -> bytes:
    """Serialize to the canonical array form.

    Floats use the shortest round-trip decimal representation, so
    ``parse_dataset(write_dataset(d))`` reproduces every value bit for bit.
    With ``check`` the dataset must validate cleanly; pass ``check=False`` to
    archive records as delivered.  Non-finite values are always refused
    since JSON cannot carry them.
    """
    report = validate_dataset(dataset)
    if check and report:
        raise DatasetValidationError(report)
    if "non_finite" in report.counts:
        raise DatasetValidationError(report)
    if len(dataset) == 0:
        return b"[]\n"
    lines = [json.dumps(trajectory_to_record(t), separators=(",", ":"), allow_nan=False)
             for t in dataset]
    return ("[\n" + ",\n".join(lines) + "\n]\n").encode("utf-8")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_dataset(path) -> Dataset:
    """Read a dataset file and its optional ``<file>.meta.json`` sidecar."""
    meta_path = sidecar_path(path)
    meta = {}
    if meta_path.exists():
        meta = load_json(meta_path.read_bytes())
    with open(path, "rb") as fh:
        ds = parse_dataset(fh)
    return Dataset(ds.trajectories, dataset_id=meta.pop("dataset_id", ds.dataset_id),
                   metadata={**ds.metadata, **meta})


def save_dataset(path, dataset: Dataset, *, check: bool = True) -> None:
    payload = write_dataset(dataset, check=check)
    Path(path).write_bytes(payload)
    if dataset.dataset_id is not None or dataset.metadata:
        meta = {"dataset_id": dataset.dataset_id, **dict(dataset.metadata)}
        sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    elif sidecar_path(path).exists():
        os.remove(sidecar_path(path))


# --------------------------------------------------------------------------
# validation

@dataclass(frozen=True, order=True)
class Violation:
    trajectory: int
    code: str
    start: int = -1
    stop: int = -1
    message: str = field(default="", compare=False)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    def __len__(self):
        return len(self.violations)

    def __bool__(self):
        return bool(self.violations)

    def __iter__(self):
        return iter(self.violations)

    @property
    def counts(self) -> dict:
        out: dict = {}
        for v in self.violations:
            out[v.code] = out.get(v.code, 0) + 1
        return dict(sorted(out.items()))

    def for_trajectory(self, index: int) -> list:
        return [v for v in self.violations if v.trajectory == index]

    def to_json(self) -> dict:
        return {
            "counts": self.counts,
            "violations": [dataclasses.asdict(v) for v in self.violations],
        }


def _runs(mask: np.ndarray) -> list:
    """(start, stop) index pairs of the True runs in ``mask``."""
    if not mask.any():
        return []
    padded = np.concatenate(([False], mask, [False]))
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def validate_trajectory(traj: Trajectory, index: int = 0) -> list:
    out = []

    def add(code, msg, start=-1, stop=-1):
        out.append(Violation(index, code, start, stop, msg))

    t, x, y = traj.timestamps, traj.x_positions, traj.y_positions
    if not _HEX24.match(traj.id):
        add("id_format", f"id {traj.id!r} is not 24 hex characters")
    if traj.vehicle_class not in VEHICLE_CLASSES:
        add("vehicle_class", f"class {traj.vehicle_class} outside 0..6")
    if traj.direction not in (-1, 1):
        add("direction_value", f"direction {traj.direction} not in {{-1, 1}}")
    dims = (traj.length, traj.width, traj.height)
    if any(d <= 0 for d in dims):
        add("dimension", f"non-positive dimension (l, w, h) = {dims}")

    scalars = (traj.first_timestamp, traj.last_timestamp, traj.starting_x, traj.ending_x) + dims
    finite = all(np.isfinite(a).all() for a in (t, x, y)) and all(map(math.isfinite, scalars))
    if not finite:
        m = min(len(t), len(x), len(y))
        bad = ~(np.isfinite(t[:m]) & np.isfinite(x[:m]) & np.isfinite(y[:m]))
        add("non_finite", "NaN or infinite value present",
            *(_runs(bad)[0] if bad.any() else (-1, -1)))

    if not (len(t) == len(x) == len(y)):
        add("array_length", f"array lengths differ: {len(t)}, {len(x)}, {len(y)}")
        return out
    if len(t) < 2:
        add("too_short", f"{len(t)} sample(s), need at least 2")
    if len(t) == 0:
        return out

    dt = np.diff(t)
    for a, b in _runs(dt <= 0):
        add("time_order", "timestamps not strictly increasing", a + 1, b + 1)

    n = len(t) - 1
    if traj.first_timestamp != t[0] and not (math.isnan(traj.first_timestamp) or math.isnan(t[0])):
        add("first_timestamp", f"first_timestamp {traj.first_timestamp!r} != timestamp[0] {t[0]!r}", 0, 1)
    if traj.last_timestamp != t[-1] and not (math.isnan(traj.last_timestamp) or math.isnan(t[-1])):
        add("last_timestamp", f"last_timestamp {traj.last_timestamp!r} != timestamp[-1] {t[-1]!r}", n, n + 1)
    if traj.starting_x != x[0] and not (math.isnan(traj.starting_x) or math.isnan(x[0])):
        add("starting_x", f"starting_x {traj.starting_x!r} != x_position[0] {x[0]!r}", 0, 1)
    if traj.ending_x != x[-1] and not (math.isnan(traj.ending_x) or math.isnan(x[-1])):
        add("ending_x", f"ending_x {traj.ending_x!r} != x_position[-1] {x[-1]!r}", n, n + 1)

    if traj.direction in (-1, 1) and np.isfinite(y).all():
        side = np.sign(y.mean())
        if side != traj.direction:
            add("lateral_side",
                f"mean y {y.mean():.4f} ft lies on the wrong side for direction {traj.direction}")
    return out


def validate_dataset(dataset: Dataset | Iterable[Trajectory]) -> ValidationReport:
    """Check every trajectory invariant; violations are returned, not raised."""
    trajs = list(dataset)
    found = []
    seen: dict = {}
    for i, traj in enumerate(trajs):
        found.extend(validate_trajectory(traj, i))
        if traj.id in seen:
            found.append(Violation(i, "duplicate_id", -1, -1,
                                   f"id {traj.id} already used by trajectory {seen[traj.id]}"))
        else:
            seen[traj.id] = i
    return ValidationReport(tuple(sorted(found)))


# --------------------------------------------------------------------------
# time grid and resampling

class TimeGrid:
    """Uniform grid ``t_k = offset + k / rate_hz``.

    Grid times are produced as one correctly-rounded division of exact
    integers, so a grid time printed as ``1668436223.30`` parses back to the
    very same double that the grid computes.
    """

    def __init__(self, rate_hz: float = DEFAULT_RATE_HZ, offset: float = 0.0):
        if not rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        self.rate_hz = float(rate_hz)
        step = Fraction(1) / Fraction(self.rate_hz).limit_denominator(10**6)
        phase = Fraction(offset).limit_denominator(10**6) % step
        self.step = step
        self.phase = phase
        den = step.denominator * phase.denominator // math.gcd(step.denominator, phase.denominator)
        self._den = den
        self._k_mul = step.numerator * (den // step.denominator)
        self._base = phase.numerator * (den // phase.denominator)
        self.offset = float(phase)

    @classmethod
    def infer(cls, timestamps, rate_hz: float = DEFAULT_RATE_HZ, resolution: int = 1000):
        """Grid whose phase matches the first timestamp (to ``1/resolution`` step)."""
        t0 = float(np.asarray(timestamps)[0])
        frac = t0 * rate_hz - math.floor(t0 * rate_hz)
        r = round(frac * resolution) % resolution
        return cls(rate_hz, float(Fraction(r, resolution) / Fraction(rate_hz).limit_denominator(10**6)))

    def index(self, t) -> np.ndarray:
        return (np.asarray(t, dtype=np.float64) - self.offset) * self.rate_hz

    def time(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=np.int64)
        return (k * self._k_mul + self._base).astype(np.float64) / float(self._den)

    def times(self, k_start: int, k_stop: int) -> np.ndarray:
        return self.time(np.arange(k_start, k_stop, dtype=np.int64))

    def _snap(self, t, fn):
        kf = float(self.index(t))
        kr = round(kf)
        if abs(kf - kr) < 1e-4:
            return int(kr)
        return int(fn(kf))

    def ceil_index(self, t) -> int:
        return self._snap(t, math.ceil)

    def floor_index(self, t) -> int:
        return self._snap(t, math.floor)

    def nearest_index(self, t) -> np.ndarray:
        return np.rint(self.index(t)).astype(np.int64)

    def on_grid(self, t, tol: float = 1e-4) -> bool:
        kf = self.index(t)
        return bool(np.all(np.abs(kf - np.rint(kf)) < tol))


def resample_trajectory(traj: Trajectory, rate_hz: float = DEFAULT_RATE_HZ,
                        offset: float = 0.0) -> Trajectory:
    """Linearly interpolate positions onto the grid ``offset + k / rate_hz``.

    The default grid is anchored at the unix epoch.  Internal gaps are
    interpolated across; see :func:`time_gaps` to locate them.
    """
    t = traj.timestamps
    if len(t) < 2:
        raise ResampleError("need at least 2 samples to resample")
    if np.any(np.diff(t) <= 0):
        raise ResampleError("input timestamps must be strictly increasing")
    grid = TimeGrid(rate_hz, offset)
    k0, k1 = grid.ceil_index(t[0]), grid.floor_index(t[-1])
    if k1 < k0:
        raise ResampleError(f"span {t[-1] - t[0]:.4f} s holds no grid point at {rate_hz} Hz")
    tt = grid.times(k0, k1 + 1)
    x = np.interp(tt, t, traj.x_positions)
    y = np.interp(tt, t, traj.y_positions)
    return traj.with_samples(tt, x, y)


def resample_dataset(dataset: Dataset, rate_hz: float = DEFAULT_RATE_HZ,
                     offset: float = 0.0) -> Dataset:
    return Dataset([resample_trajectory(t, rate_hz, offset) for t in dataset],
                   dataset_id=dataset.dataset_id, metadata=dataset.metadata)


def time_gaps(traj: Trajectory, threshold: float = GAP_THRESHOLD_S) -> list:
    """Internal sample gaps longer than ``threshold`` seconds.

    Returns ``(index_before, index_after, t_before, t_after)`` tuples.
    """
    t = traj.timestamps
    idx = np.flatnonzero(np.diff(t) > threshold)
    return [(int(i), int(i) + 1, float(t[i]), float(t[i + 1])) for i in idx]


# --------------------------------------------------------------------------
# finite differences

def difference(values, order: int, h: float) -> np.ndarray:
    """Derivative estimate of uniformly sampled values.

    Central stencils in the interior, one-sided stencils where the central
    one does not fit.  Output has the input length.
    """
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    if n < order + 1:
        raise ValueError(f"order {order} needs at least {order + 1} samples, got {n}")
    out = np.empty(n)
    if order == 1:
        out[1:-1] = (v[2:] - v[:-2]) / (2 * h)
        out[0] = (v[1] - v[0]) / h
        out[-1] = (v[-1] - v[-2]) / h
    elif order == 2:
        out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
        out[0] = out[1] if n > 2 else 0.0
        out[-1] = out[-2]
    else:
        central = np.zeros(n, dtype=bool)
        central[2:n - 2] = True
        i = np.flatnonzero(central)
        out[i] = (v[i + 2] - 2 * v[i + 1] + 2 * v[i - 1] - v[i - 2]) / (2 * h**3)
        rest = np.flatnonzero(~central)
        fwd = rest[rest + 3 < n]
        out[fwd] = (v[fwd + 3] - 3 * v[fwd + 2] + 3 * v[fwd + 1] - v[fwd]) / h**3
        bwd = rest[rest + 3 >= n]
        out[bwd] = (v[bwd] - 3 * v[bwd - 1] + 3 * v[bwd - 2] - v[bwd - 3]) / h**3
    return out


def finite_difference(traj: Trajectory, order: int, axis: str = "x",
                      rate_hz: float = DEFAULT_RATE_HZ) -> np.ndarray:
    """Speed (order 1), acceleration (2) or jerk (3) along ``axis``.

    Requires uniform sampling at ``rate_hz``; resample first otherwise.
    """
    h = 1.0 / rate_hz
    dt = np.diff(traj.timestamps)
    if len(dt) and np.max(np.abs(dt - h)) > 1e-6:
        raise NonUniformSamplingError(
            f"timestamps are not uniform at {rate_hz} Hz; call resample_trajectory first")
    values = {"x": traj.x_positions, "y": traj.y_positions}[axis]
    return difference(values, order, h)
