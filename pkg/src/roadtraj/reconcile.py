"""Fragment association, stitching and least-squares trajectory smoothing."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, asdict

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import solveh_banded

from .trajdata import Dataset, TimeGrid, Trajectory, NonUniformSamplingError


class ReconcileError(ValueError):
    pass


@dataclass(frozen=True)
class GatingParams:
    """Candidate-link gates and cost weights.

    The prediction error ``e`` is the gap-midpoint mismatch of the two end
    lines.  A cubic bridge matching both ends departs from the mean
    acceleration by ``6 e / gap**2``, so links are admitted while
    ``e <= pred_floor + accel_bound * gap**2 / 6`` and the prediction cost is
    ``w_pred`` times the square of ``e`` over that allowance.  Vehicles that
    follow each other through the same unseen slowdown share most of their
    error, and swapping two such links turns ``(e, e)`` into ``(e + d, e - d)``;
    a convex cost charges that ``2 d**2`` where a linear one would not.
    """

    max_gap: float = 15.0          # s
    pred_floor: float = 10.0       # ft, allowance at zero gap (position noise)
    accel_bound: float = 12.0      # ft/s^2
    max_lateral: float = 8.0       # ft
    fit_window: float = 2.0        # s of samples used for end-velocity fits
    w_time: float = 1.0            # per s
    w_pred: float = 30.0           # at the full allowance
    w_lateral: float = 2.0         # per ft
    w_dimension: float = 1.0       # per ft
    entry_cost: float = 30.0
    exit_cost: float = 30.0

    @classmethod
    def from_json(cls, doc):
        return cls(**(doc or {}))


@dataclass(frozen=True)
class ReconciliationWeights:
    """Per-axis ``(perturbation, acceleration, jerk)`` weights.

    With ``physical`` the difference operators are scaled by ``1/h**2`` and
    ``1/h**3`` so the penalties act on ft/s**2 and ft/s**3.
    """

    x: tuple = (1.0, 10.0, 100.0)
    y: tuple = (1.0, 10.0, 100.0)
    rate_hz: float = 25.0
    physical: bool = True

    def __post_init__(self):
        for axis in (self.x, self.y):
            if len(axis) != 3 or min(axis) < 0:
                raise ReconcileError("weights must be three non-negative numbers per axis")
            if not axis[0] > 0:
                raise ReconcileError("perturbation weight must be positive (problem is ill-posed)")

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc or {})
        for k in ("x", "y"):
            if k in doc:
                doc[k] = tuple(doc[k])
        return cls(**doc)


# --------------------------------------------------------------------------
# association

def _end_fit(t, v, window, at_end):
    """Least-squares line through the first/last ``window`` seconds."""
    if at_end:
        m = t >= t[-1] - window - 1e-9
    else:
        m = t <= t[0] + window + 1e-9
    tt, vv = t[m], v[m]
    t0 = tt.mean()
    if len(tt) < 2:
        return vv.mean(), 0.0, t0
    slope = np.sum((tt - t0) * (vv - vv.mean())) / np.sum((tt - t0) ** 2)
    return vv.mean(), slope, t0


@dataclass(frozen=True)
class _Ends:
    t0: float
    t1: float
    head: tuple
    tail: tuple
    y_head: float
    y_tail: float
    dims: np.ndarray
    direction: int


def _summaries(fragments, window):
    out = []
    for f in fragments:
        t, x, y = f.timestamps, f.x_positions, f.y_positions
        tail = _end_fit(t, x, window, True)
        head = _end_fit(t, x, window, False)
        ny = max(2, int(round(window * 25)))
        out.append(_Ends(t[0], t[-1], head, tail, float(np.mean(y[:ny])), float(np.mean(y[-ny:])),
                         np.array([f.length, f.width, f.height]), f.direction))
    return out


def _line(fit, t):
    mean, slope, t0 = fit
    return mean + slope * (t - t0)


@dataclass(frozen=True)
class AssociationGraph:
    n: int
    edges: tuple          # (i, j, cost)
    entry_cost: float
    exit_cost: float

    def link_cost(self) -> dict:
        return {(i, j): c for i, j, c in self.edges}


def build_graph(fragments, gating: GatingParams = GatingParams()) -> AssociationGraph:
    """Candidate links A -> B with gated, non-negative costs."""
    fragments = list(fragments)
    ends = _summaries(fragments, gating.fit_window)
    order = np.argsort([e.t0 for e in ends], kind="stable")
    t0s = np.array([ends[i].t0 for i in order])
    edges = []
    for i, a in enumerate(ends):
        lo = np.searchsorted(t0s, a.t1, side="right")
        hi = np.searchsorted(t0s, a.t1 + gating.max_gap, side="right")
        for j in order[lo:hi]:
            b = ends[j]
            if j == i or b.direction != a.direction or not b.t0 > a.t1:
                continue
            gap = b.t0 - a.t1
            mid = 0.5 * (a.t1 + b.t0)
            pred = abs(_line(a.tail, mid) - _line(b.head, mid))
            allow = gating.pred_floor + gating.accel_bound * gap * gap / 6.0
            if pred > allow:
                continue
            lat = abs(a.y_tail - b.y_head)
            if lat > gating.max_lateral:
                continue
            dim = float(np.abs(a.dims - b.dims).sum())
            cost = (gating.w_time * gap + gating.w_pred * (pred / allow) ** 2 + gating.w_lateral * lat
                    + gating.w_dimension * dim)
            edges.append((i, int(j), float(cost)))
    edges.sort()
    return AssociationGraph(len(fragments), tuple(edges), gating.entry_cost, gating.exit_cost)


def min_cost_flow_links(graph: AssociationGraph) -> list:
    """Optimal link set by successive shortest augmenting paths.

    Network: source -> out_i -> in_j -> sink with unit capacities and link
    cost ``c_ij - entry - exit`` (the saving from merging two chains).  Paths
    are augmented while the cheapest one has negative cost, which is the
    global optimum because the cost of a k-unit flow is convex in k.
    """
    n = graph.n
    if n == 0 or not graph.edges:
        return []
    save = graph.entry_cost + graph.exit_cost
    S, T = 2 * n, 2 * n + 1
    # node ids: out_i = i, in_j = n + j
    adj = [[] for _ in range(2 * n + 2)]   # edge: [to, cap, cost, rev_index]

    def add(u, v, cost):
        adj[u].append([v, 1, cost, len(adj[v])])
        adj[v].append([u, 0, -cost, len(adj[u]) - 1])

    for i in range(n):
        add(S, i, 0.0)
        add(n + i, T, 0.0)
    for i, j, c in graph.edges:
        add(i, n + j, c - save)

    # initial potentials: shortest distances in the acyclic layered network
    pot = [0.0] * (2 * n + 2)
    for i, j, c in graph.edges:
        pot[n + j] = min(pot[n + j], c - save)
    pot[T] = min(0.0, min(pot[n:2 * n]))
    inf = float("inf")
    while True:
        dist = [inf] * (2 * n + 2)
        prev = [None] * (2 * n + 2)
        dist[S] = 0.0
        heap = [(0.0, S)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for k, (v, cap, cost, _) in enumerate(adj[u]):
                if cap <= 0:
                    continue
                nd = d + cost + pot[u] - pot[v]
                if nd < dist[v] - 1e-12:
                    dist[v] = nd
                    prev[v] = (u, k)
                    heapq.heappush(heap, (nd, v))
        if dist[T] == inf:
            break
        path_cost = dist[T] + pot[T] - pot[S]
        if path_cost >= -1e-12:
            break
        for v in range(2 * n + 2):
            if dist[v] < inf:
                pot[v] += dist[v]
        v = T
        while v != S:
            u, k = prev[v]
            e = adj[u][k]
            e[1] -= 1
            adj[v][e[3]][1] += 1
            v = u
    links = []
    for i in range(n):
        for v, cap, cost, _ in adj[i]:
            if n <= v < 2 * n and cap == 0:
                links.append((i, v - n))
    return sorted(links)


def chains_from_links(n: int, links) -> list:
    nxt = dict(links)
    has_prev = {j for _, j in links}
    chains = []
    for i in range(n):
        if i in has_prev:
            continue
        chain = [i]
        while chain[-1] in nxt:
            chain.append(nxt[chain[-1]])
        chains.append(chain)
    return chains


def partition_cost(chains, graph: AssociationGraph) -> float:
    """Total cost of a partition; ``inf`` if it uses a non-edge."""
    costs = graph.link_cost()
    total = 0.0
    for chain in chains:
        total += graph.entry_cost + graph.exit_cost
        for a, b in zip(chain[:-1], chain[1:]):
            c = costs.get((a, b))
            if c is None:
                return float("inf")
            total += c
    return total


def associate_fragments(fragments, gating: GatingParams = GatingParams()):
    """Partition fragments into chains; returns ``(chains, graph)``."""
    fragments = list(fragments)
    graph = build_graph(fragments, gating)
    links = min_cost_flow_links(graph)
    chains = chains_from_links(len(fragments), links)
    chains.sort(key=lambda c: (fragments[c[0]].timestamps[0], c[0]))
    return chains, graph


# --------------------------------------------------------------------------
# stitching

def stitch(chain, rate_hz: float = 25.0, fit_window: float = 2.0) -> Trajectory:
    """Join time-ordered fragments, filling gaps by cubic Hermite curves."""
    chain = list(chain)
    if not chain:
        raise ReconcileError("empty chain")
    if len(chain) == 1:
        return chain[0]
    for a, b in zip(chain[:-1], chain[1:]):
        if not b.timestamps[0] > a.timestamps[-1]:
            raise ReconcileError(f"fragments {a.id} and {b.id} overlap in time")
    grid = TimeGrid.infer(chain[0].timestamps, rate_hz)
    ts, xs, ys = [chain[0].timestamps], [chain[0].x_positions], [chain[0].y_positions]
    for a, b in zip(chain[:-1], chain[1:]):
        ka = grid.nearest_index(a.timestamps[-1]) + 1
        kb = grid.nearest_index(b.timestamps[0])
        if kb > ka:
            tg = grid.times(int(ka), int(kb))
            t_end, t_start = a.timestamps[-1], b.timestamps[0]
            for src, out in (("x_positions", xs), ("y_positions", ys)):
                va, vb = getattr(a, src), getattr(b, src)
                sa = _end_fit(a.timestamps, va, fit_window, True)[1]
                sb = _end_fit(b.timestamps, vb, fit_window, False)[1]
                h = CubicHermiteSpline([t_end, t_start], [va[-1], vb[0]], [sa, sb])
                out.append(h(tg))
            ts.append(tg)
        ts.append(b.timestamps)
        xs.append(b.x_positions)
        ys.append(b.y_positions)
    dur = np.array([f.duration for f in chain])
    wts = dur / dur.sum() if dur.sum() > 0 else np.full(len(chain), 1.0 / len(chain))
    dims = wts @ np.array([[f.length, f.width, f.height] for f in chain])
    longest = chain[int(np.argmax(dur))]
    return Trajectory.from_samples(
        chain[0].id, np.concatenate(ts), np.concatenate(xs), np.concatenate(ys),
        length=dims[0], width=dims[1], height=dims[2], direction=chain[0].direction,
        vehicle_class=longest.vehicle_class, configuration_id=chain[0].configuration_id)


# --------------------------------------------------------------------------
# smoothing

def _gram_bands(n, coeffs):
    """Upper banded form of ``sum_k w_k D_k^T D_k`` for stencils ``coeffs``."""
    ab = np.zeros((4, n))   # rows: superdiagonal 3, 2, 1, main
    for w, stencil in coeffs:
        m = len(stencil)
        rows = n - m + 1
        if w == 0 or rows <= 0:
            continue
        for p in range(m):
            for q in range(p, m):
                val = w * stencil[p] * stencil[q]
                off = q - p
                # entries (r+p, r+q) for r in [0, rows)
                cols = np.arange(rows) + q
                ab[3 - off, cols] += val
    return ab


def _stencils(weights, axis, n):
    w1, w2, w3 = weights.x if axis == "x" else weights.y
    h = 1.0 / weights.rate_hz if weights.physical else 1.0
    d2 = np.array([1.0, -2.0, 1.0]) / h ** 2
    d3 = np.array([-1.0, 3.0, -3.0, 1.0]) / h ** 3
    return w1, [(w2, d2), (w3, d3)]


def difference_matrix(n, stencil) -> np.ndarray:
    m = len(stencil)
    D = np.zeros((max(n - m + 1, 0), n))
    for r in range(D.shape[0]):
        D[r, r:r + m] = stencil
    return D


def smoothing_objective(x, x_hat, weights: ReconciliationWeights, axis="x") -> float:
    x = np.asarray(x, dtype=np.float64)
    w1, terms = _stencils(weights, axis, len(x))
    val = w1 * np.sum((x - x_hat) ** 2)
    for w, st in terms:
        if len(x) >= len(st):
            val += w * np.sum(np.convolve(x, st[::-1], mode="valid") ** 2)
    return float(val)


def smooth_axis(values, weights: ReconciliationWeights, axis="x") -> np.ndarray:
    """Exact minimiser of the weighted perturbation/acceleration/jerk objective."""
    xh = np.asarray(values, dtype=np.float64)
    n = len(xh)
    w1, terms = _stencils(weights, axis, n)
    if n < 3:
        return xh.copy()
    ab = _gram_bands(n, terms)
    ab[3] += w1
    # a linear trend is annihilated by both stencils, so remove it first
    tt = np.arange(n, dtype=np.float64)
    slope, icpt = np.polyfit(tt, xh, 1)
    trend = icpt + slope * tt
    r = solveh_banded(ab, w1 * (xh - trend), lower=False)
    return trend + r


def reconcile_trajectory(traj: Trajectory, weights: ReconciliationWeights = ReconciliationWeights()
                         ) -> Trajectory:
    t = traj.timestamps
    if len(t) > 1:
        dt = np.diff(t)
        if np.max(np.abs(dt - 1.0 / weights.rate_hz)) > 1e-6:
            raise NonUniformSamplingError(
                f"reconciliation needs uniform {weights.rate_hz:g} Hz samples; resample first")
    return traj.with_samples(t, smooth_axis(traj.x_positions, weights, "x"),
                             smooth_axis(traj.y_positions, weights, "y"))


def reconcile_fragments(fragments, gating: GatingParams = GatingParams(),
                        weights: ReconciliationWeights = ReconciliationWeights(),
                        smooth: bool = True):
    """Associate, stitch and smooth; returns ``(Dataset, report)``."""
    fragments = list(fragments)
    chains, graph = associate_fragments(fragments, gating)
    out, chain_report = [], []
    costs = graph.link_cost()
    for chain in chains:
        traj = stitch([fragments[i] for i in chain], rate_hz=weights.rate_hz,
                      fit_window=gating.fit_window)
        entry = {"id": traj.id, "fragments": [fragments[i].id for i in chain],
                 "link_costs": [costs[(a, b)] for a, b in zip(chain[:-1], chain[1:])]}
        if smooth:
            fixed = reconcile_trajectory(traj, weights)
            entry["objective_before"] = (smoothing_objective(traj.x_positions, traj.x_positions, weights, "x")
                                         + smoothing_objective(traj.y_positions, traj.y_positions, weights, "y"))
            entry["objective_after"] = (smoothing_objective(fixed.x_positions, traj.x_positions, weights, "x")
                                        + smoothing_objective(fixed.y_positions, traj.y_positions, weights, "y"))
            traj = fixed
        out.append(traj)
        chain_report.append(entry)
    report = {
        "n_fragments": len(fragments),
        "n_chains": len(chains),
        "n_candidate_links": len(graph.edges),
        "total_cost": partition_cost(chains, graph),
        "fragments_per_chain": len(fragments) / len(chains) if chains else 0.0,
        "gating": asdict(gating),
        "weights": asdict(weights),
        "chains": chain_report,
    }
    return Dataset(tuple(out)), report
