"""
Installation events and the bipartite device/app graph.

Events are ``(device_id, app_id, timestamp)`` records. A graph collapses the
events that fall inside a time window into a binary adjacency stored as CSR
neighbor lists in both directions. Vertex indices are dense and assigned in
first-appearance order, so a build is deterministic for a fixed input.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np
from scipy import optimize, special

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = "1"


class EventParseError(ValueError):
    """Raised in strict mode when an event line cannot be parsed."""

    def __init__(self, line_no: int, line: str, reason: str):
        super().__init__(f"line {line_no}: {reason}: {line!r}")
        self.line_no = line_no
        self.line = line
        self.reason = reason


class EmptyGraphError(ValueError):
    pass


class SplitError(ValueError):
    pass


class CorrelationUndefinedError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class InstallEvent:
    device_id: str
    app_id: str
    timestamp: int


@dataclass
class IngestResult:
    events: list[InstallEvent]
    malformed: int = 0
    first_malformed: int | None = None

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)


def _parse_csv_line(line: str) -> InstallEvent:
    row = next(csv.reader([line]))
    if len(row) != 3:
        raise ValueError(f"expected 3 fields, got {len(row)}")
    device, app, ts = (x.strip() for x in row)
    return _make_event(device, app, int(ts))


def _parse_jsonl_line(line: str) -> InstallEvent:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("not a JSON object")
    for key in ("device_id", "app_id", "ts"):
        if key not in obj:
            raise ValueError(f"missing key {key!r}")
    device, app, ts = obj["device_id"], obj["app_id"], obj["ts"]
    if not isinstance(device, str) or not isinstance(app, str):
        raise ValueError("device_id and app_id must be strings")
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise ValueError("ts must be an integer")
    return _make_event(device, app, ts)


def _make_event(device: str, app: str, ts: int) -> InstallEvent:
    if not device or not app:
        raise ValueError("empty token")
    if ts < 0:
        raise ValueError("negative timestamp")
    return InstallEvent(device, app, ts)


def ingest_events(
    source: IO[bytes] | IO[str] | str | Path,
    format: str = "csv",
    *,
    strict: bool = False,
    header: bool = False,
) -> IngestResult:
    """Parse a line-oriented event stream.

    ``source`` may be a path or an open binary/text stream. Blank lines are
    ignored. Malformed lines are counted; with ``strict=True`` the first one
    raises :class:`EventParseError`.
    """
    if format not in ("csv", "jsonl"):
        raise ValueError(f"unknown event format {format!r}")
    parse = _parse_csv_line if format == "csv" else _parse_jsonl_line

    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return ingest_events(fh, format, strict=strict, header=header)

    result = IngestResult(events=[])
    for line_no, raw in enumerate(source, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        line = line.rstrip("\r\n")
        if header and line_no == 1:
            continue
        if not line.strip():
            continue
        try:
            result.events.append(parse(line))
        except (ValueError, StopIteration) as exc:
            if strict:
                raise EventParseError(line_no, line, str(exc)) from None
            result.malformed += 1
            if result.first_malformed is None:
                result.first_malformed = line_no
    if result.malformed:
        logger.warning(
            "%d malformed event lines skipped (first at line %d)",
            result.malformed,
            result.first_malformed,
        )
    return result


def write_events(events: Iterable[InstallEvent], sink: IO[str], format: str = "csv") -> None:
    if format == "csv":
        for ev in events:
            sink.write(f"{ev.device_id},{ev.app_id},{ev.timestamp}\n")
    elif format == "jsonl":
        for ev in events:
            sink.write(json.dumps({"device_id": ev.device_id, "app_id": ev.app_id, "ts": ev.timestamp}))
            sink.write("\n")
    else:
        raise ValueError(f"unknown event format {format!r}")


def serialize_events(events: Iterable[InstallEvent], format: str = "csv") -> bytes:
    buf = io.StringIO()
    write_events(events, buf, format)
    return buf.getvalue().encode("utf-8")


@dataclass(eq=False)
class BipartiteGraph:
    """Binary device/app adjacency in CSR form, both directions.

    ``dev_indptr``/``dev_indices`` list the apps of each device and
    ``app_indptr``/``app_indices`` the devices of each app. Neighbor lists are
    sorted. ``edge_time`` holds the earliest timestamp of each edge, aligned
    with ``dev_indices``.
    """

    device_tokens: list[str]
    app_tokens: list[str]
    dev_indptr: np.ndarray
    dev_indices: np.ndarray
    app_indptr: np.ndarray
    app_indices: np.ndarray
    edge_time: np.ndarray
    window: tuple[int, int]
    device_index: dict[str, int] = field(init=False, repr=False)
    app_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.device_index = {t: i for i, t in enumerate(self.device_tokens)}
        self.app_index = {t: i for i, t in enumerate(self.app_tokens)}
        for arr in (self.dev_indptr, self.dev_indices, self.app_indptr, self.app_indices):
            arr.setflags(write=False)
        self._unified = None

    @property
    def n_devices(self) -> int:
        return len(self.device_tokens)

    @property
    def n_apps(self) -> int:
        return len(self.app_tokens)

    @property
    def n_vertices(self) -> int:
        return self.n_devices + self.n_apps

    @property
    def n_edges(self) -> int:
        return int(self.dev_indices.shape[0])

    @property
    def device_degrees(self) -> np.ndarray:
        return np.diff(self.dev_indptr)

    @property
    def app_degrees(self) -> np.ndarray:
        return np.diff(self.app_indptr)

    def apps_of(self, d: int) -> np.ndarray:
        return self.dev_indices[self.dev_indptr[d] : self.dev_indptr[d + 1]]

    def devices_of(self, m: int) -> np.ndarray:
        return self.app_indices[self.app_indptr[m] : self.app_indptr[m + 1]]

    def has_edge(self, d: int, m: int) -> bool:
        nbrs = self.apps_of(d)
        k = np.searchsorted(nbrs, m)
        return bool(k < nbrs.shape[0] and nbrs[k] == m)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Edge list as ``(device, app)`` index arrays, device-major order."""
        src = np.repeat(np.arange(self.n_devices, dtype=np.int64), self.device_degrees)
        return src, self.dev_indices.astype(np.int64)

    def edge_keys(self) -> np.ndarray:
        """Edges encoded as ``device * n_apps + app``, sorted."""
        d, m = self.edges()
        return d * self.n_apps + m

    def token_edges(self) -> set[tuple[str, str]]:
        d, m = self.edges()
        return {(self.device_tokens[i], self.app_tokens[j]) for i, j in zip(d.tolist(), m.tolist())}

    def unified_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR over all vertices with apps offset by ``n_devices``."""
        if self._unified is None:
            nd = self.n_devices
            indptr = np.concatenate([self.dev_indptr, self.app_indptr[1:] + self.dev_indptr[-1]])
            indices = np.concatenate([self.dev_indices + nd, self.app_indices]).astype(np.int64)
            self._unified = (indptr.astype(np.int64), indices)
        return self._unified

    def vertex_degrees(self) -> np.ndarray:
        return np.concatenate([self.device_degrees, self.app_degrees]).astype(np.int64)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.device_tokens).encode())
        h.update(b"\0")
        h.update("\n".join(self.app_tokens).encode())
        h.update(b"\0")
        h.update(_edge_bytes(self))
        return h.hexdigest()


def _edge_bytes(graph: BipartiteGraph) -> bytes:
    d, m = graph.edges()
    pairs = np.empty((d.shape[0], 2), dtype="<u4")
    pairs[:, 0] = d
    pairs[:, 1] = m
    return pairs.tobytes()


def _csr(rows: np.ndarray, cols: np.ndarray, n_rows: int, *values: np.ndarray):
    order = np.lexsort((cols, rows))
    counts = np.bincount(rows, minlength=n_rows)
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return (indptr, cols[order].astype(np.int64), *(v[order] for v in values))


def graph_from_edges(
    device_tokens: Sequence[str],
    app_tokens: Sequence[str],
    dev: np.ndarray,
    app: np.ndarray,
    edge_time: np.ndarray | None = None,
    window: tuple[int, int] = (0, 0),
) -> BipartiteGraph:
    """Assemble a graph from deduplicated index pairs."""
    dev = np.asarray(dev, dtype=np.int64)
    app = np.asarray(app, dtype=np.int64)
    if edge_time is None:
        edge_time = np.zeros(dev.shape[0], dtype=np.int64)
    nd, nm = len(device_tokens), len(app_tokens)
    dev_indptr, dev_indices, et = _csr(dev, app, nd, np.asarray(edge_time, dtype=np.int64))
    app_indptr, app_indices = _csr(app, dev, nm)
    return BipartiteGraph(
        device_tokens=list(device_tokens),
        app_tokens=list(app_tokens),
        dev_indptr=dev_indptr,
        dev_indices=dev_indices,
        app_indptr=app_indptr,
        app_indices=app_indices,
        edge_time=et,
        window=(int(window[0]), int(window[1])),
    )


def _dedup_edges(events: Iterable[InstallEvent]) -> dict[tuple[str, str], int]:
    """First-appearance ordered mapping of (device, app) -> earliest timestamp."""
    earliest: dict[tuple[str, str], int] = {}
    for ev in events:
        key = (ev.device_id, ev.app_id)
        prev = earliest.get(key)
        if prev is None or ev.timestamp < prev:
            earliest[key] = ev.timestamp
    return earliest


def build_graph(events: Iterable[InstallEvent], window: tuple[int, int] | None = None) -> BipartiteGraph:
    """Build the binary installation graph of the events inside ``window``.

    ``window`` is inclusive on both ends; ``None`` keeps every event. Repeated
    events for one pair collapse into a single edge carrying the earliest
    in-window timestamp.
    """
    events = list(events)
    if window is None:
        if not events:
            raise EmptyGraphError("no events")
        ts = [ev.timestamp for ev in events]
        window = (min(ts), max(ts))
    t_a, t_b = window
    if t_a > t_b:
        raise ValueError(f"window start {t_a} after end {t_b}")

    earliest = _dedup_edges(ev for ev in events if t_a <= ev.timestamp <= t_b)
    if not earliest:
        raise EmptyGraphError(f"no events inside window [{t_a}, {t_b}]")

    dev_idx: dict[str, int] = {}
    app_idx: dict[str, int] = {}
    dev = np.empty(len(earliest), dtype=np.int64)
    app = np.empty(len(earliest), dtype=np.int64)
    ets = np.empty(len(earliest), dtype=np.int64)
    for k, ((d, m), t) in enumerate(earliest.items()):
        dev[k] = dev_idx.setdefault(d, len(dev_idx))
        app[k] = app_idx.setdefault(m, len(app_idx))
        ets[k] = t
    overlap = dev_idx.keys() & app_idx.keys()
    if overlap:
        raise ValueError(f"tokens used as both device and app: {sorted(overlap)[:5]}")
    return graph_from_edges(list(dev_idx), list(app_idx), dev, app, ets, (t_a, t_b))


# ---------------------------------------------------------------------------
# temporal split
# ---------------------------------------------------------------------------


@dataclass
class TemporalSplit:
    """Train edges up to ``boundary`` and novel test edges after it.

    Edge lists are ``(device_id, app_id, earliest_timestamp)`` tuples. A test
    edge is cold when its device or app never occurs in training.
    """

    train_events: list[InstallEvent]
    train_edges: list[tuple[str, str, int]]
    test_edges: list[tuple[str, str, int]]
    cold: np.ndarray
    boundary: int
    horizon: int
    start: int

    @property
    def train_window(self) -> tuple[int, int]:
        return (self.start, self.boundary)

    @property
    def test_window(self) -> tuple[int, int]:
        return (self.boundary + 1, self.boundary + self.horizon)

    def warm_test_edges(self) -> list[tuple[str, str, int]]:
        return [e for e, c in zip(self.test_edges, self.cold) if not c]


def temporal_split(events: Sequence[InstallEvent], boundary: int, horizon: int) -> TemporalSplit:
    """Split events at ``boundary``: train is ``t <= boundary``, test is
    the pairs first seen in ``(boundary, boundary + horizon]`` that never
    occur in train."""
    if horizon <= 0:
        raise SplitError("horizon must be positive")
    end = boundary + horizon
    train_events = [ev for ev in events if ev.timestamp <= boundary]
    if not train_events:
        raise SplitError(f"no events at or before boundary {boundary}")
    train = _dedup_edges(train_events)
    later = _dedup_edges(ev for ev in events if boundary < ev.timestamp <= end)
    test = {k: t for k, t in later.items() if k not in train}
    if not test:
        raise SplitError(f"no novel edges in ({boundary}, {end}]")

    train_devices = {d for d, _ in train}
    train_apps = {m for _, m in train}
    cold = np.array([d not in train_devices or m not in train_apps for d, m in test], dtype=bool)
    return TemporalSplit(
        train_events=train_events,
        train_edges=[(d, m, t) for (d, m), t in train.items()],
        test_edges=[(d, m, t) for (d, m), t in test.items()],
        cold=cold,
        boundary=boundary,
        horizon=horizon,
        start=min(ev.timestamp for ev in train_events),
    )


# ---------------------------------------------------------------------------
# degree statistics
# ---------------------------------------------------------------------------


@dataclass
class DegreeHistogram:
    side: str
    degrees: np.ndarray
    counts: np.ndarray
    exponent: float | None
    x_min: int | None
    ks_distance: float | None
    reliable: bool
    n_tail: int = 0

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.degrees.tolist(), self.counts.tolist()))


def _discrete_powerlaw_mle(tail: np.ndarray, x_min: int) -> float:
    n = tail.shape[0]
    sum_log = np.log(tail).sum()

    def nll(alpha):
        return n * np.log(special.zeta(alpha, x_min)) + alpha * sum_log

    # continuous approximation seeds the bracket
    guess = 1.0 + n / np.sum(np.log(tail / (x_min - 0.5)))
    lo, hi = 1.0001, max(guess * 2.0, 6.0)
    res = optimize.minimize_scalar(nll, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
    return float(res.x)


def _discrete_powerlaw_ks(tail: np.ndarray, x_min: int, alpha: float) -> float:
    values, counts = np.unique(tail, return_counts=True)
    emp = np.cumsum(counts) / tail.shape[0]
    # model CDF P(X <= x) = 1 - zeta(alpha, x + 1) / zeta(alpha, x_min)
    model = 1.0 - special.zeta(alpha, values + 1.0) / special.zeta(alpha, x_min)
    emp_before = np.concatenate([[0.0], emp[:-1]])
    model_before = 1.0 - special.zeta(alpha, values.astype(float)) / special.zeta(alpha, x_min)
    return float(max(np.max(np.abs(emp - model)), np.max(np.abs(emp_before - model_before))))


def fit_powerlaw(values: np.ndarray, min_tail: int = 10) -> tuple[float, int, float, int]:
    """Discrete power-law MLE with ``x_min`` picked by minimal KS distance.

    Returns ``(alpha, x_min, ks, n_tail)``.
    """
    values = np.asarray(values, dtype=np.float64)
    values = values[values >= 1]
    best = None
    for x_min in np.unique(values):
        tail = values[values >= x_min]
        if tail.shape[0] < min_tail or np.unique(tail).shape[0] < 2:
            continue
        alpha = _discrete_powerlaw_mle(tail, int(x_min))
        ks = _discrete_powerlaw_ks(tail, int(x_min), alpha)
        if best is None or ks < best[2]:
            best = (alpha, int(x_min), ks, int(tail.shape[0]))
    if best is None:
        raise ValueError("not enough distinct values to fit a power law")
    return best


def degree_histogram(graph: BipartiteGraph, side: str = "app", min_distinct: int = 10) -> DegreeHistogram:
    """Degree histogram of one side plus a fitted power-law exponent.

    Fewer than ``min_distinct`` distinct degrees marks the fit unreliable;
    the histogram is returned regardless.
    """
    if graph.n_edges == 0:
        raise EmptyGraphError("empty graph")
    if side == "app":
        deg = graph.app_degrees
    elif side == "device":
        deg = graph.device_degrees
    else:
        raise ValueError(f"side must be 'device' or 'app', got {side!r}")
    degrees, counts = np.unique(deg, return_counts=True)
    reliable = degrees.shape[0] >= min_distinct
    exponent = x_min = ks = None
    n_tail = 0
    if reliable:
        try:
            exponent, x_min, ks, n_tail = fit_powerlaw(deg)
        except ValueError:
            reliable = False
    return DegreeHistogram(side, degrees, counts, exponent, x_min, ks, reliable, n_tail)


def _gather(indptr: np.ndarray, indices: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Concatenated neighbor lists of ``nodes``."""
    starts, stops = indptr[nodes], indptr[nodes + 1]
    lengths = stops - starts
    if lengths.sum() == 0:
        return np.empty(0, dtype=np.int64)
    offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
    return indices[np.arange(lengths.sum()) + offsets]


def _app_layer(graph: BipartiteGraph, m: int, hops: int) -> np.ndarray:
    """Apps whose shortest-path distance from app ``m`` is exactly ``hops``."""
    seen_apps = np.zeros(graph.n_apps, dtype=bool)
    seen_devs = np.zeros(graph.n_devices, dtype=bool)
    seen_apps[m] = True
    frontier = np.array([m], dtype=np.int64)
    for _ in range(hops // 2):
        devs = np.unique(_gather(graph.app_indptr, graph.app_indices, frontier))
        devs = devs[~seen_devs[devs]]
        seen_devs[devs] = True
        apps = np.unique(_gather(graph.dev_indptr, graph.dev_indices, devs))
        apps = apps[~seen_apps[apps]]
        seen_apps[apps] = True
        frontier = apps
        if not frontier.shape[0]:
            break
    return frontier


def khop_degree_correlation(
    graph: BipartiteGraph, hops: int = 2, sample_size: int = 10_000, seed: int = 0
) -> float:
    """Pearson correlation between app degree and the mean degree of the apps
    exactly ``hops`` hops away, over a uniform sample of start apps."""
    if hops <= 0 or hops % 2:
        raise ValueError("hops must be a positive even number")
    if sample_size < 2:
        raise ValueError("sample_size must be at least 2")
    rng = np.random.default_rng(seed)
    n = graph.n_apps
    starts = np.arange(n) if sample_size >= n else rng.choice(n, size=sample_size, replace=False)
    deg = graph.app_degrees.astype(np.float64)
    own, around = [], []
    for m in starts.tolist():
        layer = _app_layer(graph, m, hops)
        if layer.shape[0]:
            own.append(deg[m])
            around.append(deg[layer].mean())
    if len(own) < 2:
        raise CorrelationUndefinedError(f"fewer than two apps have a {hops}-hop neighborhood")
    own_a, around_a = np.asarray(own), np.asarray(around)
    if np.ptp(own_a) == 0 or np.ptp(around_a) == 0:
        raise CorrelationUndefinedError("zero variance; correlation undefined")
    return float(np.corrcoef(own_a, around_a)[0, 1])


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def save_snapshot(graph: BipartiteGraph, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "devices.tsv", "w") as fh:
        for i, tok in enumerate(graph.device_tokens):
            fh.write(f"{tok}\t{i}\n")
    with open(directory / "apps.tsv", "w") as fh:
        for i, tok in enumerate(graph.app_tokens):
            fh.write(f"{tok}\t{i}\n")
    (directory / "edges.bin").write_bytes(_edge_bytes(graph))
    meta = {
        "format_version": SNAPSHOT_VERSION,
        "window": list(graph.window),
        "n_devices": graph.n_devices,
        "n_apps": graph.n_apps,
        "n_edges": graph.n_edges,
        "hash": graph.content_hash(),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    return directory


def _read_tokens(path: Path) -> list[str]:
    tokens = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            tok, idx = line.rstrip("\n").split("\t")
            if int(idx) != i:
                raise ValueError(f"{path}: index {idx} out of order at line {i + 1}")
            tokens.append(tok)
    return tokens


def load_snapshot(directory: str | Path) -> BipartiteGraph:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("format_version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {meta.get('format_version')!r}")
    devices = _read_tokens(directory / "devices.tsv")
    apps = _read_tokens(directory / "apps.tsv")
    pairs = np.frombuffer((directory / "edges.bin").read_bytes(), dtype="<u4").reshape(-1, 2)
    return graph_from_edges(
        devices, apps, pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64), window=tuple(meta["window"])
    )
