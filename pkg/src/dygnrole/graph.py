"""Temporal edge-stream storage and causal neighbor queries.

The graph is an immutable chronological event list plus a per-node index of
every interaction a node participates in (as either endpoint). All query
operations are strict-causal: an event at exactly the query time is never
part of the history it conditions on, which prevents label leakage when
several events share a timestamp.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dygnrole.exceptions import ConfigError, ParseError

logger = logging.getLogger(__name__)

EDGE_CSV_COLUMNS = ("src", "dst", "timestamp", "label")


@dataclass(frozen=True)
class EdgeEvent:
    """One timestamped directed interaction.

    edge_id is the 0-based position of the event in the input file; it is the
    key into the edge feature matrix and the tie-breaker among events that
    share a timestamp.
    """

    edge_id: int
    src: int
    dst: int
    timestamp: float
    label: int | None = None


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split boundaries as fractions of the event count."""

    train_end: float = 0.70
    val_end: float = 0.85

    def __post_init__(self):
        if not (0.0 < self.train_end < 1.0):
            raise ConfigError(f"train_end must be in (0,1), got {self.train_end}")
        if not (self.train_end < self.val_end <= 1.0):
            raise ConfigError(
                f"val_end must be in (train_end, 1], got {self.val_end}"
            )


@dataclass(frozen=True)
class NeighborSequence:
    """Fixed-length most-recent one-hop history of a node at a query time.

    Valid entries occupy slots [0, m), sorted ascending by (timestamp,
    edge_id); the remaining slots are zero padding with valid=False. All
    valid timestamps are strictly less than query_time.
    """

    node: int
    query_time: float
    neighbor_ids: np.ndarray  # [slots] int64
    edge_ids: np.ndarray      # [slots] int64
    timestamps: np.ndarray    # [slots] float64
    valid: np.ndarray         # [slots] bool

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())


@dataclass
class _NodeIndex:
    """Chronological record of every event a node participates in."""

    timestamps: np.ndarray  # float64, ascending with edge_id tie-break
    neighbor_ids: np.ndarray  # other endpoint (== node for self-loops)
    edge_ids: np.ndarray
    was_source: np.ndarray  # bool; retained for analysis, unused by the encoder


@dataclass
class TemporalGraph:
    """Immutable chronologically indexed directed edge stream.

    events are sorted by (timestamp, edge_id) ascending. Construction is
    single-threaded; afterwards all query operations are read-only and safe
    for concurrent use.
    """

    src: np.ndarray        # [E] int64, sorted order
    dst: np.ndarray        # [E] int64
    timestamps: np.ndarray  # [E] float64, non-decreasing
    edge_ids: np.ndarray   # [E] int64, file-order ids permuted into sorted order
    labels: np.ndarray | None  # [E] int64 or None
    num_nodes: int
    _node_index: list = field(repr=False, default_factory=list)

    @property
    def num_events(self) -> int:
        return len(self.timestamps)

    @property
    def num_classes_observed(self) -> int:
        if self.labels is None or len(self.labels) == 0:
            return 0
        return int(self.labels.max()) + 1

    def event(self, i: int) -> EdgeEvent:
        label = None if self.labels is None else int(self.labels[i])
        return EdgeEvent(
            edge_id=int(self.edge_ids[i]),
            src=int(self.src[i]),
            dst=int(self.dst[i]),
            timestamp=float(self.timestamps[i]),
            label=label,
        )

    def node_index(self, node: int) -> _NodeIndex | None:
        if 0 <= node < len(self._node_index):
            return self._node_index[node]
        return None


def build_temporal_graph(
    src: np.ndarray,
    dst: np.ndarray,
    timestamps: np.ndarray,
    labels: np.ndarray | None = None,
    num_nodes_hint: int | None = None,
) -> TemporalGraph:
    """Sort events by (timestamp, edge_id) and build per-node indices.

    Input arrays are in file order; edge_id i is row i of the input. A
    warning is logged when the input needed re-sorting.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
    n_events = len(timestamps)

    if n_events and timestamps.min() < 0:
        raise ParseError("negative timestamp in edge stream")

    file_edge_ids = np.arange(n_events, dtype=np.int64)
    if n_events and np.any(np.diff(timestamps) < 0):
        logger.warning("input timestamps are not sorted; re-sorting events")
    # lexsort: primary key timestamp, secondary key edge_id (stable tie-break)
    order = np.lexsort((file_edge_ids, timestamps))
    src, dst, timestamps = src[order], dst[order], timestamps[order]
    edge_ids = file_edge_ids[order]
    if labels is not None:
        labels = labels[order]

    max_id = int(max(src.max(), dst.max())) + 1 if n_events else 0
    num_nodes = max(max_id, num_nodes_hint or 0)

    graph = TemporalGraph(
        src=src,
        dst=dst,
        timestamps=timestamps,
        edge_ids=edge_ids,
        labels=labels,
        num_nodes=num_nodes,
    )
    graph._node_index = _build_node_index(graph)
    return graph


def _build_node_index(graph: TemporalGraph) -> list:
    """Per-node chronological adjacency. Self-loops appear once."""
    per_node: list[list] = [[] for _ in range(graph.num_nodes)]
    for i in range(graph.num_events):
        s, d = int(graph.src[i]), int(graph.dst[i])
        t, e = float(graph.timestamps[i]), int(graph.edge_ids[i])
        per_node[s].append((t, d, e, True))
        if d != s:
            per_node[d].append((t, s, e, False))
    index = []
    for entries in per_node:
        if entries:
            ts = np.array([x[0] for x in entries], dtype=np.float64)
            nbr = np.array([x[1] for x in entries], dtype=np.int64)
            eid = np.array([x[2] for x in entries], dtype=np.int64)
            was_src = np.array([x[3] for x in entries], dtype=bool)
        else:
            ts = np.empty(0, dtype=np.float64)
            nbr = np.empty(0, dtype=np.int64)
            eid = np.empty(0, dtype=np.int64)
            was_src = np.empty(0, dtype=bool)
        index.append(_NodeIndex(ts, nbr, eid, was_src))
    return index


def ingest_edges(path: str | Path, num_nodes_hint: int | None = None) -> TemporalGraph:
    """Parse an edge CSV (header src,dst,timestamp[,label]) into a TemporalGraph.

    Rows may arrive out of chronological order; they are re-sorted with a
    warning. Negative timestamps and malformed rows raise ParseError with
    the offending 1-based line number.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"edge file not found: {path}")

    src_l: list[int] = []
    dst_l: list[int] = []
    ts_l: list[float] = []
    label_l: list[int] = []

    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty edge file (missing header)", line=1)
        header = [h.strip() for h in header]
        if header not in (list(EDGE_CSV_COLUMNS[:3]), list(EDGE_CSV_COLUMNS)):
            raise ParseError(
                f"bad header {header!r}; expected src,dst,timestamp[,label]", line=1
            )
        has_label = len(header) == 4

        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}", line=line_no
                )
            try:
                s = int(row[0])
                d = int(row[1])
                t = float(row[2])
            except ValueError as exc:
                raise ParseError(str(exc), line=line_no)
            if s < 0 or d < 0:
                raise ParseError(f"negative node id ({s},{d})", line=line_no)
            if not np.isfinite(t) or t < 0:
                raise ParseError(f"bad timestamp {row[2]!r}", line=line_no)
            if has_label:
                try:
                    y = int(row[3])
                except ValueError as exc:
                    raise ParseError(str(exc), line=line_no)
                if y < 0:
                    raise ParseError(f"negative label {y}", line=line_no)
                label_l.append(y)
            src_l.append(s)
            dst_l.append(d)
            ts_l.append(t)

    labels = np.array(label_l, dtype=np.int64) if has_label else None
    return build_temporal_graph(
        np.array(src_l, dtype=np.int64),
        np.array(dst_l, dtype=np.int64),
        np.array(ts_l, dtype=np.float64),
        labels=labels,
        num_nodes_hint=num_nodes_hint,
    )


def chronological_split(
    graph: TemporalGraph, spec: SplitSpec
) -> tuple[range, range, range]:
    """Train/val/test index ranges with boundaries at floor(E * fraction)."""
    n = graph.num_events
    a = int(np.floor(n * spec.train_end))
    b = int(np.floor(n * spec.val_end))
    return range(0, a), range(a, b), range(b, n)


def sample_recent_neighbors(
    graph: TemporalGraph, node: int, query_time: float, k: int
) -> NeighborSequence:
    """Most recent (k-1) one-hop events of ``node`` strictly before query_time.

    One slot of the downstream token sequence is reserved for the query node
    itself, hence k-1 history slots. Unknown node ids yield an all-padding
    sequence. Entries are the latest qualifying events, kept in ascending
    (timestamp, edge_id) order and left-aligned; ties at equal timestamps
    resolve by edge_id, so output is deterministic.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2 (one slot is the query node), got {k}")
    slots = k - 1
    neighbor_ids = np.zeros(slots, dtype=np.int64)
    edge_ids = np.zeros(slots, dtype=np.int64)
    timestamps = np.zeros(slots, dtype=np.float64)
    valid = np.zeros(slots, dtype=bool)

    index = graph.node_index(node)
    if index is not None and len(index.timestamps):
        # strict causality: events at exactly query_time are excluded
        end = int(np.searchsorted(index.timestamps, query_time, side="left"))
        start = max(0, end - slots)
        m = end - start
        if m > 0:
            neighbor_ids[:m] = index.neighbor_ids[start:end]
            edge_ids[:m] = index.edge_ids[start:end]
            timestamps[:m] = index.timestamps[start:end]
            valid[:m] = True

    return NeighborSequence(
        node=node,
        query_time=query_time,
        neighbor_ids=neighbor_ids,
        edge_ids=edge_ids,
        timestamps=timestamps,
        valid=valid,
    )


def historical_neighbor_set(
    graph: TemporalGraph, node: int, until_time: float
) -> set[int]:
    """All one-hop neighbors of ``node`` over events strictly before until_time.

    Membership ignores direction: sources of a destination-only node are
    still its neighbors.
    """
    index = graph.node_index(node)
    if index is None or not len(index.timestamps):
        return set()
    end = int(np.searchsorted(index.timestamps, until_time, side="left"))
    return set(int(x) for x in index.neighbor_ids[:end])
