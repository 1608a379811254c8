"""Per-token feature construction for neighbor sequences.

Turns raw neighbor sequences into numeric bundles: static node/edge vectors,
time deltas relative to the query, and within/cross-sequence frequency
counts mapped through role-specific thresholded vocabularies. Position 0 of
every bundle is the query node itself with a zeroed edge channel, so the
edge under prediction never leaks into the encoder input.
"""

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dygnrole.exceptions import ConfigError, DataIOError
from dygnrole.graph import NeighborSequence, TemporalGraph, sample_recent_neighbors
from dygnrole.utils import (
    pack_u32,
    pack_u64,
    read_exact,
    read_json,
    require_finite,
    unpack_u32,
    unpack_u64,
    write_json,
)

FEATURE_MAGIC = b"DGNF"
FEATURE_VERSION = 1

SOURCE = "src"
DESTINATION = "dst"
COUNT_CHANNELS = ("src_within", "src_cross", "dst_within", "dst_cross")


@dataclass
class FeatureMatrices:
    """Static node and edge feature matrices, rows keyed by id."""

    node_features: np.ndarray  # [num_nodes, d_f_node] float32
    edge_features: np.ndarray  # [num_edges, d_f_edge] float32

    def __post_init__(self):
        self.node_features = np.ascontiguousarray(self.node_features, dtype=np.float32)
        self.edge_features = np.ascontiguousarray(self.edge_features, dtype=np.float32)
        require_finite(self.node_features, "node features")
        require_finite(self.edge_features, "edge features")

    @property
    def d_f_node(self) -> int:
        return self.node_features.shape[1]

    @property
    def d_f_edge(self) -> int:
        return self.edge_features.shape[1]


def write_feature_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Binary layout: magic 'DGNF', version u32, rows u64, cols u64, f32 LE row-major."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise DataIOError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(pack_u32(FEATURE_VERSION))
        f.write(pack_u64(matrix.shape[0]))
        f.write(pack_u64(matrix.shape[1]))
        f.write(matrix.tobytes())


def read_feature_matrix(path: str | Path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            magic = read_exact(f, 4)
            if magic != FEATURE_MAGIC:
                raise DataIOError(f"{path}: bad magic {magic!r}")
            version = unpack_u32(f)
            if version != FEATURE_VERSION:
                raise DataIOError(f"{path}: unsupported version {version}")
            rows = unpack_u64(f)
            cols = unpack_u64(f)
            data = read_exact(f, rows * cols * 4)
    except (EOFError, struct.error) as exc:
        raise DataIOError(f"{path}: truncated feature file ({exc})")
    return np.frombuffer(data, dtype="<f4").reshape(rows, cols).copy()


def load_feature_matrices(node_path: str | Path, edge_path: str | Path) -> FeatureMatrices:
    return FeatureMatrices(
        node_features=read_feature_matrix(node_path),
        edge_features=read_feature_matrix(edge_path),
    )


@dataclass
class RawCounts:
    """Within/cross multiplicities for the neighbor tokens of one sequence.

    within[i] counts neighbor i inside its own role's sequence, cross[i]
    counts it inside the opposite role's sequence. Padding slots carry 0.
    """

    role: str
    within: np.ndarray  # [slots] int64
    cross: np.ndarray   # [slots] int64


def _multiplicities(seq: NeighborSequence) -> Counter:
    return Counter(int(n) for n in seq.neighbor_ids[seq.valid])


def compute_raw_counts(
    src_seq: NeighborSequence, dst_seq: NeighborSequence
) -> tuple[RawCounts, RawCounts]:
    """Count each valid neighbor within its own and across the opposite sequence."""
    if len(src_seq.valid) != len(dst_seq.valid):
        raise ConfigError("source and destination sequences must share k")
    src_mult = _multiplicities(src_seq)
    dst_mult = _multiplicities(dst_seq)

    def counts_for(seq: NeighborSequence, own: Counter, other: Counter) -> tuple[np.ndarray, np.ndarray]:
        slots = len(seq.valid)
        within = np.zeros(slots, dtype=np.int64)
        cross = np.zeros(slots, dtype=np.int64)
        for i in range(slots):
            if seq.valid[i]:
                n = int(seq.neighbor_ids[i])
                within[i] = own[n]
                cross[i] = other[n]
        return within, cross

    src_within, src_cross = counts_for(src_seq, src_mult, dst_mult)
    dst_within, dst_cross = counts_for(dst_seq, dst_mult, src_mult)
    return (
        RawCounts(role=SOURCE, within=src_within, cross=src_cross),
        RawCounts(role=DESTINATION, within=dst_within, cross=dst_cross),
    )


def query_node_counts(
    node: int, src_seq: NeighborSequence, dst_seq: NeighborSequence
) -> tuple[int, int]:
    """Counts for a prepended query node: its multiplicity in each sequence.

    The query node is treated as a candidate neighbor of both sequences,
    exactly like the neighbor tokens, so no special-case zero token exists.
    """
    src_mult = _multiplicities(src_seq)
    dst_mult = _multiplicities(dst_seq)
    return src_mult[int(node)], dst_mult[int(node)]


@dataclass
class CountVocabulary:
    """Thresholded count-to-index map; unmapped counts resolve to UNK (0)."""

    table: dict[int, int] = field(default_factory=dict)
    unk_index: int = 0

    @property
    def size(self) -> int:
        return len(self.table) + 1

    def lookup(self, c: int) -> int:
        if c < 0:
            raise ConfigError(f"counts are non-negative, got {c}")
        return self.table.get(int(c), self.unk_index)


def lookup_count_index(vocab: CountVocabulary, c: int) -> int:
    return vocab.lookup(c)


def build_count_vocabulary(count_stream, n_min: int) -> CountVocabulary:
    """Keep count values observed at least n_min times; map the rest to UNK.

    Retained counts receive indices 1..|V| in ascending count order; index 0
    is UNK. An empty stream yields the UNK-only vocabulary.
    """
    if n_min < 1:
        raise ConfigError(f"n_min must be >= 1, got {n_min}")
    freq = Counter(int(c) for c in count_stream)
    kept = sorted(c for c, n in freq.items() if n >= n_min)
    return CountVocabulary(table={c: i + 1 for i, c in enumerate(kept)})


@dataclass
class CountVocabularySet:
    """The four role-specific vocabularies (src/dst x within/cross)."""

    src_within: CountVocabulary
    src_cross: CountVocabulary
    dst_within: CountVocabulary
    dst_cross: CountVocabulary

    def by_channel(self, channel: str) -> CountVocabulary:
        return getattr(self, channel)

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return tuple(self.by_channel(c).size for c in COUNT_CHANNELS)

    def save(self, path: str | Path) -> None:
        payload = {"unk_index": 0}
        for channel in COUNT_CHANNELS:
            vocab = self.by_channel(channel)
            payload[channel] = {str(c): i for c, i in sorted(vocab.table.items())}
        write_json(path, payload)

    @classmethod
    def load(cls, path: str | Path) -> "CountVocabularySet":
        payload = read_json(path)
        unk = payload.get("unk_index", 0)
        vocabs = {}
        for channel in COUNT_CHANNELS:
            table = {int(c): int(i) for c, i in payload[channel].items()}
            vocabs[channel] = CountVocabulary(table=table, unk_index=unk)
        return cls(**vocabs)

    @classmethod
    def trivial(cls) -> "CountVocabularySet":
        """UNK-only vocabularies; useful for tests and the co-occurrence ablation."""
        return cls(*(CountVocabulary() for _ in COUNT_CHANNELS))


def build_vocabularies_for_split(
    graph: TemporalGraph,
    split: range,
    k: int,
    n_min: int,
) -> CountVocabularySet:
    """Tally count channels over every query in the training split.

    Each query event contributes its query-token and valid-neighbor counts;
    padding slots are excluded from the tallies.
    """
    streams: dict[str, list[int]] = {c: [] for c in COUNT_CHANNELS}
    for i in split:
        u, v, t = int(graph.src[i]), int(graph.dst[i]), float(graph.timestamps[i])
        src_seq = sample_recent_neighbors(graph, u, t, k)
        dst_seq = sample_recent_neighbors(graph, v, t, k)
        src_counts, dst_counts = compute_raw_counts(src_seq, dst_seq)
        uq_w, uq_c = query_node_counts(u, src_seq, dst_seq)
        vq_c, vq_w = query_node_counts(v, src_seq, dst_seq)
        streams["src_within"].append(uq_w)
        streams["src_cross"].append(uq_c)
        streams["dst_within"].append(vq_w)
        streams["dst_cross"].append(vq_c)
        streams["src_within"].extend(int(x) for x in src_counts.within[src_seq.valid])
        streams["src_cross"].extend(int(x) for x in src_counts.cross[src_seq.valid])
        streams["dst_within"].extend(int(x) for x in dst_counts.within[dst_seq.valid])
        streams["dst_cross"].extend(int(x) for x in dst_counts.cross[dst_seq.valid])
    return CountVocabularySet(
        **{c: build_count_vocabulary(streams[c], n_min) for c in COUNT_CHANNELS}
    )


@dataclass
class TokenFeatureBundle:
    """Per-position raw features for one role's k-token sequence.

    Position 0 is the query node (zero edge vector, zero time delta,
    is_query=True); positions 1..k-1 are historical neighbors; padding
    positions carry zero vectors, UNK indices, and valid=False.
    """

    role: str
    node_vecs: np.ndarray       # [k, d_f_node] float32
    edge_vecs: np.ndarray       # [k, d_f_edge] float32
    time_deltas: np.ndarray     # [k] float64, >= 0 (0 only at position 0)
    within_counts: np.ndarray   # [k] int64 raw counts
    cross_counts: np.ndarray    # [k] int64
    within_indices: np.ndarray  # [k] int64 vocabulary indices
    cross_indices: np.ndarray   # [k] int64
    valid: np.ndarray           # [k] bool
    is_query: np.ndarray        # [k] bool, True only at position 0

    @property
    def k(self) -> int:
        return len(self.valid)


def _assemble_one(
    role: str,
    query_node: int,
    query_time: float,
    seq: NeighborSequence,
    query_counts: tuple[int, int],
    neighbor_counts: RawCounts,
    feats: FeatureMatrices,
    within_vocab: CountVocabulary,
    cross_vocab: CountVocabulary,
) -> TokenFeatureBundle:
    slots = len(seq.valid)
    k = slots + 1
    node_vecs = np.zeros((k, feats.d_f_node), dtype=np.float32)
    edge_vecs = np.zeros((k, feats.d_f_edge), dtype=np.float32)
    time_deltas = np.zeros(k, dtype=np.float64)
    within_counts = np.zeros(k, dtype=np.int64)
    cross_counts = np.zeros(k, dtype=np.int64)
    within_indices = np.zeros(k, dtype=np.int64)
    cross_indices = np.zeros(k, dtype=np.int64)
    valid = np.zeros(k, dtype=bool)
    is_query = np.zeros(k, dtype=bool)

    if not (0 <= query_node < len(feats.node_features)):
        raise ConfigError(f"node id {query_node} out of feature-matrix range")

    # position 0: the query node; the edge channel stays zero so the target
    # edge's attributes never reach the encoder
    node_vecs[0] = feats.node_features[query_node]
    within_counts[0], cross_counts[0] = query_counts
    within_indices[0] = within_vocab.lookup(int(within_counts[0]))
    cross_indices[0] = cross_vocab.lookup(int(cross_counts[0]))
    valid[0] = True
    is_query[0] = True

    for i in range(slots):
        if not seq.valid[i]:
            continue
        pos = i + 1
        nbr = int(seq.neighbor_ids[i])
        eid = int(seq.edge_ids[i])
        if not (0 <= nbr < len(feats.node_features)):
            raise ConfigError(f"node id {nbr} out of feature-matrix range")
        if not (0 <= eid < len(feats.edge_features)):
            raise ConfigError(f"edge id {eid} out of feature-matrix range")
        node_vecs[pos] = feats.node_features[nbr]
        edge_vecs[pos] = feats.edge_features[eid]
        time_deltas[pos] = query_time - float(seq.timestamps[i])
        within_counts[pos] = neighbor_counts.within[i]
        cross_counts[pos] = neighbor_counts.cross[i]
        within_indices[pos] = within_vocab.lookup(int(within_counts[pos]))
        cross_indices[pos] = cross_vocab.lookup(int(cross_counts[pos]))
        valid[pos] = True

    return TokenFeatureBundle(
        role=role,
        node_vecs=node_vecs,
        edge_vecs=edge_vecs,
        time_deltas=time_deltas,
        within_counts=within_counts,
        cross_counts=cross_counts,
        within_indices=within_indices,
        cross_indices=cross_indices,
        valid=valid,
        is_query=is_query,
    )


def assemble_bundles(
    feats: FeatureMatrices,
    src_seq: NeighborSequence,
    dst_seq: NeighborSequence,
    vocabs: CountVocabularySet,
    query_edge: tuple[int, int, float],
) -> tuple[TokenFeatureBundle, TokenFeatureBundle]:
    """Build the k-token source and destination bundles for one query edge.

    Sequences must have been sampled at the query time for the query's own
    endpoints; time deltas are t - timestamp and therefore non-negative,
    zero only at position 0.
    """
    u, v, t = query_edge
    src_counts, dst_counts = compute_raw_counts(src_seq, dst_seq)
    u_within, u_cross = query_node_counts(u, src_seq, dst_seq)
    # for the destination query node, "within" is its own (destination)
    # sequence and "cross" is the source sequence
    v_cross, v_within = query_node_counts(v, src_seq, dst_seq)

    src_bundle = _assemble_one(
        SOURCE, u, t, src_seq, (u_within, u_cross), src_counts,
        feats, vocabs.src_within, vocabs.src_cross,
    )
    dst_bundle = _assemble_one(
        DESTINATION, v, t, dst_seq, (v_within, v_cross), dst_counts,
        feats, vocabs.dst_within, vocabs.dst_cross,
    )
    return src_bundle, dst_bundle
