"""Role-asymmetry probes.

Both probes score cosine distance between two context-dependent vectors for
the same node: once with the node acting as the source of an interaction
and once as the destination of the inverse interaction (the timestamp is
reused so both encodings condition on identical histories).

The global probe compares final pair representations; the structural probe
taps the projected frequency channels before any transformer mixing, which
isolates the contribution of the count tables.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from dygnrole.encoder import JOINT, DyGnRoleEncoder, TokenBatch
from dygnrole.exceptions import ConfigError
from dygnrole.features import (
    DESTINATION,
    SOURCE,
    CountVocabularySet,
    FeatureMatrices,
    assemble_bundles,
)
from dygnrole.graph import TemporalGraph, sample_recent_neighbors
from dygnrole.utils import derive_seed

GLOBAL_PROBE = "global"
STRUCTURAL_PROBE = "structural"


@dataclass
class AsymmetryReport:
    """Summary of per-sample cosine-distance scores (range [0, 2])."""

    probe: str
    num_samples: int
    mean_score: float
    std: float
    skipped: int = 0
    scores: list[float] = field(default_factory=list)

    def to_dict(self, include_scores: bool = True) -> dict:
        out = {
            "probe": self.probe,
            "num_samples": self.num_samples,
            "mean_score": self.mean_score,
            "std": self.std,
            "skipped": self.skipped,
        }
        if include_scores:
            out["scores"] = self.scores
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AsymmetryReport":
        return cls(
            probe=d["probe"],
            num_samples=d["num_samples"],
            mean_score=d["mean_score"],
            std=d["std"],
            skipped=d.get("skipped", 0),
            scores=list(d.get("scores", [])),
        )


def sample_probe_events(
    graph: TemporalGraph, event_range: range, n: int, seed: int
) -> list[tuple[int, int, float]]:
    """Deterministically sample query edges from a split for probing.

    Draws without replacement when the split is large enough, otherwise
    with replacement so the requested sample count is always honored.
    """
    if len(event_range) == 0:
        raise ConfigError("cannot sample probe events from an empty range")
    rng = np.random.default_rng(derive_seed(seed, "probe-sample"))
    indices = np.asarray(event_range, dtype=np.int64)
    replace = n > len(indices)
    chosen = np.sort(rng.choice(indices, size=n, replace=replace))
    return [
        (int(graph.src[i]), int(graph.dst[i]), float(graph.timestamps[i]))
        for i in chosen
    ]


def _cosine_distance_scores(
    h1: torch.Tensor, h2: torch.Tensor
) -> tuple[list[float], int]:
    """Per-row 1 - cos(h1, h2); rows with a zero-norm side are skipped."""
    n1 = h1.norm(dim=1)
    n2 = h2.norm(dim=1)
    usable = (n1 > 1e-12) & (n2 > 1e-12)
    cos = (h1[usable] * h2[usable]).sum(dim=1) / (n1[usable] * n2[usable])
    scores = (1.0 - cos).clamp(0.0, 2.0)
    return [float(s) for s in scores], int((~usable).sum())


def _bundles_for(
    graph: TemporalGraph,
    feats: FeatureMatrices,
    vocabs: CountVocabularySet,
    queries: list[tuple[int, int, float]],
    k: int,
) -> tuple[TokenBatch, TokenBatch]:
    src_bundles, dst_bundles = [], []
    for u, v, t in queries:
        src_seq = sample_recent_neighbors(graph, u, t, k)
        dst_seq = sample_recent_neighbors(graph, v, t, k)
        sb, db = assemble_bundles(feats, src_seq, dst_seq, vocabs, (u, v, t))
        src_bundles.append(sb)
        dst_bundles.append(db)
    return TokenBatch.from_bundles(src_bundles), TokenBatch.from_bundles(dst_bundles)


def _report(probe: str, scores: list[float], skipped: int) -> AsymmetryReport:
    if not scores:
        raise ConfigError(f"{probe} probe produced no usable samples")
    arr = np.asarray(scores, dtype=np.float64)
    return AsymmetryReport(
        probe=probe,
        num_samples=len(scores),
        mean_score=float(arr.mean()),
        std=float(arr.std()),
        skipped=skipped,
        scores=scores,
    )


def global_asymmetry(
    model: DyGnRoleEncoder,
    graph: TemporalGraph,
    feats: FeatureMatrices,
    vocabs: CountVocabularySet,
    sample_edges: list[tuple[int, int, float]],
    batch_size: int = 256,
) -> AsymmetryReport:
    """Compare each source node's embedding against its destination-role
    embedding under the inverse interaction, in the downstream (joint) mode.

    For dual-CLS models h2 is the CLS_D readout of the swapped pair; for
    mean-pool ablations it is the corresponding pooled vector. Parameters
    are never mutated.
    """
    model.eval()
    k = model.config.max_seq_len
    scores: list[float] = []
    skipped = 0
    with torch.no_grad():
        for start in range(0, len(sample_edges), batch_size):
            chunk = sample_edges[start : start + batch_size]
            swapped = [(v, u, t) for u, v, t in chunk]
            src_b, dst_b = _bundles_for(graph, feats, vocabs, chunk, k)
            z_u, _ = model.encode_pair(src_b, dst_b, JOINT)
            src_b2, dst_b2 = _bundles_for(graph, feats, vocabs, swapped, k)
            _, z_u_as_dst = model.encode_pair(src_b2, dst_b2, JOINT)
            chunk_scores, chunk_skipped = _cosine_distance_scores(z_u, z_u_as_dst)
            scores.extend(chunk_scores)
            skipped += chunk_skipped
    return _report(GLOBAL_PROBE, scores, skipped)


def structural_probe_asymmetry(
    model: DyGnRoleEncoder,
    graph: TemporalGraph,
    feats: FeatureMatrices,
    vocabs: CountVocabularySet,
    sample_edges: list[tuple[int, int, float]],
    batch_size: int = 256,
) -> AsymmetryReport:
    """Probe the frequency-embedding module for directional sensitivity.

    For query (u, v, t), h1 is the projected within/cross channel output of
    u's query token while u's sequence sits in the source slot; h2 is the
    same token's channel output after the query pair is swapped, i.e. with
    u's sequence in the destination slot. With role-shared count encoders
    the raw count pairs are identical in both orientations and the score
    collapses to zero; role-specific tables break the symmetry.
    """
    model.eval()
    k = model.config.max_seq_len
    scores: list[float] = []
    skipped = 0
    with torch.no_grad():
        for start in range(0, len(sample_edges), batch_size):
            chunk = sample_edges[start : start + batch_size]
            swapped = [(v, u, t) for u, v, t in chunk]
            src_b, _ = _bundles_for(graph, feats, vocabs, chunk, k)
            # after the swap, u's sequence is the destination-role bundle
            _, dst_b2 = _bundles_for(graph, feats, vocabs, swapped, k)
            h1 = model.frequency_features(src_b, SOURCE)[:, 0]
            h2 = model.frequency_features(dst_b2, DESTINATION)[:, 0]
            chunk_scores, chunk_skipped = _cosine_distance_scores(h1, h2)
            scores.extend(chunk_scores)
            skipped += chunk_skipped
    return _report(STRUCTURAL_PROBE, scores, skipped)
