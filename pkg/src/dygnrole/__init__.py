"""DyGnROLE: role-aware dynamic-graph transformer with TCLP pretraining.

The package covers the full desk-scale pipeline: temporal edge-stream
ingestion and neighbor sampling, within/cross-sequence frequency features,
the role-disentangled transformer encoder, contrastive pretraining with
historical false-negative masking, label-constrained future-edge
classification, role-asymmetry probes, and a synthetic data generator.
"""

__version__ = "0.1.0"

from dygnrole.graph import (
    EdgeEvent,
    NeighborSequence,
    SplitSpec,
    TemporalGraph,
    chronological_split,
    historical_neighbor_set,
    ingest_edges,
    sample_recent_neighbors,
)

__all__ = [
    "EdgeEvent",
    "NeighborSequence",
    "SplitSpec",
    "TemporalGraph",
    "chronological_split",
    "historical_neighbor_set",
    "ingest_edges",
    "sample_recent_neighbors",
    "__version__",
]
