"""TCLP self-supervised pretraining.

In-batch InfoNCE over L2-normalized CLS embeddings with historical
false-negative masking: candidate pairs that interacted before the batch's
minimum timestamp are removed from the softmax denominator. Batches are
precomputed (sequence snapshots + mask) and served from an on-disk cache;
early stopping tracks mean validation MRR.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from dygnrole.checkpointing import save_checkpoint
from dygnrole.encoder import (
    INDEPENDENT,
    DyGnRoleEncoder,
    EncoderConfig,
    TokenBatch,
    build_encoder,
)
from dygnrole.exceptions import ConfigError, DataIOError, NumericError
from dygnrole.features import (
    CountVocabularySet,
    FeatureMatrices,
    assemble_bundles,
)
from dygnrole.graph import (
    NeighborSequence,
    TemporalGraph,
    historical_neighbor_set,
    sample_recent_neighbors,
)
from dygnrole.utils import derive_seed, seed_torch, sha256_of_json

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"DGNB"
CACHE_VERSION = 1


@dataclass
class ContrastiveBatch:
    """One precomputed batch: query pairs, sequence snapshots, and mask.

    mask[i][j] == True means destination j is a usable negative for source
    i; the diagonal is always True. Pairs are in chronological order.
    """

    src_nodes: np.ndarray  # [N] int64
    dst_nodes: np.ndarray  # [N] int64
    edge_ids: np.ndarray   # [N] int64
    times: np.ndarray      # [N] float64
    src_seqs: list[NeighborSequence]
    dst_seqs: list[NeighborSequence]
    mask: np.ndarray       # [N, N] bool
    t_min: float

    @property
    def size(self) -> int:
        return len(self.times)


@dataclass
class PretrainState:
    """Mutable protocol state tracked across epochs."""

    epoch: int = 0
    step: int = 0
    best_val_mrr: float = float("-inf")
    patience_counter: int = 0


@dataclass
class PretrainResult:
    checkpoint_path: Path
    best_val_mrr: float
    epochs_run: int
    stopped_early: bool
    history: list[dict] = field(default_factory=list)


def build_false_negative_mask(
    src_nodes: np.ndarray,
    dst_nodes: np.ndarray,
    times: np.ndarray,
    graph: TemporalGraph,
) -> np.ndarray:
    """N x N usable-negative mask for one batch.

    A cell (i, j) is masked when destination j interacted with source i
    before the batch's minimum timestamp (one-hop membership is symmetric,
    so checking v_j in hist(u_i) covers "or vice versa"), or when v_j is
    the same node as the positive destination v_i. The diagonal is never
    masked.
    """
    n = len(src_nodes)
    if n == 0:
        raise ConfigError("cannot build a mask for an empty batch")
    t_min = float(times.min())
    mask = np.ones((n, n), dtype=bool)
    hist: dict[int, set[int]] = {}
    for u in np.unique(src_nodes):
        hist[int(u)] = historical_neighbor_set(graph, int(u), t_min)
    for i in range(n):
        h = hist[int(src_nodes[i])]
        for j in range(n):
            if i == j:
                continue
            if int(dst_nodes[j]) in h or dst_nodes[j] == dst_nodes[i]:
                mask[i, j] = False
    return mask


def _normalized(z: torch.Tensor, what: str) -> torch.Tensor:
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms <= 1e-12).any()):
        raise NumericError(f"zero-norm {what} embedding row; cannot normalize")
    return z / norms


def tclp_loss(
    z_u: torch.Tensor, z_v: torch.Tensor, mask: torch.Tensor, tau: float
) -> torch.Tensor:
    """Temperature-scaled cross-entropy over in-batch destinations.

    Masked candidates get -inf logits before the softmax. The loss is
    one-directional: each source scores all destinations; no transposed
    term is added.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if not bool(mask.diagonal().all()):
        raise ConfigError("mask diagonal must be all ones (positives kept)")
    s_hat = _normalized(z_u, "source")
    d_hat = _normalized(z_v, "destination")
    logits = (s_hat @ d_hat.transpose(0, 1)) / tau
    logits = logits.masked_fill(~mask, float("-inf"))
    return -torch.log_softmax(logits, dim=1).diagonal().mean()


def mrr_from_logits(logits: torch.Tensor, mask: torch.Tensor) -> float:
    """Mean reciprocal rank of the diagonal among unmasked row candidates.

    Ties are broken pessimistically: the true entry ranks after every equal
    competitor, so constant embeddings score poorly rather than perfectly.
    Masked entries never influence ranks.
    """
    if not bool(mask.diagonal().all()):
        raise ConfigError("mask diagonal must be all ones")
    diag = logits.diagonal().unsqueeze(1)
    # rank = 1 + number of unmasked competitors scoring >= the true pair
    beats = (logits >= diag) & mask
    beats = beats.clone()
    beats.diagonal().fill_(False)
    ranks = 1 + beats.sum(dim=1)
    return float((1.0 / ranks.to(torch.float64)).mean())


def batch_mrr(
    z_u: torch.Tensor, z_v: torch.Tensor, mask: torch.Tensor, tau: float
) -> float:
    """MRR of the true destination under the masked similarity logits."""
    with torch.no_grad():
        s_hat = _normalized(z_u, "source")
        d_hat = _normalized(z_v, "destination")
        return mrr_from_logits((s_hat @ d_hat.transpose(0, 1)) / tau, mask)


def uniform_mrr_baseline(n: int) -> float:
    """Expected MRR of a uniformly random ranking over n candidates."""
    return float(np.sum(1.0 / np.arange(1, n + 1)) / n)


# ---- batch cache ---------------------------------------------------------


def cache_digest(
    k: int, batch_size: int, split_name: str, num_events: int, num_nodes: int
) -> bytes:
    hexdigest = sha256_of_json(
        {
            "k": k,
            "batch_size": batch_size,
            "split": split_name,
            "num_events": num_events,
            "num_nodes": num_nodes,
        }
    )
    return bytes.fromhex(hexdigest)


def _seq_block(seqs: list[NeighborSequence]) -> tuple[np.ndarray, ...]:
    return (
        np.stack([s.neighbor_ids for s in seqs]).astype("<u4"),
        np.stack([s.edge_ids for s in seqs]).astype("<u4"),
        np.stack([s.timestamps for s in seqs]).astype("<f8"),
        np.stack([s.valid for s in seqs]).astype(np.uint8),
    )


def write_batch_cache(
    path: str | Path, batches: list[ContrastiveBatch], k: int, digest: bytes
) -> None:
    """Cache layout: magic, version u32, digest 32 bytes, k u32, count u64;
    per batch: N u32, query ids/timestamps, sequence snapshots, packed mask
    bits (row-major)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<I", CACHE_VERSION))
        f.write(digest)
        f.write(struct.pack("<I", k))
        f.write(struct.pack("<Q", len(batches)))
        for batch in batches:
            n = batch.size
            f.write(struct.pack("<I", n))
            f.write(batch.src_nodes.astype("<u4").tobytes())
            f.write(batch.dst_nodes.astype("<u4").tobytes())
            f.write(batch.edge_ids.astype("<u4").tobytes())
            f.write(batch.times.astype("<f8").tobytes())
            for seqs in (batch.src_seqs, batch.dst_seqs):
                nbr, eid, ts, valid = _seq_block(seqs)
                f.write(nbr.tobytes())
                f.write(eid.tobytes())
                f.write(ts.tobytes())
                f.write(valid.tobytes())
            f.write(np.packbits(batch.mask.reshape(-1)).tobytes())


def read_batch_cache(path: str | Path) -> tuple[list[ContrastiveBatch], int, bytes]:
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"batch cache not found: {path}")
    try:
        with open(path, "rb") as f:
            if f.read(4) != CACHE_MAGIC:
                raise DataIOError(f"{path}: not a batch cache")
            version = struct.unpack("<I", f.read(4))[0]
            if version != CACHE_VERSION:
                raise DataIOError(f"{path}: unsupported cache version {version}")
            digest = f.read(32)
            k = struct.unpack("<I", f.read(4))[0]
            count = struct.unpack("<Q", f.read(8))[0]
            slots = k - 1
            batches = []
            for _ in range(count):
                n = struct.unpack("<I", f.read(4))[0]
                src_nodes = np.frombuffer(f.read(4 * n), dtype="<u4").astype(np.int64)
                dst_nodes = np.frombuffer(f.read(4 * n), dtype="<u4").astype(np.int64)
                edge_ids = np.frombuffer(f.read(4 * n), dtype="<u4").astype(np.int64)
                times = np.frombuffer(f.read(8 * n), dtype="<f8").astype(np.float64)

                def read_seqs(owners: np.ndarray) -> list[NeighborSequence]:
                    nbr = np.frombuffer(f.read(4 * n * slots), dtype="<u4")
                    eid = np.frombuffer(f.read(4 * n * slots), dtype="<u4")
                    ts = np.frombuffer(f.read(8 * n * slots), dtype="<f8")
                    vld = np.frombuffer(f.read(n * slots), dtype=np.uint8)
                    nbr = nbr.reshape(n, slots).astype(np.int64)
                    eid = eid.reshape(n, slots).astype(np.int64)
                    ts = ts.reshape(n, slots).astype(np.float64)
                    vld = vld.reshape(n, slots).astype(bool)
                    return [
                        NeighborSequence(
                            node=int(owners[i]),
                            query_time=float(times[i]),
                            neighbor_ids=nbr[i],
                            edge_ids=eid[i],
                            timestamps=ts[i],
                            valid=vld[i],
                        )
                        for i in range(n)
                    ]

                src_seqs = read_seqs(src_nodes)
                dst_seqs = read_seqs(dst_nodes)
                mask_bytes = f.read((n * n + 7) // 8)
                mask = np.unpackbits(
                    np.frombuffer(mask_bytes, dtype=np.uint8), count=n * n
                ).reshape(n, n).astype(bool)
                batches.append(
                    ContrastiveBatch(
                        src_nodes=src_nodes,
                        dst_nodes=dst_nodes,
                        edge_ids=edge_ids,
                        times=times,
                        src_seqs=src_seqs,
                        dst_seqs=dst_seqs,
                        mask=mask,
                        t_min=float(times.min()),
                    )
                )
    except (struct.error, ValueError) as exc:
        raise DataIOError(f"{path}: corrupt batch cache ({exc})")
    return batches, k, digest


def precompute_batches(
    graph: TemporalGraph,
    split: range,
    k: int,
    batch_size: int,
    out_path: str | Path,
    split_name: str = "train",
) -> int:
    """Snapshot consecutive chronological batches of the split to disk.

    The final short batch is kept. Returns the number of batches written.
    """
    if len(split) == 0:
        raise ConfigError(f"cannot precompute batches for empty split {split_name!r}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    batches = []
    indices = np.asarray(split, dtype=np.int64)
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        src_nodes = graph.src[chunk].copy()
        dst_nodes = graph.dst[chunk].copy()
        edge_ids = graph.edge_ids[chunk].copy()
        times = graph.timestamps[chunk].copy()
        src_seqs = [
            sample_recent_neighbors(graph, int(u), float(t), k)
            for u, t in zip(src_nodes, times)
        ]
        dst_seqs = [
            sample_recent_neighbors(graph, int(v), float(t), k)
            for v, t in zip(dst_nodes, times)
        ]
        mask = build_false_negative_mask(src_nodes, dst_nodes, times, graph)
        batches.append(
            ContrastiveBatch(
                src_nodes=src_nodes,
                dst_nodes=dst_nodes,
                edge_ids=edge_ids,
                times=times,
                src_seqs=src_seqs,
                dst_seqs=dst_seqs,
                mask=mask,
                t_min=float(times.min()),
            )
        )
    digest = cache_digest(k, batch_size, split_name, graph.num_events, graph.num_nodes)
    write_batch_cache(out_path, batches, k, digest)
    logger.info("wrote %d batches to %s", len(batches), out_path)
    return len(batches)


# ---- training loop -------------------------------------------------------


def materialize_batch(
    batch: ContrastiveBatch,
    feats: FeatureMatrices,
    vocabs: CountVocabularySet,
    dtype: torch.dtype = torch.float32,
) -> tuple[TokenBatch, TokenBatch, torch.Tensor]:
    """Assemble a cached batch into encoder-ready tensors."""
    src_bundles, dst_bundles = [], []
    for i in range(batch.size):
        sb, db = assemble_bundles(
            feats,
            batch.src_seqs[i],
            batch.dst_seqs[i],
            vocabs,
            (int(batch.src_nodes[i]), int(batch.dst_nodes[i]), float(batch.times[i])),
        )
        src_bundles.append(sb)
        dst_bundles.append(db)
    return (
        TokenBatch.from_bundles(src_bundles, dtype=dtype),
        TokenBatch.from_bundles(dst_bundles, dtype=dtype),
        torch.from_numpy(batch.mask),
    )


def validation_mrr(
    model: DyGnRoleEncoder,
    val_batches: list[tuple[TokenBatch, TokenBatch, torch.Tensor]],
    tau: float,
) -> float:
    model.eval()
    with torch.no_grad():
        scores = [
            batch_mrr(*model.encode_pair(src, dst, INDEPENDENT), mask, tau)
            for src, dst, mask in [(s, d, m) for s, d, m in val_batches]
        ]
    return float(np.mean(scores))


def pretrain_loop(
    encoder_config: EncoderConfig,
    feats: FeatureMatrices,
    vocabs: CountVocabularySet,
    train_cache_path: str | Path,
    val_cache_path: str | Path,
    checkpoint_path: str | Path,
    seed: int,
    tau: float = 0.07,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    max_epochs: int = 100,
    patience: int = 5,
) -> PretrainResult:
    """Train with the contrastive objective; keep the best-validation-MRR model.

    Batches are consumed in chronological order every epoch. Training halts
    after ``patience`` consecutive epochs without MRR improvement or at
    ``max_epochs``, whichever comes first; the persisted checkpoint is the
    best epoch's.
    """
    train_raw, k_train, _ = read_batch_cache(train_cache_path)
    val_raw, k_val, _ = read_batch_cache(val_cache_path)
    if k_train != encoder_config.max_seq_len or k_val != encoder_config.max_seq_len:
        raise ConfigError(
            f"cache k ({k_train}/{k_val}) does not match config "
            f"max_seq_len {encoder_config.max_seq_len}"
        )

    train_batches = [materialize_batch(b, feats, vocabs) for b in train_raw]
    val_batches = [materialize_batch(b, feats, vocabs) for b in val_raw]

    model = build_encoder(encoder_config, derive_seed(seed, "encoder-init"))
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    seed_torch(derive_seed(seed, "pretrain-loop"))

    state = PretrainState()
    history: list[dict] = []
    best_state: dict[str, torch.Tensor] | None = None
    stopped_early = False

    for epoch in range(1, max_epochs + 1):
        state.epoch = epoch
        model.train()
        epoch_losses = []
        for step, (src, dst, mask) in enumerate(train_batches):
            state.step += 1
            z_u, z_v = model.encode_pair(src, dst, INDEPENDENT)
            loss = tclp_loss(z_u, z_v, mask, tau)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite TCLP loss at epoch {epoch}, batch {step}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss))

        val_mrr = validation_mrr(model, val_batches, tau)
        history.append(
            {
                "epoch": epoch,
                "split": "val",
                "train_loss": float(np.mean(epoch_losses)),
                "val_mrr": val_mrr,
            }
        )
        logger.info(
            "epoch %d: train_loss=%.4f val_mrr=%.4f", epoch,
            history[-1]["train_loss"], val_mrr,
        )

        if val_mrr > state.best_val_mrr:
            state.best_val_mrr = val_mrr
            state.patience_counter = 0
            best_state = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
        else:
            state.patience_counter += 1
            if state.patience_counter >= patience:
                stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    config_echo = {
        "kind": "pretrain",
        "encoder": encoder_config.to_dict(),
        "tau": tau,
        "lr": lr,
        "weight_decay": weight_decay,
        "seed": seed,
    }
    checkpoint_path = Path(checkpoint_path)
    save_checkpoint(checkpoint_path, model, config_echo, seed)
    return PretrainResult(
        checkpoint_path=checkpoint_path,
        best_val_mrr=state.best_val_mrr,
        epochs_run=state.epoch,
        stopped_early=stopped_early,
        history=history,
    )
