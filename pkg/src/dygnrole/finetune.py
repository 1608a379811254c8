"""Label-constrained future edge classification.

A pretrained (or fresh) backbone is run in joint mode and an MLP head maps
[z_u || z_v] to class logits. Training uses only the most recent labeled
events of the train split and a recent slice of the validation split;
early stopping tracks validation macro-F1 after a fixed grace period, and
the best model is evaluated once on the full test split.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from dygnrole.checkpointing import save_checkpoint
from dygnrole.encoder import (
    JOINT,
    DyGnRoleEncoder,
    EncoderConfig,
    TokenBatch,
    build_encoder,
)
from dygnrole.exceptions import ConfigError, NumericError
from dygnrole.features import CountVocabularySet, FeatureMatrices, assemble_bundles
from dygnrole.graph import TemporalGraph, sample_recent_neighbors
from dygnrole.utils import derive_seed, seed_torch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneProtocol:
    """Budgets and early-stopping schedule for the classification phase."""

    train_label_budget: int = 10_000
    val_budget: int = 1_500
    grace_epochs: int = 5
    patience: int = 5
    max_epochs: int = 100
    batch_size: int = 256
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


class ClassifierHead(nn.Module):
    """Two ReLU hidden layers with dropout over the concatenated pair."""

    def __init__(self, token_dim: int, num_classes: int, dropout: float = 0.1):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        self.mlp = nn.Sequential(
            nn.Linear(2 * token_dim, token_dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(token_dim, token_dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(token_dim, num_classes),
        )

    def forward(self, z_u: torch.Tensor, z_v: torch.Tensor) -> torch.Tensor:
        return self.mlp(torch.cat([z_u, z_v], dim=-1))


class FinetuneModel(nn.Module):
    """Backbone plus head, checkpointed as one named-tensor container."""

    def __init__(self, encoder: DyGnRoleEncoder, head: ClassifierHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, src: TokenBatch, dst: TokenBatch) -> torch.Tensor:
        z_u, z_v = self.encoder.encode_pair(src, dst, JOINT)
        return self.head(z_u, z_v)


def select_recent_labeled(split: range, budget: int) -> range:
    """The last min(budget, |split|) events of a split, order preserved."""
    if budget < 0:
        raise ConfigError("label budget must be non-negative")
    take = min(budget, len(split))
    return range(split.stop - take, split.stop)


def f1_scores(
    predictions: np.ndarray, labels: np.ndarray, num_classes: int
) -> tuple[float, float]:
    """(macro F1, weighted F1) from hard predictions.

    Per-class F1 is 0 when precision+recall is 0. Macro averages over all
    num_classes classes (absent classes count as 0); weighted averages over
    classes present in the labels, weighted by support.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(predictions) == 0:
        raise ConfigError("cannot compute F1 scores on empty inputs")
    if len(predictions) != len(labels):
        raise ConfigError("predictions and labels must have equal length")
    if predictions.min() < 0 or predictions.max() >= num_classes:
        raise ConfigError("prediction out of class range")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigError("label out of class range")

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)

    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2 * precision * recall / pr, 0.0)

    macro = float(f1.mean())
    weighted = float((support * f1).sum() / support.sum())
    return macro, weighted


@dataclass
class EarlyStopper:
    """Patience-based stopper whose counter is suppressed during a grace period.

    ``update`` is called once per epoch with the validation metric; the
    counter only advances on non-improving epochs after ``grace_epochs``
    epochs have elapsed, and ``should_stop`` fires once ``patience``
    consecutive non-improving epochs accumulate.
    """

    grace_epochs: int = 5
    patience: int = 5
    epoch: int = 0
    best: float = float("-inf")
    best_epoch: int = 0
    counter: int = 0

    def update(self, metric: float) -> bool:
        self.epoch += 1
        if metric > self.best:
            self.best = metric
            self.best_epoch = self.epoch
            self.counter = 0
            return True
        if self.epoch > self.grace_epochs:
            self.counter += 1
        return False

    def should_stop(self) -> bool:
        return self.counter >= self.patience


# ---- data assembly -------------------------------------------------------


def assemble_event_tensors(
    graph: TemporalGraph,
    feats: FeatureMatrices,
    vocabs: CountVocabularySet,
    indices,
    k: int,
    require_labels: bool = True,
) -> tuple[TokenBatch, TokenBatch, torch.Tensor | None]:
    """Sequence-sample and bundle a list of events into stacked tensors."""
    indices = np.asarray(list(indices), dtype=np.int64)
    if require_labels and graph.labels is None:
        raise ConfigError("graph has no labels; cannot finetune/evaluate")
    src_bundles, dst_bundles = [], []
    for i in indices:
        u, v, t = int(graph.src[i]), int(graph.dst[i]), float(graph.timestamps[i])
        src_seq = sample_recent_neighbors(graph, u, t, k)
        dst_seq = sample_recent_neighbors(graph, v, t, k)
        sb, db = assemble_bundles(feats, src_seq, dst_seq, vocabs, (u, v, t))
        src_bundles.append(sb)
        dst_bundles.append(db)
    labels = None
    if graph.labels is not None:
        labels = torch.from_numpy(graph.labels[indices].copy())
    return (
        TokenBatch.from_bundles(src_bundles),
        TokenBatch.from_bundles(dst_bundles),
        labels,
    )


def _evaluate(
    model: FinetuneModel,
    src: TokenBatch,
    dst: TokenBatch,
    labels: torch.Tensor,
    num_classes: int,
    batch_size: int,
) -> dict:
    model.eval()
    losses, preds = [], []
    criterion = nn.CrossEntropyLoss(reduction="sum")
    with torch.no_grad():
        for start in range(0, len(src), batch_size):
            sl = slice(start, start + batch_size)
            logits = model(src.slice(sl), dst.slice(sl))
            losses.append(float(criterion(logits, labels[sl])))
            preds.append(logits.argmax(dim=1).numpy())
    predictions = np.concatenate(preds)
    macro, weighted = f1_scores(predictions, labels.numpy(), num_classes)
    return {
        "loss": float(np.sum(losses) / len(src)),
        "macro_f1": macro,
        "weighted_f1": weighted,
        "predictions": predictions,
    }


@dataclass
class FinetuneResult:
    checkpoint_path: Path
    best_epoch: int
    best_val_macro_f1: float
    test_macro_f1: float
    test_weighted_f1: float
    epochs_run: int
    history: list[dict] = field(default_factory=list)


def finetune_loop(
    encoder_config: EncoderConfig,
    graph: TemporalGraph,
    feats: FeatureMatrices,
    vocabs: CountVocabularySet,
    train_range: range,
    val_range: range,
    test_range: range,
    num_classes: int,
    protocol: FinetuneProtocol,
    seed: int,
    checkpoint_path: str | Path,
    init_checkpoint: str | Path | None = None,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
) -> FinetuneResult:
    """End-to-end classification training on the recent-label subsets.

    With ``init_checkpoint`` the backbone starts from pretrained weights
    (the head is always freshly initialized); without it the whole model
    trains from scratch. The best-validation-macro-F1 model is persisted
    and then evaluated once on the full test split; test data never
    influences parameter updates or stopping.
    """
    if graph.labels is None:
        raise ConfigError("graph has no labels; finetuning requires a label column")
    if int(graph.labels.max()) >= num_classes:
        raise ConfigError(
            f"label {int(graph.labels.max())} out of range for {num_classes} classes"
        )

    encoder = build_encoder(encoder_config, derive_seed(seed, "encoder-init"))
    if init_checkpoint is not None:
        from dygnrole.checkpointing import load_into_module

        load_into_module(init_checkpoint, encoder)
    seed_torch(derive_seed(seed, "head-init"))
    head = ClassifierHead(encoder_config.token_dim, num_classes, encoder_config.dropout)
    model = FinetuneModel(encoder, head)

    k = encoder_config.max_seq_len
    train_subset = select_recent_labeled(train_range, protocol.train_label_budget)
    val_subset = select_recent_labeled(val_range, protocol.val_budget)
    if len(train_subset) == 0 or len(val_subset) == 0:
        raise ConfigError("empty finetuning train or validation subset")

    train_src, train_dst, train_labels = assemble_event_tensors(
        graph, feats, vocabs, train_subset, k
    )
    val_src, val_dst, val_labels = assemble_event_tensors(
        graph, feats, vocabs, val_subset, k
    )

    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    criterion = nn.CrossEntropyLoss()
    stopper = EarlyStopper(grace_epochs=protocol.grace_epochs, patience=protocol.patience)
    seed_torch(derive_seed(seed, "finetune-loop"))

    history: list[dict] = []
    best_state: dict[str, torch.Tensor] | None = None
    n_train = len(train_subset)

    for epoch in range(1, protocol.max_epochs + 1):
        model.train()
        epoch_loss = 0.0
        train_preds = []
        for start in range(0, n_train, protocol.batch_size):
            sl = slice(start, start + protocol.batch_size)
            logits = model(train_src.slice(sl), train_dst.slice(sl))
            loss = criterion(logits, train_labels[sl])
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite classification loss at epoch {epoch}, "
                    f"batch {start // protocol.batch_size}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss) * (min(start + protocol.batch_size, n_train) - start)
            train_preds.append(logits.detach().argmax(dim=1).numpy())

        train_macro, train_weighted = f1_scores(
            np.concatenate(train_preds), train_labels.numpy(), num_classes
        )
        history.append(
            {
                "epoch": epoch,
                "split": "train",
                "macro_f1": train_macro,
                "weighted_f1": train_weighted,
                "loss": epoch_loss / n_train,
            }
        )

        val_metrics = _evaluate(
            model, val_src, val_dst, val_labels, num_classes, protocol.batch_size
        )
        history.append(
            {
                "epoch": epoch,
                "split": "val",
                "macro_f1": val_metrics["macro_f1"],
                "weighted_f1": val_metrics["weighted_f1"],
                "loss": val_metrics["loss"],
            }
        )
        logger.info(
            "epoch %d: train_loss=%.4f val_macro_f1=%.4f",
            epoch, history[-2]["loss"], val_metrics["macro_f1"],
        )

        if stopper.update(val_metrics["macro_f1"]):
            best_state = {k_: v.detach().clone() for k_, v in model.state_dict().items()}
        if stopper.should_stop():
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    config_echo = {
        "kind": "finetune",
        "encoder": encoder_config.to_dict(),
        "num_classes": num_classes,
        "lr": lr,
        "weight_decay": weight_decay,
        "seed": seed,
        "pretrained": init_checkpoint is not None,
    }
    checkpoint_path = Path(checkpoint_path)
    save_checkpoint(checkpoint_path, model, config_echo, seed)

    # test evaluation happens strictly after the checkpoint is persisted
    test_src, test_dst, test_labels = assemble_event_tensors(
        graph, feats, vocabs, test_range, k
    )
    test_metrics = _evaluate(
        model, test_src, test_dst, test_labels, num_classes, protocol.batch_size
    )
    history.append(
        {
            "epoch": stopper.best_epoch,
            "split": "test",
            "macro_f1": test_metrics["macro_f1"],
            "weighted_f1": test_metrics["weighted_f1"],
            "loss": test_metrics["loss"],
        }
    )

    return FinetuneResult(
        checkpoint_path=checkpoint_path,
        best_epoch=stopper.best_epoch,
        best_val_macro_f1=stopper.best,
        test_macro_f1=test_metrics["macro_f1"],
        test_weighted_f1=test_metrics["weighted_f1"],
        epochs_run=stopper.epoch,
        history=history,
    )


def load_finetuned_model(path: str | Path) -> tuple[FinetuneModel, dict, int]:
    """Rebuild a FinetuneModel from a checkpoint's config echo."""
    from dygnrole.checkpointing import load_checkpoint, load_into_module

    _, config, seed = load_checkpoint(path)
    encoder_config = EncoderConfig.from_dict(config["encoder"])
    encoder = DyGnRoleEncoder(encoder_config)
    head = ClassifierHead(
        encoder_config.token_dim, config["num_classes"], encoder_config.dropout
    )
    model = FinetuneModel(encoder, head)
    load_into_module(path, model)
    return model, config, seed


def aggregate_seed_metrics(per_seed: list[dict]) -> dict:
    """Mean and standard deviation per numeric metric across seed runs."""
    if not per_seed:
        raise ConfigError("no per-seed metrics to aggregate")
    keys = [k for k, v in per_seed[0].items() if isinstance(v, (int, float))]
    out = {}
    for key in keys:
        values = np.array([m[key] for m in per_seed], dtype=np.float64)
        out[key] = {"mean": float(values.mean()), "std": float(values.std())}
    out["num_seeds"] = len(per_seed)
    return out
