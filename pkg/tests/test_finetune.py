import numpy as np
import pytest
import torch

from dygnrole.encoder import EncoderConfig, build_encoder
from dygnrole.exceptions import ConfigError
from dygnrole.features import FeatureMatrices, build_vocabularies_for_split
from dygnrole.finetune import (
    ClassifierHead,
    EarlyStopper,
    FinetuneProtocol,
    aggregate_seed_metrics,
    f1_scores,
    finetune_loop,
    load_finetuned_model,
    select_recent_labeled,
)
from dygnrole.graph import SplitSpec, build_temporal_graph, chronological_split


class TestClassifierHead:
    def test_zero_weights_zero_logits(self):
        head = ClassifierHead(12, 3)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        logits = head(torch.randn(4, 12), torch.randn(4, 12))
        assert torch.equal(logits, torch.zeros(4, 3))

    def test_swapping_inputs_changes_logits(self):
        torch.manual_seed(0)
        head = ClassifierHead(8, 4).eval()
        z_u, z_v = torch.randn(5, 8), torch.randn(5, 8)
        assert not torch.allclose(head(z_u, z_v), head(z_v, z_u))

    def test_output_width(self):
        head = ClassifierHead(6, 7)
        assert head(torch.randn(3, 6), torch.randn(3, 6)).shape == (3, 7)

    def test_minimum_classes(self):
        with pytest.raises(ConfigError):
            ClassifierHead(6, 1)


class TestSelectRecentLabeled:
    def test_clip_to_split(self):
        assert select_recent_labeled(range(0, 7), 10_000) == range(0, 7)

    def test_suffix_of_large_split(self):
        assert select_recent_labeled(range(0, 20_000), 10_000) == range(10_000, 20_000)

    def test_abuts_validation_boundary(self):
        train = range(100, 4_000)
        subset = select_recent_labeled(train, 500)
        assert subset.stop == train.stop
        assert len(subset) == 500


class TestF1Scores:
    def test_perfect(self):
        pred = np.array([0, 1, 2, 1])
        assert f1_scores(pred, pred, 3) == (1.0, 1.0)

    def test_majority_collapse_example(self):
        # supports (8,1,1), everything predicted class 0
        labels = np.array([0] * 8 + [1, 2])
        preds = np.zeros(10, dtype=int)
        macro, weighted = f1_scores(preds, labels, 3)
        f1_class0 = 2 * 0.8 * 1.0 / 1.8
        assert macro == pytest.approx(f1_class0 / 3, abs=1e-4)
        assert macro == pytest.approx(0.2963, abs=1e-4)
        assert weighted == pytest.approx(0.8 * f1_class0, abs=1e-4)
        assert weighted == pytest.approx(0.7111, abs=1e-4)

    def test_absent_class_contributes_zero_to_macro(self):
        # class 2 never appears in labels or predictions
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 1, 1, 1])
        macro, _ = f1_scores(preds, labels, 3)
        m2, _ = f1_scores(preds, labels, 2)
        assert macro == pytest.approx(m2 * 2 / 3)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(60)
        for _ in range(1000):
            c = int(rng.integers(2, 6))
            n = int(rng.integers(1, 40))
            labels = rng.integers(0, c, n)
            preds = rng.integers(0, c, n)
            macro, weighted = f1_scores(preds, labels, c)
            per_class = []
            for cls in range(c):
                tp = int(np.sum((preds == cls) & (labels == cls)))
                fp = int(np.sum((preds == cls) & (labels != cls)))
                fn = int(np.sum((preds != cls) & (labels == cls)))
                p = tp / (tp + fp) if tp + fp else 0.0
                r = tp / (tp + fn) if tp + fn else 0.0
                per_class.append(2 * p * r / (p + r) if p + r else 0.0)
            expected_macro = float(np.mean(per_class))
            supports = np.bincount(labels, minlength=c)
            expected_weighted = float(
                sum(s * f for s, f in zip(supports, per_class)) / n
            )
            assert macro == pytest.approx(expected_macro, abs=1e-9)
            assert weighted == pytest.approx(expected_weighted, abs=1e-9)

    def test_validation(self):
        with pytest.raises(ConfigError):
            f1_scores(np.array([]), np.array([]), 2)
        with pytest.raises(ConfigError):
            f1_scores(np.array([0, 1]), np.array([0]), 2)
        with pytest.raises(ConfigError):
            f1_scores(np.array([5]), np.array([0]), 3)


class TestEarlyStopper:
    def test_drop_within_grace_does_not_count(self):
        s = EarlyStopper(grace_epochs=5, patience=5)
        s.update(0.5)   # epoch 1, best
        s.update(0.4)   # epoch 2, drop inside grace
        s.update(0.3)   # epoch 3
        assert s.counter == 0 and not s.should_stop()

    def test_fires_after_exactly_five_nonimproving_epochs(self):
        s = EarlyStopper(grace_epochs=5, patience=5)
        for metric in [0.1, 0.2, 0.3, 0.3, 0.3]:  # epochs 1-5 (grace)
            s.update(metric)
        assert s.counter == 0
        for i, metric in enumerate([0.25, 0.2, 0.2, 0.1, 0.05], start=1):
            s.update(metric)
            assert s.counter == i
            assert s.should_stop() == (i == 5)
        assert s.best == pytest.approx(0.3) and s.best_epoch == 3

    def test_improvement_resets_counter(self):
        s = EarlyStopper(grace_epochs=2, patience=3)
        for metric in [0.1, 0.1, 0.1, 0.1]:
            s.update(metric)
        assert s.counter == 2
        s.update(0.2)
        assert s.counter == 0 and s.best_epoch == 5
        for metric in [0.1, 0.1, 0.1]:
            s.update(metric)
        assert s.should_stop()

    def test_scripted_sequence_with_late_best(self):
        s = EarlyStopper(grace_epochs=5, patience=5)
        metrics = [0.5, 0.1, 0.1, 0.1, 0.1, 0.1, 0.6, 0.1, 0.1, 0.1, 0.1, 0.1]
        stops = []
        for m in metrics:
            s.update(m)
            stops.append(s.should_stop())
        # improvements at epochs 1 and 7; stop exactly at epoch 12
        assert stops == [False] * 11 + [True]


def build_labeled_setup(num_nodes=20, num_edges=260, num_classes=3, seed=61):
    rng = np.random.default_rng(seed)
    src = rng.integers(0, num_nodes, num_edges)
    dst = rng.integers(0, num_nodes, num_edges)
    ts = np.arange(1, num_edges + 1, dtype=np.float64)
    labels = rng.integers(0, num_classes, num_edges)
    graph = build_temporal_graph(src, dst, ts, labels=labels)
    feats = FeatureMatrices(
        node_features=rng.normal(size=(num_nodes, 6)).astype(np.float32),
        edge_features=rng.normal(size=(num_edges, 4)).astype(np.float32),
    )
    splits = chronological_split(graph, SplitSpec(0.7, 0.85))
    vocabs = build_vocabularies_for_split(graph, splits[0], 4, 1)
    config = EncoderConfig(
        d_f_node=6, d_f_edge=4, d_c=4, d_t=4, max_seq_len=4,
        vocab_sizes=vocabs.sizes,
    )
    return graph, feats, vocabs, splits, config


class TestFinetuneLoop:
    def test_runs_and_checkpoints(self, tmp_path):
        graph, feats, vocabs, splits, config = build_labeled_setup()
        protocol = FinetuneProtocol(
            train_label_budget=100, val_budget=30, grace_epochs=1, patience=1,
            max_epochs=3, batch_size=32,
        )
        result = finetune_loop(
            config, graph, feats, vocabs, *splits, num_classes=3,
            protocol=protocol, seed=0, checkpoint_path=tmp_path / "ft.dgnc",
        )
        assert result.checkpoint_path.exists()
        assert 0.0 <= result.test_macro_f1 <= 1.0
        assert result.epochs_run <= 3
        model, cfg, seed = load_finetuned_model(tmp_path / "ft.dgnc")
        assert cfg["num_classes"] == 3 and seed == 0
        splits_epochs = {(h["split"], h["epoch"]) for h in result.history}
        assert ("val", 1) in splits_epochs and ("train", 1) in splits_epochs
        assert any(h["split"] == "test" for h in result.history)

    def test_loads_pretrained_backbone_and_fresh_head(self, tmp_path):
        from dygnrole.checkpointing import save_checkpoint

        graph, feats, vocabs, splits, config = build_labeled_setup()
        backbone = build_encoder(config, 123)
        pre_path = tmp_path / "pre.dgnc"
        save_checkpoint(
            pre_path, backbone,
            {"kind": "pretrain", "encoder": config.to_dict(), "seed": 123}, 123,
        )
        protocol = FinetuneProtocol(
            train_label_budget=60, val_budget=20, grace_epochs=1, patience=1,
            max_epochs=1, batch_size=32,
        )
        result = finetune_loop(
            config, graph, feats, vocabs, *splits, num_classes=3,
            protocol=protocol, seed=0, checkpoint_path=tmp_path / "ft.dgnc",
            init_checkpoint=pre_path,
        )
        model, _, _ = load_finetuned_model(result.checkpoint_path)
        assert model.head.mlp[0].weight.shape == (config.token_dim, 2 * config.token_dim)

    def test_missing_labels_rejected(self, tmp_path):
        graph, feats, vocabs, splits, config = build_labeled_setup()
        graph.labels = None
        with pytest.raises(ConfigError):
            finetune_loop(
                config, graph, feats, vocabs, *splits, num_classes=3,
                protocol=FinetuneProtocol(max_epochs=1), seed=0,
                checkpoint_path=tmp_path / "x.dgnc",
            )

    def test_seed_changes_result_and_same_seed_reproduces(self, tmp_path):
        graph, feats, vocabs, splits, config = build_labeled_setup()
        protocol = FinetuneProtocol(
            train_label_budget=60, val_budget=20, grace_epochs=1, patience=1,
            max_epochs=2, batch_size=32,
        )

        def run(seed, name):
            return finetune_loop(
                config, graph, feats, vocabs, *splits, num_classes=3,
                protocol=protocol, seed=seed, checkpoint_path=tmp_path / name,
            )

        r1 = run(0, "a.dgnc")
        r2 = run(0, "b.dgnc")
        assert (tmp_path / "a.dgnc").read_bytes() == (tmp_path / "b.dgnc").read_bytes()
        assert r1.test_macro_f1 == r2.test_macro_f1


class TestAggregation:
    def test_mean_and_std_recomputable(self):
        runs = [
            {"test_macro_f1": 0.5, "test_weighted_f1": 0.6, "seed": 0},
            {"test_macro_f1": 0.7, "test_weighted_f1": 0.8, "seed": 1},
        ]
        agg = aggregate_seed_metrics(runs)
        assert agg["test_macro_f1"]["mean"] == pytest.approx(0.6)
        assert agg["test_macro_f1"]["std"] == pytest.approx(0.1)
        assert agg["num_seeds"] == 2

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            aggregate_seed_metrics([])
