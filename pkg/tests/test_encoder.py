import math

import numpy as np
import pytest
import torch

from dygnrole.checkpointing import load_checkpoint, load_into_module, save_checkpoint
from dygnrole.encoder import (
    INDEPENDENT,
    JOINT,
    DyGnRoleEncoder,
    EncoderConfig,
    TimeEncoder,
    TokenBatch,
    build_encoder,
)
from dygnrole.exceptions import ConfigError, DataIOError
from dygnrole.features import DESTINATION, SOURCE

from reference_impl import transformer_forward as np_transformer_forward

SMALL = EncoderConfig(
    d_f_node=5, d_f_edge=4, d_c=6, d_t=8, layers=2, heads=2, dropout=0.1,
    max_seq_len=4, vocab_sizes=(3, 3, 4, 2),
)


def random_batch(cfg: EncoderConfig, b: int, seed: int, all_valid=False,
                 dtype=torch.float64) -> TokenBatch:
    rng = np.random.default_rng(seed)
    k = cfg.max_seq_len
    valid = np.ones((b, k), dtype=bool)
    if not all_valid:
        for i in range(b):
            m = rng.integers(1, k + 1)
            valid[i, m:] = False
    max_idx = min(cfg.vocab_sizes)
    within_idx = rng.integers(0, max_idx, (b, k))
    cross_idx = rng.integers(0, max_idx, (b, k))
    deltas = rng.uniform(0, 10, (b, k))
    deltas[:, 0] = 0.0
    return TokenBatch(
        node_vecs=torch.tensor(rng.normal(size=(b, k, cfg.d_f_node)), dtype=dtype),
        edge_vecs=torch.tensor(rng.normal(size=(b, k, cfg.d_f_edge)), dtype=dtype),
        time_deltas=torch.tensor(deltas, dtype=dtype),
        within_indices=torch.tensor(within_idx, dtype=torch.long),
        cross_indices=torch.tensor(cross_idx, dtype=torch.long),
        within_counts=torch.tensor(within_idx.astype(np.float64), dtype=dtype),
        cross_counts=torch.tensor(cross_idx.astype(np.float64), dtype=dtype),
        valid=torch.tensor(valid),
    )


class TestTimeEncoder:
    def test_zero_delta_gives_ones(self):
        enc = TimeEncoder(16)
        out = enc(torch.zeros(3, 5))
        assert torch.allclose(out, torch.ones(3, 5, 16))

    def test_single_dim_cos_pi(self):
        enc = TimeEncoder(1)
        assert float(enc.w.detach()) == 1.0
        out = enc(torch.tensor([math.pi]))
        assert abs(float(out[0, 0]) + 1.0) < 1e-6

    def test_inverse_log_scale_init(self):
        enc = TimeEncoder(10)
        expected = [10 ** (-9 * j / 9) for j in range(10)]
        assert np.allclose(enc.w.detach().numpy(), expected)
        assert not enc.b.detach().any()

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(21)
        enc = TimeEncoder(7).double()
        w = rng.normal(size=7)
        b = rng.normal(size=7)
        with torch.no_grad():
            enc.w.copy_(torch.tensor(w))
            enc.b.copy_(torch.tensor(b))
        deltas = rng.uniform(0, 100, size=9)
        out = enc(torch.tensor(deltas)).detach().numpy()
        for i in range(9):
            for j in range(7):
                assert abs(out[i, j] - math.cos(w[j] * deltas[i] + b[j])) < 1e-12


class TestFusion:
    def test_output_width_is_five_channels(self):
        cfg = EncoderConfig(d_f_node=12, d_f_edge=7, d_c=50, d_t=10, max_seq_len=4)
        model = build_encoder(cfg, 0).double()
        batch = random_batch(cfg, 2, 0)
        fused = model.fuse_tokens(batch, SOURCE)
        assert fused.shape == (2, 4, 250)
        assert cfg.token_dim == 5 * 50

    def test_matches_manual_per_channel_products(self):
        model = build_encoder(SMALL, 1).double()
        batch = random_batch(SMALL, 3, 2)
        fused = model.fuse_tokens(batch, DESTINATION).detach().numpy()
        d_c = SMALL.d_c
        p = {k: v.detach().numpy() for k, v in model.state_dict().items()}
        for i in range(3):
            for t in range(SMALL.max_seq_len):
                node = p["proj_node.weight"] @ batch.node_vecs[i, t].numpy() + p["proj_node.bias"]
                edge = p["proj_edge.weight"] @ batch.edge_vecs[i, t].numpy() + p["proj_edge.bias"]
                tv = np.cos(float(batch.time_deltas[i, t]) * p["time_encoder.w"] + p["time_encoder.b"])
                tim = p["proj_time.weight"] @ tv + p["proj_time.bias"]
                wv = p["emb_dst_within.weight"][int(batch.within_indices[i, t])]
                cv = p["emb_dst_cross.weight"][int(batch.cross_indices[i, t])]
                within = p["proj_within.weight"] @ wv + p["proj_within.bias"]
                cross = p["proj_cross.weight"] @ cv + p["proj_cross.bias"]
                expected = np.concatenate([node, edge, tim, within, cross])
                assert np.allclose(fused[i, t], expected, atol=1e-12)
        # channel layout: node | edge | time | within | cross
        assert np.allclose(
            model.frequency_features(batch, DESTINATION).detach().numpy(),
            fused[..., 3 * d_c:],
            atol=1e-12,
        )

    def test_vocab_index_out_of_range(self):
        model = build_encoder(SMALL, 1).double()
        batch = random_batch(SMALL, 2, 3)
        batch.within_indices[0, 0] = 99
        with pytest.raises(ConfigError, match="vocabulary"):
            model.fuse_tokens(batch, SOURCE)


class TestCooccurrenceAblation:
    CFG = EncoderConfig(
        d_f_node=5, d_f_edge=4, d_c=6, d_t=8, max_seq_len=4, use_nfe=False,
    )

    def test_role_agnostic_features(self):
        model = build_encoder(self.CFG, 2).double()
        batch = random_batch(self.CFG, 3, 4)
        src_feat = model.frequency_features(batch, SOURCE)
        dst_feat = model.frequency_features(batch, DESTINATION)
        assert torch.equal(src_feat, dst_feat)

    def test_swapping_count_pair_leaves_feature_unchanged(self):
        model = build_encoder(self.CFG, 2).double()
        batch = random_batch(self.CFG, 3, 5)
        swapped = TokenBatch(
            node_vecs=batch.node_vecs, edge_vecs=batch.edge_vecs,
            time_deltas=batch.time_deltas,
            within_indices=batch.cross_indices, cross_indices=batch.within_indices,
            within_counts=batch.cross_counts, cross_counts=batch.within_counts,
            valid=batch.valid,
        )
        a = model.frequency_features(batch, SOURCE)
        b = model.frequency_features(swapped, SOURCE)
        assert torch.allclose(a, b, atol=0)

    def test_matches_straight_line_mlp_oracle(self):
        model = build_encoder(self.CFG, 2).double()
        batch = random_batch(self.CFG, 2, 6)
        out = model.frequency_features(batch, SOURCE).detach().numpy()
        p = {k: v.detach().numpy() for k, v in model.state_dict().items()}
        w1, b1 = p["cooc_mlp.0.weight"], p["cooc_mlp.0.bias"]
        w2, b2 = p["cooc_mlp.2.weight"], p["cooc_mlp.2.bias"]

        def g(c):
            h = np.maximum(w1 @ np.array([c]) + b1, 0.0)
            return w2 @ h + b2

        for i in range(2):
            for t in range(self.CFG.max_seq_len):
                expected = g(float(batch.within_counts[i, t])) + g(float(batch.cross_counts[i, t]))
                assert np.allclose(out[i, t], expected, atol=1e-12)


class TestRSPE:
    def test_added_by_position_and_role(self):
        model = build_encoder(SMALL, 3).double()
        tokens = torch.zeros(2, SMALL.max_seq_len, SMALL.token_dim, dtype=torch.float64)
        out = model.apply_rspe(tokens, SOURCE)
        assert torch.allclose(out[:, 0], model.rspe_src_node.double().expand(2, -1))
        for t in range(1, SMALL.max_seq_len):
            assert torch.allclose(out[:, t], model.rspe_src_neighbor.double().expand(2, -1))

    def test_disabled_is_identity(self):
        cfg = EncoderConfig(
            d_f_node=5, d_f_edge=4, d_c=6, d_t=8, max_seq_len=4, use_rspe=False,
        )
        model = build_encoder(cfg, 3).double()
        tokens = torch.randn(2, 4, cfg.token_dim, dtype=torch.float64)
        assert torch.equal(model.apply_rspe(tokens, SOURCE), tokens)

    def test_roles_differ_iff_vectors_differ(self):
        model = build_encoder(SMALL, 3).double()
        tokens = torch.zeros(1, SMALL.max_seq_len, SMALL.token_dim, dtype=torch.float64)
        src = model.apply_rspe(tokens, SOURCE)
        dst = model.apply_rspe(tokens, DESTINATION)
        assert not torch.allclose(src, dst)
        with torch.no_grad():
            model.rspe_dst_node.copy_(model.rspe_src_node)
            model.rspe_dst_neighbor.copy_(model.rspe_src_neighbor)
        assert torch.allclose(
            model.apply_rspe(tokens, SOURCE), model.apply_rspe(tokens, DESTINATION)
        )


class TestTransformer:
    def test_single_token_no_cross_flow(self):
        model = build_encoder(SMALL, 4).double().eval()
        x = torch.randn(1, 1, SMALL.token_dim, dtype=torch.float64)
        valid = torch.ones(1, 1, dtype=torch.bool)
        out1 = model.transformer_forward(x, valid)
        # a second, different token in another batch row cannot change row 0
        x2 = torch.cat([x, torch.randn_like(x)], dim=0)
        valid2 = torch.ones(2, 1, dtype=torch.bool)
        out2 = model.transformer_forward(x2, valid2)
        assert torch.allclose(out1[0], out2[0])

    def test_masked_keys_get_zero_attention(self):
        torch.manual_seed(0)
        layer = build_encoder(SMALL, 4).double().layers[0]
        x = torch.randn(1, 4, SMALL.token_dim, dtype=torch.float64)
        valid = torch.tensor([[True, True, False, False]])
        normed = layer.norm1(x)
        d = SMALL.token_dim
        qkv = layer.attn.qkv(normed).reshape(1, 4, 3, 2, d // 2)
        q, k = qkv[:, :, 0].transpose(1, 2), qkv[:, :, 1].transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(d // 2)
        scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        assert torch.equal(attn[..., 2:], torch.zeros_like(attn[..., 2:]))
        assert torch.allclose(attn.sum(-1), torch.ones_like(attn.sum(-1)))

    def test_matches_numpy_reference_forward(self):
        model = build_encoder(SMALL, 5).double().eval()
        params = {k: v.detach().numpy().astype(np.float64)
                  for k, v in model.state_dict().items()}
        rng = np.random.default_rng(31)
        for trial in range(5):
            t = int(rng.integers(1, 9))
            x = rng.normal(size=(t, SMALL.token_dim))
            valid = np.ones(t, dtype=bool)
            if t > 1:
                m = int(rng.integers(1, t + 1))
                valid[m:] = False
            expected = np_transformer_forward(x, valid, params, SMALL.layers, SMALL.heads)
            got = model.transformer_forward(
                torch.tensor(x).unsqueeze(0), torch.tensor(valid).unsqueeze(0)
            )[0].detach().numpy()
            # compare only valid rows; padding rows carry arbitrary values
            assert np.abs(expected[valid] - got[valid]).max() < 1e-10


class TestEncodePair:
    def test_joint_sequence_length_is_2k_plus_2(self):
        cfg = EncoderConfig(d_f_node=5, d_f_edge=4, d_c=6, d_t=8, max_seq_len=10)
        model = build_encoder(cfg, 6).double().eval()
        seen = {}
        original = model.transformer_forward

        def spy(h, valid):
            seen["T"] = h.shape[1]
            return original(h, valid)

        model.transformer_forward = spy
        src = random_batch(cfg, 2, 7)
        dst = random_batch(cfg, 2, 8)
        model.encode_pair(src, dst, JOINT)
        assert seen["T"] == 22

    def test_shapes_all_modes_and_ablations(self):
        for use_nfe in (True, False):
            for use_rspe in (True, False):
                for use_cls in (True, False):
                    cfg = EncoderConfig(
                        d_f_node=5, d_f_edge=4, d_c=6, d_t=8, max_seq_len=4,
                        use_nfe=use_nfe, use_rspe=use_rspe, use_dual_cls=use_cls,
                        vocab_sizes=(3, 3, 4, 2),
                    )
                    model = build_encoder(cfg, 9).double().eval()
                    src, dst = random_batch(cfg, 2, 10), random_batch(cfg, 2, 11)
                    for mode in (INDEPENDENT, JOINT):
                        z_u, z_v = model.encode_pair(src, dst, mode)
                        assert z_u.shape == z_v.shape == (2, 30)
                        assert torch.isfinite(z_u).all() and torch.isfinite(z_v).all()

    def test_identical_bundles_distinct_cls_give_distinct_outputs(self):
        model = build_encoder(SMALL, 12).double().eval()
        batch = random_batch(SMALL, 3, 13)
        z_u, z_v = model.encode_pair(batch, batch, INDEPENDENT)
        assert not torch.allclose(z_u, z_v)

    def test_mean_pool_single_token_equals_row(self):
        cfg = EncoderConfig(
            d_f_node=5, d_f_edge=4, d_c=6, d_t=8, max_seq_len=4,
            use_dual_cls=False, vocab_sizes=(3, 3, 4, 2),
        )
        model = build_encoder(cfg, 14).double().eval()
        src = random_batch(cfg, 1, 15)
        dst = random_batch(cfg, 1, 16)
        for b in (src, dst):
            b.valid[:, :] = False
            b.valid[:, 0] = True
        z_u, z_v = model.encode_pair(src, dst, INDEPENDENT)
        tokens = model.apply_rspe(model.fuse_tokens(src, SOURCE), SOURCE)
        row = model.transformer_forward(tokens, src.valid)[:, 0]
        assert torch.allclose(z_u, row, atol=1e-12)

    def test_invalid_mode_rejected(self):
        model = build_encoder(SMALL, 17).double()
        batch = random_batch(SMALL, 1, 18)
        with pytest.raises(ConfigError):
            model.encode_pair(batch, batch, "sideways")

    def test_padding_invariance(self):
        model = build_encoder(SMALL, 19).double().eval()
        src, dst = random_batch(SMALL, 3, 20), random_batch(SMALL, 3, 21)
        for mode in (INDEPENDENT, JOINT):
            z_u, z_v = model.encode_pair(src, dst, mode)
            noisy_src = random_batch(SMALL, 3, 22)
            pad = ~src.valid
            src2 = TokenBatch(
                node_vecs=torch.where(pad[..., None], noisy_src.node_vecs, src.node_vecs),
                edge_vecs=torch.where(pad[..., None], noisy_src.edge_vecs, src.edge_vecs),
                time_deltas=torch.where(pad, noisy_src.time_deltas, src.time_deltas),
                within_indices=torch.where(pad, noisy_src.within_indices, src.within_indices),
                cross_indices=torch.where(pad, noisy_src.cross_indices, src.cross_indices),
                within_counts=torch.where(pad, noisy_src.within_counts, src.within_counts),
                cross_counts=torch.where(pad, noisy_src.cross_counts, src.cross_counts),
                valid=src.valid,
            )
            z_u2, z_v2 = model.encode_pair(src2, dst, mode)
            assert (z_u - z_u2).abs().max() < 1e-12
            assert (z_v - z_v2).abs().max() < 1e-12

    def test_determinism_bit_reproducible(self):
        a = build_encoder(SMALL, 23).eval()
        b = build_encoder(SMALL, 23).eval()
        src, dst = random_batch(SMALL, 2, 24, dtype=torch.float32), random_batch(
            SMALL, 2, 25, dtype=torch.float32
        )
        with torch.no_grad():
            za = a.encode_pair(src, dst, JOINT)
            zb = b.encode_pair(src, dst, JOINT)
        assert torch.equal(za[0], zb[0]) and torch.equal(za[1], zb[1])

    def test_full_symmetry_collapse_on_swap(self):
        # shared co-occurrence + no RSPE + joint mean pooling: swapping the
        # query pair permutes tokens only, so pooled embeddings are identical
        cfg = EncoderConfig(
            d_f_node=5, d_f_edge=4, d_c=6, d_t=8, max_seq_len=4,
            use_nfe=False, use_rspe=False, use_dual_cls=False,
        )
        model = build_encoder(cfg, 26).double().eval()
        src, dst = random_batch(cfg, 4, 27), random_batch(cfg, 4, 28)
        z1, _ = model.encode_pair(src, dst, JOINT)
        # swapping roles swaps the count channels of every token
        def swap_counts(b):
            return TokenBatch(
                node_vecs=b.node_vecs, edge_vecs=b.edge_vecs,
                time_deltas=b.time_deltas,
                within_indices=b.cross_indices, cross_indices=b.within_indices,
                within_counts=b.cross_counts, cross_counts=b.within_counts,
                valid=b.valid,
            )
        z2, _ = model.encode_pair(swap_counts(dst), swap_counts(src), JOINT)
        norm = z1.norm(dim=1)
        dist = 1 - (z1 * z2).sum(1) / (norm * z2.norm(dim=1))
        assert float(dist.abs().max()) < 1e-10


class TestCheckpoint:
    def test_round_trip_and_byte_identity(self, tmp_path):
        model = build_encoder(SMALL, 30)
        cfg_echo = {"kind": "pretrain", "encoder": SMALL.to_dict(), "seed": 7}
        p1, p2 = tmp_path / "a.dgnc", tmp_path / "b.dgnc"
        save_checkpoint(p1, model, cfg_echo, 7)
        save_checkpoint(p2, model, cfg_echo, 7)
        assert p1.read_bytes() == p2.read_bytes()

        tensors, config, seed = load_checkpoint(p1)
        assert seed == 7
        assert config["encoder"]["d_c"] == 6
        restored = DyGnRoleEncoder(EncoderConfig.from_dict(config["encoder"]))
        load_into_module(p1, restored)
        for (k1, v1), (k2, v2) in zip(
            model.state_dict().items(), restored.state_dict().items()
        ):
            assert k1 == k2 and torch.equal(v1, v2)

    def test_structure_mismatch_rejected(self, tmp_path):
        model = build_encoder(SMALL, 31)
        path = tmp_path / "c.dgnc"
        save_checkpoint(path, model, {"kind": "pretrain"}, 0)
        other_cfg = EncoderConfig(
            d_f_node=5, d_f_edge=4, d_c=6, d_t=8, max_seq_len=4,
            use_rspe=False, vocab_sizes=(3, 3, 4, 2),
        )
        with pytest.raises(DataIOError, match="state mismatch"):
            load_into_module(path, DyGnRoleEncoder(other_cfg))

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "x.dgnc"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(DataIOError):
            load_checkpoint(path)
