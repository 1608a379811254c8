"""Role-disentangled transformer encoder.

Five per-token channels (node, edge, time, within-frequency,
cross-frequency) are projected to a shared width d_c and concatenated into
D = 5*d_c. Role-semantic positional encodings mark {source, destination} x
{query, neighbor}; role-specific CLS tokens are prepended and their final
hidden states read out as z_u and z_v. Sequences are processed
independently during pretraining and concatenated during finetuning.

Ablation switches:
  use_nfe=False   replaces the four role-specific count tables with a
                  shared order-invariant co-occurrence MLP,
  use_rspe=False  drops the role positional encodings,
  use_dual_cls=False  replaces CLS readout with masked mean pooling.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from dygnrole.exceptions import ConfigError
from dygnrole.features import DESTINATION, SOURCE, TokenFeatureBundle
from dygnrole.utils import seed_torch

INDEPENDENT = "independent"
JOINT = "joint"


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters. Defaults follow the reference setup."""

    d_f_node: int
    d_f_edge: int
    d_c: int = 50
    d_t: int = 100
    layers: int = 2
    heads: int = 2
    dropout: float = 0.1
    max_seq_len: int = 10  # k: query node + (k-1) neighbors per role
    use_nfe: bool = True
    use_rspe: bool = True
    use_dual_cls: bool = True
    vocab_sizes: tuple[int, int, int, int] = (2, 2, 2, 2)

    @property
    def token_dim(self) -> int:
        """Concatenated channel width D = 5 * d_c."""
        return 5 * self.d_c

    def __post_init__(self):
        for name in ("d_f_node", "d_f_edge", "d_c", "d_t", "layers", "heads",
                     "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be >= 2 (query + neighbors)")
        if self.token_dim % self.heads != 0:
            raise ConfigError(
                f"token dim {self.token_dim} not divisible by {self.heads} heads"
            )
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0,1)")
        if len(self.vocab_sizes) != 4 or any(s < 1 for s in self.vocab_sizes):
            raise ConfigError("vocab_sizes must be four positive integers")

    def to_dict(self) -> dict:
        return {
            "d_f_node": self.d_f_node,
            "d_f_edge": self.d_f_edge,
            "d_c": self.d_c,
            "d_t": self.d_t,
            "layers": self.layers,
            "heads": self.heads,
            "dropout": self.dropout,
            "max_seq_len": self.max_seq_len,
            "use_nfe": self.use_nfe,
            "use_rspe": self.use_rspe,
            "use_dual_cls": self.use_dual_cls,
            "vocab_sizes": list(self.vocab_sizes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["vocab_sizes"] = tuple(d.get("vocab_sizes", (2, 2, 2, 2)))
        return cls(**d)


@dataclass
class TokenBatch:
    """Stacked token features for a batch of same-role sequences."""

    node_vecs: torch.Tensor      # [B, k, d_f_node]
    edge_vecs: torch.Tensor      # [B, k, d_f_edge]
    time_deltas: torch.Tensor    # [B, k]
    within_indices: torch.Tensor  # [B, k] long
    cross_indices: torch.Tensor   # [B, k] long
    within_counts: torch.Tensor   # [B, k] raw counts as floats
    cross_counts: torch.Tensor    # [B, k]
    valid: torch.Tensor           # [B, k] bool

    @classmethod
    def from_bundles(
        cls, bundles: list[TokenFeatureBundle], dtype: torch.dtype = torch.float32
    ) -> "TokenBatch":
        return cls(
            node_vecs=torch.tensor(
                np.stack([b.node_vecs for b in bundles]), dtype=dtype
            ),
            edge_vecs=torch.tensor(
                np.stack([b.edge_vecs for b in bundles]), dtype=dtype
            ),
            time_deltas=torch.tensor(
                np.stack([b.time_deltas for b in bundles]), dtype=dtype
            ),
            within_indices=torch.tensor(
                np.stack([b.within_indices for b in bundles]), dtype=torch.long
            ),
            cross_indices=torch.tensor(
                np.stack([b.cross_indices for b in bundles]), dtype=torch.long
            ),
            within_counts=torch.tensor(
                np.stack([b.within_counts for b in bundles]), dtype=dtype
            ),
            cross_counts=torch.tensor(
                np.stack([b.cross_counts for b in bundles]), dtype=dtype
            ),
            valid=torch.tensor(np.stack([b.valid for b in bundles]), dtype=torch.bool),
        )

    def __len__(self) -> int:
        return self.node_vecs.shape[0]

    def slice(self, idx) -> "TokenBatch":
        return TokenBatch(
            node_vecs=self.node_vecs[idx],
            edge_vecs=self.edge_vecs[idx],
            time_deltas=self.time_deltas[idx],
            within_indices=self.within_indices[idx],
            cross_indices=self.cross_indices[idx],
            within_counts=self.within_counts[idx],
            cross_counts=self.cross_counts[idx],
            valid=self.valid[idx],
        )

    def to(self, dtype: torch.dtype) -> "TokenBatch":
        return TokenBatch(
            node_vecs=self.node_vecs.to(dtype),
            edge_vecs=self.edge_vecs.to(dtype),
            time_deltas=self.time_deltas.to(dtype),
            within_indices=self.within_indices,
            cross_indices=self.cross_indices,
            within_counts=self.within_counts.to(dtype),
            cross_counts=self.cross_counts.to(dtype),
            valid=self.valid,
        )


class TimeEncoder(nn.Module):
    """Learnable Fourier features of time deltas: cos(w * dt + b).

    Frequencies start at inverse log scales 10^(-9j/(d_t-1)) so the bank
    spans unit to ~1e-9 cycles per time unit; both w and b are trainable.
    """

    def __init__(self, d_t: int):
        super().__init__()
        if d_t == 1:
            init = torch.ones(1)
        else:
            j = torch.arange(d_t, dtype=torch.float32)
            init = torch.pow(10.0, -9.0 * j / (d_t - 1))
        self.w = nn.Parameter(init)
        self.b = nn.Parameter(torch.zeros(d_t))

    def forward(self, deltas: torch.Tensor) -> torch.Tensor:
        # deltas [...,] -> [..., d_t]
        return torch.cos(deltas.unsqueeze(-1) * self.w + self.b)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))  # [b,h,t,hd]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        # padding positions are removed from the candidate keys of every query
        scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(ctx)


class TransformerLayer(nn.Module):
    """Pre-LN block: attention and FFN sublayers with residual connections.

    Dropout sits after the attention output, after the GELU, and after the
    second FFN linear; attention probabilities are not dropped.
    """

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.drop_attn = nn.Dropout(dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.linear1 = nn.Linear(dim, 4 * dim)
        self.drop_act = nn.Dropout(dropout)
        self.linear2 = nn.Linear(4 * dim, dim)
        self.drop_ffn = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        x = x + self.drop_attn(self.attn(self.norm1(x), key_valid))
        x = x + self.drop_ffn(self.linear2(self.drop_act(F.gelu(self.linear1(self.norm2(x))))))
        return x


def _masked_mean(h: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    w = valid.to(h.dtype).unsqueeze(-1)
    return (h * w).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)


class DyGnRoleEncoder(nn.Module):
    """The full backbone producing the pair representation (z_u, z_v)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d_c, dim = config.d_c, config.token_dim

        self.time_encoder = TimeEncoder(config.d_t)
        self.proj_node = nn.Linear(config.d_f_node, d_c)
        self.proj_edge = nn.Linear(config.d_f_edge, d_c)
        self.proj_time = nn.Linear(config.d_t, d_c)

        if config.use_nfe:
            sw, sc, dw, dc_ = config.vocab_sizes
            self.emb_src_within = nn.Embedding(sw, d_c)
            self.emb_src_cross = nn.Embedding(sc, d_c)
            self.emb_dst_within = nn.Embedding(dw, d_c)
            self.emb_dst_cross = nn.Embedding(dc_, d_c)
            self.proj_within = nn.Linear(d_c, d_c)
            self.proj_cross = nn.Linear(d_c, d_c)
            for emb in (self.emb_src_within, self.emb_src_cross,
                        self.emb_dst_within, self.emb_dst_cross):
                nn.init.normal_(emb.weight, std=0.02)
        else:
            # shared two-layer MLP applied to each raw count and summed, so a
            # token's feature is invariant to which role's sequence holds it
            self.cooc_mlp = nn.Sequential(
                nn.Linear(1, 2 * d_c), nn.ReLU(), nn.Linear(2 * d_c, 2 * d_c)
            )

        if config.use_rspe:
            self.rspe_src_node = nn.Parameter(torch.empty(dim))
            self.rspe_src_neighbor = nn.Parameter(torch.empty(dim))
            self.rspe_dst_node = nn.Parameter(torch.empty(dim))
            self.rspe_dst_neighbor = nn.Parameter(torch.empty(dim))
            for p in (self.rspe_src_node, self.rspe_src_neighbor,
                      self.rspe_dst_node, self.rspe_dst_neighbor):
                nn.init.normal_(p, std=0.02)

        if config.use_dual_cls:
            self.cls_src = nn.Parameter(torch.empty(dim))
            self.cls_dst = nn.Parameter(torch.empty(dim))
            nn.init.normal_(self.cls_src, std=0.02)
            nn.init.normal_(self.cls_dst, std=0.02)

        self.layers = nn.ModuleList(
            TransformerLayer(dim, config.heads, config.dropout)
            for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(dim)

    # ---- channel fusion -------------------------------------------------

    def frequency_features(self, batch: TokenBatch, role: str) -> torch.Tensor:
        """The 2*d_c frequency slice of the fused token representation.

        This is the probe tap point for structural asymmetry analysis: the
        post-table, post-projection count channels before any transformer
        mixing.
        """
        cfg = self.config
        if cfg.use_nfe:
            if role == SOURCE:
                emb_w, emb_c = self.emb_src_within, self.emb_src_cross
            elif role == DESTINATION:
                emb_w, emb_c = self.emb_dst_within, self.emb_dst_cross
            else:
                raise ConfigError(f"unknown role {role!r}")
            for idx, emb in ((batch.within_indices, emb_w), (batch.cross_indices, emb_c)):
                if int(idx.max()) >= emb.num_embeddings:
                    raise ConfigError(
                        f"count index {int(idx.max())} out of vocabulary range "
                        f"{emb.num_embeddings}; map rare counts to UNK upstream"
                    )
            within = self.proj_within(emb_w(batch.within_indices))
            cross = self.proj_cross(emb_c(batch.cross_indices))
            return torch.cat([within, cross], dim=-1)
        if role not in (SOURCE, DESTINATION):
            raise ConfigError(f"unknown role {role!r}")
        own = self.cooc_mlp(batch.within_counts.unsqueeze(-1))
        other = self.cooc_mlp(batch.cross_counts.unsqueeze(-1))
        return own + other

    def fuse_tokens(self, batch: TokenBatch, role: str) -> torch.Tensor:
        """Project per-channel features and concatenate into [B, k, 5*d_c]."""
        ch_node = self.proj_node(batch.node_vecs)
        ch_edge = self.proj_edge(batch.edge_vecs)
        ch_time = self.proj_time(self.time_encoder(batch.time_deltas))
        ch_freq = self.frequency_features(batch, role)
        return torch.cat([ch_node, ch_edge, ch_time, ch_freq], dim=-1)

    def apply_rspe(self, tokens: torch.Tensor, role: str) -> torch.Tensor:
        if not self.config.use_rspe:
            return tokens
        if role == SOURCE:
            node_e, nbr_e = self.rspe_src_node, self.rspe_src_neighbor
        elif role == DESTINATION:
            node_e, nbr_e = self.rspe_dst_node, self.rspe_dst_neighbor
        else:
            raise ConfigError(f"unknown role {role!r}")
        out = tokens.clone()
        out[:, 0] = out[:, 0] + node_e
        out[:, 1:] = out[:, 1:] + nbr_e
        return out

    # ---- transformer ----------------------------------------------------

    def transformer_forward(self, h: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            h = layer(h, key_valid)
        return self.final_norm(h)

    # ---- pair encoding --------------------------------------------------

    def encode_pair(
        self, src_batch: TokenBatch, dst_batch: TokenBatch, mode: str
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a batch of query pairs into (z_u, z_v), each [B, D].

        independent mode runs the stack once per role sequence (pretraining);
        joint mode concatenates both sequences for cross-role attention
        (finetuning and probing).
        """
        if mode not in (INDEPENDENT, JOINT):
            raise ConfigError(f"mode must be '{INDEPENDENT}' or '{JOINT}', got {mode!r}")
        cfg = self.config
        src_tokens = self.apply_rspe(self.fuse_tokens(src_batch, SOURCE), SOURCE)
        dst_tokens = self.apply_rspe(self.fuse_tokens(dst_batch, DESTINATION), DESTINATION)
        b, k, dim = src_tokens.shape
        src_valid, dst_valid = src_batch.valid, dst_batch.valid
        one = torch.ones(b, 1, dtype=torch.bool, device=src_tokens.device)

        if cfg.use_dual_cls:
            cls_s = self.cls_src.to(src_tokens.dtype).expand(b, 1, dim)
            cls_d = self.cls_dst.to(dst_tokens.dtype).expand(b, 1, dim)
            if mode == INDEPENDENT:
                h_u = self.transformer_forward(
                    torch.cat([cls_s, src_tokens], dim=1),
                    torch.cat([one, src_valid], dim=1),
                )
                h_v = self.transformer_forward(
                    torch.cat([cls_d, dst_tokens], dim=1),
                    torch.cat([one, dst_valid], dim=1),
                )
                return h_u[:, 0], h_v[:, 0]
            h = self.transformer_forward(
                torch.cat([cls_s, src_tokens, cls_d, dst_tokens], dim=1),
                torch.cat([one, src_valid, one, dst_valid], dim=1),
            )
            return h[:, 0], h[:, k + 1]

        # mean-pool ablation: no CLS tokens anywhere
        if mode == INDEPENDENT:
            h_u = self.transformer_forward(src_tokens, src_valid)
            h_v = self.transformer_forward(dst_tokens, dst_valid)
            return _masked_mean(h_u, src_valid), _masked_mean(h_v, dst_valid)
        valid = torch.cat([src_valid, dst_valid], dim=1)
        h = self.transformer_forward(torch.cat([src_tokens, dst_tokens], dim=1), valid)
        z = _masked_mean(h, valid)
        return z, z


def build_encoder(config: EncoderConfig, seed: int) -> DyGnRoleEncoder:
    """Construct an encoder with deterministic parameter initialization."""
    seed_torch(seed)
    return DyGnRoleEncoder(config)
