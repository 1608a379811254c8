"""Flat run configuration with JSON loading and key=value overrides.

Defaults follow the reference hyperparameters (d_c=50, d_t=100, 2 layers,
2 heads, dropout 0.1, k=10, tau=0.07, AdamW with lr 1e-4 and weight decay
0.01, batch size 256). Unknown keys are rejected so typos fail fast.
"""

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from dygnrole.encoder import EncoderConfig
from dygnrole.exceptions import ConfigError
from dygnrole.finetune import FinetuneProtocol
from dygnrole.synth import SynthConfig


@dataclass
class RunConfig:
    # encoder architecture
    d_c: int = 50
    d_t: int = 100
    layers: int = 2
    heads: int = 2
    dropout: float = 0.1
    max_seq_len: int = 10
    # count vocabulary threshold
    n_min: int = 10_000
    # optimization
    tau: float = 0.07
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 256
    pretrain_max_epochs: int = 100
    pretrain_patience: int = 5
    # finetuning protocol
    train_label_budget: int = 10_000
    val_label_budget: int = 1_500
    grace_epochs: int = 5
    patience: int = 5
    finetune_max_epochs: int = 100
    # chronological splits
    train_end: float = 0.70
    val_end: float = 0.85
    # ablation switches
    use_nfe: bool = True
    use_rspe: bool = True
    use_dual_cls: bool = True
    use_pretrain: bool = True
    # synthetic generator
    synth_nodes: int = 200
    synth_edges: int = 5_000
    synth_classes: int = 4
    synth_beta: float = 0.9
    synth_d_f_node: int = 16
    synth_d_f_edge: int = 16
    # probes
    probe_samples: int = 1_000
    # master seed for every RNG stream
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] | None = None) -> "RunConfig":
        values = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                values = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})")
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
        config = cls._from_values(values, source=str(path))
        if overrides:
            config = config.with_overrides(overrides)
        return config

    @classmethod
    def _from_values(cls, values: dict, source: str = "config") -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {sorted(unknown)}")
        return cls(**values)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply key=value strings, coercing to each field's declared type."""
        fields = {f.name: f for f in dataclasses.fields(self)}
        values = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(raw.strip(), fields[key].type, key)
        return RunConfig(**values)

    # ---- derived views ----------------------------------------------------

    def encoder_config(
        self,
        d_f_node: int,
        d_f_edge: int,
        vocab_sizes: tuple[int, int, int, int] = (2, 2, 2, 2),
    ) -> EncoderConfig:
        return EncoderConfig(
            d_f_node=d_f_node,
            d_f_edge=d_f_edge,
            d_c=self.d_c,
            d_t=self.d_t,
            layers=self.layers,
            heads=self.heads,
            dropout=self.dropout,
            max_seq_len=self.max_seq_len,
            use_nfe=self.use_nfe,
            use_rspe=self.use_rspe,
            use_dual_cls=self.use_dual_cls,
            vocab_sizes=vocab_sizes,
        )

    def finetune_protocol(self) -> FinetuneProtocol:
        return FinetuneProtocol(
            train_label_budget=self.train_label_budget,
            val_budget=self.val_label_budget,
            grace_epochs=self.grace_epochs,
            patience=self.patience,
            max_epochs=self.finetune_max_epochs,
            batch_size=self.batch_size,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_nodes=self.synth_nodes,
            num_edges=self.synth_edges,
            num_classes=self.synth_classes,
            seed=self.seed,
            role_bias=self.synth_beta,
            d_f_node=self.synth_d_f_node,
            d_f_edge=self.synth_d_f_edge,
        )

    def apply_ablation(self, ablation: str) -> "RunConfig":
        """Return a copy with one component switched off (or 'none')."""
        mapping = {
            "nfe": {"use_nfe": False},
            "rspe": {"use_rspe": False},
            "cls": {"use_dual_cls": False},
            "pretrain": {"use_pretrain": False},
            "none": {},
        }
        if ablation not in mapping:
            raise ConfigError(
                f"unknown ablation {ablation!r}; expected one of {sorted(mapping)}"
            )
        return dataclasses.replace(self, **mapping[ablation])


def _coerce(raw: str, annotation, key: str):
    kind = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}")
