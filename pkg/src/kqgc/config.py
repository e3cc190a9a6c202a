"""Flat ``key = value`` pipeline configuration with two presets."""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict
from pathlib import Path

from .synthgen import SyntheticSpec
from .transe import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "run"

    # synthetic benchmark
    num_users: int = 500
    num_items: int = 600
    num_attributes: int = 100
    num_clusters: int = 5
    intra_cluster_purchase_prob: float = 0.03
    cross_cluster_purchase_prob: float = 0.01
    attr_per_item: int = 2
    attr_cross_prob: float = 0.1
    noise_std: float = 2.0
    baseline_dim: int = 8
    test_fraction: float = 0.2

    # TransE
    dim: int = 16
    kge_epochs: int = 500
    kge_batch_size: int = 256
    kge_learning_rate: float = 0.01
    kge_margin: float = 1.0
    kge_neg_ratio: int = 1
    kge_checkpoint_every: int = 100
    normalize_entities: bool = True

    # convolution
    kqgc_input_epoch: int = 0  # 0 = final TransE table
    layers: int = 1
    aggregator: str = "mean"
    attention_normalization: str = "ratio"
    leaky_slope: float = 0.01
    kqgc_epochs: int = 100
    kqgc_batch_size: int = 256
    kqgc_learning_rate: float = 0.001
    kqgc_margin: float = 1.0
    kqgc_neg_ratio: int = 3
    fanout: int = 10

    # evaluation
    clf_l2: float = 1e-4
    clf_iterations: int = 500
    clf_learning_rate: float = 0.1
    figures: bool = True

    # optional path overrides (default: inside ``out``)
    kg_path: str = ""
    labels_path: str = ""
    baseline_path: str = ""

    def synthetic_spec(self) -> SyntheticSpec:
        names = set(SyntheticSpec.field_names())
        return SyntheticSpec(**{k: v for k, v in asdict(self).items() if k in names})

    def kge_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.kge_epochs, batch_size=self.kge_batch_size, learning_rate=self.kge_learning_rate,
            margin=self.kge_margin, neg_ratio=self.kge_neg_ratio, dim=self.dim, seed=self.seed,
            checkpoint_every=self.kge_checkpoint_every, normalize_entities=self.normalize_entities,
        )

    def kqgc_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.kqgc_epochs, batch_size=self.kqgc_batch_size, learning_rate=self.kqgc_learning_rate,
            margin=self.kqgc_margin, neg_ratio=self.kqgc_neg_ratio, dim=self.dim, seed=self.seed,
            fanout=self.fanout,
        )

    def validate(self) -> None:
        self.synthetic_spec().validate()
        try:
            self.kge_config()
            self.kqgc_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.layers < 1:
            raise ConfigError("layers: must be >= 1")
        if self.aggregator not in ("mean", "attn_dot", "attn_learned", "attn1", "attn2"):
            raise ConfigError(f"aggregator: unknown value {self.aggregator!r}")
        if self.attention_normalization not in ("ratio", "softmax"):
            raise ConfigError(f"attention_normalization: unknown value {self.attention_normalization!r}")

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def path(self, name: str) -> Path:
        override = getattr(self, f"{name}_path", "")
        if override:
            return Path(override)
        return self.out_dir / {"kg": "kg.tsv", "labels": "labels.tsv", "baseline": "baseline.tsv"}[name]

    def as_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, dict] = {
    # training hyperparameters as published; the synthetic graph is larger
    # than desk scale but bounded so the dense purchase draw fits in memory
    "paper": dict(
        num_users=2000, num_items=5000, num_attributes=200,
        dim=100, kge_epochs=10000, kge_batch_size=10000, kge_learning_rate=0.001, kge_margin=1.0,
        kge_neg_ratio=1, kge_checkpoint_every=1000, kqgc_input_epoch=5000,
        layers=1, kqgc_epochs=10000, kqgc_batch_size=10000, kqgc_learning_rate=0.001,
        kqgc_margin=1.0, kqgc_neg_ratio=3, fanout=10,
    ),
    "desk": {},
}


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(PipelineConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, val, _TYPES[key])
    return out


def load_config(path=None, preset: str = "desk", overrides: dict | None = None) -> PipelineConfig:
    """Preset values, then the file, then explicit overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}")
    values = dict(PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _TYPES:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _coerce(k, v, _TYPES[k]) if isinstance(v, str) else v
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg


def format_config(cfg: PipelineConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in cfg.as_dict().items()) + "\n"
