"""Run configuration: nested dataclasses with JSON round-trip and fingerprints.

Every tunable named in the module contracts lives here so that checkpoints,
knowledge bases and reports can be stamped with the configuration that
produced them.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

SPATIAL_PROMPT_VERSION = "v1"
TEMPORAL_PROMPT_VERSION = "v1"


@dataclass
class EncoderConfig:
    backend: str = "stub"          # {stub, pretrained}
    weights_path: str = ""         # used by the pretrained backend only
    frames: int = 8                # T
    patches: int = 16              # P (must be a perfect square for grid patching)
    feature_dim: int = 32          # C
    seed: int = 17                 # salt for the stub's content-addressed embeddings
    visual_trainable: bool = False


@dataclass
class KnowledgeConfig:
    num_spatial: int = 6           # G
    num_temporal: int = 3          # L
    model_id: str = "gpt-3.5-turbo"
    max_retries: int = 2
    max_inflight: int = 4
    backoff_seconds: float = 0.5


@dataclass
class SkcConfig:
    num_prototypes: int = 9        # N
    heads: int = 1
    literal_unscaled: bool = False  # drop the 1/sqrt(C) logit scaling
    query_conditioning: str = "candidate_class"  # {candidate_class, none}


@dataclass
class TkcConfig:
    heads: int = 2
    pool: str = "mean"             # {mean, max}
    blocks: int = 1
    ff_expansion: int = 2


@dataclass
class MetricConfig:
    temporal: str = "otam"         # {otam, bi_mhm}
    distance: str = "cosine"       # {cosine, euclidean}
    alpha: float = 0.5
    otam_lambda: float = 0.1
    otam_hard: bool = False
    literal_alg1: bool = False     # drop the 1/N factor inside the set distance
    temperature: float = 1.0       # logits = -D / temperature


@dataclass
class TrainConfig:
    way: int = 5                   # M
    shot: int = 1                  # K
    train_queries: int = 5         # queries per training episode (total)
    eval_queries: int = 5          # queries per evaluation episode (total)
    episodes_per_epoch: int = 100
    epochs: int = 5
    lr: float = 1e-3
    seed: int = 0
    shot_agg: str = "mean_prototypes"  # {mean_prototypes, mean_scores}
    augment: bool = False
    eval_episodes: int = 2000
    workers: int = 1
    milestones: tuple[float, float] = (0.6, 0.8)  # lr decay points as run fractions
    lr_decay: float = 0.1


@dataclass
class Config:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    knowledge: KnowledgeConfig = field(default_factory=KnowledgeConfig)
    skc: SkcConfig = field(default_factory=SkcConfig)
    tkc: TkcConfig = field(default_factory=TkcConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "Config":
        enc, kn, skc, tkc, met, tr = (self.encoder, self.knowledge, self.skc,
                                      self.tkc, self.metric, self.train)
        if enc.backend not in ("stub", "pretrained"):
            raise ConfigError(f"unknown encoder backend {enc.backend!r}")
        if enc.frames < 1 or enc.patches < 1 or enc.feature_dim < 1:
            raise ConfigError("frames, patches and feature_dim must be positive")
        if kn.num_spatial < 1 or kn.num_temporal < 1:
            raise ConfigError("attribute counts must be >= 1")
        if skc.num_prototypes < 1:
            raise ConfigError("need at least one object prototype")
        if skc.query_conditioning not in ("candidate_class", "none"):
            raise ConfigError(f"unknown query conditioning {skc.query_conditioning!r}")
        if tkc.pool not in ("mean", "max"):
            raise ConfigError(f"unknown pooling {tkc.pool!r}")
        if enc.feature_dim % max(tkc.heads, 1) != 0:
            raise ConfigError("feature_dim must be divisible by tkc.heads")
        if met.temporal not in ("otam", "bi_mhm"):
            raise ConfigError(f"unknown temporal metric {met.temporal!r}")
        if met.distance not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown distance {met.distance!r}")
        if met.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not met.otam_hard and met.otam_lambda <= 0:
            raise ConfigError("otam_lambda must be > 0 in smooth mode")
        if met.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if tr.way < 2 or tr.shot < 1:
            raise ConfigError("need way >= 2 and shot >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "Config":
        cfg = cls()
        for section, payload in raw.items():
            if not hasattr(cfg, section):
                raise ConfigError(f"unknown config section {section!r}")
            sub = getattr(cfg, section)
            known = {f.name for f in dataclasses.fields(sub)}
            for key, value in payload.items():
                if key not in known:
                    raise ConfigError(f"unknown config key {section}.{key}")
                if key == "milestones":
                    value = tuple(value)
                setattr(sub, key, value)
        return cfg.validate()

    def fingerprint(self) -> str:
        return stable_hash(self.to_dict())

    def knowledge_fingerprint(self) -> dict:
        """The subset a knowledge base must agree on to be reusable."""
        return {
            "num_spatial": self.knowledge.num_spatial,
            "num_temporal": self.knowledge.num_temporal,
            "model_id": self.knowledge.model_id,
            "spatial_prompt_version": SPATIAL_PROMPT_VERSION,
            "temporal_prompt_version": TEMPORAL_PROMPT_VERSION,
        }


def stable_hash(obj: Any) -> str:
    """Hex digest of a JSON-serializable object, stable across runs."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.blake2b(payload.encode("utf-8"), digest_size=16).hexdigest()


def load_config(path) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return Config.from_dict(json.load(fh))


def save_config(cfg: Config, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
