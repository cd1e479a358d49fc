"""Full model: vision encoder -> fusion -> projector -> toy LM, plus checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from . import io
from .errors import ConfigError, IngestionError
from .fusion import FusedFeatures, FusionStrategy, Projector, fuse
from .lm import LMConfig, ToyLM
from .nn import Module
from .tensor import Tensor
from .vision import FEATURE_KEYS, EncoderConfig, VisionEncoder

GROUPS = ("vision", "projector", "lm")


class DBFusionModel(Module):
    def __init__(self, enc_cfg: EncoderConfig | None = None, lm_cfg: LMConfig | None = None,
                 strategy="channel", features=FEATURE_KEYS, seed: int = 0):
        self.enc_cfg = enc_cfg or EncoderConfig()
        self.lm_cfg = lm_cfg or LMConfig()
        self.strategy = FusionStrategy.parse(strategy)
        self.feature_keys = [k for k in FEATURE_KEYS if k in features]
        if not self.feature_keys or len(self.feature_keys) != len(set(features)):
            raise ConfigError(f"bad feature set {list(features)}", "features")
        self.seed = seed
        self.stage = "init"
        rng = np.random.default_rng(seed)
        self.vision = VisionEncoder(self.enc_cfg, rng)
        self.projector = Projector(self.strategy, len(self.feature_keys), self.enc_cfg.D,
                                   self.lm_cfg.d_model, rng)
        self.lm = ToyLM(self.lm_cfg, rng)
        self.assign_names()
        # keep parameters f32-representable so a fresh checkpoint round-trips exactly
        for p in self.parameters():
            p.data = p.data.astype(np.float32).astype(np.float64)

    @property
    def n_vision_tokens(self) -> int:
        n = self.enc_cfg.n_patches
        return n * len(self.feature_keys) if self.strategy is FusionStrategy.TokenIntegration else n

    def group_parameters(self, group: str):
        return getattr(self, group).parameters()

    def fused(self, images: np.ndarray) -> FusedFeatures:
        bundle = self.vision.features(images, self.feature_keys)
        return fuse(bundle, self.strategy, self.feature_keys)

    def embed_images(self, images: np.ndarray) -> Tensor:
        return self.projector(self.fused(images))

    # -- checkpoints ------------------------------------------------------------
    def config_dict(self) -> dict:
        return {
            "encoder": dataclasses.asdict(self.enc_cfg),
            "lm": dataclasses.asdict(self.lm_cfg),
            "strategy": self.strategy.value,
            "features": list(self.feature_keys),
            "seed": self.seed,
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise IngestionError(f"checkpoint parameter mismatch: missing={missing[:3]} extra={extra[:3]}")
        for name, p in own.items():
            if p.data.shape != state[name].shape:
                raise IngestionError(f"parameter {name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def save(self, path, stage: str) -> None:
        io.save_container(path, self.state_dict(), {"config": self.config_dict(), "stage": stage})

    @classmethod
    def load(cls, path) -> tuple[DBFusionModel, str]:
        state, header = io.load_container(path)
        model = cls.from_config(header["config"])
        model.load_state_dict(state)
        model.stage = header.get("stage", "")
        return model, model.stage

    @classmethod
    def from_config(cls, cfg: dict) -> DBFusionModel:
        return cls(EncoderConfig(**cfg["encoder"]), LMConfig(**cfg["lm"]), cfg["strategy"],
                   cfg["features"], cfg.get("seed", 0))

    def group_hash(self, group: str) -> str:
        return params_hash(getattr(self, group).named_parameters())


def params_hash(named) -> str:
    h = hashlib.sha256()
    for name, p in named:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
