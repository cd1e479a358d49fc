"""Depth-breadth fusion strategies and the MLP projector into the LM space."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import MLP, Module
from .tensor import Tensor
from .vision import FEATURE_KEYS, FeatureBundle


class FusionStrategy(enum.Enum):
    TokenIntegration = "token"
    AveragePooling = "pool"
    ChannelIntegration = "channel"

    @classmethod
    def parse(cls, name) -> FusionStrategy:
        if isinstance(name, cls):
            return name
        for s in cls:
            if name in (s.value, s.name):
                return s
        raise ConfigError(f"unknown fusion strategy {name!r} (expected token|pool|channel)",
                          "strategy")


@dataclass
class FusedFeatures:
    tokens: Tensor
    strategy: FusionStrategy
    k: int

    @property
    def L(self) -> int:
        return self.tokens.shape[-2]

    @property
    def C(self) -> int:
        return self.tokens.shape[-1]


def fused_shape(strategy: FusionStrategy, k: int, n_v: int, d: int) -> tuple[int, int]:
    if strategy is FusionStrategy.TokenIntegration:
        return k * n_v, d
    if strategy is FusionStrategy.AveragePooling:
        return n_v, d
    return n_v, k * d


def fuse(bundle: FeatureBundle, strategy, order=None) -> FusedFeatures:
    strategy = FusionStrategy.parse(strategy)
    present = bundle.keys()
    order = list(present if order is None else order)
    if sorted(order) != sorted(present) or len(set(order)) != len(order):
        raise ValueError(f"order {order} must list each bundle feature {present} exactly once")
    feats = [bundle[k] for k in order]
    if strategy is FusionStrategy.TokenIntegration:
        out = T.concat(feats, axis=-2)
    elif strategy is FusionStrategy.ChannelIntegration:
        out = T.concat(feats, axis=-1)
    else:
        out = feats[0]
        for f in feats[1:]:
            out = out + f
        if len(feats) > 1:
            out = out * (1.0 / len(feats))
    return FusedFeatures(out, strategy, len(feats))


class Projector(Module):
    """Two-layer MLP ``C -> 2C -> d_model`` applied row-wise."""

    def __init__(self, strategy, k: int, D: int, d_model: int, rng: np.random.Generator):
        self.strategy = FusionStrategy.parse(strategy)
        self.k = k
        self.d_in = fused_shape(self.strategy, k, 1, D)[1]
        self.mlp = MLP(self.d_in, 2 * self.d_in, d_model, rng)

    def __call__(self, fused: FusedFeatures) -> Tensor:
        if fused.strategy is not self.strategy or fused.C != self.d_in:
            raise ConfigError(
                f"projector built for {self.strategy.value} width {self.d_in}, "
                f"got {fused.strategy.value} width {fused.C}", "strategy")
        return self.mlp(fused.tokens)


def project_to_lm(projector: Projector, fused: FusedFeatures) -> Tensor:
    return projector(fused)


CANONICAL_ORDER = FEATURE_KEYS
