"""Toy prompt-conditioned vision pathway.

Patch backbone (patchify, linear, one 3x3-windowed attention block) gives raw
low-level features; a linear projection plus LayerNorm turns them into the
depth feature V; a bidirectional encoder over ``[V, prompt tokens]`` gives one
prompt-conditioned feature per task.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, TokenizerError
from .nn import MASKED, Block, LayerNorm, Linear, Module
from .tensor import Parameter, Tensor


class PromptTask(enum.Enum):
    DetailedCaption = "caption"
    OCR = "ocr"
    DenseRegionCaption = "grounding"

    @property
    def key(self) -> str:
        return self.value

    @property
    def prompt_text(self) -> str:
        return PROMPTS[self]

    @classmethod
    def from_key(cls, key: str) -> PromptTask:
        for t in cls:
            if t.value == key:
                return t
        raise ValueError(f"unknown task {key!r}")


PROMPTS = {
    PromptTask.DetailedCaption: "describe what is shown in the image with a paragraph",
    PromptTask.OCR: "provide the text shown in the image",
    PromptTask.DenseRegionCaption: "locate the objects in the image, with their descriptions",
}

DEPTH = "depth"
FEATURE_KEYS = (DEPTH, "caption", "ocr", "grounding")


def _prompt_vocab() -> dict[str, int]:
    words: dict[str, int] = {}
    for task in PromptTask:
        for w in task.prompt_text.split():
            words.setdefault(w, len(words))
    return words


PROMPT_VOCAB = _prompt_vocab()


def tokenize_prompt(text: str, max_tokens: int) -> np.ndarray:
    words = text.split()
    if len(words) > max_tokens:
        raise TokenizerError(f"prompt has {len(words)} tokens, limit is {max_tokens}")
    try:
        return np.array([PROMPT_VOCAB[w] for w in words], dtype=np.int64)
    except KeyError as exc:
        raise TokenizerError(f"word {exc.args[0]!r} not in prompt vocabulary") from None


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch: int = 8
    d_backbone: int = 32
    D: int = 64
    encoder_layers: int = 2
    heads: int = 4
    N_t_max: int = 12

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}",
                              "patch")
        if self.D % self.heads:
            raise ConfigError(f"D={self.D} not divisible by heads={self.heads}", "heads")
        if self.d_backbone % self.heads:
            raise ConfigError(f"d_backbone={self.d_backbone} not divisible by heads={self.heads}",
                              "heads")
        longest = max(len(t.prompt_text.split()) for t in PromptTask)
        if self.N_t_max < longest:
            raise ConfigError(f"N_t_max={self.N_t_max} shorter than longest prompt ({longest})",
                              "N_t_max")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid ** 2


@dataclass
class FeatureBundle:
    """Depth feature plus prompt-conditioned breadth features, keyed by feature name.

    Tensors are (N_v, D) for a single image or (B, N_v, D) for a batch.
    """

    features: dict[str, Tensor] = field(default_factory=dict)

    @property
    def depth(self) -> Tensor | None:
        return self.features.get(DEPTH)

    @property
    def breadth(self) -> dict[PromptTask, Tensor]:
        return {PromptTask.from_key(k): v for k, v in self.features.items() if k != DEPTH}

    def keys(self) -> list[str]:
        return [k for k in FEATURE_KEYS if k in self.features]

    def select(self, keys) -> FeatureBundle:
        missing = [k for k in keys if k not in self.features]
        if missing:
            raise KeyError(f"bundle lacks features {missing}")
        return FeatureBundle({k: self.features[k] for k in FEATURE_KEYS if k in keys})

    def __getitem__(self, key: str) -> Tensor:
        return self.features[key]

    def __len__(self) -> int:
        return len(self.features)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, N, patch*patch*3), raster order over the patch grid."""
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} not divisible by patch {patch}", "patch")
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


def window_mask(grid: int, radius: int = 1) -> np.ndarray:
    r, c = np.divmod(np.arange(grid * grid), grid)
    near = (np.abs(r[:, None] - r[None, :]) <= radius) & (np.abs(c[:, None] - c[None, :]) <= radius)
    return np.where(near, 0.0, MASKED)


class PatchBackbone(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.embed = Linear(cfg.patch * cfg.patch * 3, cfg.d_backbone, rng)
        self.block = Block(cfg.d_backbone, cfg.heads, rng)
        self._mask = window_mask(cfg.grid)
        self.patch = cfg.patch

    def __call__(self, images: np.ndarray) -> Tensor:
        return self.block(self.embed(Tensor(patchify(images, self.patch))), self._mask)


class ProjectNorm(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.proj = Linear(cfg.d_backbone, cfg.D, rng)
        self.norm = LayerNorm(cfg.D)

    def __call__(self, raw: Tensor) -> Tensor:
        return self.norm(self.proj(raw))


class PromptEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        D = cfg.D
        self.cfg = cfg
        self.word_embed = Parameter(rng.standard_normal((len(PROMPT_VOCAB), D)))
        self.pos_v = Parameter(rng.standard_normal((cfg.n_patches, D)) * 0.02)
        self.pos_t = Parameter(rng.standard_normal((cfg.N_t_max, D)) * 0.02)
        self.blocks = [Block(D, cfg.heads, rng, n_layers=cfg.encoder_layers)
                       for _ in range(cfg.encoder_layers)]

    def __call__(self, v: Tensor, task: PromptTask) -> Tensor:
        ids = tokenize_prompt(task.prompt_text, self.cfg.N_t_max)
        B, N, D = v.shape
        t = T.embedding(self.word_embed, ids) + self.pos_t[: len(ids)]
        t = T.reshape(t, (1, len(ids), D))
        if B > 1:
            t = T.concat([t] * B, axis=0)
        x = T.concat([v + self.pos_v, t], axis=1)
        for blk in self.blocks:
            x = blk(x)
        return x[:, :N]


class VisionEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.backbone = PatchBackbone(cfg, rng)
        self.project = ProjectNorm(cfg, rng)
        self.encoder = PromptEncoder(cfg, rng)

    def _batch(self, image: np.ndarray) -> tuple[np.ndarray, bool]:
        image = np.asarray(image, dtype=np.float64)
        single = image.ndim == 3
        if single:
            image = image[None]
        n = self.cfg.image_size
        if image.shape[1:] != (n, n, 3):
            if image.shape[1] % self.cfg.patch or image.shape[2] % self.cfg.patch:
                raise ConfigError(f"image {image.shape[1:3]} not divisible by patch {self.cfg.patch}",
                                  "patch")
            raise ConfigError(f"image shape {image.shape[1:]} != ({n}, {n}, 3)", "image_size")
        return image, single

    def patch_embed(self, image: np.ndarray) -> Tensor:
        images, single = self._batch(image)
        out = self.backbone(images)
        return out[0] if single else out

    def project_norm(self, raw: Tensor) -> Tensor:
        if raw.shape[-1] != self.cfg.d_backbone:
            raise ConfigError(f"raw width {raw.shape[-1]} != d_backbone {self.cfg.d_backbone}",
                              "d_backbone")
        return self.project(raw)

    def encode_with_prompt(self, v: Tensor, task: PromptTask) -> Tensor:
        if v.ndim == 2:
            return self.encoder(T.reshape(v, (1,) + v.shape), task)[0]
        return self.encoder(v, task)

    def extract_bundle(self, image: np.ndarray, tasks) -> FeatureBundle:
        tasks = [PromptTask.from_key(t) if isinstance(t, str) else t for t in tasks]
        if not tasks:
            raise ValueError("extract_bundle needs at least one task")
        images, single = self._batch(image)
        v = self.project(self.backbone(images))
        feats = {DEPTH: v}
        for task in PromptTask:
            if task in tasks:
                feats[task.key] = self.encoder(v, task)
        if single:
            feats = {k: t[0] for k, t in feats.items()}
        return FeatureBundle(feats)

    def features(self, image: np.ndarray, keys) -> FeatureBundle:
        """Bundle restricted to ``keys`` (any of depth/caption/ocr/grounding)."""
        tasks = [PromptTask.from_key(k) for k in keys if k != DEPTH]
        if not tasks:
            images, single = self._batch(image)
            v = self.project(self.backbone(images))
            return FeatureBundle({DEPTH: v[0] if single else v})
        return self.extract_bundle(image, tasks).select(keys)
