"""Byte-level tokenizer and a small decoder-only language model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, SequenceLengthError, TokenizerError
from .nn import Block, LayerNorm, Linear, Module, prefix_causal_mask
from .tensor import Parameter, Tensor

PAD, BOS, EOS = 0, 1, 2
OFFSET = 3
# printable ASCII covers every string the synthetic corpus can emit
CHARSET = frozenset(range(32, 127))


@dataclass
class LMConfig:
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    vocab: int = 512
    max_seq: int = 256

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}",
                              "d_model")
        if self.vocab < OFFSET + 256:
            raise ConfigError(f"vocab={self.vocab} cannot hold {OFFSET + 256} byte ids", "vocab")
        if self.layers < 1:
            raise ConfigError("need at least one layer", "layers")


@dataclass
class TokenSequence:
    ids: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.ids.shape != self.loss_mask.shape:
            raise ValueError("ids and loss_mask lengths differ")

    def __len__(self) -> int:
        return len(self.ids)


def _encode(text: str) -> list[int]:
    raw = text.encode("ascii", errors="strict") if text.isascii() else None
    if raw is None or any(b not in CHARSET for b in raw):
        bad = next(c for c in text if not c.isascii() or ord(c) not in CHARSET)
        raise TokenizerError(f"character {bad!r} outside the corpus charset")
    return [b + OFFSET for b in raw]


def tokenize(text: str) -> TokenSequence:
    """``[bos, bytes+3..., eos]``; loss applies to every token after bos."""
    ids = [BOS] + _encode(text) + [EOS]
    mask = [False] + [True] * (len(ids) - 1)
    return TokenSequence(np.array(ids), np.array(mask))


def tokenize_pair(prompt: str, answer: str) -> TokenSequence:
    """Instruction sample: loss only on the answer bytes and the closing eos."""
    q = _encode(prompt)
    a = _encode(answer)
    ids = [BOS] + q + a + [EOS]
    mask = [False] * (1 + len(q)) + [True] * (len(a) + 1)
    return TokenSequence(np.array(ids), np.array(mask))


def detokenize(seq: TokenSequence | np.ndarray) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else np.asarray(seq)
    return bytes(int(i) - OFFSET for i in ids if i >= OFFSET).decode("ascii")


def pad_batch(seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        mask[i, : len(s)] = s.loss_mask
    return ids, mask


class ToyLM(Module):
    def __init__(self, cfg: LMConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_embed = Parameter(rng.standard_normal((cfg.vocab, d)) * 0.02)
        self.pos_embed = Parameter(rng.standard_normal((cfg.max_seq, d)) * 0.02)
        self.blocks = [Block(d, cfg.heads, rng, n_layers=cfg.layers) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.vocab, rng, std=0.02)

    def hidden(self, vision_embeds: Tensor | None, ids: np.ndarray) -> Tensor:
        """Last-block hidden states (before the final norm) for ``[vision; text]``.

        ``ids`` is (B, S) or (S,); ``vision_embeds`` is (B, L, d), (L, d) or None.
        """
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
            if vision_embeds is not None:
                vision_embeds = T.reshape(vision_embeds, (1,) + vision_embeds.shape)
        B, S = ids.shape
        L = 0 if vision_embeds is None else vision_embeds.shape[-2]
        if L + S > self.cfg.max_seq:
            raise SequenceLengthError(f"sequence {L}+{S} exceeds max_seq {self.cfg.max_seq}")
        if vision_embeds is not None and vision_embeds.shape[-1] != self.cfg.d_model:
            raise ConfigError(f"vision width {vision_embeds.shape[-1]} != d_model", "d_model")
        x = T.embedding(self.tok_embed, ids)
        if vision_embeds is not None:
            x = T.concat([vision_embeds, x], axis=1)
        x = x + self.pos_embed[: L + S]
        mask = prefix_causal_mask(L, L + S)
        for blk in self.blocks:
            x = blk(x, mask)
        return x[0] if single else x

    def logits(self, h: Tensor) -> Tensor:
        return self.head(self.ln_f(h))

    def forward(self, vision_embeds: Tensor | None, text) -> Tensor:
        ids = text.ids if isinstance(text, TokenSequence) else text
        return self.logits(self.hidden(vision_embeds, ids))

    __call__ = forward


def caption_loss(logits: Tensor, text, n_vision: int | None = None) -> Tensor:
    """Mean next-token cross-entropy over masked text positions.

    ``logits`` covers ``[vision; text]``; token ``i`` of the text is predicted
    from position ``n_vision + i - 1``. ``text`` is a TokenSequence or an
    ``(ids, mask)`` pair of (B, S) arrays.
    """
    if isinstance(text, TokenSequence):
        ids, mask = text.ids[None], text.loss_mask[None]
    else:
        ids, mask = (np.asarray(a) for a in text)
    single = logits.ndim == 2
    if single:
        logits = T.reshape(logits, (1,) + logits.shape)
    S = ids.shape[1]
    L = logits.shape[1] - S if n_vision is None else n_vision
    weights = mask[:, 1:].astype(np.float64)
    if weights.sum() == 0:
        raise ValueError("loss mask selects no positions")
    pred = logits[:, L: L + S - 1]
    return T.cross_entropy_ids(pred, ids[:, 1:], weights)
