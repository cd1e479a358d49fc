"""Two-stage recipe: full-model caption pretraining, then frozen-vision instruction tuning."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, TrainingDivergedError
from .lm import TokenSequence, caption_loss, pad_batch, tokenize, tokenize_pair
from .model import GROUPS, DBFusionModel
from .nn import Adam
from .tensor import no_grad

log = logging.getLogger(__name__)


class Stage(enum.Enum):
    Pretrain = "pretrain"
    Finetune = "finetune"


STAGE_TAG = {Stage.Pretrain: "stage1", Stage.Finetune: "stage2"}
TRAINABLE = {Stage.Pretrain: frozenset(GROUPS), Stage.Finetune: frozenset({"projector", "lm"})}


@dataclass
class StageSpec:
    stage: Stage = Stage.Pretrain
    steps: int = 2000
    batch: int = 16
    lr_max: float = 3e-4
    lr_min: float = 0.0
    seed: int = 0
    trainable: frozenset = field(default=None)

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if self.trainable is None:
            self.trainable = TRAINABLE[self.stage]
        self.trainable = frozenset(self.trainable)

    def validate(self) -> None:
        if self.trainable != TRAINABLE[self.stage]:
            raise ValueError(f"{self.stage.value} trains {sorted(TRAINABLE[self.stage])}, "
                             f"not {sorted(self.trainable)}")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")

    @classmethod
    def pretrain(cls, **kw) -> StageSpec:
        return cls(Stage.Pretrain, **{"steps": 2000, "batch": 16, "lr_max": 3e-4, **kw})

    @classmethod
    def finetune(cls, **kw) -> StageSpec:
        return cls(Stage.Finetune, **{"steps": 1000, "batch": 16, "lr_max": 1e-4, **kw})


def cosine_lr(step: int, spec: StageSpec) -> float:
    if not 0 <= step < spec.steps:
        raise ValueError(f"step {step} outside [0, {spec.steps})")
    if spec.steps == 1:
        return spec.lr_max
    return spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (
        1.0 + math.cos(math.pi * step / (spec.steps - 1)))


@dataclass
class Samples:
    """Training examples: ``images`` holds unique images, ``image_index`` maps each sequence to one."""

    images: np.ndarray
    seqs: list[TokenSequence]
    image_index: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.seqs)


def caption_samples(records) -> Samples:
    records = list(records)
    return Samples(np.stack([r.image for r in records]).astype(np.float32),
                   [tokenize(r.caption.caption) for r in records],
                   np.arange(len(records)), [r.id for r in records])


def instruction_samples(records, limit: int | None = None) -> Samples:
    records = list(records)
    seqs, index, ids = [], [], []
    for i, r in enumerate(records):
        for j, q in enumerate(r.instructions):
            seqs.append(tokenize_pair(q.question + " ", q.answer))
            index.append(i)
            ids.append(f"{r.id}/{j}")
    if limit is not None:
        seqs, index, ids = seqs[:limit], index[:limit], ids[:limit]
    return Samples(np.stack([r.image for r in records]).astype(np.float32), seqs,
                   np.array(index), ids)


def batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step])
    return rng.choice(n, size=batch, replace=batch > n)


@dataclass
class LogEntry:
    step: int
    lr: float
    loss: float
    grad_norm: float


@dataclass
class StageResult:
    log: list[LogEntry]
    stage: str
    checkpoint: Path | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([e.loss for e in self.log])


def smoothed(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty(len(v))
    for i in range(len(v)):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def batch_loss(model: DBFusionModel, samples: Samples, idx: np.ndarray, train_vision: bool):
    images = samples.images[samples.image_index[idx]].astype(np.float64)
    ids, mask = pad_batch([samples.seqs[i] for i in idx])
    if train_vision:
        v = model.embed_images(images)
    else:
        with no_grad():
            fused = model.fused(images)
        v = model.projector(fused)
    h = model.lm.hidden(v, ids)
    logits = model.lm.logits(h[:, v.shape[1]:])
    return caption_loss(logits, (ids, mask), n_vision=0)


def _run_stage(model: DBFusionModel, samples: Samples, spec: StageSpec,
               progress_every: int = 0) -> StageResult:
    spec.validate()
    params = [p for g in GROUPS if g in spec.trainable for p in model.group_parameters(g)]
    opt = Adam(params, lr=spec.lr_max)
    entries = []
    for step in range(spec.steps):
        lr = cosine_lr(step, spec)
        idx = batch_indices(len(samples), spec.batch, spec.seed, step)
        batch_ids = [samples.ids[i] for i in idx] if samples.ids else list(idx)
        opt.zero_grad()
        try:
            loss = batch_loss(model, samples, idx, "vision" in spec.trainable)
            loss.backward()
        except NumericError as exc:
            raise TrainingDivergedError(str(exc), step, batch_ids, _max_grad_norm(params)) from exc
        with np.errstate(over="ignore", invalid="ignore"):
            gnorm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
        if not math.isfinite(loss.item()) or not math.isfinite(gnorm):
            raise TrainingDivergedError("non-finite loss or gradient", step, batch_ids,
                                        _max_grad_norm(params))
        opt.step(lr)
        entries.append(LogEntry(step, lr, loss.item(), gnorm))
        if progress_every and step % progress_every == 0:
            log.info("%s step %d lr %.3g loss %.4f", spec.stage.value, step, lr, loss.item())
    opt.zero_grad()
    model.stage = STAGE_TAG[spec.stage]
    return StageResult(entries, model.stage)


def _max_grad_norm(params) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        norms = [float(np.sqrt((p.grad ** 2).sum())) for p in params if p.grad is not None]
    return max(norms) if norms else float("nan")


def pretrain_stage(model: DBFusionModel, caption_data: Samples, spec: StageSpec,
                   out_dir=None, progress_every: int = 0) -> StageResult:
    if spec.stage is not Stage.Pretrain:
        raise ValueError("pretrain_stage needs a Pretrain spec")
    res = _run_stage(model, caption_data, spec, progress_every)
    if out_dir is not None:
        res.checkpoint = write_stage_outputs(out_dir, model, res)
    return res


def finetune_stage(model: DBFusionModel, instruction_data: Samples, spec: StageSpec,
                   out_dir=None, progress_every: int = 0) -> StageResult:
    if spec.stage is not Stage.Finetune:
        raise ValueError("finetune_stage needs a Finetune spec")
    if getattr(model, "stage", None) != "stage1":
        raise ValueError("finetune_stage expects a model loaded from a stage1 checkpoint")
    res = _run_stage(model, instruction_data, spec, progress_every)
    if out_dir is not None:
        res.checkpoint = write_stage_outputs(out_dir, model, res)
    return res


def write_stage_outputs(out_dir, model: DBFusionModel, res: StageResult) -> Path:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for e in res.log:
            w.writerow([e.step, repr(e.lr), repr(e.loss)])
    ckpt = out / "checkpoints" / f"{res.stage}.dbft"
    model.save(ckpt, res.stage)
    return ckpt
