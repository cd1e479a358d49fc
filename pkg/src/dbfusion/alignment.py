"""Cross-modal alignment loss with a trainable vision->text projection, and an ablation harness."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from . import tensor as T
from .errors import NumericError
from .fusion import FusionStrategy, fuse
from .lm import tokenize
from .nn import Adam
from .tensor import Parameter, Tensor, no_grad
from .vision import FEATURE_KEYS


@dataclass
class FeaturePairSet:
    vision: list[np.ndarray]  # each (r_n, d')
    text: list[np.ndarray]  # each (s_n, d)
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vision = [np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in self.vision]
        self.text = [np.atleast_2d(np.asarray(t, dtype=np.float64)) for t in self.text]
        if len(self.vision) != len(self.text) or not self.vision:
            raise ValueError(f"need equal, nonzero vision/text counts "
                             f"({len(self.vision)} vs {len(self.text)})")
        if len({v.shape[1] for v in self.vision}) != 1 or len({t.shape[1] for t in self.text}) != 1:
            raise ValueError("vision and text widths must be constant across records")

    def __len__(self) -> int:
        return len(self.vision)

    @property
    def d_vision(self) -> int:
        return self.vision[0].shape[1]

    @property
    def d_text(self) -> int:
        return self.text[0].shape[1]

    def permuted(self, order) -> FeaturePairSet:
        return FeaturePairSet([self.vision[i] for i in order], [self.text[i] for i in order],
                              dict(self.labels))


def init_projection(d_vision: int, d_text: int, seed: int) -> Parameter:
    rng = np.random.default_rng(seed)
    return Parameter(rng.standard_normal((d_vision, d_text)) * d_vision ** -0.5, name="P")


def pool_normalize_stack(pairs: FeaturePairSet, p: Tensor) -> tuple[Tensor, Tensor]:
    """Project each vision record by ``p``, mean-pool tokens, L2-normalize, stack in record order."""
    if p.shape != (pairs.d_vision, pairs.d_text):
        raise ValueError(f"projection shape {p.shape} != ({pairs.d_vision}, {pairs.d_text})")
    v_rows = [T.reshape(T.mean_pool(T.matmul(Tensor(v), p), 0), (1, -1)) for v in pairs.vision]
    t_rows = np.stack([t.mean(axis=0) for t in pairs.text])
    return T.l2_normalize(T.concat(v_rows, axis=0)), T.l2_normalize(Tensor(t_rows))


def _pooled_vision(pairs: FeaturePairSet) -> np.ndarray:
    return np.stack([v.mean(axis=0) for v in pairs.vision])


def alignment_loss(f_v: Tensor, f_t: Tensor) -> Tensor:
    """Row-wise softmax cross-entropy of ``f_v @ f_t.T`` against the identity."""
    if f_v.shape != f_t.shape or f_v.ndim != 2:
        raise ValueError(f"F_v {f_v.shape} and F_t {f_t.shape} must both be N x d")
    sim = T.matmul(f_v, T.swapaxes(as_const(f_t), 0, 1))
    return T.softmax_cross_entropy_rows(sim, np.eye(f_v.shape[0]))


def as_const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class AlignmentReport:
    label: str
    loss_curve: list[tuple[int, float]]
    final_loss: float
    N: int
    d_vision: int
    d_text: int
    seed: int

    @property
    def initial_loss(self) -> float:
        return self.loss_curve[0][1]


def optimize_projection(pairs: FeaturePairSet, steps: int = 500, lr: float = 1e-3, seed: int = 0,
                        label: str = "") -> AlignmentReport:
    """Adam on the projection only; features stay frozen. One curve entry per step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    p = init_projection(pairs.d_vision, pairs.d_text, seed)
    # mean pooling commutes with the linear projection, so pool once up front
    pooled = Tensor(_pooled_vision(pairs))
    f_t = T.l2_normalize(Tensor(np.stack([t.mean(axis=0) for t in pairs.text])))
    opt = Adam([p], lr=lr)
    curve = []
    for step in range(steps):
        opt.zero_grad()
        try:
            loss = alignment_loss(T.l2_normalize(T.matmul(pooled, p)), f_t)
        except NumericError as exc:
            raise NumericError(f"alignment optimisation failed at step {step}: {exc}") from exc
        if not np.isfinite(loss.item()):
            raise NumericError(f"alignment loss is not finite at step {step}")
        loss.backward()
        curve.append((step, loss.item()))
        opt.step()
    return AlignmentReport(label, curve, curve[-1][1], len(pairs), pairs.d_vision,
                           pairs.d_text, seed)


# -- feature extraction from a model ---------------------------------------------------
@dataclass
class AlignmentConfig:
    label: str
    features: tuple[str, ...]
    strategy: str = "channel"

    def __post_init__(self):
        if not self.features:
            raise ValueError(f"config {self.label!r}: feature mask is empty")
        bad = [f for f in self.features if f not in FEATURE_KEYS]
        if bad:
            raise ValueError(f"config {self.label!r}: unknown features {bad}")
        self.features = tuple(k for k in FEATURE_KEYS if k in self.features)
        FusionStrategy.parse(self.strategy)


def extract_features(model, images: np.ndarray, chunk: int = 32) -> dict[str, np.ndarray]:
    """All four bundle features for every image: key -> (N, N_v, D)."""
    out = {k: [] for k in FEATURE_KEYS}
    with no_grad():
        for i in range(0, len(images), chunk):
            b = model.vision.extract_bundle(np.asarray(images[i: i + chunk], dtype=np.float64),
                                            [k for k in FEATURE_KEYS if k != "depth"])
            for k in FEATURE_KEYS:
                out[k].append(b[k].data)
    return {k: np.concatenate(v) for k, v in out.items()}


def text_features(model, captions: list[str]) -> list[np.ndarray]:
    """Last-layer LM hidden states over each caption's tokens (no vision prefix)."""
    out = []
    with no_grad():
        for c in captions:
            out.append(model.lm.hidden(None, tokenize(c).ids).data)
    return out


def fused_pairs(bundle_feats: dict[str, np.ndarray], texts: list[np.ndarray],
                cfg: AlignmentConfig) -> FeaturePairSet:
    from .vision import FeatureBundle

    bundle = FeatureBundle({k: Tensor(bundle_feats[k]) for k in cfg.features})
    fused = fuse(bundle, cfg.strategy, list(cfg.features)).tokens.data
    return FeaturePairSet(list(fused), texts, {"config": cfg.label, "features": list(cfg.features),
                                               "strategy": cfg.strategy})


def worker_count() -> int:
    env = os.environ.get("DBFUSION_THREADS")
    n = os.cpu_count() or 1
    if env:
        n = min(n, max(1, int(env)))
    return n


def compare_configs(configs: list[AlignmentConfig], model, records, steps: int = 500,
                    seeds=(0, 1, 2), lr: float = 1e-3) -> list[AlignmentReport]:
    """Optimise the projection for every (config, seed); reports sorted by (config order, seed)."""
    records = list(records)
    images = np.stack([r.image for r in records])
    feats = extract_features(model, images)
    texts = text_features(model, [r.caption.caption for r in records])
    jobs = []
    for ci, cfg in enumerate(configs):
        pairs = fused_pairs(feats, texts, cfg)
        for seed in seeds:
            jobs.append((ci, seed, cfg.label, pairs))

    def run(job):
        ci, seed, label, pairs = job
        return ci, seed, optimize_projection(pairs, steps, lr, seed, label)

    n = worker_count()
    if n > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(n) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    results.sort(key=lambda r: (r[0], r[1]))
    return [r[2] for r in results]


def summarize(reports: list[AlignmentReport]) -> dict:
    out: dict[str, dict] = {}
    for r in reports:
        out.setdefault(r.label, {"finals": [], "seeds": []})
        out[r.label]["finals"].append(r.final_loss)
        out[r.label]["seeds"].append(r.seed)
    return {label: {"mean_final_loss": float(np.mean(v["finals"])),
                    "std_final_loss": float(np.std(v["finals"])),
                    "seeds": v["seeds"], "final_losses": v["finals"]}
            for label, v in out.items()}


def write_reports(reports: list[AlignmentReport], out_dir, extra: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "alignment.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "seed", "step", "loss"])
        for r in reports:
            for step, loss in r.loss_curve:
                w.writerow([r.label, r.seed, step, repr(loss)])
    summary = {"labels": summarize(reports)}
    if extra:
        summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def save_feature_pairs(path, pairs: FeaturePairSet) -> None:
    tensors = {}
    for i, (v, t) in enumerate(zip(pairs.vision, pairs.text)):
        tensors[f"vision/{i}"] = v
        tensors[f"text/{i}"] = t
    io.save_container(path, tensors, {"kind": "feature-pairs", "labels": pairs.labels})


def load_feature_pairs(path) -> FeaturePairSet:
    tensors, header = io.load_container(path)
    n = sum(1 for k in tensors if k.startswith("vision/"))
    return FeaturePairSet([tensors[f"vision/{i}"] for i in range(n)],
                          [tensors[f"text/{i}"] for i in range(n)], header.get("labels", {}))


def linear_alignable_pairs(n: int = 32, d: int = 16, tokens: int = 4, seed: int = 0) -> FeaturePairSet:
    """Pairs whose pooled text features are a fixed invertible linear map of pooled vision features."""
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((d, d)) + 2.0 * np.eye(d)
    vision, text = [], []
    for _ in range(n):
        v = rng.standard_normal((tokens, d))
        vision.append(v)
        t_mean = v.mean(axis=0) @ m
        noise = rng.standard_normal((tokens, d))
        text.append(t_mean + noise - noise.mean(axis=0))
    return FeaturePairSet(vision, text, {"kind": "linear-alignable", "seed": seed})
