"""Resolved run configuration: defaults, config-file merge, validation."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .fusion import FusionStrategy
from .io import read_container_header
from .lm import LMConfig
from .synth import max_text_tokens
from .training import Stage, StageSpec
from .vision import FEATURE_KEYS, EncoderConfig

STAGE_DEFAULTS = {
    "pretrain": {"steps": 2000, "batch": 16, "lr_max": 3e-4, "lr_min": 0.0},
    "finetune": {"steps": 1000, "batch": 16, "lr_max": 1e-4, "lr_min": 0.0},
}


def default_raw(command: str = "pretrain") -> dict:
    stage = "finetune" if command == "finetune" else "pretrain"
    return {
        "command": command,
        "seed": 0,
        "encoder": dataclasses.asdict(EncoderConfig()),
        "lm": dataclasses.asdict(LMConfig()),
        "stage": {"stage": stage, **STAGE_DEFAULTS[stage]},
        "strategy": "channel",
        "features": list(FEATURE_KEYS),
        "data": None,
        "out": None,
        "init": None,
        "gen": {"n": 5000, "mix": [1.0, 1.0, 1.0]},
        "finetune_pairs": 2000,
        "align": {"steps": 500, "lr": 1e-3, "seeds": 3, "n_pairs": 256, "subset": "all",
                  "pairs": None, "label": None, "remove": [], "depth_only": False},
        "viz": {"index": 0, "scale": 8, "tasks": ["caption", "ocr", "grounding"]},
    }


@dataclass
class RunConfig:
    command: str
    seed: int
    encoder: EncoderConfig
    lm: LMConfig
    stage: StageSpec
    strategy: str
    features: list[str]
    data: str | None
    out: str | None
    init: str | None
    gen: dict = field(default_factory=dict)
    finetune_pairs: int = 2000
    align: dict = field(default_factory=dict)
    viz: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage"] = {"stage": self.stage.stage.value, "steps": self.stage.steps,
                      "batch": self.stage.batch, "lr_max": self.stage.lr_max,
                      "lr_min": self.stage.lr_min, "seed": self.stage.seed,
                      "trainable": sorted(self.stage.trainable)}
        return d


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(raw: dict, ref: dict, prefix: str = "") -> None:
    for k, v in raw.items():
        if k not in ref:
            raise ConfigError("unknown configuration key", prefix + k)
        if isinstance(ref[k], dict) and k not in ("stage",):
            if not isinstance(v, dict):
                raise ConfigError("expected a mapping", prefix + k)
            _check_keys(v, ref[k], prefix + k + ".")


def _build(cls, values: dict, key: str):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc), key) from None


def validate_config(raw: dict) -> RunConfig:
    """Merge ``raw`` over the defaults for its command, check every invariant, return the result."""
    command = raw.get("command", "pretrain")
    base = default_raw(command)
    _check_keys(raw, base)
    full = merge(base, raw)

    enc = _build(EncoderConfig, full["encoder"], "encoder")
    lm = _build(LMConfig, full["lm"], "lm")
    try:
        enc.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"encoder.{exc.key}") from None
    try:
        lm.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"lm.{exc.key}") from None

    try:
        strategy = FusionStrategy.parse(full["strategy"]).value
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], "strategy") from None
    features = full["features"]
    if isinstance(features, str):
        features = [f for f in features.split(",") if f]
    bad = [f for f in features if f not in FEATURE_KEYS]
    if bad or not features or len(set(features)) != len(features):
        raise ConfigError(f"feature mask must be a nonempty subset of {','.join(FEATURE_KEYS)}, "
                          f"got {features}", "features")
    features = [k for k in FEATURE_KEYS if k in features]

    st = dict(full["stage"])
    if "seed" not in raw.get("stage", {}):
        st["seed"] = full["seed"]
    try:
        stage = StageSpec(Stage(st.pop("stage")), **{k: v for k, v in st.items() if k != "trainable"})
        stage.validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "stage") from None

    init = full["init"]
    if init is not None:
        try:
            header = read_container_header(init)
        except OSError as exc:
            raise ConfigError(f"cannot read checkpoint: {exc}", "init") from None
        ck = header.get("config", {})
        explicit = "strategy" in raw or "features" in raw
        if explicit and (ck.get("strategy") != strategy or ck.get("features") != features):
            raise ConfigError(
                f"requested {strategy} over {features} but checkpoint projector was built for "
                f"{ck.get('strategy')} over {ck.get('features')}", "strategy")
        enc = EncoderConfig(**ck["encoder"])
        lm = LMConfig(**ck["lm"])
        strategy, features = ck["strategy"], ck["features"]

    n_vis = enc.n_patches * (len(features) if strategy == "token" else 1)
    if n_vis + max_text_tokens() > lm.max_seq:
        raise ConfigError(f"{n_vis} vision tokens + up to {max_text_tokens()} text tokens exceed "
                          f"max_seq={lm.max_seq}", "strategy")

    gen = full["gen"]
    if int(gen["n"]) < 1:
        raise ConfigError("must be >= 1", "gen.n")
    mix = gen["mix"]
    if isinstance(mix, str):
        mix = [float(x) for x in mix.split(",")]
    if len(mix) != 3 or min(mix) < 0 or sum(mix) <= 0:
        raise ConfigError("need three nonnegative weights, not all zero", "gen.mix")
    gen = {"n": int(gen["n"]), "mix": [float(x) for x in mix]}

    align = dict(full["align"])
    if int(align["steps"]) < 1:
        raise ConfigError("must be >= 1", "align.steps")
    if int(align["seeds"]) < 1:
        raise ConfigError("must be >= 1", "align.seeds")
    if int(align["n_pairs"]) < 2:
        raise ConfigError("must be >= 2", "align.n_pairs")
    if align["subset"] not in ("all", "text", "multi-object"):
        raise ConfigError("must be all|text|multi-object", "align.subset")
    remove = align["remove"]
    if isinstance(remove, str):
        remove = [r for r in remove.split(",") if r]
    if any(r not in FEATURE_KEYS for r in remove):
        raise ConfigError(f"unknown feature in {remove}", "align.remove")
    align["remove"] = remove

    viz = dict(full["viz"])
    if int(viz["scale"]) < 1:
        raise ConfigError("must be >= 1", "viz.scale")
    tasks = viz["tasks"]
    if isinstance(tasks, str):
        tasks = [t for t in tasks.split(",") if t]
    if any(t not in FEATURE_KEYS for t in tasks) or not tasks:
        raise ConfigError(f"unknown task in {tasks}", "viz.tasks")
    viz["tasks"] = tasks

    return RunConfig(command, int(full["seed"]), enc, lm, stage, strategy, features, full["data"],
                     full["out"], init, gen, int(full["finetune_pairs"]), align, viz)
