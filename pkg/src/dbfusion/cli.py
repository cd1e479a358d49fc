"""Command-line entry point: gen-data, pretrain, finetune, align, ablate, viz."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import alignment as A
from . import synth, training, viz
from .config import RunConfig, default_raw, validate_config
from .errors import ConfigError, DBFusionError
from .model import DBFusionModel
from .vision import FEATURE_KEYS

log = logging.getLogger("dbfusion")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
DEFAULT_OUT = {"gen-data": "data", "pretrain": "run", "finetune": "run-ft", "align": "align",
               "ablate": "ablation", "viz": "viz"}

def _csv(s: str) -> list[str]:
    return [x for x in s.split(",") if x]

# (flag, config path, type, help) grouped by the subcommands that accept them
COMMON = [
    ("--seed", ("seed",), int, "global seed"),
    ("--out", ("out",), str, "output directory"),
]
DATA = [("--data", ("data",), str, "dataset directory or manifest; generated in memory if omitted")]
MODEL = [
    ("--init", ("init",), str, "checkpoint to start from"),
    ("--strategy", ("strategy",), str, "fusion strategy: token|pool|channel"),
    ("--features", ("features",), _csv, "feature mask, comma-joined subset of " + ",".join(FEATURE_KEYS)),
    ("--image-size", ("encoder", "image_size"), int, "input image side in pixels"),
    ("--patch", ("encoder", "patch"), int, "patch side in pixels"),
    ("--d-vision", ("encoder", "D"), int, "vision feature width"),
    ("--encoder-layers", ("encoder", "encoder_layers"), int, "prompt-encoder blocks"),
    ("--encoder-heads", ("encoder", "heads"), int, "prompt-encoder attention heads"),
    ("--d-model", ("lm", "d_model"), int, "language-model width"),
    ("--lm-layers", ("lm", "layers"), int, "language-model blocks"),
    ("--heads", ("lm", "heads"), int, "language-model attention heads"),
    ("--max-seq", ("lm", "max_seq"), int, "language-model context length"),
]
STAGE = [
    ("--steps", ("stage", "steps"), int, "optimizer steps"),
    ("--batch", ("stage", "batch"), int, "batch size"),
    ("--lr-max", ("stage", "lr_max"), float, "peak learning rate"),
    ("--lr-min", ("stage", "lr_min"), float, "final learning rate"),
]
GEN = [
    ("--n", ("gen", "n"), int, "number of records (also the in-memory corpus size)"),
    ("--mix", ("gen", "mix"), lambda s: [float(x) for x in s.split(",")],
     "relative weights of scenes with shapes only, text only, both"),
]
ALIGN = [
    ("--steps", ("align", "steps"), int, "projection optimizer steps"),
    ("--lr", ("align", "lr"), float, "projection learning rate"),
    ("--seeds", ("align", "seeds"), int, "number of seeds (0..n-1)"),
    ("--n-pairs", ("align", "n_pairs"), int, "image/caption pairs used"),
    ("--subset", ("align", "subset"), str, "record filter: all|text|multi-object"),
]
SUMMARIES = {
    "gen-data": "render a synthetic scene dataset with captions and instruction pairs",
    "pretrain": "stage 1: train vision encoder, projector and LM on captions",
    "finetune": "stage 2: train projector and LM on instruction pairs, vision frozen",
    "align": "fit a projection between pooled vision and text features; report alignment loss",
    "ablate": "alignment loss with each feature removed (and optionally depth only)",
    "viz": "PCA patch maps of each prompt-conditioned feature for one image, as PPM",
}

SUBCOMMANDS = {
    "gen-data": COMMON + GEN,
    "pretrain": COMMON + DATA + MODEL + STAGE + GEN[:1],
    "finetune": COMMON + DATA + MODEL + STAGE + GEN[:1] + [
        ("--pairs", ("finetune_pairs",), int, "instruction pairs used")],
    "align": COMMON + DATA + MODEL + ALIGN + [
        ("--pairs", ("align", "pairs"), str, "precomputed feature-pair container; skips the model"),
        ("--label", ("align", "label"), str, "report label")],
    "ablate": COMMON + DATA + MODEL + ALIGN + [
        ("--remove", ("align", "remove"), _csv, "features removed one at a time, comma-joined"),
        ("--depth-only", ("align", "depth_only"), None, "also run the depth-only bundle")],
    "viz": COMMON + DATA + MODEL + [
        ("--index", ("viz", "index"), int, "record index to visualize"),
        ("--scale", ("viz", "scale"), int, "pixels per patch in the PPM"),
        ("--tasks", ("viz", "tasks"), _csv, "features to render, comma-joined")],
}

def _lookup(d: dict, path: tuple):
    for k in path:
        d = d[k]
    return d

def _show(v) -> str:
    if isinstance(v, list):
        return ",".join(str(x) for x in v) or "none"
    return str(v)

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbfusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in SUBCOMMANDS.items():
        defaults = default_raw(name)
        defaults["out"] = DEFAULT_OUT[name]
        p = sub.add_parser(name, help=SUMMARIES[name], description=SUMMARIES[name])
        p.add_argument("--config", default=argparse.SUPPRESS,
                       help="JSON config file; flags override it (default: none)")
        for flag, path, typ, text in flags:
            shown = _show(_lookup(defaults, path))
            dest = "cfg:" + ".".join(path)
            meta = flag.lstrip("-").upper().replace("-", "_")
            if typ is None:
                p.add_argument(flag, dest=dest, action="store_true", default=argparse.SUPPRESS,
                               help=f"{text} (default: {shown})")
            else:
                p.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS, metavar=meta,
                               help=f"{text} (default: {shown})")
    return parser

def raw_from_args(ns: argparse.Namespace) -> dict:
    raw: dict = {}
    if getattr(ns, "config", None):
        try:
            raw = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}", "config") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object", "config")
    raw["command"] = ns.command
    for dest, val in vars(ns).items():
        if not dest.startswith("cfg:"):
            continue
        node = raw
        *parents, leaf = dest[4:].split(".")
        for k in parents:
            node = node.setdefault(k, {})
        node[leaf] = val
    if raw.get("out") is None:
        raw["out"] = DEFAULT_OUT[ns.command]
    return raw

# -- helpers -------------------------------------------------------------------------------
def _records(cfg: RunConfig, n: int | None = None, subset: str = "all") -> list[synth.Record]:
    keep = (lambda r: True) if subset == "all" else (lambda r: subset in r.tags)
    if cfg.data:
        recs = [r for r in synth.load_dataset(cfg.data) if keep(r)]
        return recs[:n] if n else recs
    want = n or cfg.gen["n"]
    recs, i = [], 0
    while len(recs) < want and i < 100 * want:
        r = synth.make_record(cfg.seed, i, cfg.gen["mix"])
        if keep(r):
            recs.append(r)
        i += 1
    return recs

def _model(cfg: RunConfig) -> DBFusionModel:
    if cfg.init:
        return DBFusionModel.load(cfg.init)[0]
    return DBFusionModel(cfg.encoder, cfg.lm, cfg.strategy, cfg.features, cfg.seed)

def _write_config(out: Path, cfg: RunConfig) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.to_dict()
    d["manifest_hash"] = synth.manifest_hash(cfg.data) if cfg.data else None
    (out / "config.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return d

# -- subcommands ---------------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig) -> dict:
    manifest = synth.generate_dataset(cfg.gen["n"], cfg.seed, cfg.out, cfg.gen["mix"])
    return {"manifest": str(manifest), "records": cfg.gen["n"],
            "manifest_hash": synth.manifest_hash(manifest)}

def cmd_pretrain(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    _write_config(out, cfg)
    model = _model(cfg)
    data = training.caption_samples(_records(cfg))
    res = training.pretrain_stage(model, data, cfg.stage, out, progress_every=50)
    losses = res.losses
    return {"checkpoint": str(res.checkpoint), "steps": len(losses),
            "final_loss": float(losses[-1]) if len(losses) else None}

def cmd_finetune(cfg: RunConfig) -> dict:
    if not cfg.init:
        raise ConfigError("finetune needs a stage1 checkpoint", "init")
    out = Path(cfg.out)
    _write_config(out, cfg)
    model, stage = DBFusionModel.load(cfg.init)
    if stage != "stage1":
        raise ConfigError(f"checkpoint is at stage {stage!r}, expected 'stage1'", "init")
    data = training.instruction_samples(_records(cfg), cfg.finetune_pairs)
    res = training.finetune_stage(model, data, cfg.stage, out, progress_every=50)
    losses = res.losses
    return {"checkpoint": str(res.checkpoint), "steps": len(losses),
            "final_loss": float(losses[-1]) if len(losses) else None}

def _alignment_run(cfg: RunConfig, configs: list[A.AlignmentConfig]) -> dict:
    al = cfg.align
    out = Path(cfg.out)
    _write_config(out, cfg)
    recs = _records(cfg, al["n_pairs"], al["subset"])
    if len(recs) < 2:
        raise ConfigError(f"only {len(recs)} records match subset {al['subset']!r}", "align.subset")
    reports = A.compare_configs(configs, _model(cfg), recs, al["steps"], range(al["seeds"]), al["lr"])
    return A.write_reports(reports, out, {"n_pairs": len(recs), "subset": al["subset"]})

def cmd_align(cfg: RunConfig) -> dict:
    al = cfg.align
    if al["pairs"]:
        pairs = A.load_feature_pairs(al["pairs"])
        label = al["label"] or "external"
        reports = [A.optimize_projection(pairs, al["steps"], al["lr"], s, label)
                   for s in range(al["seeds"])]
        out = Path(cfg.out)
        _write_config(out, cfg)
        return A.write_reports(reports, out, {"n_pairs": len(pairs), "source": al["pairs"]})
    label = al["label"] or "+".join(cfg.features)
    return _alignment_run(cfg, [A.AlignmentConfig(label, tuple(cfg.features), cfg.strategy)])

def cmd_ablate(cfg: RunConfig) -> dict:
    al = cfg.align
    full = tuple(FEATURE_KEYS)
    configs = [A.AlignmentConfig("full", full, "channel")]
    for key in al["remove"]:
        configs.append(A.AlignmentConfig(f"minus-{key}", tuple(k for k in full if k != key), "channel"))
    if al["depth_only"]:
        configs.append(A.AlignmentConfig("depth-only", ("depth",), "channel"))
    return _alignment_run(cfg, configs)

def cmd_viz(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    _write_config(out, cfg)
    idx = cfg.viz["index"]
    recs = _records(cfg, idx + 1)
    if idx >= len(recs):
        raise ConfigError(f"index {idx} beyond {len(recs)} records", "viz.index")
    rec = recs[idx]
    model = _model(cfg)
    g = model.enc_cfg.grid
    feats = A.extract_features(model, rec.image[None])
    written = []
    for task in cfg.viz["tasks"]:
        v = viz.visualize_feature(feats[task][0], (g, g), task)
        path = viz.render_ppm(v, out / f"{rec.id}.{task}.ppm", cfg.viz["scale"])
        side = {"image": rec.id, **v.sidecar()}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
        written.append(str(path))
    return {"images": written}

COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "align": cmd_align, "ablate": cmd_ablate, "viz": cmd_viz}

def _error(kind: str, exc: BaseException, **extra) -> None:
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc), **extra}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)

def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = validate_config(raw_from_args(ns))
    except ConfigError as exc:
        _error("config", exc, key=exc.key)
        return EXIT_CONFIG
    try:
        result = COMMANDS[ns.command](cfg)
    except ConfigError as exc:
        _error("config", exc, key=exc.key)
        return EXIT_CONFIG
    except (DBFusionError, OSError, ValueError, ArithmeticError) as exc:
        _error("runtime", exc)
        return EXIT_RUNTIME
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK

def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())

if __name__ == "__main__":
    main()
