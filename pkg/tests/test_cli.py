import json

import numpy as np
import pytest

from dbfusion.cli import SUBCOMMANDS, build_parser, run
from dbfusion.config import validate_config
from dbfusion.errors import ConfigError
from dbfusion.model import DBFusionModel
from dbfusion.synth import load_dataset
from dbfusion.vision import EncoderConfig

SMALL = ["--patch", "16", "--d-vision", "8", "--encoder-layers", "1", "--encoder-heads", "2",
         "--d-model", "16", "--lm-layers", "1", "--heads", "2"]


def test_defaults_resolve():
    cfg = validate_config({})
    assert cfg.encoder == EncoderConfig()
    assert (cfg.lm.d_model, cfg.lm.layers, cfg.lm.heads, cfg.lm.vocab, cfg.lm.max_seq) == (128, 4, 4, 512, 256)
    assert (cfg.stage.steps, cfg.stage.batch, cfg.stage.lr_max, cfg.stage.lr_min) == (2000, 16, 3e-4, 0.0)
    assert cfg.strategy == "channel" and cfg.features == ["depth", "caption", "ocr", "grounding"]
    ft = validate_config({"command": "finetune"})
    assert (ft.stage.steps, ft.stage.lr_max, ft.finetune_pairs) == (1000, 1e-4, 2000)
    assert cfg.align["steps"] == 500 and cfg.align["seeds"] == 3 and cfg.align["lr"] == 1e-3


def test_divisibility_error_names_key():
    with pytest.raises(ConfigError) as err:
        validate_config({"lm": {"d_model": 130, "heads": 4}})
    assert err.value.key == "lm.d_model" and "divisible" in str(err.value)


def test_other_config_errors():
    for raw, key in [({"bogus": 1}, "bogus"), ({"lm": {"nope": 1}}, "lm.nope"),
                     ({"strategy": "sum"}, "strategy"), ({"features": ["depth", "color"]}, "features"),
                     ({"encoder": {"patch": 7}}, "encoder.patch"), ({"gen": {"mix": [0, 0, 0]}}, "gen.mix"),
                     ({"strategy": "token", "lm": {"max_seq": 256}}, "strategy")]:
        with pytest.raises(ConfigError) as err:
            validate_config(raw)
        assert err.value.key == key


def test_token_request_against_channel_checkpoint(tmp_path):
    ck = tmp_path / "c.dbft"
    DBFusionModel(EncoderConfig(patch=16, d_backbone=8, D=8, encoder_layers=1, heads=2)).save(ck, "stage1")
    with pytest.raises(ConfigError) as err:
        validate_config({"init": str(ck), "strategy": "token", "lm": {"max_seq": 512}})
    assert err.value.key == "strategy"
    cfg = validate_config({"init": str(ck)})
    assert cfg.strategy == "channel" and cfg.encoder.patch == 16


def test_help_lists_every_flag_with_default(capsys):
    parser = build_parser()
    for name, flags in SUBCOMMANDS.items():
        with pytest.raises(SystemExit):
            parser.parse_args([name, "--help"])
        text = " ".join(capsys.readouterr().out.split())
        for flag, *_ in flags:
            assert flag in text, (name, flag)
        assert text.count("(default:") >= len(flags) + 1


def test_exit_codes(tmp_path, capsys):
    assert run(["pretrain", "--no-such-flag"]) == 2
    assert run(["teleport"]) == 2
    assert run(["pretrain", "--d-model", "130", "--out", str(tmp_path / "x")]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and err["key"] == "lm.d_model"
    assert run(["pretrain", "--data", str(tmp_path / "missing"), "--steps", "0",
                "--out", str(tmp_path / "y"), *SMALL]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "runtime"
    assert run(["finetune", "--out", str(tmp_path / "z"), *SMALL]) == 3


def test_gen_data_and_zero_step_pretrain(tmp_path):
    data, out = tmp_path / "data", tmp_path / "run1"
    assert run(["gen-data", "--n", "100", "--seed", "0", "--out", str(data)]) == 0
    assert len(list(load_dataset(data))) == 100
    assert run(["pretrain", "--data", str(data), "--steps", "0", "--out", str(out), *SMALL]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert len(cfg["manifest_hash"]) == 64 and cfg["seed"] == 0 and cfg["stage"]["steps"] == 0
    loaded, stage = DBFusionModel.load(out / "checkpoints/stage1.dbft")
    fresh = DBFusionModel.from_config(loaded.config_dict())
    assert stage == "stage1"
    for (n1, p1), (n2, p2) in zip(loaded.named_parameters(), fresh.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


def test_config_file_then_flags(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"stage": {"steps": 7, "batch": 3}, "seed": 4}))
    out = tmp_path / "r"
    assert run(["pretrain", "--config", str(conf), "--steps", "0", "--n", "8", "--out", str(out), *SMALL]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["stage"]["steps"] == 0 and cfg["stage"]["batch"] == 3 and cfg["seed"] == 4
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["pretrain", "--config", str(bad)]) == 3


def test_pretrain_finetune_align_ablate_viz(tmp_path):
    data = tmp_path / "data"
    assert run(["gen-data", "--n", "16", "--out", str(data)]) == 0
    s1 = tmp_path / "s1"
    assert run(["pretrain", "--data", str(data), "--steps", "2", "--batch", "4", "--out", str(s1), *SMALL]) == 0
    ck = s1 / "checkpoints/stage1.dbft"
    s2 = tmp_path / "s2"
    assert run(["finetune", "--data", str(data), "--init", str(ck), "--steps", "2", "--batch", "4",
                "--out", str(s2)]) == 0
    assert (s2 / "checkpoints/stage2.dbft").exists() and (s2 / "losses.csv").exists()
    assert run(["finetune", "--data", str(data), "--init", str(s2 / "checkpoints/stage2.dbft"),
                "--out", str(tmp_path / "s3")]) == 3

    ab = tmp_path / "ab"
    assert run(["ablate", "--data", str(data), "--init", str(ck), "--remove", "ocr", "--seeds", "3",
                "--steps", "5", "--out", str(ab)]) == 0
    summary = json.loads((ab / "summary.json").read_text())
    assert set(summary["labels"]) == {"full", "minus-ocr"}
    assert all(len(v["final_losses"]) == 3 for v in summary["labels"].values())

    al = tmp_path / "al"
    assert run(["align", "--data", str(data), "--init", str(ck), "--steps", "3", "--seeds", "1",
                "--out", str(al)]) == 0
    assert "depth+caption+ocr+grounding" in json.loads((al / "summary.json").read_text())["labels"]

    vz = tmp_path / "vz"
    assert run(["viz", "--data", str(data), "--init", str(ck), "--index", "2", "--out", str(vz)]) == 0
    for task in ("caption", "ocr", "grounding"):
        assert (vz / f"000002.{task}.ppm").exists()
        side = json.loads((vz / f"000002.{task}.json").read_text())
        assert {"threshold", "eigenvalues", "foreground_count"} <= set(side)


def test_align_on_external_pairs(tmp_path):
    from dbfusion.alignment import linear_alignable_pairs, save_feature_pairs

    save_feature_pairs(tmp_path / "p.dbft", linear_alignable_pairs(12, 5, 2))
    assert run(["align", "--pairs", str(tmp_path / "p.dbft"), "--steps", "4", "--seeds", "2",
                "--label", "ext", "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o/summary.json").read_text())
    assert summary["labels"]["ext"]["seeds"] == [0, 1]
