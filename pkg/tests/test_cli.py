import dataclasses
import json
from pathlib import Path

import pytest

from prologue.cli import ABLATION_AXES, build_parser, main
from prologue.data import load_cache
from prologue.pipeline import RunConfig

TINY = [
    "--set", "image_size=16", "--set", "patch_size=4", "--set", "num_classes=3",
    "--set", "samples_per_class=8", "--set", "prologue_len=4",
    "--set", "prologue_vocab=16", "--set", "visual_vocab=32",
    "--set", "dim=32", "--set", "enc_layers=1", "--set", "dec_layers=1",
    "--set", "ar_dim=32", "--set", "ar_layers=2", "--set", "ar_dropout=0.0",
    "--set", "batch_size=8", "--set", "epochs=1", "--set", "stage2_epochs=1",
    "--set", "log_every=2", "--set", "warmup_steps=2", "--set", "holdout_frac=0.2",
]
TINY_BASELINE = TINY + ["--set", "prologue_len=0", "--set", "visual_drop=0.0",
                        "--set", "ar_weight=0.0"]


def test_synth_data_command(tmp_path):
    out = tmp_path / "toy.plgd"
    assert main(["synth-data", "--seed", "3", "--classes", "4", "--per-class", "5",
                 "--size", "32", "--out", str(out)]) == 0
    ds = load_cache(out)
    assert len(ds) == 20 and ds.num_classes == 4


def test_train_validation_failure_exits_2(tmp_path):
    code = main(["train", "--mode", "prologue", "--runs", str(tmp_path),
                 "--set", "bogus_key=1"])
    assert code == 2
    code = main(["train", "--mode", "baseline_2d", "--runs", str(tmp_path)] + TINY)
    assert code == 2  # baseline with prologue_len=4 violates the mode constraint


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert main(["train", "--mode", "prologue", "--runs", str(root)] + TINY) == 0
    run_dir = next(p for p in root.iterdir() if p.is_dir())
    return run_dir


def test_train_writes_run_dir(trained_run):
    assert (trained_run / "config.json").exists()
    assert (trained_run / "metrics.csv").exists()
    assert (trained_run / "stage1.pt").exists()
    assert (trained_run / "stage2.pt").exists()
    assert (trained_run / "DONE").exists()
    cfg = json.loads((trained_run / "config.json").read_text())
    assert cfg["mode"] == "prologue"
    assert trained_run.name.endswith("-prologue")
    # snapshot carries every field: no hidden defaults
    assert set(cfg) == {f.name for f in dataclasses.fields(RunConfig)}


def test_default_sweep_grid_and_ablation_axes():
    parser = build_parser()
    args = parser.parse_args(["sweep-lambda"])
    assert args.grid == "0.03,0.3,1,3,6"
    assert ABLATION_AXES == {
        "visual_drop": [0.0, 0.5, 1.0],
        "prologue_len": [4, 16, 64],
        "prologue_vocab": [256, 1024, 4096],
        "ste_tau": [0.01, 0.1, 1.0],
        "ar_weight": [1.0, 3.0, 6.0],
    }


def test_train_idempotent(trained_run, capsys):
    root = trained_run.parent
    mtime = (trained_run / "stage1.pt").stat().st_mtime_ns
    assert main(["train", "--mode", "prologue", "--runs", str(root)] + TINY) == 0
    assert (trained_run / "stage1.pt").stat().st_mtime_ns == mtime
    assert "already complete" in capsys.readouterr().out


def test_sample_command(trained_run, tmp_path):
    out = tmp_path / "grid.png"
    assert main(["sample", "--run", str(trained_run), "--classes", "0,1", "--n", "2",
                 "--out", str(out), "--t-pro", "0", "--t-vis", "0"]) == 0
    assert out.exists()
    assert out.with_suffix(".manifest.jsonl").exists()
    fixed = tmp_path / "fixed.png"
    assert main(["sample", "--run", str(trained_run), "--classes", "0", "--n", "3",
                 "--fixed-zp", "1,2,3,4", "--out", str(fixed)]) == 0
    assert fixed.exists()


def test_probe_command(trained_run):
    assert main(["probe", "--run", str(trained_run), "--source", "both"]) == 0
    payload = json.loads((trained_run / "probe.json").read_text())
    assert set(payload["results"]) == {"prologue", "first_k_visual"}


def test_attn_command(trained_run):
    assert main(["attn", "--run", str(trained_run), "--layers", "0,1"]) == 0
    attn_dir = trained_run / "attn"
    assert (attn_dir / "layer0.png").exists()
    assert (attn_dir / "layer0.npy").exists()
    stats = json.loads((attn_dir / "stats.json").read_text())
    assert 0 <= stats["prologue_mass"] <= 1


def test_info_commands(trained_run):
    assert main(["info", "--selftest", "--trials", "50"]) == 0
    assert main(["info", "--run", str(trained_run)]) == 0
    payload = json.loads((trained_run / "info.json").read_text())
    assert "mi" in payload["report"]


def test_post_via_cli(tmp_path):
    root = tmp_path / "runs"
    assert main(["train", "--mode", "baseline_2d", "--runs", str(root)] + TINY_BASELINE) == 0
    base_run = next(p for p in root.iterdir() if p.name.endswith("baseline_2d"))
    assert main(["train", "--mode", "prologue_post", "--runs", str(root),
                 "--base-run", str(base_run)] + TINY) == 0
    post_run = next(p for p in root.iterdir() if p.name.endswith("prologue_post"))
    assert (post_run / "post.pt").exists()
    # post without --base-run is a config error
    assert main(["train", "--mode", "prologue_post", "--runs", str(root), "--force"] + TINY) == 2


def test_sweep_lambda_command(tmp_path):
    root = tmp_path / "runs"
    assert main(["sweep-lambda", "--grid", "0.3", "--arms", "prologue",
                 "--runs", str(root)] + TINY) == 0
    sweep = root / "sweep-lambda"
    assert (sweep / "sweep.csv").exists()
    assert (sweep / "sweep.png").exists()
    assert (sweep / "sweep.json").exists()


def test_plot_command_missing_columns(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert main(["plot", "--kind", "sweep", "--csv", str(bad),
                 "--out", str(tmp_path / "x.png")]) == 1


def test_plot_curves(trained_run, tmp_path):
    out = tmp_path / "curves.png"
    assert main(["plot", "--kind", "curves", "--csv", str(trained_run / "metrics.csv"),
                 "--out", str(out)]) == 0
    assert out.exists()
    assert out.with_suffix(".json").exists()
