"""Command-line entry point. Every run writes, under a directory named by its
config hash, the resolved config snapshot, a metrics CSV, checkpoints, and any
figures. Exit codes: 0 success, 1 runtime failure, 2 invalid configuration."""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import diagnostics, plots
from .data import load_cache, load_folder, save_cache, synth_shapes
from .errors import ConfigError, DataError, TrainingDivergedError
from .pipeline import (
    RunConfig,
    lambda_sweep,
    load_checkpoint,
    train_onestage,
    train_prologue_post,
    train_stage1,
    train_stage2,
)
from .sampling import CFGConfig, generate, sample_grid

DONE_MARKER = "DONE"


def _run_root(args) -> Path:
    root = args.runs or os.environ.get("PROLOGUE_RUNS", "runs")
    return Path(root)


def _build_config(args) -> RunConfig:
    d = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            d = json.load(fh)
    cfg = RunConfig.from_dict(d)
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "mode", None):
        overrides.insert(0, f"mode={args.mode}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "device", None):
        overrides.append(f"device={args.device}")
    return cfg.with_overrides(overrides).validate()


def _load_dataset(args, cfg: RunConfig):
    if getattr(args, "data", None):
        path = Path(args.data)
        if path.is_dir():
            return load_folder(str(path), cfg.image_size)
        return load_cache(str(path))
    return synth_shapes(cfg.seed, cfg.num_classes, cfg.samples_per_class,
                        cfg.image_size, cfg.patch_size)


def _prepare_run_dir(root: Path, cfg: RunConfig, force: bool, stage: str = "all"):
    run_dir = root / f"{cfg.config_hash()}-{cfg.mode}"
    snapshot = run_dir / "config.json"
    marker = run_dir / DONE_MARKER
    if run_dir.exists() and marker.exists() and not force:
        if (snapshot.exists() and json.loads(snapshot.read_text()) == cfg.to_dict()
                and marker.read_text().strip() == stage):
            return run_dir, True
    run_dir.mkdir(parents=True, exist_ok=True)
    if marker.exists():
        marker.unlink()
    snapshot.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return run_dir, False


def _mark_done(run_dir: Path, stage: str = "all"):
    (run_dir / DONE_MARKER).write_text(stage + "\n")


def _find_checkpoint(run_dir: Path, names=("stage2.pt", "onestage.pt", "post.pt", "stage1.pt")):
    for name in names:
        path = run_dir / name
        if path.exists():
            return load_checkpoint(path)
    raise ConfigError(f"no checkpoint found in {run_dir}")


def _cfg_from_args(args) -> CFGConfig:
    return CFGConfig(
        s_pro=args.s_pro, s_vis=args.s_vis, cos_p=args.cos_p,
        t_pro=args.t_pro, t_vis=args.t_vis,
        top_k=args.top_k, guided=not args.no_cfg,
    ).validate()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args):
    ds = synth_shapes(args.seed, args.classes, args.per_class, args.size)
    save_cache(ds, args.out, args.seed)
    print(f"wrote {len(ds)} samples ({args.classes} classes) to {args.out}")
    return 0


def cmd_train(args):
    cfg = _build_config(args)
    run_dir, done = _prepare_run_dir(_run_root(args), cfg, args.force, args.stage)
    if done:
        print(f"run {run_dir} already complete; use --force to redo")
        return 0
    dataset = _load_dataset(args, cfg)
    print(f"run dir: {run_dir}")
    if cfg.mode == "prologue_post":
        if not args.base_run:
            raise ConfigError("prologue_post requires --base-run pointing at a baseline_2d run")
        base = _find_checkpoint(Path(args.base_run), names=("stage1.pt",))
        result = train_prologue_post(base, cfg, dataset, run_dir)
        print(f"post: held-out visual CE {result.final['ce_visual']:.4f}")
    elif cfg.mode == "prologue_onestage":
        result = train_onestage(cfg, dataset, run_dir)
        print(f"onestage: recon L1 {result.final['recon_l1']:.4f}, visual CE {result.final['ce_visual']:.4f}")
    else:
        if args.stage in ("1", "all"):
            s1 = train_stage1(cfg, dataset, run_dir)
            print(f"stage1: recon L1 {s1.final['recon_l1']:.4f}, visual CE {s1.final['ce_visual']:.4f}")
        if args.stage in ("2", "all"):
            ckpt = load_checkpoint(run_dir / "stage1.pt")
            s2 = train_stage2(ckpt, cfg, dataset, run_dir)
            print(f"stage2: visual CE {s2.final['ce_visual']:.4f}, top1 {s2.final['top1']:.3f}")
    _mark_done(run_dir, args.stage)
    return 0


def cmd_sample(args):
    ckpt = _find_checkpoint(Path(args.run))
    tokenizer = ckpt.build_tokenizer()
    ar = ckpt.build_ar()
    if ar is None:
        raise ConfigError("checkpoint has no AR model to sample from")
    cfg = _cfg_from_args(args)
    classes = [int(c) for c in args.classes.split(",")]
    if args.fixed_zp:
        fixed = torch.tensor([int(i) for i in args.fixed_zp.split(",")], dtype=torch.long)
        rng = torch.Generator().manual_seed(args.seed)
        block = [c for c in classes for _ in range(args.n)]
        out = generate(tokenizer, ar, block, cfg, rng, fixed_zp=fixed)
        from PIL import Image

        from .sampling import tile_images
        grid = tile_images(out.images, len(classes), args.n)
        Image.fromarray(grid).save(args.out)
        print(f"wrote fixed-prologue grid to {args.out}")
        return 0
    manifest = Path(args.out).with_suffix(".manifest.jsonl")
    sample_grid(tokenizer, ar, classes, args.n, cfg, args.seed, args.out, manifest)
    print(f"wrote {len(classes)}x{args.n} grid to {args.out} (manifest: {manifest})")
    return 0


def cmd_sweep_lambda(args):
    cfg = _build_config(args)
    grid = [float(x) for x in args.grid.split(",")]
    arms = args.arms.split(",")
    dataset = _load_dataset(args, cfg)
    root = _run_root(args) / "sweep-lambda"
    root.mkdir(parents=True, exist_ok=True)
    rows = lambda_sweep(cfg, grid, arms, dataset, root)
    out_csv = root / "sweep.csv"
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["arm", "ar_weight", "recon_l1", "ce_total", "ce_visual"])
        writer.writeheader()
        writer.writerows(rows)
    plots.plot_sweep(out_csv, root / "sweep.png")
    for row in rows:
        print(f"{row['arm']:>20} weight={row['ar_weight']:<6} recon_l1={row['recon_l1']:.4f} ce_visual={row['ce_visual']:.4f}")
    print(f"wrote {out_csv} and sweep.png")
    return 0


def cmd_sweep_cfg(args):
    ckpt = _find_checkpoint(Path(args.run))
    tokenizer, ar = ckpt.build_tokenizer(), ckpt.build_ar()
    cfg = ckpt.config
    dataset = synth_shapes(cfg.seed, cfg.num_classes, cfg.samples_per_class,
                           cfg.image_size, cfg.patch_size)
    centroids = torch.stack([
        dataset.pixels[dataset.labels == c].mean(0) for c in range(cfg.num_classes)
    ]).flatten(1)
    classes = list(range(min(cfg.num_classes, args.classes)))
    rows = []
    for s_vis in [float(x) for x in args.grid.split(",")]:
        gen_cfg = CFGConfig(s_pro=args.s_pro, s_vis=s_vis, cos_p=args.cos_p).validate()
        correct, dists = 0, []
        for cls in classes:
            rng = torch.Generator().manual_seed(args.seed + cls)
            out = generate(tokenizer, ar, [cls] * args.n, gen_cfg, rng)
            flat = out.images.flatten(1)
            pred = torch.cdist(flat, centroids).argmin(1)
            correct += int((pred == cls).sum())
            pair = torch.cdist(flat, flat)
            iu = torch.triu_indices(args.n, args.n, offset=1)
            dists.append(pair[iu[0], iu[1]].mean().item())
        rows.append({
            "s_vis": s_vis,
            "quality": correct / (len(classes) * args.n),
            "diversity": float(np.mean(dists)),
        })
        print(f"s_vis={s_vis:<6} quality={rows[-1]['quality']:.3f} diversity={rows[-1]['diversity']:.4f}")
    out_csv = Path(args.out).with_suffix(".csv")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["s_vis", "quality", "diversity"])
        writer.writeheader()
        writer.writerows(rows)
    plots.plot_cfg_tradeoff(out_csv, args.out)
    print(f"wrote {out_csv} and {args.out}")
    return 0


def cmd_probe(args):
    ckpt = _find_checkpoint(Path(args.run), names=("stage1.pt", "post.pt", "onestage.pt"))
    tokenizer = ckpt.build_tokenizer()
    cfg = ckpt.config
    dataset = synth_shapes(cfg.seed, cfg.num_classes, cfg.samples_per_class,
                           cfg.image_size, cfg.patch_size)
    sources = ["prologue", "first_k_visual"] if args.source == "both" else [args.source]
    results = {}
    for source in sources:
        first_k = args.first_k if source == "first_k_visual" else None
        results[source] = diagnostics.linear_probe(tokenizer, dataset, source, cfg, first_k=first_k)
        print(f"{source}: top1={results[source]['top1']:.3f} top5={results[source]['top5']:.3f}")
    out = Path(args.run) / "probe.json"
    out.write_text(json.dumps({"config_hash": cfg.config_hash(), "results": results}, indent=2))
    print(f"wrote {out}")
    return 0


def cmd_attn(args):
    ckpt = _find_checkpoint(Path(args.run))
    tokenizer, ar = ckpt.build_tokenizer(), ckpt.build_ar()
    cfg = ckpt.config
    dataset = synth_shapes(cfg.seed, cfg.num_classes, cfg.samples_per_class,
                           cfg.image_size, cfg.patch_size)
    batch = dataset.batch(range(min(args.batch, len(dataset))))
    layers = [int(x) for x in args.layers.split(",")]
    report = diagnostics.attention_maps(ar, tokenizer, batch, cfg, layers)
    out_dir = Path(args.run) / "attn"
    out_dir.mkdir(exist_ok=True)
    for layer, mat in report["maps"].items():
        np.save(out_dir / f"layer{layer}.npy", mat)
        plots.save_heatmap(mat, out_dir / f"layer{layer}.png",
                           title=f"layer {layer}", boundary=1 + cfg.prologue_len)
    if cfg.prologue_len > 0:
        grid = cfg.image_size // cfg.patch_size
        heat = diagnostics.prologue_token_heatmaps(report["maps"], cfg.prologue_len,
                                                   cfg.num_visual, grid)
        np.save(out_dir / "prologue_token_heatmaps.npy", heat)
    stats = {
        "config_hash": cfg.config_hash(),
        "prologue_mass": report["prologue_mass"],
        "prologue_mass_per_layer": report["prologue_mass_per_layer"],
        "uniform_baseline": report["uniform_baseline"],
    }
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2))
    print(f"prologue mass {report['prologue_mass']:.4f} vs uniform {report['uniform_baseline']:.4f}")
    print(f"wrote heatmaps to {out_dir}")
    return 0


def cmd_info(args):
    if args.selftest:
        rng = np.random.default_rng(args.seed)
        worst = 0.0
        for _ in range(args.trials):
            joint = diagnostics.random_joint(rng, 8, 8)
            rep = diagnostics.info_exact(joint)
            worst = max(worst, abs(rep.h_joint - (rep.h_zv + rep.h_zp - rep.mi)))
            q, p = diagnostics.random_joint(rng, 6, 6), diagnostics.random_joint(rng, 6, 6)
            dec = diagnostics.ce_decomposition(q, p)
            worst = max(worst, abs(dec["ce"] - (dec["h_q"] + dec["kl"])))
        ok = worst < 1e-9
        print(f"{'PASS' if ok else 'FAIL'}: {args.trials} random joints, worst identity error {worst:.2e}")
        return 0 if ok else 1
    if not args.run:
        raise ConfigError("info needs --run (or --selftest)")
    ckpt = _find_checkpoint(Path(args.run), names=("stage1.pt", "post.pt", "onestage.pt"))
    tokenizer, ar = ckpt.build_tokenizer(), ckpt.build_ar()
    cfg = ckpt.config
    dataset = synth_shapes(cfg.seed, cfg.num_classes, cfg.samples_per_class,
                           cfg.image_size, cfg.patch_size)
    _, held = dataset.split(cfg.holdout_frac, seed=cfg.seed)
    report, details = diagnostics.info_empirical(tokenizer, ar, held, cfg)
    payload = {"config_hash": cfg.config_hash(), "report": vars(report), "details": details}
    out = Path(args.run) / "info.json"
    out.write_text(json.dumps(payload, indent=2))
    print(json.dumps(payload["report"], indent=2))
    print(f"wrote {out}")
    return 0


ABLATION_AXES = {
    "visual_drop": [0.0, 0.5, 1.0],
    "prologue_len": [4, 16, 64],
    "prologue_vocab": [256, 1024, 4096],
    "ste_tau": [0.01, 0.1, 1.0],
    "ar_weight": [1.0, 3.0, 6.0],
}


def cmd_ablate(args):
    base = _build_config(args)
    dataset = _load_dataset(args, base)
    factors = args.factors.split(",") if args.factors else list(ABLATION_AXES)
    root = _run_root(args) / "ablate"
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for factor in factors:
        if factor not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation factor {factor!r}; choose from {list(ABLATION_AXES)}")
        for value in ABLATION_AXES[factor]:
            cfg = base.with_overrides([f"{factor}={value}"]).validate()
            run_dir = root / f"{cfg.config_hash()}-{factor}-{value}"
            run_dir.mkdir(parents=True, exist_ok=True)
            s1 = train_stage1(cfg, dataset, run_dir)
            row = {"factor": factor, "value": value,
                   "recon_l1": s1.final["recon_l1"], "ce_visual_stage1": s1.final["ce_visual"]}
            if not args.stage1_only:
                ckpt = load_checkpoint(run_dir / "stage1.pt")
                s2 = train_stage2(ckpt, cfg, dataset, run_dir)
                row["ce_visual_stage2"] = s2.final["ce_visual"]
            rows.append(row)
            print(" ".join(f"{k}={v}" for k, v in row.items()))
    out_csv = root / "ablate.csv"
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {out_csv}")
    return 0


def cmd_plot(args):
    paths = args.csv.split(",")
    if args.kind == "sweep":
        plots.plot_sweep(paths[0], args.out)
    elif args.kind == "curves":
        plots.plot_curves(paths, args.out)
    elif args.kind == "cfg-tradeoff":
        plots.plot_cfg_tradeoff(paths[0], args.out)
    print(f"wrote {args.out} and its data sidecar")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--config", help="JSON config file (see README schema)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, dotted keys not needed (flat schema)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--device", default=None)
    p.add_argument("--data", help="dataset cache file or image folder")
    p.add_argument("--runs", help="run-root directory (default $PROLOGUE_RUNS or ./runs)")


def _add_cfg_sampling_args(p):
    p.add_argument("--s-pro", type=float, default=0.7)
    p.add_argument("--s-vis", type=float, default=3.75)
    p.add_argument("--cos-p", type=float, default=0.25)
    p.add_argument("--t-pro", type=float, default=1.0)
    p.add_argument("--t-vis", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--no-cfg", action="store_true", help="conditional-only decoding")


def build_parser():
    parser = argparse.ArgumentParser(prog="prologue", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate and cache the toy dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="run a training protocol")
    _add_config_args(p)
    p.add_argument("--mode", choices=["prologue", "prologue_post", "prologue_onestage",
                                      "baseline_2d", "baseline_1d",
                                      "baseline_2d_arreg", "baseline_1d_arreg"])
    p.add_argument("--stage", choices=["1", "2", "all"], default="all")
    p.add_argument("--base-run", help="baseline_2d run dir (required for prologue_post)")
    p.add_argument("--force", action="store_true", help="redo a completed run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate a class grid from a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--classes", default="0,1,2,3")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixed-zp", help="comma-separated prologue ids to inject")
    p.add_argument("--out", required=True)
    _add_cfg_sampling_args(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sweep-lambda", help="AR-weight sweep across routing arms")
    _add_config_args(p)
    p.add_argument("--mode", default=None, help=argparse.SUPPRESS)
    p.add_argument("--grid", default="0.03,0.3,1,3,6")
    p.add_argument("--arms", default="prologue,baseline_2d_arreg")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("sweep-cfg", help="guidance-scale sweep with desk proxies")
    p.add_argument("--run", required=True)
    p.add_argument("--grid", default="1.0,1.5,2.0,2.5,3.0,3.75,5.0")
    p.add_argument("--s-pro", type=float, default=0.7)
    p.add_argument("--cos-p", type=float, default=0.25)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="cfg_tradeoff.png")
    p.set_defaults(func=cmd_sweep_cfg)

    p = sub.add_parser("probe", help="linear probe on frozen token features")
    p.add_argument("--run", required=True)
    p.add_argument("--source", choices=["prologue", "first_k_visual", "both"], default="both")
    p.add_argument("--first-k", type=int, default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("attn", help="attention heatmaps and prologue-mass stats")
    p.add_argument("--run", required=True)
    p.add_argument("--layers", default="0,1")
    p.add_argument("--batch", type=int, default=32)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("info", help="information reports (empirical or self-test)")
    p.add_argument("--run")
    p.add_argument("--selftest", action="store_true")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("ablate", help="one-factor-at-a-time ablation grid")
    _add_config_args(p)
    p.add_argument("--mode", default=None, help=argparse.SUPPRESS)
    p.add_argument("--factors", help=f"subset of {list(ABLATION_AXES)}")
    p.add_argument("--stage1-only", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render figures from metric CSVs")
    p.add_argument("--kind", choices=["sweep", "curves", "cfg-tradeoff"], required=True)
    p.add_argument("--csv", required=True, help="comma-separated CSV paths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: {exc} (diagnostics: {exc.dump_path})", file=sys.stderr)
        return 1
    except Exception as exc:  # surface anything else as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
