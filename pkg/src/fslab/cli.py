"""``fslab`` command-line interface.

Exit codes: 0 success, 1 configuration error, 2 data or I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from fslab.checkpoint import CheckpointError
from fslab.config import ExperimentConfig
from fslab.data import (
    AugmentLevel,
    DataError,
    SamplerConfigError,
    augment_pixels,
    build_pools,
    heldout_images,
    labels_of,
    load_manifest,
    sample_episode,
    stack_pixels,
    synth_dataset,
    write_dataset,
)
from fslab.encoder import ConfigError, EncoderConfig, EncoderWeights, embed_arrays, init_encoder
from fslab.lora import LoraConfig, last_blocks_targets
from fslab.objectives import DegenerateBatchError
from fslab.priors import EmbeddingFileError, TextPriorProvider, read_embeddings, write_embeddings
from fslab.rng import stream
from fslab.schedules import ScheduleError
from fslab.strategies import (
    NumericFailure,
    UndefinedRatioError,
    compactness_report,
    default_run_config,
    load_bundle,
    pretrain_encoder,
    run_linear_probe,
    run_lora,
    run_prototype_strategy,
    save_bundle,
)
from fslab.tensor import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

EPOCH_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc", "lr", "tau", "lam", "grad_norm")
STEP_COLUMNS = ("step", "epoch", "loss", "ce", "supcon", "lr", "tau", "lam", "grad_norm")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def load_dataset(cfg):
    if cfg["data.source"] == "manifest":
        if not cfg["data.manifest"]:
            raise ConfigError("data.source = manifest needs data.manifest")
        return load_manifest(cfg["data.manifest"], cfg["data.image_size"])
    return synth_dataset(cfg["data.num_classes"], cfg["data.per_class"], cfg["data.image_size"], cfg["data.seed"])


def encoder_config(cfg):
    return EncoderConfig(
        image_size=cfg["data.image_size"],
        patch_size=cfg["encoder.patch_size"],
        embed_dim=cfg["encoder.embed_dim"],
        num_blocks=cfg["encoder.num_blocks"],
        num_heads=cfg["encoder.num_heads"],
        output_dim=cfg["encoder.output_dim"],
        seed=cfg["encoder.seed"],
    ).validate()


def load_encoder(cfg):
    if cfg["encoder.checkpoint"]:
        weights = EncoderWeights.load(cfg["encoder.checkpoint"])
        if weights.config.image_size != cfg["data.image_size"]:
            raise CheckpointError(
                f"encoder expects {weights.config.image_size}px images, dataset is {cfg['data.image_size']}px"
            )
        return weights
    weights = init_encoder(encoder_config(cfg))
    if cfg["encoder.pretrain_steps"] > 0:
        pretrain_encoder(weights, cfg["encoder.pretrain_steps"], seed=cfg["encoder.seed"])
    return weights


def run_config(cfg, seed, augment, num_blocks, num_classes):
    """TrainRunConfig from per-shot defaults overridden by explicit keys."""
    strategy, n = cfg["strategy"], cfg["n_shot"]
    rc = default_run_config(strategy, n, num_blocks, num_classes, seed)
    over = {}
    for key in ("epochs", "batch_size", "classes_per_batch", "instances_per_class", "label_smoothing",
                "dropout", "weight_decay", "projection_dim", "lr_base"):
        if cfg[key] != "auto":
            over[key] = cfg[key]
    if cfg["sampler"] != "auto":
        over["sampler"] = cfg["sampler"]
    if augment != "auto":
        over["augment"] = AugmentLevel.parse(augment)
    for key in ("lr_final", "warmup_fraction", "tau_start", "tau_end", "lambda_start", "lambda_end",
                "lambda_warmup_fraction", "lambda_shape", "head_feature", "projection_hidden",
                "supcon_include_self", "eval_every"):
        over[key] = cfg[key]
    if rc.lora is not None:
        lc = rc.lora
        depth = cfg.get("lora.depth")
        targets = lc.targets
        if cfg["lora.targets"] != "auto":
            targets = tuple(t.strip() for t in cfg["lora.targets"].split(",") if t.strip())
        elif depth is not None:
            targets = last_blocks_targets(num_blocks, depth)
        over["lora"] = LoraConfig(
            rank=cfg.get("lora.rank", lc.rank),
            alpha=cfg.get("lora.alpha", lc.alpha),
            targets=targets,
            dropout=cfg.get("lora.dropout", lc.dropout),
            init_seed=seed,
        )
    return replace(rc, **over).validate()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_rows(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def _map(fn, cells, jobs):
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, cells))
    return [fn(c) for c in cells]


def _prepare_out(out):
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _prototype_cell(args):
    cfg, seed, n_shot = args
    ds = load_dataset(cfg)
    train_pool, test_pool = build_pools(ds, cfg["data.pool_per_class"])
    weights = load_encoder(cfg)
    provider = TextPriorProvider.none()
    if cfg["priors.mode"] == "file":
        provider = TextPriorProvider.from_file(cfg["priors.path"], list(range(ds.num_classes)), weights.config.output_dim)
    elif cfg["priors.mode"] == "heldout-proxy":
        held = heldout_images(ds, cfg["data.pool_per_class"])
        if not held:
            raise DataError("heldout-proxy priors need train images beyond data.pool_per_class")
        provider = TextPriorProvider.heldout_proxy(embed_arrays(weights, None, stack_pixels(held)), labels_of(held))
    episode = sample_episode(train_pool, test_pool, n_shot, seed)
    cache = {}
    rows = []
    for alpha in cfg["prototype.alphas"]:
        if alpha > 0 and provider.mode == "none":
            raise ConfigError("prototype.alphas > 0 need priors.mode = file or heldout-proxy")
        rec = run_prototype_strategy(episode, provider, alpha, weights, cache)
        rows.append({"seed": seed, "n_shot": n_shot, "alpha": alpha, "accuracy": rec.final_accuracy})
    return rows


def cmd_prototype(cfg, out, jobs=1):
    _prepare_out(out)
    cfg.save(os.path.join(out, "config.txt"))
    cells = [(cfg, s, n) for n in cfg["prototype.shots"] for s in cfg["seeds"]]
    runs = [r for rows in _map(_prototype_cell, cells, jobs) for r in rows]
    write_rows(os.path.join(out, "prototype_runs.csv"), ("seed", "n_shot", "alpha", "accuracy"), runs)
    table = []
    for n in cfg["prototype.shots"]:
        for a in cfg["prototype.alphas"]:
            accs = [r["accuracy"] for r in runs if r["n_shot"] == n and r["alpha"] == a]
            mean, std = _mean_std(accs)
            table.append({"n_shot": n, "alpha": a, "accuracy": mean, "std": std})
    write_rows(os.path.join(out, "prototype_sweep.csv"), ("n_shot", "alpha", "accuracy"), table)
    return EXIT_OK


def _train_cell(args):
    cfg, seed, augment, out = args
    ds = load_dataset(cfg)
    train_pool, test_pool = build_pools(ds, cfg["data.pool_per_class"])
    weights = load_encoder(cfg)
    rc = run_config(cfg, seed, augment, weights.config.num_blocks, ds.num_classes)
    episode = sample_episode(train_pool, test_pool, rc.n_shot, seed)
    rec = run_linear_probe(episode, rc, weights) if rc.strategy == "linear_probe" else run_lora(episode, rc, weights)
    tag = f"{rc.strategy}_{rc.n_shot}shot_{rc.augment.value}_seed{seed}"
    write_rows(os.path.join(out, f"metrics_{tag}.csv"), EPOCH_COLUMNS, rec.epochs)
    write_rows(os.path.join(out, f"steps_{tag}.csv"), STEP_COLUMNS, rec.steps)
    save_bundle(rec.bundle, os.path.join(out, f"checkpoint_{tag}"))
    return {
        "tag": tag,
        "seed": seed,
        "augment": rc.augment.value,
        "strategy": rc.strategy,
        "n_shot": rc.n_shot,
        "initial_accuracy": rec.initial_accuracy,
        "final_accuracy": rec.final_accuracy,
        "trainable_parameters": rec.trainable_parameters,
        "encoder_checksum": rec.encoder_checksum_after,
        "wall_time_s": rec.wall_time,
        **{k: v for k, v in rec.extra.items() if isinstance(v, (int, float, str))},
    }


def cmd_train(cfg, out, jobs=1):
    _prepare_out(out)
    cfg.save(os.path.join(out, "config.txt"))
    # validate the full grid before any training starts
    ds_classes = cfg["data.num_classes"] if cfg["data.source"] == "synth" else None
    levels = []
    for aug in cfg["augment"]:
        level = run_config(cfg, cfg["seeds"][0], aug, cfg["encoder.num_blocks"], ds_classes).augment.value
        if level not in levels:  # "auto" may resolve to a level already listed
            levels.append(level)
    cells = [(cfg, s, a, out) for a in levels for s in cfg["seeds"]]
    runs = _map(_train_cell, cells, jobs)
    groups = {}
    for r in runs:
        groups.setdefault(r["augment"], []).append(r["final_accuracy"])
    summary = {
        "runs": runs,
        "by_augment": {
            a: dict(zip(("mean", "std"), _mean_std(v)), seeds=len(v)) for a, v in groups.items()
        },
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_analyze(cfg, out, checkpoint=None):
    _prepare_out(out)
    cfg.save(os.path.join(out, "config.txt"))
    ds = load_dataset(cfg)
    _, test_pool = build_pools(ds, cfg["data.pool_per_class"])
    if checkpoint:
        bundle = load_bundle(checkpoint)
        weights, adapters = bundle.weights, bundle.adapters
        if weights.config.image_size != ds.image_size:
            raise CheckpointError(f"checkpoint expects {weights.config.image_size}px images, dataset is {ds.image_size}px")
    else:
        weights, adapters = load_encoder(cfg), None
    k = cfg["analyze.subsample_classes"]
    classes = sorted({it.class_id for it in test_pool})
    if 0 < k < len(classes):
        rng = stream(cfg["analyze.seed"], "analyze", "classes")
        classes = sorted(int(c) for c in rng.choice(classes, size=k, replace=False))
    items = [it for it in test_pool if it.class_id in set(classes)]
    level = AugmentLevel.parse(cfg["analyze.augment"])
    rng = stream(cfg["analyze.seed"], "analyze", "augment")
    pix = np.stack([augment_pixels(it.pixels, level, rng) for it in items])
    emb = embed_arrays(weights, adapters, pix)
    labels = labels_of(items)
    rep = compactness_report(emb, labels)
    proj = rep.pop("projection_2d")
    rep.update(augment=level.value, adapted=adapters is not None, classes=classes, checkpoint=checkpoint or "")
    with open(os.path.join(out, "compactness.json"), "w", encoding="utf-8") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
    write_rows(os.path.join(out, "projection.csv"), ("x", "y", "label"),
               [{"x": float(x), "y": float(y), "label": int(c)} for (x, y), c in zip(proj, labels)])
    return EXIT_OK


def cmd_export_embeddings(cfg, out_path, checkpoint=None):
    """One row per train-split image: ``template_id`` is the image's index within its class."""
    ds = load_dataset(cfg)
    if checkpoint:
        bundle = load_bundle(checkpoint)
        weights, adapters = bundle.weights, bundle.adapters
    else:
        weights, adapters = load_encoder(cfg), None
    items = ds.train
    emb = embed_arrays(weights, adapters, stack_pixels(items))
    counters = {}
    rows = []
    for it, e in zip(items, emb):
        tid = counters.get(it.class_id, 0)
        counters[it.class_id] = tid + 1
        rows.append((it.class_id, tid, e))
    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_embeddings(out_path, rows, weights.config.output_dim)
    return EXIT_OK


def cmd_import_text_priors(cfg, path, out=None):
    ds_classes = list(range(load_dataset(cfg).num_classes))
    provider = TextPriorProvider.from_file(path, ds_classes, cfg["encoder.output_dim"])
    counts = {c: len(provider.vectors[c]) for c in ds_classes}
    print(f"{path}: D={provider.dim}, {len(counts)} classes, {sum(counts.values())} template rows")
    if out:
        _prepare_out(out)
        dim, vecs = read_embeddings(path)
        rows = [(c, t, v) for c in sorted(vecs) for t, v in enumerate(vecs[c])]
        write_embeddings(os.path.join(out, "priors.emb"), rows, dim)
    return EXIT_OK


def cmd_synth(cfg, out):
    ds = synth_dataset(cfg["data.num_classes"], cfg["data.per_class"], cfg["data.image_size"], cfg["data.seed"])
    write_dataset(ds, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="fslab", description="Few-shot adaptation lab on a miniature frozen encoder.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
        return p

    common(sub.add_parser("prototype", help="training-free prototype sweep over shots x fusion weights"))
    common(sub.add_parser("train", help="linear probe or LoRA training runs"))
    p = common(sub.add_parser("analyze", help="compactness ratio and 2-D projection"))
    p.add_argument("--checkpoint", help="directory written by 'train'")
    p = common(sub.add_parser("export-emb", help="write fslab-emb v1 embeddings"))
    p.add_argument("--checkpoint", help="directory written by 'train'")
    p = common(sub.add_parser("import-priors", help="validate an fslab-emb v1 file"), out_required=False)
    p.add_argument("path")
    common(sub.add_parser("synth", help="write the synthetic dataset as manifest + PPM files"))
    return parser


def _load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.set("seeds", str(args.seed))
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "prototype":
            return cmd_prototype(cfg, args.out, args.jobs)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.jobs)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.out, args.checkpoint)
        if args.command == "export-emb":
            return cmd_export_embeddings(cfg, args.out, args.checkpoint)
        if args.command == "import-priors":
            return cmd_import_text_priors(cfg, args.path, args.out)
        return cmd_synth(cfg, args.out)
    except (ConfigError, SamplerConfigError, ScheduleError) as exc:
        print(f"fslab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, NumericError, FloatingPointError) as exc:
        print(f"fslab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, EmbeddingFileError, CheckpointError, UndefinedRatioError, DegenerateBatchError, OSError) as exc:
        print(f"fslab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
