"""Command-line entry point.

One binary with subcommands covering the whole pipeline: masking, patch
extraction, embedding, store import, training, the learning-rate grid,
K-fold cross-evaluation, slide scoring, heatmaps and the gradient check.
Every command taking --seed is bit-reproducible from (inputs, config, seed).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .embeddings import (
    EmbeddingStore,
    import_csv,
    load_manifest,
    read_store,
    toy_embed,
    write_store,
)
from .errors import ConfigError, MilattnError
from .evaluation import cross_evaluate, write_crossval_report
from .model import gradient_check, load_checkpoint, save_checkpoint
from .numerics import RngStream, derive_stream
from .scoring import (
    DEFAULT_N_SAMPLES,
    heatmap,
    score_slide,
    write_heatmap_csv,
    write_heatmap_overlay,
    write_score_json,
)
from .slides import (
    AugmentConfig,
    DEFAULT_MICRONS_PER_PIXEL,
    DEFAULT_PATCH_SIZE,
    MIN_TISSUE_FRAC,
    S_MIN,
    V_MAX,
    V_MIN,
    augment_patch,
    extract_patch,
    load_slide,
    save_mask_csv,
    save_mask_png,
    tissue_mask,
)
from .training import (
    DEFAULT_LR_GRID,
    DEFAULT_WD_GRID,
    TrainConfig,
    fixed_bags,
    grid_search,
    run_training,
    write_training_log,
)

log = logging.getLogger("milattn")

GRADCHECK_TOLERANCE = 1e-6

# Built-in config profiles. "paper" mirrors the documented full-scale
# protocol; "desk" finishes in seconds on synthetic data.
PROFILES = {
    "paper": {"bag_size": 100, "bags_per_epoch": 6400, "val_bags": 2500,
              "test_bags": 2500, "batch_size": 64, "epochs": 50,
              "learning_rate": 1e-4, "weight_decay": 1e-5, "seed": 0},
    "desk": {"bag_size": 20, "bags_per_epoch": 256, "val_bags": 128,
             "test_bags": 128, "batch_size": 64, "epochs": 60,
             "learning_rate": 1e-2, "weight_decay": 1e-5, "seed": 7},
}


def _setup_logging() -> None:
    level_name = os.environ.get("MILATTN_LOG", "info").lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        print(f"warning: ignoring invalid MILATTN_LOG={level_name!r} "
              "(expected quiet, info or debug)", file=sys.stderr)
        level_name = "info"
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(levels[level_name])  # effective on repeated invocations too


def _parse_overrides(pairs: list[str]) -> dict:
    """key=value overrides onto TrainConfig fields, typed per field."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    casts = {"epochs": int, "bag_size": int, "bags_per_epoch": int, "val_bags": int,
             "test_bags": int, "batch_size": int, "seed": int,
             "learning_rate": float, "weight_decay": float}
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not of the form key=value")
        key, _, raw = pair.partition("=")
        if key not in types:
            raise ConfigError(f"override names unknown config key '{key}'")
        try:
            out[key] = casts[key](raw)
        except ValueError:
            raise ConfigError(f"override '{pair}': cannot parse value for '{key}'") from None
    return out


def _build_config(args) -> tuple[TrainConfig, dict]:
    """Profile defaults, then the config file, then key=value overrides."""
    data: dict = {}
    if args.profile:
        data.update(PROFILES[args.profile])
    if args.config:
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        data.update(loaded)
    overrides = _parse_overrides(args.overrides)
    data.update(overrides)
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = TrainConfig.from_dict(data, source="config")
    provenance = {
        "profile": args.profile,
        "config_file": str(args.config) if args.config else None,
        "overrides": list(args.overrides),
        "config": cfg.to_dict(),
    }
    return cfg, provenance


def _train_val_pairs(manifest_path):
    records = load_manifest(manifest_path)
    def pairs(split):
        out = []
        for rec in records:
            if rec.split == split:
                if rec.store_path is None:
                    raise ConfigError(
                        f"slide '{rec.slide_id}' has no store_path; run embed first")
                out.append((read_store(rec.store_path, slide_id=rec.slide_id),
                            rec.her2_score))
        return out
    train = pairs("train")
    val = pairs("val")
    if not train:
        raise ConfigError(f"{manifest_path}: no slides with split='train'")
    return records, train, val


def _cmd_mask(args) -> int:
    slide = load_slide(args.image, microns_per_pixel=args.mpp)
    mask = tissue_mask(slide, args.patch_size, stride=args.stride,
                       s_min=args.s_min, v_min=args.v_min, v_max=args.v_max,
                       min_tissue_frac=args.min_tissue_frac)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png = out / f"{slide.slide_id}_mask.png"
    csv_path = out / f"{slide.slide_id}_eligible.csv"
    save_mask_png(mask, png)
    save_mask_csv(mask, csv_path)
    n = int(mask.grid.sum())
    log.info("%s: %d of %d cells eligible", slide.slide_id, n, mask.grid.size)
    print(f"{n} eligible patches -> {csv_path}")
    return 0


def _cmd_patches(args) -> int:
    from PIL import Image

    slide = load_slide(args.image, microns_per_pixel=args.mpp)
    mask = tissue_mask(slide, args.patch_size, stride=args.stride)
    refs = mask.eligible_refs(slide.slide_id)
    if args.limit is not None:
        refs = refs[:args.limit]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = AugmentConfig()
    seed = args.seed if args.seed is not None else 0
    for ref in refs:
        patch = extract_patch(slide, ref)
        if args.augment:
            patch = augment_patch(patch, cfg, RngStream(seed, derive_stream(ref.x, ref.y)))
        Image.fromarray(patch, mode="RGB").save(out / f"patch_x{ref.x}_y{ref.y}.png")
    print(f"wrote {len(refs)} patches to {out}")
    return 0


def _embed_one(image_path, slide_id, patch_size, stride, mpp) -> EmbeddingStore:
    slide = load_slide(image_path, microns_per_pixel=mpp, slide_id=slide_id)
    mask = tissue_mask(slide, patch_size, stride=stride)
    coords = mask.eligible_coords()
    vectors = np.zeros((len(coords), 64), dtype=np.float32)
    for i, (x, y) in enumerate(coords):
        patch = slide.pixels[y:y + patch_size, x:x + patch_size]
        vectors[i] = toy_embed(patch)
    return EmbeddingStore(slide_id, 64, np.asarray(coords, dtype=np.uint32).reshape(-1, 2),
                          vectors)


def _cmd_embed(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    if args.manifest:
        for rec in load_manifest(args.manifest):
            if rec.image_path is None:
                raise ConfigError(f"slide '{rec.slide_id}' has no image_path to embed")
            jobs.append((rec.image_path, rec.slide_id))
    elif args.image:
        sid = args.slide_id or Path(args.image).stem
        jobs.append((args.image, sid))
    else:
        raise ConfigError("embed needs --manifest or --image")
    for image_path, sid in jobs:
        store = _embed_one(image_path, sid, args.patch_size, args.stride, args.mpp)
        path = out / f"{sid}.mile"
        write_store(store, path)
        log.info("embedded %s: %d patches dim %d -> %s", sid, len(store), store.dim, path)
    print(f"wrote {len(jobs)} store(s) to {out}")
    return 0


def _cmd_import(args) -> int:
    store = import_csv(args.csv, args.slide_id)
    write_store(store, args.out)
    print(f"imported {len(store)} embeddings of dim {store.dim} -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg, provenance = _build_config(args)
    _, train_pairs, val_pairs = _train_val_pairs(args.manifest)
    source = val_pairs if val_pairs else train_pairs
    val = fixed_bags([s for s, _ in source], [l for _, l in source],
                     cfg.val_bags, cfg.bag_size, base_seed=cfg.seed)
    result = run_training(train_pairs, val, cfg, attention_dim=args.attention_dim,
                          decoupled=args.decoupled_weight_decay)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {**provenance, "command": "train", "attention_dim": args.attention_dim,
            "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss}
    save_checkpoint(result.params, out / "best.milc", metadata=meta)
    write_training_log(result.history, cfg, out / "log.csv")
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"best epoch {result.best_epoch} val_loss {result.best_val_loss:.6f} -> "
          f"{out / 'best.milc'}")
    return 0


def _parse_grid(raw: str | None, default) -> tuple[float, ...]:
    if raw is None:
        return tuple(default)
    try:
        values = tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"cannot parse grid '{raw}'") from None
    if not values:
        raise ConfigError("grid must not be empty")
    return values


def _cmd_gridsearch(args) -> int:
    cfg, provenance = _build_config(args)
    _, train_pairs, val_pairs = _train_val_pairs(args.manifest)
    source = val_pairs if val_pairs else train_pairs
    val = fixed_bags([s for s, _ in source], [l for _, l in source],
                     cfg.val_bags, cfg.bag_size, base_seed=cfg.seed)
    lr_grid = _parse_grid(args.lr_grid, DEFAULT_LR_GRID)
    wd_grid = _parse_grid(args.wd_grid, DEFAULT_WD_GRID)
    result = grid_search(train_pairs, val, cfg, lr_grid, wd_grid,
                         attention_dim=args.attention_dim)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {**result.to_dict(), "metadata": {**provenance, "command": "gridsearch",
               "attention_dim": args.attention_dim}}
    (out / "grid.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"best pair lr={result.best_lr:g} wd={result.best_wd:g} -> {out / 'grid.json'}")
    return 0


def _cmd_crossval(args) -> int:
    cfg, provenance = _build_config(args)
    records = load_manifest(args.manifest)
    result = cross_evaluate(records, cfg, args.k, attention_dim=args.attention_dim,
                            stratify=args.stratify, out_dir=args.out_dir,
                            decoupled=args.decoupled_weight_decay)
    meta = {**provenance, "command": "crossval", "k": args.k,
            "stratify": args.stratify, "attention_dim": args.attention_dim}
    write_crossval_report(result, cfg, args.out_dir, metadata=meta)
    ci = result.cis["macro_auc"]
    print(f"macro AUC {ci.mean:.4f} +/- {ci.half_width:.4f} over {args.k} folds -> "
          f"{Path(args.out_dir) / 'report.json'}")
    return 0


def _cmd_score(args) -> int:
    params = load_checkpoint(args.checkpoint)
    store = read_store(args.store)
    score = score_slide(params, store, args.n_samples, args.bag_size,
                        args.seed if args.seed is not None else 0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"score_{store.slide_id}.json"
    write_score_json(score, path)
    print(json.dumps(score.to_dict(), sort_keys=True))
    return 0


def _cmd_heatmap(args) -> int:
    params = load_checkpoint(args.checkpoint)
    store = read_store(args.store)
    seed = args.seed if args.seed is not None else 0
    hm = heatmap(params, store, args.n_samples, args.bag_size, seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"heatmap_{store.slide_id}.csv"
    write_heatmap_csv(hm, csv_path, normalize=args.normalize)
    if args.image:
        slide = load_slide(args.image, slide_id=store.slide_id)
        overlay = out / f"heatmap_{store.slide_id}.png"
        write_heatmap_overlay(hm, slide, args.patch_size, overlay)
        log.info("overlay -> %s", overlay)
    print(f"{len(hm.sums)} patch locations -> {csv_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    err = gradient_check(seed=args.seed if args.seed is not None else 0)
    print(f"max relative error {err:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    return 0 if err <= GRADCHECK_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="milattn",
        description="Attention-MIL slide scoring: masking, embedding, training, "
                    "evaluation and heatmap localization.")
    parser.add_argument("--version", action="version", version=f"milattn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, out_dir=True):
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=1,
                       help="cap on worker threads (execution is currently serial)")
        if out_dir:
            p.add_argument("--out-dir", default=".", help="output directory")
        if config:
            p.add_argument("--config", default=None, help="JSON training config")
            p.add_argument("--profile", choices=sorted(PROFILES), default=None,
                           help="built-in config profile")
            p.add_argument("--attention-dim", type=int, default=128)
            p.add_argument("--decoupled-weight-decay", action="store_true",
                           help="apply weight decay directly to weights (AdamW)")
            p.add_argument("overrides", nargs="*", metavar="key=value",
                           help="config overrides")

    p = sub.add_parser("mask", help="compute the HSV tissue mask of a slide")
    p.add_argument("--image", required=True)
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--mpp", type=float, default=DEFAULT_MICRONS_PER_PIXEL)
    p.add_argument("--s-min", type=float, default=S_MIN)
    p.add_argument("--v-min", type=float, default=V_MIN)
    p.add_argument("--v-max", type=float, default=V_MAX)
    p.add_argument("--min-tissue-frac", type=float, default=MIN_TISSUE_FRAC)
    common(p)
    p.set_defaults(func=_cmd_mask)

    p = sub.add_parser("patches", help="extract (optionally augmented) eligible patches")
    p.add_argument("--image", required=True)
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--mpp", type=float, default=DEFAULT_MICRONS_PER_PIXEL)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--limit", type=int, default=None)
    common(p)
    p.set_defaults(func=_cmd_patches)

    p = sub.add_parser("embed", help="embed eligible patches with the built-in embedder")
    p.add_argument("--manifest", default=None)
    p.add_argument("--image", default=None)
    p.add_argument("--slide-id", default=None)
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--mpp", type=float, default=DEFAULT_MICRONS_PER_PIXEL)
    common(p)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("import", help="import externally computed embeddings from CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--slide-id", required=True)
    p.add_argument("--out", required=True, help="output .mile path")
    common(p, out_dir=False)
    p.set_defaults(func=_cmd_import)

    p = sub.add_parser("train", help="train on the manifest's train split")
    p.add_argument("--manifest", required=True)
    common(p, config=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("gridsearch", help="learning-rate x weight-decay grid search")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lr-grid", default=None, help="comma-separated learning rates")
    p.add_argument("--wd-grid", default=None, help="comma-separated weight decays")
    common(p, config=True)
    p.set_defaults(func=_cmd_gridsearch)

    p = sub.add_parser("crossval", help="K-fold cross-evaluation with fixed test bags")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--stratify", action=argparse.BooleanOptionalAction, default=True)
    common(p, config=True)
    p.set_defaults(func=_cmd_crossval)

    p = sub.add_parser("score", help="Monte-Carlo slide-level scoring")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--n-samples", type=int, default=DEFAULT_N_SAMPLES)
    p.add_argument("--bag-size", type=int, default=100)
    common(p)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("heatmap", help="patch-level positivity heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--n-samples", type=int, default=DEFAULT_N_SAMPLES)
    p.add_argument("--bag-size", type=int, default=100)
    p.add_argument("--normalize", action="store_true",
                   help="scale displayed means by bag size")
    p.add_argument("--image", default=None, help="slide PNG for an overlay")
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)
    common(p)
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    common(p, out_dir=False)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def run(argv) -> int:
    """Execute one CLI invocation; returns the process exit code."""
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MilattnError, OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
