"""Command-line front end: ``hebbfw <verb> [flags]``.

Exit codes: 0 success, 2 configuration/argument/schema error, 3 numerical
error, 4 data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .backbones import ConfigError, build_model, config_to_dict
from .checkpoint import (EXTENSION, CheckpointFormatError, CheckpointSchemaError, config_digest,
                         load_checkpoint)
from .config import ConfigSchemaError, ExperimentConfig, apply_overrides, load_config, parse_config
from .data import (CharacterDataset, augment_classes, DataError, IngestionError, load_omniglot, missing_data_message,
                   read_pack, read_pack_header, synth_glyphs, write_pack)
from .fewshot import ClassSplit, EpisodeConfig, split_classes
from .tensor import NumericalError
from .train import MetricsRow, evaluate, train_loop
from .verify import run_gradcheck_suite

log = logging.getLogger("hebbfw")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_DATA = 0, 2, 3, 4
DEFAULT_KS = (1, 3, 5, 10)
OMNIGLOT_PACK = "omniglot.pack"
SYNTH_PACK = "synth.pack"


class UsageError(ValueError):
    """Argument combination that cannot be honoured."""


# ---------------------------------------------------------------------------
# shared helpers


def data_root(explicit: str | None, cfg: ExperimentConfig | None = None) -> Path | None:
    root = explicit or (cfg.data.root if cfg is not None else None) or os.environ.get("HFW_DATA_ROOT")
    return Path(root) if root else None


def _synth_meta(cfg: ExperimentConfig) -> dict:
    d = cfg.data
    return {"n_classes": d.synth_classes, "per_class": d.synth_per_class, "extent": d.synth_extent,
            "seed": d.synth_seed, "jitter": d.synth_jitter, "stroke": d.synth_stroke,
            "rotation_sd": d.synth_rotation_sd}


def _synthesize(meta: dict) -> CharacterDataset:
    return synth_glyphs(meta["n_classes"], meta["per_class"], meta["extent"], meta["seed"], meta["jitter"],
                        meta["stroke"], meta["rotation_sd"])


def load_dataset(cfg: ExperimentConfig, root: str | None = None) -> CharacterDataset:
    base = data_root(root, cfg)
    if cfg.data.source == "synth":
        wanted = _synth_meta(cfg)
        pack = base / SYNTH_PACK if base is not None else None
        if pack is not None and pack.is_file():
            header = read_pack_header(pack)
            if {k: header["meta"].get(k) for k in wanted} == wanted:
                return read_pack(pack)
        return _synthesize(wanted)
    if base is None:
        raise DataError(missing_data_message("<unset: pass --root or set HFW_DATA_ROOT>"))
    pack = base / OMNIGLOT_PACK
    if pack.is_file() and read_pack_header(pack)["source"] == "omniglot":
        return read_pack(pack)
    return load_omniglot(base)


def training_data(cfg: ExperimentConfig, root: str | None = None) -> tuple[CharacterDataset, ClassSplit]:
    """Dataset and class split for training; optional class augmentation
    enlarges only the training partition."""
    dataset = load_dataset(cfg, root)
    split = split_classes(dataset.class_ids, cfg.data.split_ratios, cfg.seed, cfg.data.remainder)
    if cfg.data.class_augment:
        dataset, train_ids = augment_classes(dataset, split.train)
        split = dataclasses.replace(split, train=train_ids)
    return dataset, split


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        changes["threads"] = args.threads
    if getattr(args, "deterministic", None) is not None:
        changes["deterministic"] = args.deterministic
    if getattr(args, "epochs", None) is not None:
        changes["schedule.total_epochs"] = args.epochs
        if args.epochs >= 1:
            changes["schedule.warmup_epochs"] = min(cfg.schedule.warmup_epochs, args.epochs - 1)
    if getattr(args, "out", None) is not None and args.command == "train":
        changes["output_dir"] = args.out
    if getattr(args, "root", None) is not None:
        changes["data.root"] = args.root
    return apply_overrides(cfg, **changes)


def _threads(cfg: ExperimentConfig) -> int:
    # worker parallelism is opt-in and never used in reproducibility mode
    return 1 if cfg.deterministic else cfg.threads


def run_id_for(cfg: ExperimentConfig) -> str:
    return f"{cfg.name}-{config_digest(cfg.model_dump(mode='json'))}"


def write_metrics(rows: list[MetricsRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MetricsRow.columns())
        writer.writeheader()
        for row in rows:
            record = row.to_dict()
            record["eta_values"] = json.dumps(record["eta_values"])
            record["lambda_values"] = json.dumps(record["lambda_values"])
            writer.writerow({k: ("" if v is None else v) for k, v in record.items()})


def _summary_row(run_id, epoch, split, summary, etas, lams, seconds=None) -> MetricsRow:
    return MetricsRow(run_id=run_id, epoch=epoch, split=split, episodes=summary["episodes"],
                      acc_mean=summary["acc_mean"], acc_ci95=summary["acc_ci95"],
                      precision_macro=summary["precision_macro"], recall_macro=summary["recall_macro"],
                      f1_macro=summary["f1_macro"], loss_mean=summary["loss_mean"], lr=None,
                      eta_values=etas, lambda_values=lams, wall_seconds=seconds)


def _checkpoint_config(args, meta: dict) -> ExperimentConfig:
    """Config for an existing checkpoint: the embedded snapshot unless
    --config is given, in which case the model section must agree."""
    if getattr(args, "config", None):
        cfg = resolve_config(args)
        if config_to_dict(cfg.backbone()) != meta.get("model_config"):
            raise CheckpointSchemaError(
                f"config model ({cfg.model.preset}) does not match the checkpoint's model configuration")
        return cfg
    if "experiment" not in meta:
        raise CheckpointSchemaError("checkpoint carries no experiment config; pass --config")
    cfg = parse_config(meta["experiment"])
    changes = {"seed": args.seed, "threads": args.threads, "deterministic": args.deterministic,
               "data.root": args.root}
    return apply_overrides(cfg, **changes)


# ---------------------------------------------------------------------------
# verbs


def cmd_prepare_data(args) -> int:
    cfg = resolve_config(args)
    base = data_root(args.root, cfg) or Path("data")
    if args.synth is not None:
        cfg = apply_overrides(cfg, **{"data.source": "synth", "data.synth_classes": args.synth})
        pack = base / SYNTH_PACK
        wanted = _synth_meta(cfg)
        if pack.is_file() and {k: read_pack_header(pack)["meta"].get(k) for k in wanted} == wanted:
            print(f"cache up to date: {pack}")
            return EXIT_OK
        ds = _synthesize(wanted)
    else:
        pack = base / OMNIGLOT_PACK
        if pack.is_file() and read_pack_header(pack)["source"] == "omniglot":
            print(f"cache up to date: {pack}")
            return EXIT_OK
        ds = load_omniglot(base)
        if ds.skipped:
            print(f"skipped {len(ds.skipped)} unreadable images")
    write_pack(ds, pack)
    split = split_classes(ds.class_ids, cfg.data.split_ratios, cfg.seed, cfg.data.remainder)
    tr, va, te = split.sizes()
    print(f"{len(ds.class_ids)} classes / {ds.n_images} images; split {tr}/{va}/{te}")
    print(f"wrote {pack}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.episodes is not None:
        cfg = apply_overrides(cfg, **{"episodes.train_episodes": args.episodes})
    if args.k is not None:
        cfg = apply_overrides(cfg, **{"episodes.k_shot": _single_k(args.k)})
    dataset, split = training_data(cfg)
    episode_cfg = cfg.episode_config()
    _check_feasible(dataset, episode_cfg.k_shot, episode_cfg.n_query)

    run_id = run_id_for(cfg)
    run_dir = Path(cfg.output_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json() + "\n")
    ckpt = run_dir / f"best{EXTENSION}"
    model = build_model(cfg.backbone(), seed=cfg.seed)
    meta = {"experiment": cfg.model_dump(mode="json")}
    log.info("run %s: %s, %d/%d/%d classes", run_id, cfg.model.preset, *split.sizes())
    result = train_loop(model, dataset, split, episode_cfg, cfg.optim_config(), cfg.schedule_config(),
                        cfg.schedule.patience, cfg.preprocess_config(), cfg.seed, run_id, ckpt, meta,
                        _threads(cfg), record_time=not cfg.deterministic)
    write_metrics(result.history, run_dir / "metrics.csv")
    print(f"best val acc {result.best_val_acc:.4f} at epoch {result.best_epoch}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, meta)
    changes = {}
    if args.k is not None:
        changes["episodes.k_shot"] = _single_k(args.k)
    cfg = apply_overrides(cfg, **changes)
    dataset = load_dataset(cfg)
    split = split_classes(dataset.class_ids, cfg.data.split_ratios, cfg.seed, cfg.data.remainder)
    episode_cfg = cfg.episode_config()
    n = args.episodes if args.episodes is not None else episode_cfg.episodes(args.split)
    _check_feasible(dataset, episode_cfg.k_shot, episode_cfg.n_query)
    summary, _ = evaluate(model, dataset, split.partition(args.split), episode_cfg, n,
                          cfg.preprocess_config(), cfg.seed, args.split, _threads(cfg))
    etas, lams = model.plasticity()
    row = _summary_row(meta.get("run_id", run_id_for(cfg)), meta.get("epoch", -1), args.split, summary, etas, lams)
    print(_format_summary(summary, episode_cfg.k_shot))
    if etas:
        print("eta " + " ".join(f"{v:.4f}" for v in etas))
        print("lambda " + " ".join(f"{v:.4f}" for v in lams))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval-{args.split}-k{episode_cfg.k_shot}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(row.to_dict(), indent=2) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


def ablation_rows(model, dataset, split, cfg: ExperimentConfig, ks, n_episodes: int | None,
                  threads: int = 1) -> list[dict]:
    """One test-split evaluation per K. Query count is capped so that
    K + queries never exceeds the smallest class."""
    rows = []
    smallest = dataset.min_per_class()
    for k in ks:
        if k < 1 or k >= smallest:
            raise UsageError(f"K={k} infeasible: classes hold as few as {smallest} images, "
                             f"leaving no query images")
        n_query = min(cfg.episodes.n_query, smallest - k)
        episode_cfg = EpisodeConfig(cfg.episodes.n_way, k, n_query, cfg.episodes.train_episodes,
                                    cfg.episodes.val_episodes, cfg.episodes.test_episodes)
        n = n_episodes if n_episodes is not None else episode_cfg.test_episodes
        summary, _ = evaluate(model, dataset, split.test, episode_cfg, n, cfg.preprocess_config(),
                              cfg.seed, "test", threads)
        rows.append({"model": cfg.model.preset, "k_shot": k, "n_query": n_query, "episodes": n,
                     "acc_mean": summary["acc_mean"], "acc_ci95": summary["acc_ci95"],
                     "precision_macro": summary["precision_macro"], "recall_macro": summary["recall_macro"],
                     "f1_macro": summary["f1_macro"]})
    return rows


def cmd_ablate(args) -> int:
    if args.checkpoint:
        model, meta = load_checkpoint(args.checkpoint)
        cfg = _checkpoint_config(args, meta)
    else:
        cfg = resolve_config(args)
        model = build_model(cfg.backbone(), seed=cfg.seed)
    ks = _parse_ks(args.k) if args.k is not None else list(DEFAULT_KS)
    dataset = load_dataset(cfg)
    split = split_classes(dataset.class_ids, cfg.data.split_ratios, cfg.seed, cfg.data.remainder)
    rows = ablation_rows(model, dataset, split, cfg, ks, args.episodes, _threads(cfg))
    if args.out:
        out = Path(args.out)
    elif args.checkpoint:
        out = Path(args.checkpoint).with_name("ablation.csv")
    else:
        out = Path(cfg.output_dir) / run_id_for(cfg) / "ablation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    for row in rows:
        ci = "n/a" if row["acc_ci95"] is None else f"{row['acc_ci95']:.4f}"
        print(f"K={row['k_shot']:<3d} acc {row['acc_mean']:.4f} ± {ci}  F1 {row['f1_macro']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failures = 0
    seeds = range(args.seed if args.seed is not None else 0, (args.seed or 0) + args.seeds)
    for seed in seeds:
        for name, report in run_gradcheck_suite(seed, args.tol, args.preset, kernels=not args.episode_only):
            status = "ok  " if report.passed else "FAIL"
            worst = report.worst
            print(f"{status} seed={seed} {name:<28s} max_rel_err={report.max_rel_err:.3e}"
                  + ("" if report.passed else f"  worst={worst.name}"))
            failures += not report.passed
    print("gradcheck passed" if not failures else f"gradcheck FAILED ({failures} checks)")
    return EXIT_OK if not failures else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# argument parsing


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"--k values must be >= 1, got {text!r}")
    return ks


def _single_k(text: str) -> int:
    ks = _parse_ks(text)
    if len(ks) != 1:
        raise UsageError("this command takes a single --k value")
    return ks[0]


def _check_feasible(dataset: CharacterDataset, k: int, n_query: int) -> None:
    if k + n_query > dataset.min_per_class():
        raise DataError(f"episodes need {k + n_query} images per class but some classes hold "
                        f"{dataset.min_per_class()}")


def _format_summary(summary: dict, k: int) -> str:
    ci = "null" if summary["acc_ci95"] is None else f"{summary['acc_ci95']:.4f}"
    return (f"{summary['episodes']} episodes, {k}-shot: acc {summary['acc_mean']:.4f} ± {ci} | "
            f"P {summary['precision_macro']:.4f} R {summary['recall_macro']:.4f} "
            f"F1 {summary['f1_macro']:.4f} | loss {summary['loss_mean']:.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hebbfw", description="Hebbian fast-weight few-shot experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--root", help="data root (falls back to HFW_DATA_ROOT)")
        p.add_argument("--threads", type=int)
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--out")
        if checkpoint:
            p.add_argument("--checkpoint")

    p = sub.add_parser("prepare-data", help="build the packed dataset cache")
    common(p)
    p.add_argument("--synth", type=int, metavar="N", help="generate N synthetic glyph classes instead")

    p = sub.add_parser("train", help="episodic training")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes", type=int, help="training episodes per epoch")
    p.add_argument("--k", help="shots per class")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--k")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("ablate", help="K-shot ablation on the test split")
    common(p, checkpoint=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--k", help="comma-separated K list (default 1,3,5,10)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--preset", default="desk_vit_hebbian")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--episode-only", action="store_true", help="skip the per-kernel checks")
    return parser


COMMANDS = {"prepare-data": cmd_prepare_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.checkpoint:
        parser.error("eval requires --checkpoint")
    try:
        return COMMANDS[args.command](args)
    except (ConfigSchemaError, ConfigError, CheckpointSchemaError, CheckpointFormatError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, IngestionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
