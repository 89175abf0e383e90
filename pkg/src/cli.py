"""CLI entry point for laff: synth, train, eval, weights, select, rank, jaccard, ablate."""

from __future__ import annotations

import argparse
import csv
import json as json_mod
import logging
import os
import sys
from typing import Any

from src import __version__, default_output_dir
from src.errors import ConfigError, LaffError

_log = logging.getLogger("laff.cli")

MODEL_FILE = "model.laff"
TRAIN_LOG = "train_log.jsonl"
DATASET_DIR = "dataset"
LOG_FORMAT = "%(asctime)s [%(name)s] %(levelname)s: %(message)s"


def _setup_logging(level: str, verbose: bool) -> None:
    resolved = logging.DEBUG if verbose else logging.getLevelName(level.upper())
    if not isinstance(resolved, int):
        raise ConfigError(f"unknown log level {level!r}")
    root = logging.getLogger("laff")
    if root.handlers:
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(resolved)


def _resolve(args: argparse.Namespace) -> tuple[dict[str, Any], str]:
    """Resolved config dict and output directory for one invocation."""
    from src import config  # noqa: PLC0415

    sets = list(args.set or [])
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    if args.threads is not None:
        sets.append(f"threads={args.threads}")
    cfg = config.load_config(args.config, sets)
    _setup_logging(cfg["log_level"], args.verbose)
    out = args.out or cfg["paths"]["output_dir"] or default_output_dir()
    cfg["paths"]["output_dir"] = out
    os.makedirs(out, exist_ok=True)
    return cfg, out


def _write_json(path: str, payload: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json_mod.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _dataset_dir(cfg: dict[str, Any], out: str) -> str:
    return cfg["paths"]["dataset"] or os.path.join(out, DATASET_DIR)


def _model_path(cfg: dict[str, Any], out: str) -> str:
    return cfg["paths"]["model"] or os.path.join(out, MODEL_FILE)


def _load_data(cfg: dict[str, Any], out: str):
    from src.dataio import load_dataset  # noqa: PLC0415

    return load_dataset(_dataset_dir(cfg, out))


def _load_trained(cfg: dict[str, Any], out: str):
    from src.model import load_model  # noqa: PLC0415

    path = _model_path(cfg, out)
    if not os.path.isfile(path):
        raise ConfigError(f"model file not found: {path}")
    return load_model(path)


def cmd_version(_args):
    """Print current version."""
    print(f"laff v{__version__}")


def cmd_synth(args):
    """Generate the synthetic dataset under <out>/dataset."""
    from src.config import load_run_config  # noqa: PLC0415
    from src.dataio import write_dataset  # noqa: PLC0415
    from src.synth import synth_generate  # noqa: PLC0415

    cfg, out = _resolve(args)
    run = load_run_config(cfg)
    store, manifest = synth_generate(run.synth)
    target = os.path.join(out, DATASET_DIR)
    write_dataset(target, manifest, store, text=run.synth.text_format)
    print(json_mod.dumps({"dataset": target, "videos": len(manifest.videos),
                          "captions": len(manifest.captions)}))


def cmd_train(args):
    """Train a model and save the best checkpoint plus a JSON-lines log."""
    from src.config import load_run_config  # noqa: PLC0415
    from src.model import FusionModel, param_count, save_model  # noqa: PLC0415
    from src.optim import fit  # noqa: PLC0415

    cfg, out = _resolve(args)
    manifest, store = _load_data(cfg, out)
    run = load_run_config(cfg, manifest)
    assert run.model is not None
    log_path = os.path.join(out, TRAIN_LOG)
    if os.path.exists(log_path):
        os.remove(log_path)
    model = FusionModel(run.model, seed=run.seed)
    _log.info("Model %r with %d parameters", model, param_count(run.model))
    model, log = fit(model, manifest, store, run.train, log_path, threads=run.threads)
    model_path = _model_path(cfg, out)
    os.makedirs(os.path.dirname(os.path.abspath(model_path)), exist_ok=True)
    save_model(model, model_path)
    _write_json(os.path.join(out, "config.json"), cfg)
    best_epoch = log[-1]["best_epoch"] if log else 0
    print(json_mod.dumps({"model": model_path, "epochs": len(log), "best_epoch": best_epoch}))


def cmd_eval(args):
    """Evaluate a trained model on one split and write the report."""
    from src.evalkit import evaluate, write_ranking_tsv  # noqa: PLC0415

    cfg, out = _resolve(args)
    opts = cfg["eval"]
    manifest, store = _load_data(cfg, out)
    model = _load_trained(cfg, out)
    report = evaluate(
        model,
        manifest,
        store,
        opts["split"],
        threads=cfg["threads"],
        keep_ranking=opts["save_ranking"],
        jaccard_k=opts["jaccard_k"],
        with_attention=True,
    )
    _write_json(os.path.join(out, f"eval_{opts['split']}.json"), report.to_dict())
    if report.ranked is not None:
        write_ranking_tsv(
            os.path.join(out, f"ranking_{opts['split']}.tsv"), report.ranked, opts["top"] or None
        )
    print(json_mod.dumps(report.to_dict(), sort_keys=True))


def cmd_weights(args):
    """Average attention weight per feature, as JSON and CSV."""
    from src.evalkit import dataset_attention  # noqa: PLC0415

    cfg, out = _resolve(args)
    opts = cfg["weights"]
    manifest, store = _load_data(cfg, out)
    model = _load_trained(cfg, out)
    weights = dataset_attention(model, manifest, store, opts["split"])
    _write_json(os.path.join(out, "weights.json"), weights)
    if opts["csv"]:
        with open(os.path.join(out, "weights.csv"), "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(("modality", "feature", "weight"))
            for side, values in weights.items():
                for name, weight in values.items():
                    writer.writerow((side, name, f"{weight:.6f}"))
    print(json_mod.dumps(weights, sort_keys=True))


def cmd_select(args):
    """Write a config that keeps only the top-weighted features."""
    from src.config import reduced_config  # noqa: PLC0415
    from src.evalkit import dataset_attention, select_features  # noqa: PLC0415

    if args.top_video is not None:
        args.set = [*(args.set or []), f"select.top_video={args.top_video}"]
    if args.top_text is not None:
        args.set = [*(args.set or []), f"select.top_text={args.top_text}"]
    cfg, out = _resolve(args)
    manifest, store = _load_data(cfg, out)
    model = _load_trained(cfg, out)
    weights = dataset_attention(model, manifest, store, cfg["weights"]["split"])
    reduced = select_features(
        weights, model.config, cfg["select"]["top_video"], cfg["select"]["top_text"]
    )
    selected = reduced_config(cfg, reduced)
    # The retrained model goes to its own file; the dataset stays where it is.
    selected["paths"]["model"] = ""
    selected["paths"]["dataset"] = os.path.abspath(_dataset_dir(cfg, out))
    path = os.path.join(out, "selected_config.json")
    _write_json(path, selected)
    print(json_mod.dumps({"config": path, "video_features": selected["model"]["video_features"],
                          "text_features": selected["model"]["text_features"]}))


def _query_store(directory: str, model):
    from src.blocks import VIDEO_LEVEL  # noqa: PLC0415
    from src.dataio import FeatureStore, load_features  # noqa: PLC0415

    store = FeatureStore()
    for feat in model.config.text_features:
        candidates = [os.path.join(directory, f"{feat.name}{ext}") for ext in (".lftr", ".txt")]
        path = next((p for p in candidates if os.path.isfile(p)), None)
        if path is None:
            raise ConfigError(f"no query file for text feature {feat.name!r} in {directory}")
        store[feat.name] = load_features(path, feat.name, feat.dim, VIDEO_LEVEL)
    ids = list(next(iter(store.values())).vectors)
    return store, ids


def cmd_rank(args):
    """Rank the videos of a split for every query and write a TSV."""
    from src.evalkit import build_index, encode_queries, rank, write_ranking_tsv  # noqa: PLC0415

    if args.top is not None:
        args.set = [*(args.set or []), f"eval.top={args.top}"]
    cfg, out = _resolve(args)
    split = cfg["eval"]["split"]
    manifest, store = _load_data(cfg, out)
    if split not in manifest.splits:
        raise ConfigError(f"unknown split {split!r}")
    model = _load_trained(cfg, out)
    if cfg["paths"]["queries"]:
        query_store, query_ids = _query_store(cfg["paths"]["queries"], model)
    else:
        query_store, query_ids = store, [c.caption_id for c in manifest.split_captions(split)]
    index = build_index(model, store, manifest.splits[split])
    ranked = rank(
        encode_queries(model, query_store, query_ids), index, query_ids, threads=cfg["threads"]
    )
    path = os.path.join(out, "ranking.tsv")
    write_ranking_tsv(path, ranked, cfg["eval"]["top"] or None)
    print(json_mod.dumps({"ranking": path, "queries": len(ranked)}))


def cmd_jaccard(args):
    """Inter-space Jaccard matrix of per-space top-k results."""
    from src.evalkit import build_index, encode_queries, jaccard_interspace  # noqa: PLC0415

    cfg, out = _resolve(args)
    split = cfg["eval"]["split"]
    manifest, store = _load_data(cfg, out)
    model = _load_trained(cfg, out)
    captions = [c.caption_id for c in manifest.split_captions(split)]
    matrix = jaccard_interspace(
        encode_queries(model, store, captions),
        build_index(model, store, manifest.splits[split]),
        cfg["eval"]["jaccard_k"],
    )
    _write_json(os.path.join(out, "jaccard.json"), matrix)
    print(json_mod.dumps(matrix))


def cmd_ablate(args):
    """Train and evaluate one sweep of variants."""
    from src.ablation import ablation_variants, run_ablation  # noqa: PLC0415
    from src.config import load_run_config  # noqa: PLC0415

    cfg, out = _resolve(args)
    manifest, store = _load_data(cfg, out)
    run = load_run_config(cfg, manifest)
    assert run.model is not None
    kind = cfg["ablate"]["kind"]
    variants = ablation_variants(kind, run.model, run.train, cfg["ablate"]["values"])
    rows = run_ablation(
        variants,
        manifest,
        store,
        split=cfg["eval"]["split"],
        seed=run.seed,
        threads=run.threads,
        log_dir=out,
    )
    _write_json(os.path.join(out, f"ablation_{kind}.json"), rows)
    for row in rows:
        print(
            f"{row['label']:<24} mAP {row['report']['map']:.4f} "
            f"R@1 {row['report']['r1']:.3f} ({row['relative_map']:+.1%})"
        )


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="Output directory (default: ./runs)")
    common.add_argument("--seed", type=int, help="Seed for every random stream")
    common.add_argument("--threads", type=int, help="Worker threads for ranking")
    common.add_argument(
        "--set", action="append", metavar="K=V", help="Override a config key (repeatable)"
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return common


def main():
    """CLI entry point."""
    parser = argparse.ArgumentParser(
        prog="laff",
        description="LAFF: text-to-video retrieval with lightweight attentional feature fusion",
    )
    subparsers = parser.add_subparsers(dest="command")
    common = _common_parser()

    subparsers.add_parser("version", help="Show current version")
    subparsers.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    subparsers.add_parser("train", parents=[common], help="Train a fusion model")
    subparsers.add_parser("eval", parents=[common], help="Evaluate a trained model")
    subparsers.add_parser("weights", parents=[common], help="Average attention weights")

    select_parser = subparsers.add_parser(
        "select", parents=[common], help="Write a config with the top-weighted features"
    )
    select_parser.add_argument("--top-video", type=int, help="Video features to keep")
    select_parser.add_argument("--top-text", type=int, help="Text features to keep")

    rank_parser = subparsers.add_parser("rank", parents=[common], help="Rank videos for queries")
    rank_parser.add_argument("--top", type=int, help="Rows per query in the TSV (default: all)")

    subparsers.add_parser("jaccard", parents=[common], help="Inter-space Jaccard diagnostics")
    subparsers.add_parser("ablate", parents=[common], help="Run an ablation sweep")

    args = parser.parse_args()

    if args.command is None:
        parser.print_help()
        sys.exit(0)

    commands = {
        "version": cmd_version,
        "synth": cmd_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "weights": cmd_weights,
        "select": cmd_select,
        "rank": cmd_rank,
        "jaccard": cmd_jaccard,
        "ablate": cmd_ablate,
    }
    try:
        commands[args.command](args)
    except LaffError as e:
        print(f"laff: error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except Exception:
        _log.exception("Unexpected failure in %s", args.command)
        sys.exit(3)


if __name__ == "__main__":
    main()
