"""Command-line entry point.

One verb per capability: synth, train, eval, ablate, embed, index-build,
index-query, pipeline-run, mine-triplets, params, gradcheck. Every
subcommand accepts --json for machine-readable output, --seed (env
MILDNET_SEED as fallback, then 0), --threads (default 1 so outputs are
bitwise reproducible), and --config pointing at a plain ``key = value``
file. Command-line flags beat config-file values; unknown config keys
are rejected with the offending line number.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import checks
from .ann import IndexConfig, build_index, load_index, query_knn, save_index
from .binio import FormatError
from .dataset import ManifestError, load_manifest, save_manifest, split_records
from .features import FUSED_DIM, EmbeddingStore, FusionWeights
from .images import AugmentSpec
from .losses import LOSS_KINDS, LossConfig
from .model import (
    PRESETS,
    ModelConfig,
    build_network,
    concat_width,
    count_params,
    iter_ablation_rows,
    load_weights,
    parse_tap_labels,
    save_weights,
)
from .ops import DimensionError, ParameterError
from .pipeline import (
    CatalogError,
    MiningBounds,
    PipelineConfig,
    load_catalog,
    load_results,
    load_state,
    mine_triplets,
    run_batch,
    save_results,
    save_state,
)
from .synth import synth_generate
from .train import (
    OPTIMIZER_KINDS,
    OptimizerState,
    TrainingDiverged,
    TrainRunConfig,
    embed_images,
    evaluate,
    load_checkpoint,
    train_run,
)


class UsageError(Exception):
    """Bad flags or config file contents; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_config_file(path, schema: dict) -> dict:
    """Read ``key = value`` lines; every key must exist in the schema."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in schema:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        conv = schema[key][0]
        try:
            values[key] = conv(value)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


_SCHEMAS: dict[str, dict] = {}
_HANDLERS: dict[str, object] = {}


def _opt(sub, command: str, name: str, conv, default, help_text: str, metavar=None):
    flag = "--" + name.replace("_", "-")
    if conv is bool:
        sub.add_argument(
            flag, dest=name, action="store_const", const=True, default=None,
            help=f"{help_text} (default: {default})",
        )
        _SCHEMAS[command][name] = (_parse_bool, default)
    else:
        sub.add_argument(
            flag, dest=name, type=conv, default=None, metavar=metavar,
            help=f"{help_text} (default: {default})",
        )
        _SCHEMAS[command][name] = (conv, default)


def _merge(args, command: str) -> dict:
    schema = _SCHEMAS[command]
    file_values = _parse_config_file(args.config, schema) if args.config else {}
    merged = {}
    for name, (_, default) in schema.items():
        cli_value = getattr(args, name)
        if cli_value is not None:
            merged[name] = cli_value
        elif name in file_values:
            merged[name] = file_values[name]
        else:
            merged[name] = default
    return merged


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MILDNET_SEED")
    if env is not None and env != "":
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MILDNET_SEED must be an integer, got {env!r}") from None
    return 0


def _emit(as_json: bool, result: dict, lines: list[str]) -> None:
    if as_json:
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _model_config(merged: dict) -> ModelConfig:
    preset = merged["preset"]
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    config = PRESETS[preset]()
    if merged.get("taps"):
        config = dataclasses.replace(config, skip_taps=parse_tap_labels(merged["taps"]))
    return config


def _fusion_weights(merged: dict) -> FusionWeights:
    return FusionWeights(
        structure=merged["w_structure"],
        pattern=merged["w_pattern"],
        color=merged["w_color"],
    )


def _workdir_paths(workdir: str) -> tuple[str, str, str]:
    return (
        os.path.join(workdir, "cache.mlde"),
        os.path.join(workdir, "state.json"),
        os.path.join(workdir, "results.jsonl"),
    )


# ---------------------------------------------------------------- commands


def _cmd_params(args, merged, seed) -> int:
    taps = parse_tap_labels(merged["taps"])
    config = ModelConfig(skip_taps=taps)
    n = count_params(config)
    result = {
        "taps": list(taps),
        "concat_width": concat_width(config),
        "params": n,
        "params_millions": round(n / 1e6, 2),
    }
    _emit(args.json, result, [str(n)])
    return 0


def _cmd_ablate(args, merged, seed) -> int:
    rows = []
    lines = [f"{'row':<14} {'taps':<12} {'concat':>6} {'params':>12} {'millions':>9}"]
    for label, taps in iter_ablation_rows():
        config = ModelConfig(skip_taps=taps)
        n = count_params(config)
        rows.append(
            {
                "row": label,
                "taps": list(taps),
                "concat_width": concat_width(config),
                "params": n,
                "params_millions": round(n / 1e6, 2),
            }
        )
        lines.append(
            f"{label:<14} {len(taps):<12} {concat_width(config):>6} {n:>12} {n / 1e6:>9.2f}"
        )
    _emit(args.json, {"rows": rows}, lines)
    return 0


def _cmd_gradcheck(args, merged, seed) -> int:
    config = _model_config(merged)
    tol = merged["tol"]
    worst = 0.0
    detail: dict[str, float] = {}
    for s in range(seed, seed + merged["seeds"]):
        for name, err in checks.op_gradchecks(s).items():
            detail[name] = max(detail.get(name, 0.0), err)
        for name, err in checks.loss_gradchecks(s).items():
            detail[name] = max(detail.get(name, 0.0), err)
        detail["network"] = max(
            detail.get("network", 0.0),
            checks.network_gradcheck(config, s, samples_per_tensor=merged["samples"]),
        )
    worst = max(detail.values())
    result = {"max_rel_error": worst, "tolerance": tol, "detail": detail, "ok": worst <= tol}
    lines = [f"{name:<20} {err:.3e}" for name, err in sorted(detail.items())]
    lines.append(f"max relative error: {worst:.3e} (tolerance {tol:g})")
    _emit(args.json, result, lines)
    return 0 if worst <= tol else 2


def _cmd_synth(args, merged, seed) -> int:
    rng = np.random.default_rng(seed)
    records = synth_generate(
        merged["out_dir"],
        merged["n"],
        merged["classes"],
        merged["image_size"],
        rng,
        in_class_fraction=merged["in_class_fraction"],
        wild_fraction=merged["wild_fraction"],
    )
    manifest = os.path.join(merged["out_dir"], "manifest.jsonl")
    result = {
        "manifest": manifest,
        "triplets": len(records),
        "wild": sum(1 for r in records if r.q_source == "wild"),
        "in_class": sum(1 for r in records if r.in_class),
    }
    _emit(args.json, result, [f"wrote {len(records)} triplets to {manifest}"])
    return 0


def _build_run_config(merged, seed, threads) -> TrainRunConfig:
    return TrainRunConfig(
        epochs=merged["epochs"],
        batch_size=merged["batch_size"],
        loss=LossConfig(kind=merged["loss"], margin=merged["margin"]),
        seed=seed,
        augment=AugmentSpec() if merged["augment"] else None,
        checkpoint_dir=merged["checkpoint_dir"],
        log_path=merged["log"],
        threads=threads,
    )


def _cmd_train(args, merged, seed) -> int:
    if merged["loss"] not in LOSS_KINDS:
        raise UsageError(f"loss must be one of {LOSS_KINDS}, got {merged['loss']!r}")
    if merged["optimizer"] not in OPTIMIZER_KINDS:
        raise UsageError(
            f"optimizer must be one of {OPTIMIZER_KINDS}, got {merged['optimizer']!r}"
        )
    config = _model_config(merged)
    records = split_records(load_manifest(args.manifest), merged["split"])
    if not records:
        raise CatalogError(f"no {merged['split']} records in {args.manifest}")

    start_epoch = 0
    if merged["resume"]:
        weights, opt_state, start_epoch, seed = load_checkpoint(merged["resume"], config)
    else:
        weights = build_network(config, init_seed=seed)
        opt_state = OptimizerState.for_weights(
            weights,
            kind=merged["optimizer"],
            lr=merged["lr"],
            momentum=merged["momentum"],
            rms_decay=merged["rms_decay"],
            rms_epsilon=merged["rms_epsilon"],
        )
    run_cfg = _build_run_config(merged, seed, args.threads)
    opt_state, history = train_run(
        weights, config, records, run_cfg, opt_state, start_epoch=start_epoch
    )
    save_weights(weights, config, merged["out"])
    result = {
        "weights": merged["out"],
        "epochs_run": len(history),
        "history": history,
    }
    lines = [
        f"epoch {h['epoch']}: loss {h['loss']:.6f} accuracy {h['triplet_accuracy']:.4f}"
        for h in history
    ]
    lines.append(f"saved weights to {merged['out']}")
    _emit(args.json, result, lines)
    return 0


def _cmd_eval(args, merged, seed) -> int:
    config = _model_config(merged)
    records = load_manifest(args.manifest)
    if merged["split"] != "all":
        records = split_records(records, merged["split"])
    if not records:
        raise CatalogError(f"no {merged['split']} records in {args.manifest}")
    weights, _ = load_weights(merged["weights"], config)
    metrics = evaluate(
        weights, config, records, LossConfig(kind=merged["loss"], margin=merged["margin"])
    )
    _emit(
        args.json,
        metrics,
        [f"loss {metrics['loss']:.6f}", f"triplet_accuracy {metrics['triplet_accuracy']:.4f}"],
    )
    return 0


def _cmd_embed(args, merged, seed) -> int:
    config = _model_config(merged)
    weights, _ = load_weights(merged["weights"], config)
    embs = embed_images(weights, config, args.images)
    if merged["store"]:
        with EmbeddingStore(merged["store"], dim=config.embedding_dim) as store:
            for emb in embs:
                store.put(emb.item_id, emb.vector)
    result = {
        "count": len(embs),
        "dim": config.embedding_dim,
        "store": merged["store"],
        "embeddings": [
            {"id": e.item_id, "vector": [float(v) for v in e.vector]} for e in embs
        ],
    }
    lines = [f"{e.item_id} dim={len(e.vector)}" for e in embs]
    if merged["store"]:
        lines.append(f"appended {len(embs)} vectors to {merged['store']}")
    _emit(args.json, result, lines)
    return 0


def _cmd_index_build(args, merged, seed) -> int:
    with EmbeddingStore(merged["store"]) as store:
        items = [(item_id, store.get(item_id)) for item_id in sorted(store.ids())]
    forest = build_index(
        items,
        IndexConfig(n_trees=merged["trees"], leaf_capacity=merged["leaf_capacity"]),
        seed=seed,
    )
    save_index(forest, merged["out"])
    result = {
        "out": merged["out"],
        "items": len(forest),
        "dim": forest.dim,
        "trees": merged["trees"],
        "leaf_capacity": merged["leaf_capacity"],
    }
    _emit(args.json, result, [f"indexed {len(forest)} vectors into {merged['out']}"])
    return 0


def _cmd_index_query(args, merged, seed) -> int:
    forest = load_index(merged["index"])
    with EmbeddingStore(merged["store"]) as store:
        vec = store.get(merged["query_id"])
    if vec is None:
        raise CatalogError(f"query id {merged['query_id']!r} not in store {merged['store']}")
    neighbors = query_knn(forest, vec, merged["top_k"], merged["budget"])
    result = {
        "query_id": merged["query_id"],
        "neighbors": [{"id": i, "distance": d} for i, d in neighbors],
    }
    _emit(args.json, result, [f"{i}\t{d:.6f}" for i, d in neighbors])
    return 0


def _cmd_pipeline_run(args, merged, seed) -> int:
    os.makedirs(merged["workdir"], exist_ok=True)
    cache_path, state_path, results_path = _workdir_paths(merged["workdir"])
    catalog = load_catalog(merged["catalog"])
    prev_hashes = prev_results = None
    if not merged["full"] and os.path.exists(state_path) and os.path.exists(results_path):
        prev_hashes = load_state(state_path)
        prev_results = load_results(results_path)
    config = PipelineConfig(
        weights=_fusion_weights(merged),
        top_n=merged["top_n"],
        n_trees=merged["trees"],
        leaf_capacity=merged["leaf_capacity"],
        forest_seed=seed,
    )
    with EmbeddingStore(cache_path, dim=FUSED_DIM) as cache:
        results, hashes, stats = run_batch(
            catalog, cache, config, prev_hashes=prev_hashes, prev_results=prev_results
        )
    save_results(results, results_path)
    save_state(hashes, state_path)
    result = {"results": results_path, "state": state_path, **stats.as_dict()}
    lines = [f"{k} {v}" for k, v in sorted(stats.as_dict().items())]
    lines.append(f"wrote {results_path}")
    _emit(args.json, result, lines)
    return 0


def _cmd_mine_triplets(args, merged, seed) -> int:
    cache_path, _, results_path = _workdir_paths(merged["workdir"])
    catalog = load_catalog(merged["catalog"])
    results = load_results(results_path)
    rng = np.random.default_rng(seed)
    frac = merged["in_class_fraction"]
    if not 0.0 <= frac <= 1.0:
        raise UsageError(f"in-class fraction must lie in [0,1], got {frac}")
    with EmbeddingStore(cache_path) as cache:
        records = mine_triplets(
            results,
            catalog,
            cache,
            rng,
            merged["n"],
            ratios={"in_class": frac, "out_of_class": 1.0 - frac},
            bounds=MiningBounds(
                top_p=merged["top_p"],
                neg_rank_lo=merged["neg_rank_lo"],
                neg_rank_hi=merged["neg_rank_hi"],
            ),
            weights=_fusion_weights(merged),
        )
    save_manifest(records, merged["out"])
    result = {
        "out": merged["out"],
        "triplets": len(records),
        "in_class": sum(1 for r in records if r.in_class),
    }
    _emit(args.json, result, [f"wrote {len(records)} triplets to {merged['out']}"])
    return 0


# ---------------------------------------------------------------- parser


def _add_model_opts(sub, command: str, preset_default: str) -> None:
    _opt(sub, command, "preset", str, preset_default, "architecture preset (default or tiny)")
    _opt(sub, command, "taps", str, None, "tap labels, e.g. 'none', 'b4', 'b2,b3,b4,b5'")


def _add_fusion_opts(sub, command: str) -> None:
    _opt(sub, command, "w_structure", float, 0.5, "fusion weight of the structure block")
    _opt(sub, command, "w_pattern", float, 0.3, "fusion weight of the pattern block")
    _opt(sub, command, "w_color", float, 0.2, "fusion weight of the color block")


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="emit one JSON document on stdout")
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (fallback: env MILDNET_SEED, then 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (default: 1, for bitwise-reproducible output)")
    common.add_argument("--config", default=None, metavar="FILE",
                        help="key = value config file; flags override it")

    parser = _Parser(prog="mildnet", description=__doc__.split("\n\n")[0])
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def new_command(name: str, help_text: str):
        _SCHEMAS[name] = {}
        return subs.add_parser(name, help=help_text, parents=[common])

    sub = new_command("params", "print the parameter count for a tap configuration")
    _opt(sub, "params", "taps", str, "b2,b3,b4,b5", "tap labels ('none' for the deepest pool only)")
    _HANDLERS["params"] = _cmd_params

    sub = new_command("ablate", "print the five-row tap ablation table")
    _HANDLERS["ablate"] = _cmd_ablate

    sub = new_command("gradcheck", "finite-difference check of all gradients")
    _add_model_opts(sub, "gradcheck", "tiny")
    _opt(sub, "gradcheck", "seeds", int, 1, "number of seeds to sweep")
    _opt(sub, "gradcheck", "samples", int, 1, "coordinates probed per weight tensor")
    _opt(sub, "gradcheck", "tol", float, 1e-4, "max relative error for exit code 0")
    _HANDLERS["gradcheck"] = _cmd_gradcheck

    sub = new_command("synth", "generate a synthetic colored-shapes triplet set")
    sub.add_argument("out_dir_pos", metavar="OUT_DIR", nargs="?", default=None,
                     help="output directory (or use --out-dir)")
    _opt(sub, "synth", "out_dir", str, None, "output directory")
    _opt(sub, "synth", "n", int, 100, "number of triplets")
    _opt(sub, "synth", "classes", int, 6, "number of classes")
    _opt(sub, "synth", "image_size", int, 64, "rendered image side in pixels")
    _opt(sub, "synth", "in_class_fraction", float, 0.3, "fraction of in-class negatives")
    _opt(sub, "synth", "wild_fraction", float, 0.3, "fraction of wild queries")
    _HANDLERS["synth"] = _cmd_synth

    sub = new_command("train", "train embeddings on a triplet manifest")
    sub.add_argument("manifest", help="triplet manifest (JSON lines)")
    _add_model_opts(sub, "train", "tiny")
    _opt(sub, "train", "epochs", int, 10, "training epochs")
    _opt(sub, "train", "batch_size", int, 96, "triplets per optimizer step")
    _opt(sub, "train", "loss", str, "hinge", "loss kind: hinge or contrastive")
    _opt(sub, "train", "margin", float, 1.0, "loss margin m")
    _opt(sub, "train", "optimizer", str, "sgd_momentum", "sgd_momentum or rmsprop")
    _opt(sub, "train", "lr", float, 0.001, "learning rate")
    _opt(sub, "train", "momentum", float, 0.9, "momentum coefficient")
    _opt(sub, "train", "rms_decay", float, 0.9, "rmsprop decay")
    _opt(sub, "train", "rms_epsilon", float, 1e-7, "rmsprop epsilon")
    _opt(sub, "train", "augment", bool, True, "apply training-time augmentation")
    _opt(sub, "train", "split", str, "train", "manifest split to train on")
    _opt(sub, "train", "out", str, "weights.mldw", "output weights file")
    _opt(sub, "train", "checkpoint_dir", str, None, "write one checkpoint per epoch here")
    _opt(sub, "train", "log", str, None, "append per-step JSON metrics here")
    _opt(sub, "train", "resume", str, None, "resume from this checkpoint file")
    _HANDLERS["train"] = _cmd_train

    sub = new_command("eval", "evaluate weights on a triplet manifest")
    sub.add_argument("manifest", help="triplet manifest (JSON lines)")
    _add_model_opts(sub, "eval", "tiny")
    _opt(sub, "eval", "weights", str, "weights.mldw", "weights file to evaluate")
    _opt(sub, "eval", "loss", str, "hinge", "loss kind: hinge or contrastive")
    _opt(sub, "eval", "margin", float, 1.0, "loss margin m")
    _opt(sub, "eval", "split", str, "all", "manifest split: train, val, or all")
    _HANDLERS["eval"] = _cmd_eval

    sub = new_command("embed", "embed images and optionally append to a store")
    sub.add_argument("images", nargs="+", help="image files (P6/P5)")
    _add_model_opts(sub, "embed", "tiny")
    _opt(sub, "embed", "weights", str, "weights.mldw", "weights file")
    _opt(sub, "embed", "store", str, None, "embedding store to append to")
    _HANDLERS["embed"] = _cmd_embed

    sub = new_command("index-build", "build an ANN index from an embedding store")
    _opt(sub, "index-build", "store", str, "embeddings.mlde", "embedding store to index")
    _opt(sub, "index-build", "out", str, "index.mldi", "output index file")
    _opt(sub, "index-build", "trees", int, 10, "number of trees")
    _opt(sub, "index-build", "leaf_capacity", int, 16, "max points per leaf")
    _HANDLERS["index-build"] = _cmd_index_build

    sub = new_command("index-query", "query an ANN index")
    _opt(sub, "index-query", "index", str, "index.mldi", "index file")
    _opt(sub, "index-query", "store", str, "embeddings.mlde", "store holding the query vector")
    _opt(sub, "index-query", "query_id", str, None, "id of the query vector in the store")
    _opt(sub, "index-query", "top_k", int, 10, "neighbors to return")
    _opt(sub, "index-query", "budget", int, None, "leaf-items budget (default trees*capacity*top_k)")
    _HANDLERS["index-query"] = _cmd_index_query

    sub = new_command("pipeline-run", "run one batch of the catalog pipeline")
    _opt(sub, "pipeline-run", "catalog", str, "catalog.jsonl", "catalog file (JSON lines)")
    _opt(sub, "pipeline-run", "workdir", str, "pipeline", "state/cache/results directory")
    _opt(sub, "pipeline-run", "top_n", int, 10, "neighbors kept per item")
    _opt(sub, "pipeline-run", "trees", int, 8, "forest trees per partition")
    _opt(sub, "pipeline-run", "leaf_capacity", int, 16, "max points per leaf")
    _opt(sub, "pipeline-run", "full", bool, False, "ignore previous state; recompute everything")
    _add_fusion_opts(sub, "pipeline-run")
    _HANDLERS["pipeline-run"] = _cmd_pipeline_run

    sub = new_command("mine-triplets", "mine training triplets from pipeline results")
    _opt(sub, "mine-triplets", "catalog", str, "catalog.jsonl", "catalog file (JSON lines)")
    _opt(sub, "mine-triplets", "workdir", str, "pipeline", "directory of a finished pipeline run")
    _opt(sub, "mine-triplets", "out", str, "mined.jsonl", "output manifest")
    _opt(sub, "mine-triplets", "n", int, 100, "triplets to mine")
    _opt(sub, "mine-triplets", "in_class_fraction", float, 0.3, "fraction of in-class negatives")
    _opt(sub, "mine-triplets", "top_p", int, 5, "positives drawn from the top-P neighbors")
    _opt(sub, "mine-triplets", "neg_rank_lo", int, 50, "in-class negative rank window start")
    _opt(sub, "mine-triplets", "neg_rank_hi", int, 100, "in-class negative rank window end")
    _add_fusion_opts(sub, "mine-triplets")
    _HANDLERS["mine-triplets"] = _cmd_mine_triplets

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        merged = _merge(args, args.command)
        if args.command == "synth":
            if args.out_dir_pos is not None:
                merged["out_dir"] = args.out_dir_pos
            if merged["out_dir"] is None:
                raise UsageError("synth requires an output directory")
        if args.command == "index-query" and merged["query_id"] is None:
            raise UsageError("index-query requires --query-id")
        seed = _resolve_seed(args)
        return _HANDLERS[args.command](args, merged, seed)
    except UsageError as exc:
        print(f"mildnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (
        FormatError,
        ManifestError,
        CatalogError,
        ParameterError,
        DimensionError,
        TrainingDiverged,
        OSError,
    ) as exc:
        print(f"mildnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
