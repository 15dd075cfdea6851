"""Command-line surface: data generation, training, evaluation, sweeps,
cost planning, attention analysis, alignment grids, and tradeoff reports.

One command per process. Every command resolves a single configuration
(file -> --set overrides -> first-class flags), echoes it into the output
directory for reproducibility, and writes its artifacts atomically. Exit
codes: 0 success, 1 runtime contract failure, 2 usage or invalid config.

The output directory can be rooted via the DEEPINSERT_OUT_ROOT environment
variable.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from typing import Any, Optional

import numpy as np
import yaml

from . import analysis, insertion, modality, selection, svg, training
from .errors import ConfigError, DataFormatError, DeepInsertError
from .fileio import atomic_write_text
from .modality import Adapter, DatasetSplits, FrozenEncoder, read_split, write_split
from .model import ModelConfig, Weights, init_weights
from .numerics import OpCounter, fold_seed, make_rng

DEFAULT_CONFIG: dict[str, Any] = {
    "model": {
        "n_layers": 8,
        "d_model": 64,
        "d_ff": 256,
        "n_heads": 4,
        "vocab_size": 64,
        "max_positions": 64,
        "insert_layer": 0,
    },
    "data": {
        "dir": "data",
        "seed": 11,
        "size": 4000,
        "grid_size": 4,
        "n_symbols": 8,
        "d_enc": 16,
        "query_mix": [0.5, 0.5],
    },
    "train": {
        "lr": 3e-4,
        "schedule": "cosine",
        "batch_size": 32,
        "total_steps": 1200,
        "eval_interval": 200,
        "seed": 0,
        "clip_norm": 1.0,
    },
    "prune": {
        "mode": "none",
        "fastv_start_layer": None,
        "fastv_retention": None,
        "vtw_exit_layer": None,
    },
    "run": {
        "out_dir": "runs/latest",
        "seed": 0,
    },
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: Optional[str], overrides: list[str]) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config file must be a mapping")
        for section in loaded:
            if section not in config:
                raise ConfigError(f"{path}: unknown config section {section!r}")
        config = _deep_merge(config, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in config or parts[1] not in config[parts[0]]:
            raise ConfigError(f"--set refers to unknown key {dotted!r}")
        config[parts[0]][parts[1]] = yaml.safe_load(raw)
    return config


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def resolve_out_dir(config: dict) -> str:
    out = config["run"]["out_dir"]
    root = os.environ.get("DEEPINSERT_OUT_ROOT")
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    os.makedirs(out, exist_ok=True)
    return out


def echo_config(config: dict, out_dir: str) -> None:
    atomic_write_text(os.path.join(out_dir, "resolved_config.yaml"),
                      yaml.safe_dump(config, sort_keys=True))


def write_report(out_dir: str, report: dict) -> None:
    atomic_write_text(os.path.join(out_dir, "report.json"),
                      json.dumps(report, indent=2, sort_keys=True) + "\n")


def model_config_from(config: dict) -> ModelConfig:
    return ModelConfig(**config["model"])


def load_splits(config: dict) -> DatasetSplits:
    data = config["data"]
    directory = data["dir"]
    splits = {}
    for name in ("train", "val", "test"):
        path = os.path.join(directory, f"{name}.jsonl")
        if not os.path.exists(path):
            raise ConfigError(
                f"dataset file {path} not found; run the gen-data command first"
            )
        splits[name] = read_split(path)
    return DatasetSplits(splits["train"], splits["val"], splits["test"],
                         data["grid_size"], data["n_symbols"])


def prune_from(config: dict) -> Optional[insertion.PruneConfig]:
    p = config["prune"]
    if p["mode"] == "none":
        return None
    return insertion.PruneConfig(
        mode=p["mode"],
        fastv_start_layer=p["fastv_start_layer"],
        fastv_retention=p["fastv_retention"],
        vtw_exit_layer=p["vtw_exit_layer"],
    )


def _restore(path: str) -> training.RestoredState:
    return training.load_checkpoint(path)


def _task_query(state: training.RestoredState,
                splits: DatasetSplits) -> analysis.FlopsQuery:
    sample = splits.val[0]
    cfg = state.weights.config
    return analysis.FlopsQuery(
        n_layers=cfg.n_layers, d_model=cfg.d_model, d_ff=cfg.d_ff,
        n_heads=cfg.n_heads, l_text=len(sample.template_tokens()) - 1,
        l_mm=sample.grid.size, insert_layer=cfg.insert_layer,
    )


def cmd_gen_data(config: dict, out_dir: str) -> dict:
    data = config["data"]
    splits = modality.generate_dataset(
        seed=data["seed"], size=data["size"], grid_size=data["grid_size"],
        n_symbols=data["n_symbols"], query_mix=tuple(data["query_mix"]),
    )
    os.makedirs(data["dir"], exist_ok=True)
    for name, samples in (("train", splits.train), ("val", splits.val),
                          ("test", splits.test)):
        write_split(os.path.join(data["dir"], f"{name}.jsonl"), samples)
    return {
        "sizes": {"train": len(splits.train), "val": len(splits.val),
                  "test": len(splits.test)},
        "artifacts": [os.path.join(data["dir"], f"{n}.jsonl")
                      for n in ("train", "val", "test")],
    }


def cmd_train(config: dict, out_dir: str) -> dict:
    splits = load_splits(config)
    cfg = model_config_from(config)
    if cfg.vocab_size < splits.vocab.min_vocab_size:
        raise ConfigError(
            f"vocab_size {cfg.vocab_size} < task minimum {splits.vocab.min_vocab_size}"
        )
    rng = make_rng(fold_seed(config["run"]["seed"], "weights"))
    weights = init_weights(cfg, rng)
    adapter = Adapter(config["data"]["d_enc"], cfg.d_model, rng=rng)
    tcfg = training.TrainConfig(
        checkpoint_path=os.path.join(out_dir, "checkpoint.bin"),
        **config["train"],
    )
    log = training.train(weights, adapter, splits, tcfg)
    atomic_write_text(os.path.join(out_dir, "metrics.csv"), log.to_csv())
    steps = list(range(1, len(log.step_loss) + 1))
    atomic_write_text(
        os.path.join(out_dir, "loss.svg"),
        svg.line_plot([("train loss", steps, log.step_loss)],
                      f"training loss (insert_layer={cfg.insert_layer})",
                      "step", "loss"),
    )
    encoder = FrozenEncoder(splits.n_symbols, adapter.d_enc)
    final = training.evaluate(weights, adapter, splits.val, encoder, splits.vocab)
    layout = modality.segment_sample(splits.val[0], encoder, adapter)
    counter = OpCounter()
    insertion.deepinsert_prefill(layout, weights, counter=counter)
    ms = analysis.measure_prefill_ms(
        lambda: insertion.deepinsert_prefill(layout, weights), reps=30, warmup=5)
    state = training.load_checkpoint(tcfg.checkpoint_path)
    query = _task_query(state, splits)
    return {
        "insert_layer": cfg.insert_layer,
        "final_eval": {
            "accuracy": final.accuracy,
            "acc_by_qtype": final.acc_by_qtype,
            "mean_nll": final.mean_nll,
        },
        "analytical_flops": analysis.flops_deepinsert(query).total,
        "instrumented_muladds": counter.total(),
        "prefill_ms_median": ms,
        "diverged": log.diverged,
        "task": {"grid_size": splits.grid_size, "n_symbols": splits.n_symbols},
        "artifacts": ["metrics.csv", "checkpoint.bin", "loss.svg"],
    }


def cmd_eval(config: dict, out_dir: str, checkpoint: str, split: str) -> dict:
    state = _restore(checkpoint)
    splits = load_splits(config)
    samples = getattr(splits, split)
    encoder = FrozenEncoder(splits.n_symbols, state.adapter.d_enc)
    res = training.evaluate(state.weights, state.adapter, samples, encoder,
                            splits.vocab, prune=prune_from(config))
    return {
        "split": split,
        "n": res.n,
        "accuracy": res.accuracy,
        "acc_by_qtype": res.acc_by_qtype,
        "mean_nll": res.mean_nll,
        "insert_layer": state.weights.config.insert_layer,
        "artifacts": [],
    }


def cmd_sweep(config: dict, out_dir: str, checkpoint: str,
              candidates: list[int]) -> dict:
    state = _restore(checkpoint)
    splits = load_splits(config)
    encoder = FrozenEncoder(splits.n_symbols, state.adapter.d_enc)
    result = selection.noretrain_sweep(state.weights, state.adapter, splits.val,
                                       encoder, splits.vocab, candidates)
    atomic_write_text(os.path.join(out_dir, "sweep.csv"), result.to_csv())
    return {
        "candidates": list(candidates),
        "accuracies": result.accuracies(),
        "recommended_layer": selection.select_layer(result, "knee"),
        "best_accuracy_layer": selection.select_layer(result, "best-accuracy"),
        "artifacts": ["sweep.csv"],
    }


def cmd_rl_select(config: dict, out_dir: str, checkpoint: str,
                  candidates: list[int], tradeoff_lambda: float,
                  steps: int, subset_frac: float) -> dict:
    state = _restore(checkpoint)
    splits = load_splits(config)
    encoder = FrozenEncoder(splits.n_symbols, state.adapter.d_enc)
    n = max(1, int(len(splits.train) * subset_frac))
    subset = splits.train[:n]
    pcfg = selection.PolicyConfig(
        candidates=tuple(candidates), tradeoff_lambda=tradeoff_lambda,
        rollout_steps=steps, seed=config["run"]["seed"],
    )
    result = selection.reinforce_train(state.weights, state.adapter, subset,
                                       encoder, pcfg)
    atomic_write_text(os.path.join(out_dir, "reward_log.csv"), result.reward_csv())
    return {
        "candidates": list(result.candidates),
        "mean_distribution": [float(p) for p in result.mean_distribution],
        "modal_layer": result.modal_layer,
        "expected_depth": result.expected_depth,
        "recommended_layer": selection.select_layer(result, "expected-depth"),
        "artifacts": ["reward_log.csv"],
    }


def cmd_flops(config: dict, out_dir: str, l_text: int, l_mm: int,
              reconcile: bool) -> dict:
    cfg = model_config_from(config)
    query = analysis.FlopsQuery(
        n_layers=cfg.n_layers, d_model=cfg.d_model, d_ff=cfg.d_ff,
        n_heads=cfg.n_heads, l_text=l_text, l_mm=l_mm,
        insert_layer=cfg.insert_layer,
    )
    report = analysis.flops_deepinsert(query)
    out: dict[str, Any] = {"flops": report.to_dict(), "total": report.total,
                           "artifacts": ["flops.json"]}
    if reconcile:
        rng = make_rng(fold_seed(config["run"]["seed"], "flops-reconcile"))
        weights = init_weights(cfg, rng)
        layout = _synthetic_layout(rng, cfg, l_text, l_mm)
        counter = OpCounter()
        insertion.deepinsert_prefill(layout, weights, counter=counter)
        rec = analysis.reconcile_counts(counter, query)
        out["reconciliation"] = rec.to_dict()
        if not rec.matches:
            raise DeepInsertError(
                f"instrumented counts disagree with the analytical model: {rec.diff}"
            )
    atomic_write_text(os.path.join(out_dir, "flops.json"),
                      json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def _synthetic_layout(rng: np.random.Generator, cfg: ModelConfig,
                      l_text: int, l_mm: int) -> insertion.PromptLayout:
    if l_text < 2:
        raise ConfigError("synthetic layout needs l_text >= 2")
    n_pre = l_text // 2
    tokens = rng.integers(0, cfg.vocab_size, size=l_text)
    mm = rng.normal(0.0, 0.02, size=(l_mm, cfg.d_model)).astype(np.float32)
    return insertion.PromptLayout(tokens[:n_pre], mm, tokens[n_pre:])


def cmd_analyze_attn(config: dict, out_dir: str, checkpoint: str, split: str,
                     limit: int, exclude_first: int) -> dict:
    state = _restore(checkpoint)
    splits = load_splits(config)
    samples = getattr(splits, split)
    encoder = FrozenEncoder(splits.n_symbols, state.adapter.d_enc)
    vocab = splits.vocab
    sym = vocab.symbol_tokens()
    prompt_traces = []
    answer_traces = []
    for sample in samples:
        if len(prompt_traces) >= limit:
            break
        layout = modality.segment_sample(sample, encoder, state.adapter)
        result = insertion.deepinsert_prefill(layout, state.weights,
                                              capture_trace=True)
        pred = int(sym[np.argmax(result.logits[sym])])
        if pred != sample.answer_token:
            continue  # only correctly answered samples feed the diagnostics
        prompt_traces.append(result.trace)
        step = insertion.decode_step(result.cache, pred, state.weights,
                                     capture_trace=True)
        answer_traces.append(step.trace)
    if not prompt_traces:
        raise DeepInsertError(
            f"no correctly answered samples in the first {limit} of split {split!r}"
        )
    var_rows = np.stack([analysis.var_per_layer(t) for t in answer_traces])
    var_mean = var_rows.mean(axis=0)
    contribution = analysis.token_contribution_map(
        prompt_traces, exclude_first_layers=exclude_first)
    var_csv = ["layer,var"] + [f"{i},{v:.6f}" for i, v in enumerate(var_mean)]
    atomic_write_text(os.path.join(out_dir, "var.csv"), "\n".join(var_csv) + "\n")
    contrib_csv = ["layer," + ",".join(f"token{j}" for j in range(contribution.shape[1]))]
    for i, row in enumerate(contribution):
        contrib_csv.append(f"{i}," + ",".join(f"{v:.6f}" for v in row))
    atomic_write_text(os.path.join(out_dir, "contribution.csv"),
                      "\n".join(contrib_csv) + "\n")
    atomic_write_text(os.path.join(out_dir, "traces.jsonl"),
                      analysis.traces_to_jsonl(prompt_traces))
    atomic_write_text(
        os.path.join(out_dir, "var.svg"),
        svg.line_plot([("VAR", list(range(len(var_mean))), list(var_mean))],
                      "attention mass on multimodal tokens at the answer token",
                      "layer", "ratio"),
    )
    atomic_write_text(
        os.path.join(out_dir, "contribution.svg"),
        svg.heatmap(contribution, "layer-relative multimodal token contribution",
                    "multimodal token", "layer"),
    )
    return {
        "n_traces": len(prompt_traces),
        "var_per_layer": [float(v) for v in var_mean],
        "artifacts": ["var.csv", "contribution.csv", "traces.jsonl",
                      "var.svg", "contribution.svg"],
    }


def cmd_align(config: dict, out_dir: str, checkpoint_a: str, checkpoint_b: str,
              split: str, k: int, n: int) -> dict:
    state_a = _restore(checkpoint_a)
    state_b = _restore(checkpoint_b)
    splits = load_splits(config)
    samples = getattr(splits, split)[:n]
    if len(samples) < 2:
        raise ConfigError(f"alignment needs at least 2 samples, have {len(samples)}")

    def layer_features(state: training.RestoredState) -> list[np.ndarray]:
        encoder = FrozenEncoder(splits.n_symbols, state.adapter.d_enc)
        per_layer: list[list[np.ndarray]] = []
        for sample in samples:
            layout = modality.segment_sample(sample, encoder, state.adapter)
            result = insertion.deepinsert_prefill(layout, state.weights,
                                                  capture_hidden=True)
            rows = analysis.prompt_hidden_features(
                result.hidden_states, state.weights.config.insert_layer,
                layout.l_text)
            for li, row in enumerate(rows):
                if li >= len(per_layer):
                    per_layer.append([])
                per_layer[li].append(row)
        return [np.stack(rows) for rows in per_layer]

    grid = analysis.alignment_grid(layer_features(state_a),
                                   layer_features(state_b), k)
    lines = ["layer_a\\layer_b," + ",".join(str(j) for j in range(grid.shape[1]))]
    for i, row in enumerate(grid):
        lines.append(f"{i}," + ",".join(f"{v:.6f}" for v in row))
    atomic_write_text(os.path.join(out_dir, "alignment.csv"), "\n".join(lines) + "\n")
    atomic_write_text(
        os.path.join(out_dir, "alignment.svg"),
        svg.heatmap(grid, f"mutual {k}-NN alignment over {len(samples)} samples",
                    "model B layer", "model A layer"),
    )
    return {
        "k": k,
        "n_samples": len(samples),
        "grid_shape": list(grid.shape),
        "artifacts": ["alignment.csv", "alignment.svg"],
    }


def cmd_tradeoff(config: dict, out_dir: str, run_dirs: list[str]) -> dict:
    if len(run_dirs) < 2:
        raise ConfigError("tradeoff needs at least two runs")
    rows = []
    tasks = set()
    for run_dir in run_dirs:
        path = os.path.join(run_dir, "report.json")
        if not os.path.exists(path):
            raise ConfigError(f"{run_dir}: no report.json (expected a train run)")
        with open(path, encoding="utf-8") as fh:
            report = json.load(fh)
        if "final_eval" not in report:
            raise ConfigError(f"{run_dir}: report is not from a train run")
        tasks.add(json.dumps(report.get("task"), sort_keys=True))
        rows.append({
            "insert_layer": report["insert_layer"],
            "accuracy": report["final_eval"]["accuracy"],
            "flops": report["analytical_flops"],
            "ms": report["prefill_ms_median"],
            "run_dir": run_dir,
        })
    if len(tasks) > 1:
        raise DeepInsertError("tradeoff runs disagree on task; refusing to mix")
    rows.sort(key=lambda r: r["insert_layer"])
    lines = ["insert_layer,accuracy,flops,ms"]
    for r in rows:
        lines.append(f"{r['insert_layer']},{r['accuracy']:.6f},{r['flops']},{r['ms']:.3f}")
    atomic_write_text(os.path.join(out_dir, "tradeoff.csv"), "\n".join(lines) + "\n")
    atomic_write_text(
        os.path.join(out_dir, "tradeoff.svg"),
        svg.line_plot(
            [("accuracy vs runtime", [r["ms"] for r in rows],
              [r["accuracy"] for r in rows])],
            "performance vs inference cost", "median prefill ms", "accuracy"),
    )
    return {
        "points": rows,
        "artifacts": ["tradeoff.csv", "tradeoff.svg"],
    }


def cmd_generate(config: dict, out_dir: str, checkpoint: str, split: str,
                 index: int, max_new_tokens: int) -> dict:
    state = _restore(checkpoint)
    splits = load_splits(config)
    samples = getattr(splits, split)
    if not 0 <= index < len(samples):
        raise ConfigError(f"sample index {index} outside split of {len(samples)}")
    sample = samples[index]
    encoder = FrozenEncoder(splits.n_symbols, state.adapter.d_enc)
    layout = modality.segment_sample(sample, encoder, state.adapter)
    tokens = insertion.generate(layout, state.weights, max_new_tokens,
                                prune=prune_from(config))
    vocab = splits.vocab
    return {
        "sample_index": index,
        "question": [vocab.token_name(t) for t in sample.question_tokens],
        "gold_answer": vocab.token_name(sample.answer_token),
        "generated_tokens": tokens,
        "generated_names": [vocab.token_name(t) for t in tokens],
        "artifacts": [],
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepinsert",
        description="Late-entry multimodal transformer toolkit",
    )
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                        help="override any config value")
    parser.add_argument("--out-dir", help="output directory (overrides run.out_dir)")
    parser.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the grid-QA dataset")
    sub.add_parser("train", help="train transformer + adapter")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])

    p = sub.add_parser("sweep", help="no-retrain insertion-layer sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--candidates", default="0,1,2,3,4")

    p = sub.add_parser("rl-select", help="REINFORCE insertion-layer policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--candidates", default="0,2,4,6")
    p.add_argument("--tradeoff-lambda", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--subset-frac", type=float, default=0.1)

    p = sub.add_parser("flops", help="analytical cost report")
    p.add_argument("--l-text", type=int, required=True)
    p.add_argument("--l-mm", type=int, required=True)
    p.add_argument("--reconcile", action="store_true",
                   help="also run an instrumented prefill and require exact equality")

    p = sub.add_parser("analyze-attn", help="attention diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--limit", type=int, default=64)
    p.add_argument("--exclude-first", type=int, default=0)

    p = sub.add_parser("align", help="layer-pair representation alignment")
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("-k", type=int, default=10)
    p.add_argument("-n", type=int, default=256)

    p = sub.add_parser("tradeoff", help="accuracy-vs-cost report over runs")
    p.add_argument("--runs", nargs="+", required=True)

    p = sub.add_parser("generate", help="greedy decoding for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--max-new-tokens", type=int, default=4)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.set)
        if args.out_dir:
            config["run"]["out_dir"] = args.out_dir
        if args.seed is not None:
            config["run"]["seed"] = args.seed
        out_dir = resolve_out_dir(config)
        echo_config(config, out_dir)

        started = time.perf_counter()
        if args.command == "gen-data":
            body = cmd_gen_data(config, out_dir)
        elif args.command == "train":
            body = cmd_train(config, out_dir)
        elif args.command == "eval":
            body = cmd_eval(config, out_dir, args.checkpoint, args.split)
        elif args.command == "sweep":
            candidates = [int(c) for c in args.candidates.split(",")]
            body = cmd_sweep(config, out_dir, args.checkpoint, candidates)
        elif args.command == "rl-select":
            candidates = [int(c) for c in args.candidates.split(",")]
            body = cmd_rl_select(config, out_dir, args.checkpoint, candidates,
                                 args.tradeoff_lambda, args.steps, args.subset_frac)
        elif args.command == "flops":
            body = cmd_flops(config, out_dir, args.l_text, args.l_mm, args.reconcile)
        elif args.command == "analyze-attn":
            body = cmd_analyze_attn(config, out_dir, args.checkpoint, args.split,
                                    args.limit, args.exclude_first)
        elif args.command == "align":
            body = cmd_align(config, out_dir, args.checkpoint_a, args.checkpoint_b,
                             args.split, args.k, args.n)
        elif args.command == "tradeoff":
            body = cmd_tradeoff(config, out_dir, args.runs)
        elif args.command == "generate":
            body = cmd_generate(config, out_dir, args.checkpoint, args.split,
                                args.index, args.max_new_tokens)
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command!r}")

        report = {
            "command": args.command,
            "config_hash": config_hash(config),
            "wallclock_s": round(time.perf_counter() - started, 3),
            **body,
        }
        write_report(out_dir, report)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    except (ConfigError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DeepInsertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
