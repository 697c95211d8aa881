"""Command-line surface: calibrate, train, prefill, benchmark, synth.

Every subcommand is deterministic given its inputs and --seed, writes its
primary artifact plus a sidecar ``<out>.manifest.json`` recording arguments
and engine version, and exits 0 on success, 2 on validation failures, 3 on
numerical divergence.
"""

import argparse
import json
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import (
    load_config_json,
    read_checkpoint,
    save_config_json,
    write_checkpoint,
)
from .costmodel import curves_to_csv, emit_curves, predict_prefill_flops
from .engine import prefill_blockwise
from .errors import NumericError, ValidationError
from .scheduler import (
    SparsityPlan,
    importance_scores,
    load_plan,
    plan_from_profile,
    save_plan,
    uniform_plan,
)
from .synthetic import (
    SyntheticCorpusSpec,
    attention_skewed_model,
    generate_clustered_corpus,
    generate_synthetic_model,
    read_tokens_file,
    sink_prefixed_sequences,
    write_tokens_file,
)
from .training import train_compensator, train_predictor


def _write_manifest(primary_out: str, subcommand: str, args: argparse.Namespace,
                    outputs: list[str], started: float) -> None:
    manifest = {
        "subcommand": subcommand,
        "arguments": {
            k: v for k, v in sorted(vars(args).items()) if k != "func"
        },
        "outputs": outputs,
        "engine_version": __version__,
        "wall_time_s": round(time.time() - started, 3),
    }
    with open(primary_out + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_model(path):
    ckpt = read_checkpoint(path)
    if ckpt.weights is None:
        raise ValidationError(f"{path} holds no model weights")
    return ckpt


def cmd_calibrate(args) -> int:
    started = time.time()
    ckpt = _load_model(args.model)
    sequences = read_tokens_file(args.sequences)
    profile = importance_scores(
        ckpt.weights, sequences,
        sink_block=args.sink_block,
        normalize_per_token=args.normalize_per_token,
    )
    plan = plan_from_profile(
        profile, args.budget,
        dense_first_last=args.dense_first_last,
        seed=args.seed,
        calibration=(
            f"attention-mass over {len(sequences)} sequences from "
            f"{args.sequences} (sink block {args.sink_block})"
        ),
    )
    save_plan(plan, args.out)
    _write_manifest(args.out, "calibrate", args, [args.out], started)
    print(f"wrote plan for {plan.b.size} layers to {args.out}")
    return 0


def _loss_csv(history) -> str:
    lines = ["layer,epoch,loss"]
    for layer, curve in enumerate(history.epoch_loss):
        for epoch, loss in enumerate(curve):
            lines.append(f"{layer},{epoch},{loss:.8f}")
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    started = time.time()
    ckpt = _load_model(args.model)
    sequences = read_tokens_file(args.corpus)
    try:
        if args.target == "predictor":
            params, history = train_predictor(
                ckpt.weights, sequences,
                epochs=args.epochs, lr=args.lr, seed=args.seed,
                holdout_frac=args.holdout,
            )
            write_checkpoint(args.out, ckpt.config, predictors=params)
        else:
            predictors = None
            if args.aux is not None:
                aux = read_checkpoint(args.aux)
                predictors = aux.predictors
                if predictors is None:
                    raise ValidationError(f"{args.aux} holds no predictor params")
            params, history = train_compensator(
                ckpt.weights, sequences,
                keep=args.keep, epochs=args.epochs, lr=args.lr, seed=args.seed,
                phase_split=args.phase_split, predictors=predictors,
                holdout_frac=args.holdout,
            )
            write_checkpoint(args.out, ckpt.config, compensators=params)
    except NumericError as exc:
        last_good = getattr(exc, "last_good", None)
        if last_good is not None:
            rescue = args.out + ".lastgood"
            if args.target == "predictor":
                write_checkpoint(rescue, ckpt.config, predictors=last_good)
            else:
                write_checkpoint(rescue, ckpt.config, compensators=last_good)
            print(f"training diverged; last-good parameters at {rescue}",
                  file=sys.stderr)
        raise

    csv_path = args.loss_csv or (args.out + ".loss.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(_loss_csv(history))
    _write_manifest(args.out, "train", args, [args.out, csv_path], started)
    held = ", ".join(
        f"layer {i}: {b:.4f} -> {a:.4f}"
        for i, (b, a) in enumerate(zip(history.holdout_before, history.holdout_after))
    )
    print(f"trained {args.target}; held-out loss {held}")
    return 0


def cmd_prefill(args) -> int:
    started = time.time()
    ckpt = _load_model(args.model)
    weights = ckpt.weights
    predictors, compensators = ckpt.predictors, ckpt.compensators
    if args.ckpt is not None:
        aux = read_checkpoint(args.ckpt)
        predictors = aux.predictors or predictors
        compensators = aux.compensators or compensators
    plan = load_plan(args.plan) if args.plan is not None else None
    if args.mode != "dense" and plan is None:
        raise ValidationError(f"mode {args.mode!r} requires --plan")

    sequences = read_tokens_file(args.tokens)
    results = []
    for seq in sequences:
        res = prefill_blockwise(
            weights, np.asarray(seq), plan=plan, mode=args.mode,
            predictors=predictors, compensators=compensators,
            compute_recall=(args.mode == "predicted"),
            keep_masks=(args.mode == "static"),
        )
        entry_extra = {}
        if args.mode != "dense":
            if args.mode == "predicted" and res.recall_per_layer is not None:
                entry_extra["recall_per_layer"] = [
                    None if np.isnan(r) else float(r) for r in res.recall_per_layer
                ]
            if args.mode == "static" and res.masks:
                blocks = sorted({b for (_l, b) in res.masks} - {0})
                reused = all(
                    np.array_equal(res.masks[(l, b)].bits, res.masks[(l, blocks[0])].bits)
                    for l in range(weights.config.n_layers)
                    for b in blocks
                ) if blocks else True
                entry_extra["static_mask_reused"] = bool(reused)
        results.append({
            "n_tokens": len(seq),
            "last_logits": [float(x) for x in res.last_logits],
            "flops": res.flops.to_dict(),
            **entry_extra,
        })

    report = {
        "engine_version": __version__,
        "mode": args.mode,
        "plan": plan.to_json_dict() if plan is not None else None,
        "sequences": results,
    }
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.report, "prefill", args, [args.report], started)
    print(f"prefilled {len(results)} sequence(s) in mode {args.mode}")
    return 0


def cmd_benchmark(args) -> int:
    started = time.time()
    with open(args.config, encoding="utf-8") as fh:
        try:
            sweep = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.config} is not valid JSON: {exc}") from exc
    for key in ("model_config", "context_lengths", "keep_fractions"):
        if key not in sweep:
            raise ValidationError(f"benchmark config missing {key!r}")
    from .model import ModelConfig
    cfg = ModelConfig.from_json_dict(sweep["model_config"])
    lengths = [int(t) for t in sweep["context_lengths"]]
    dense_first_last = bool(sweep.get("dense_first_last", True))
    plans: dict = {"dense": None}
    for keep in sweep["keep_fractions"]:
        label = f"uniform{int(round(float(keep) * 100))}"
        plans[label] = uniform_plan(cfg.n_layers, float(keep), dense_first_last)
    rows = emit_curves(cfg, plans, lengths)

    if sweep.get("model_checkpoint"):
        ckpt = _load_model(sweep["model_checkpoint"])
        if sweep.get("tokens") is None:
            raise ValidationError("measured benchmark rows need a tokens file")
        seq = read_tokens_file(sweep["tokens"])[0]
        for T in lengths:
            if T > len(seq):
                raise ValidationError(
                    f"context length {T} exceeds measured sequence ({len(seq)})"
                )
            dense_total = prefill_blockwise(
                ckpt.weights, np.asarray(seq[:T]), mode="dense").flops.total()
            for label, plan in plans.items():
                if plan is None:
                    total = dense_total
                else:
                    res = prefill_blockwise(
                        ckpt.weights, np.asarray(seq[:T]), plan=plan,
                        mode="oracle", compensators=ckpt.compensators,
                    )
                    total = res.flops.total()
                rows.append({
                    "T": T, "component": "total", "flops": total,
                    "plan": label + "/measured",
                    "speedup": dense_total / total,
                })

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(curves_to_csv(rows))
    _write_manifest(args.out, "benchmark", args, [args.out], started)
    print(f"wrote {len(rows)} benchmark rows to {args.out}")
    return 0


def cmd_synth(args) -> int:
    started = time.time()
    cfg = load_config_json(args.config)
    outputs = [args.out]
    if args.kind == "model":
        weights = generate_synthetic_model(cfg, args.seed, scale=args.scale)
        write_checkpoint(args.out, cfg, weights=weights)
    elif args.kind == "clustered":
        spec = SyntheticCorpusSpec(
            n_clusters=args.n_clusters, n_sequences=args.n_sequences,
            seq_length=args.seq_length, seed=args.seed,
        )
        corpus = generate_clustered_corpus(cfg, spec)
        write_checkpoint(args.out, cfg, weights=corpus.weights)
        if args.tokens_out:
            write_tokens_file(args.tokens_out, corpus.sequences)
            outputs.append(args.tokens_out)
    else:  # skewed
        sink_layers = [int(x) for x in args.sink_layers.split(",") if x != ""]
        weights = attention_skewed_model(cfg, args.seed, sink_layers)
        write_checkpoint(args.out, cfg, weights=weights)
        if args.tokens_out:
            seqs = sink_prefixed_sequences(
                cfg, args.n_sequences, args.seq_length, args.seed + 1)
            write_tokens_file(args.tokens_out, seqs)
            outputs.append(args.tokens_out)
    _write_manifest(args.out, "synth", args, outputs, started)
    print(f"wrote synthetic {args.kind} fixture to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseprefill",
        description="Block-wise prefill engine with budgeted FFN sparsity",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("calibrate", help="derive a per-layer sparsity plan")
    p.add_argument("--model", required=True)
    p.add_argument("--sequences", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--dense-first-last", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--sink-block", type=int, default=0)
    p.add_argument("--normalize-per-token", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="train predictors or compensators")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--predictor", dest="target", action="store_const",
                       const="predictor")
    group.add_argument("--compensator", dest="target", action="store_const",
                       const="compensator")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.25)
    p.add_argument("--keep", type=float, default=0.5,
                   help="keep fraction for compensator distillation")
    p.add_argument("--phase-split", type=float, default=0.5)
    p.add_argument("--aux", default=None,
                   help="predictor checkpoint for compensator phase two")
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prefill", help="run a prefill and report logits/FLOPs")
    p.add_argument("--model", required=True)
    p.add_argument("--ckpt", default=None, help="auxiliary-net checkpoint")
    p.add_argument("--plan", default=None)
    p.add_argument("--mode", required=True,
                   choices=("dense", "oracle", "predicted", "static"))
    p.add_argument("--tokens", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_prefill)

    p = sub.add_parser("benchmark", help="sweep the cost model, optionally measured")
    p.add_argument("--config", required=True, help="sweep description JSON")
    p.add_argument("--out", required=True, help="curves CSV path")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("synth", help="generate synthetic fixtures")
    p.add_argument("kind", choices=("model", "clustered", "skewed"))
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=0.02)
    p.add_argument("--n-clusters", type=int, default=4)
    p.add_argument("--n-sequences", type=int, default=16)
    p.add_argument("--seq-length", type=int, default=256)
    p.add_argument("--sink-layers", default="1,3")
    p.add_argument("--tokens-out", default=None)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
