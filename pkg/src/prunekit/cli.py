"""Command-line interface.

Subcommands: count, train, prune, eval, scenario, sweep. All failures
exit nonzero after printing one machine-readable JSON error line to
stderr. Heavy imports happen per subcommand so `count` stays fast.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _parse_input_shape(text: str) -> tuple:
    try:
        dims = tuple(int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"cannot parse input shape '{text}' (expected like 3x256x128)")
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"input shape must be CxHxW with positive dims, got '{text}'")
    return dims


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _cmd_count(args) -> int:
    from .graph import count_flops, count_params
    from .models import load_architecture

    graph = load_architecture(args.arch, seed=args.seed)
    shape = _parse_input_shape(args.input)
    flops = count_flops(graph, shape)
    params = count_params(graph)
    if args.format == "json":
        print(json.dumps({"arch": args.arch, "input": list(shape),
                          "flops": flops, "params": params}, sort_keys=True))
    else:
        print(f"arch: {args.arch}")
        print(f"input: {shape[0]}x{shape[1]}x{shape[2]}")
        print(f"flops: {flops} ({flops / 1e9:.3f} GFLOPs)")
        print(f"params: {params} ({params / 1e6:.3f} M)")
    return 0


def _cmd_train(args) -> int:
    import numpy as np

    from .config import load_config
    from .datasets import gen_source_dataset
    from .graph import append_classifier
    from .modelio import save
    from .models import load_architecture
    from .training import Trainer

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _ensure_out(args.out)
    data = gen_source_dataset(cfg.source)
    graph = load_architecture(cfg.arch, seed=cfg.seed)
    clf = append_classifier(graph, data.n_classes, seed=cfg.seed + 1)
    trainer = Trainer(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                      batch_size=cfg.batch_size, loss="cross_entropy", seed=cfg.seed)
    history = trainer.train(clf, data, cfg.pretrain_epochs,
                            rng=np.random.default_rng(cfg.seed))
    model_path = os.path.join(out, "model.pknet")
    save(clf, model_path)
    with open(os.path.join(out, "train_history.json"), "w", encoding="utf-8") as fh:
        json.dump({"loss": history}, fh, sort_keys=True, indent=2)
    print(f"saved {model_path} (final loss {history[-1]:.4f})" if history
          else f"saved {model_path}")
    return 0


def _cmd_prune(args) -> int:
    import numpy as np

    from .config import load_config
    from .datasets import gen_source_dataset, gen_target_reid_dataset, probe_from
    from .graph import strip_heads
    from .modelio import load, save
    from .reporting import ProgressLog
    from .scenarios import _ScenarioRun
    from .strategies import OneStepPruner

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _ensure_out(args.out)
    graph = load(args.model)
    run = _ScenarioRun(cfg)
    if args.domain == "source":
        data, loss = run.source_data, "cross_entropy"
    else:
        graph = strip_heads(graph)
        data, loss = run.target_data, "batch_hard"
    pruned = run._prune_stage(graph, data, loss, args.domain,
                              cfg.schedule.target_compression)
    log = ProgressLog()
    log.extend_from_records(run.last_prune_report_)
    log.write(os.path.join(out, "prune_progress.csv"))
    model_path = os.path.join(out, "pruned.pknet")
    save(pruned, model_path)
    print(f"saved {model_path}")
    return 0


def _cmd_eval(args) -> int:
    from .config import load_config
    from .datasets import gen_target_reid_dataset
    from .graph import strip_heads
    from .modelio import load
    from .reid import eval_cmc_map
    from .training import embed_dataset

    cfg = load_config(args.config)
    graph = strip_heads(load(args.model))
    data = gen_target_reid_dataset(cfg.target)
    split = data.split_embeddings(lambda imgs: embed_dataset(graph, imgs))
    report = eval_cmc_map(split, max_rank=cfg.max_rank)
    print(f"rank1: {report.rank1:.4f}")
    print(f"rank5: {report.rank_k(5):.4f}")
    print(f"rank10: {report.rank_k(10):.4f}")
    print(f"map: {report.map:.4f}")
    if args.out:
        out = _ensure_out(args.out)
        with open(os.path.join(out, "eval.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    return 0


def _cmd_scenario(args) -> int:
    from .config import load_config
    from .reporting import emit_report
    from .scenarios import run_scenario

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _ensure_out(args.out)
    report = run_scenario(cfg)
    emit_report(report, os.path.join(out, "report.csv"), "csv")
    emit_report(report, os.path.join(out, "report.json"), "json")
    for rec in report.stages:
        print(f"{rec.stage}: flops={rec.flops} params={rec.params} "
              f"rank1={rec.rank1:.4f} map={rec.map:.4f}")
    return 0


def _cmd_sweep(args) -> int:
    from .config import load_config
    from .reporting import emit_plot, emit_report
    from .scenarios import sweep_pruning_rates

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _ensure_out(args.out)
    rates = [float(r) for r in args.rates.split(",") if r]
    results = sweep_pruning_rates(cfg, rates, threads=args.threads)
    lines = ["rate,rank1,map"]
    points_map = []
    points_rank1 = []
    for rate, report in results:
        final = report.stages[-1]
        lines.append(f"{rate!r},{final.rank1!r},{final.map!r}")
        points_map.append((rate, final.map))
        points_rank1.append((rate, final.rank1))
        emit_report(report, os.path.join(out, f"report_rate_{rate:g}.json"), "json")
    with open(os.path.join(out, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    emit_plot({"mAP": points_map, "rank1": points_rank1},
              os.path.join(out, "sweep.svg"), xlabel="pruning rate", ylabel="score")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunekit",
        description="Channel pruning experiments on desk-scale CNNs")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker processes for sweep runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="FLOPs and parameter count of an architecture")
    p.add_argument("--arch", required=True)
    p.add_argument("--input", default="3x256x128", help="input shape CxHxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=_cmd_count)

    p = sub.add_parser("train", help="pretrain a model on the synthetic source set")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("prune", help="prune a saved model with the configured strategy")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("eval", help="CMC and mAP of a saved model on the target test split")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("scenario", help="run a full pruning scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.set_defaults(func=_cmd_scenario)

    p = sub.add_parser("sweep", help="run a scenario over several pruning rates")
    p.add_argument("--config", required=True)
    p.add_argument("--rates", default="0.1,0.25,0.5,0.75")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
