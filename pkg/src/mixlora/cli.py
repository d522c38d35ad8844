"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 numeric/degeneracy error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import os
import sys

import numpy as np
import yaml

from mixlora import checkpoint, gradcheck, harness, interference
from mixlora.config import RunConfig, load_config
from mixlora.errors import ConfigError, DegenerateGradientError, NumericError, StateError, TrainingError

log = logging.getLogger("mixlora")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def _write_meta(out_dir: str, command: str, cfg: RunConfig) -> None:
    # the only place a wall-clock timestamp appears
    meta = {"command": command, "config": cfg.source, "seed": cfg.seed,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    with open(os.path.join(out_dir, "run.meta"), "w") as fh:
        fh.write(checkpoint.format_kv(meta))


def _write_config_echo(out_dir: str, cfg: RunConfig) -> None:
    with open(os.path.join(out_dir, "config.echo.yaml"), "w") as fh:
        yaml.safe_dump(_plain(cfg.echo()), fh, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_loss_csv(path, report: harness.ExperimentReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "seed", "task", "loss"])
        for variant, seed, task, loss in report.rows():
            writer.writerow([variant, seed, task, _fmt(loss)])


def _write_summary(path, report: harness.ExperimentReport, lines) -> None:
    with open(path, "w") as fh:
        fh.write(f"experiment: {report.name}\n")
        fh.write(f"seeds: {report.seeds}\n\n")
        for line in lines:
            fh.write(line + "\n")
        fh.write("\nconfig:\n")
        fh.write(yaml.safe_dump(_plain(report.config), sort_keys=True))


# ----------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, out_dir: str) -> int:
    hcfg = cfg.harness
    tasks = harness.tasks_for(hcfg, cfg.seed, cfg.duplicate_tasks)
    variant = cfg.adapter["variant"]
    result = harness.train(variant, tasks, hcfg, cfg.seed, **cfg.adapter_overrides())
    models = result.model if isinstance(result.model, list) else [result.model]
    states = result.optimizer if isinstance(result.optimizer, list) else [result.optimizer]
    for k, (model, state) in enumerate(zip(models, states)):
        name = "model.ckpt" if len(models) == 1 else f"model_task{k}.ckpt"
        checkpoint.save(os.path.join(out_dir, name), model, optimizer=state,
                        extra={"variant": variant, "run_seed": cfg.seed})
    with open(os.path.join(out_dir, "loss_curves.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "task_step", "loss"])
        for task, losses in result.curves.items():
            for step, loss in enumerate(losses):
                writer.writerow([task, step, _fmt(loss)])
    losses = harness.evaluate(result, tasks, hcfg, cfg.seed)
    with open(os.path.join(out_dir, "eval.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "loss"])
        for task, loss in losses.items():
            writer.writerow([task, _fmt(loss)])
    log.info("trained %s: mean eval loss %.6g", variant, np.mean(list(losses.values())))
    return EXIT_OK


def cmd_compare(cfg: RunConfig, out_dir: str) -> int:
    report = harness.compare_experiment(cfg.harness)
    lines = []
    for seed in report.seeds:
        lines.append(
            f"seed {seed}: lora {report.mean_loss('lora', seed):.6g}  "
            f"mixlora {report.mean_loss('mixlora', seed):.6g}  "
            f"specialist {report.mean_loss('lora_specialist', seed):.6g}  "
            f"gap lora {report.specialist_gap('lora', seed):.6g}  "
            f"gap mixlora {report.specialist_gap('mixlora', seed):.6g}"
        )
    _write_loss_csv(os.path.join(out_dir, "compare.csv"), report)
    _write_summary(os.path.join(out_dir, "compare.txt"), report, lines)
    for line in lines:
        log.info(line)
    return EXIT_OK


def cmd_ablation(cfg: RunConfig, out_dir: str, kind: str) -> int:
    report = harness.routing_ablation(cfg.harness) if kind == "routing" else harness.cfs_ablation(cfg.harness)
    lines = []
    for seed in report.seeds:
        parts = "  ".join(f"{v} {report.mean_loss(v, seed):.6g}" for v in report.losses)
        lines.append(f"seed {seed}: {parts}")
    _write_loss_csv(os.path.join(out_dir, f"{kind}_ablation.csv"), report)
    _write_summary(os.path.join(out_dir, f"{kind}_ablation.txt"), report, lines)
    for line in lines:
        log.info(line)
    return EXIT_OK


def cmd_interference(cfg: RunConfig, out_dir: str, checkpoints) -> int:
    icfg = cfg.interference
    hcfg = cfg.harness
    meta = {"lam": float(icfg["lam"]), "seed": cfg.seed, "num_batches": icfg["num_batches"],
            "batch_size": icfg["batch_size"]}
    if checkpoints:
        tasks = harness.tasks_for(hcfg, cfg.seed, cfg.duplicate_tasks)
        batches = harness.interference_batches(tasks, hcfg, cfg.seed, icfg["num_batches"], icfg["batch_size"])
        for path in checkpoints:
            model, _, _ = checkpoint.load(path)
            matrix = interference.build_layer_averaged(model, tasks, icfg["group"], batches, icfg["lam"],
                                                       rng_seed=cfg.seed)
            stem = os.path.splitext(os.path.basename(path))[0]
            interference.export_matrix(matrix, os.path.join(out_dir, f"interference_{stem}.csv"),
                                       dict(meta, checkpoint=os.path.basename(path)))
            _report_degenerate(matrix)
        return EXIT_OK
    report = harness.interference_comparison(hcfg, lam=icfg["lam"], num_batches=icfg["num_batches"],
                                             batch_size=icfg["batch_size"], selector=icfg["group"],
                                             duplicate=cfg.duplicate_tasks)
    lines = []
    for seed in report.seeds:
        for name in ("lora", "mixlora"):
            matrix = report.extras["matrices"][name][seed]
            interference.export_matrix(matrix, os.path.join(out_dir, f"interference_{name}_seed{seed}.csv"),
                                       dict(meta, seed=seed, variant=name))
            _report_degenerate(matrix)
        lines.append(f"seed {seed}: negative-mean lora {report.extras['negative_mean']['lora'][seed]:.6g}  "
                     f"mixlora {report.extras['negative_mean']['mixlora'][seed]:.6g}")
    _write_summary(os.path.join(out_dir, "interference.txt"), report, lines)
    for line in lines:
        log.info(line)
    return EXIT_OK


def _report_degenerate(matrix):
    if matrix.degenerate:
        log.warning("degenerate interference entries set to NaN: %s", matrix.degenerate)


def cmd_routing_dump(cfg: RunConfig, out_dir: str, checkpoints) -> int:
    if len(checkpoints) != 1:
        raise ConfigError("routing-dump needs exactly one --checkpoint")
    model, _, _ = checkpoint.load(checkpoints[0])
    if not model.is_mixlora:
        raise ConfigError("routing-dump needs a MixLoRA checkpoint")
    tasks = harness.tasks_for(cfg.harness, cfg.seed, cfg.duplicate_tasks)
    n = cfg.routing["n_samples"]
    sels = harness.collect_selections(model, tasks, cfg.harness, n, cfg.seed)
    with open(os.path.join(out_dir, "selections.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "instance", "layer", "side", "indices"])
        for task, (a_side, b_side) in sels.items():
            for side, per_layer in (("a", a_side), ("b", b_side)):
                for layer, rows in enumerate(per_layer):
                    for i, idx in enumerate(rows):
                        writer.writerow([task, i, layer, side, " ".join(map(str, idx))])
    stats = harness.routing_similarity(model, tasks, cfg.harness, n, cfg.seed)
    with open(os.path.join(out_dir, "routing_similarity.txt"), "w") as fh:
        fh.write(checkpoint.format_kv({k: (float(v) if isinstance(v, float) else v) for k, v in stats.items()}))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out_dir: str) -> int:
    g = cfg.gradcheck
    seeds = [cfg.seed + k for k in range(g["seeds"])]
    results = gradcheck.run_suite(seeds, eps=g["eps"])
    failed = 0
    with open(os.path.join(out_dir, "gradcheck.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "routing_mode", "gating_mode", "cfs_enabled", "tensor", "rel_error", "excluded"])
        for r in results:
            for name, err in list(r.errors.items()) + [("input", r.input_error)]:
                writer.writerow([r.seed, r.routing_mode, r.gating_mode, r.cfs_enabled, name, _fmt(err),
                                 r.flipped])
            if not r.passed(g["tol"]):
                failed += 1
    log.info("gradcheck: %d/%d instances passed", len(results) - failed, len(results))
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


COMMANDS = ("train", "compare", "routing-ablation", "cfs-ablation", "interference", "routing-dump", "gradcheck")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixlora", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML run config (defaults are used when omitted)")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    parser.add_argument("--checkpoint", action="append", default=[], help="checkpoint path (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        out_dir = args.out or cfg.output_dir
        os.makedirs(out_dir, exist_ok=True)
        _write_config_echo(out_dir, cfg)
        if args.command == "train":
            code = cmd_train(cfg, out_dir)
        elif args.command == "compare":
            code = cmd_compare(cfg, out_dir)
        elif args.command in ("routing-ablation", "cfs-ablation"):
            code = cmd_ablation(cfg, out_dir, args.command.split("-")[0])
        elif args.command == "interference":
            code = cmd_interference(cfg, out_dir, args.checkpoint)
        elif args.command == "routing-dump":
            code = cmd_routing_dump(cfg, out_dir, args.checkpoint)
        else:
            code = cmd_gradcheck(cfg, out_dir)
        _write_meta(out_dir, args.command, cfg)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError, DegenerateGradientError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, StateError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
