"""
cli.py
Command line for the feature codec and its experiments
======================================================

    python -m taxocodec gen        --config demo.cfg
    python -m taxocodec pretrain   --config demo.cfg
    python -m taxocodec train      --group semantic --lambda 1.0 --freeze --out runs/sem
    python -m taxocodec encode     --model runs/sem/model.joblib --split test --index 3
    python -m taxocodec decode     --model runs/sem/model.joblib --bitstream runs/sem/test_3.txc
    python -m taxocodec eval-rd    --tasks segmentation --lambda-grid 2^-6:2^6 --control
    python -m taxocodec plateau    --curve runs/rd_curve.csv --control runs/control.json
    python -m taxocodec aggregate  --group scene,count,segmentation --group orientation,shading,edges
    python -m taxocodec unseen     --plus

Failures print one line ``error code=<CODE> detail="<message>"`` on stderr.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import __version__
from .aggregation import load_aggregate, save_aggregate
from .codec import Bitstream
from .config import ExperimentConfig, load_config, log_level
from .errors import ArtifactNotFoundError, ConfigError, DataNotFoundError, TaxoCodecError
from .experiments import (compare_aggregation, encode_image, plateau_table, predict_bitstream,
                          pretrain_config, run_control, run_rd_sweep, run_unseen_protocol, train_model)
from .taskbench import GROUPS, SPLITS, SceneDataset, TaskBench, TaskNet, load_task_nets, pretrain, save_task_nets
from .training import RDCurve, RDPoint, parse_lambda_grid

logger = logging.getLogger("taxocodec")


def _write_json(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    logger.info("Wrote %s", path)


def _out(cfg: ExperimentConfig, args, name: str) -> str:
    directory = args.out or cfg.out_dir
    os.makedirs(directory, exist_ok=True)
    return os.path.join(directory, name)


def _resolve_tasks(cfg: ExperimentConfig, args) -> List[str]:
    """--tasks wins, then every --group (a group name or a comma list), then the config."""
    if args.tasks:
        return [t.strip() for t in args.tasks.split(",") if t.strip()]
    if args.group:
        tasks: List[str] = []
        for group in _resolve_groups(args.group):
            tasks.extend(t for t in group if t not in tasks)
        return tasks
    return list(cfg.tasks)


def _resolve_groups(values: List[str]) -> List[List[str]]:
    groups = []
    for value in values:
        if value in GROUPS:
            groups.append(list(GROUPS[value]))
        else:
            groups.append([t.strip() for t in value.split(",") if t.strip()])
    return groups


def _load_config(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "lambda_grid": args.lambda_grid}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.tasks or args.group:
        overrides["tasks"] = _resolve_tasks(ExperimentConfig(), args)
    if args.group and args.command in ("aggregate", "unseen"):
        overrides["groups"] = _resolve_groups(args.group)
    return load_config(args.config, **overrides)


def _load_nets(cfg: ExperimentConfig) -> dict:
    return load_task_nets(os.path.join(cfg.bench_dir, "tasknets.joblib"))


def _group_tasks(cfg: ExperimentConfig) -> List[str]:
    return sorted({t for g in cfg.groups for t in g})


def _load_bench(cfg: ExperimentConfig, tasks: Optional[List[str]] = None) -> TaskBench:
    bench = TaskBench.load(cfg.bench_dir)
    missing = [t for t in (tasks or cfg.tasks) if t not in bench.nets]
    if missing:
        raise ArtifactNotFoundError(f"no pretrained task nets for {missing} in {cfg.bench_dir}; run 'pretrain'")
    return bench


def _require_model(path: Optional[str]) -> str:
    if not path:
        raise ConfigError("--model is required")
    if not os.path.exists(path):
        raise ArtifactNotFoundError(f"model not found: {path}")
    return path


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_gen(cfg: ExperimentConfig, args) -> None:
    directory = args.out or cfg.bench_dir
    os.makedirs(directory, exist_ok=True)
    for split, count in zip(SPLITS, (cfg.train_count, cfg.val_count, cfg.test_count)):
        data = SceneDataset.generate(cfg.seed, count, split)
        data.save(os.path.join(directory, split))
        print(f"Generated {split}: {count} scenes -> {os.path.join(directory, split)}.bin")


def cmd_pretrain(cfg: ExperimentConfig, args) -> None:
    directory = args.out or cfg.bench_dir
    train = SceneDataset.load(os.path.join(cfg.bench_dir, "train"))
    val = SceneDataset.load(os.path.join(cfg.bench_dir, "val"))
    pre = pretrain_config(cfg)
    nets = {t: pretrain(TaskNet(t, cfg.seed), train, val, pre) for t in cfg.tasks}
    os.makedirs(directory, exist_ok=True)
    save_task_nets(nets, os.path.join(directory, "tasknets.joblib"))
    for task, net in nets.items():
        print(f"Qualified {task}: frozen hash {net.frozen_hash()[:16]}")


def cmd_train(cfg: ExperimentConfig, args) -> None:
    bench = _load_bench(cfg)
    tasks = list(cfg.tasks)
    model, result = train_model(cfg, bench, tasks, cfg.lambdas_for(tasks, args.lam), cfg.seed,
                                rate_term_enabled=not args.no_rate, freeze=args.freeze)
    path = _out(cfg, args, "model.joblib")
    save_aggregate(model, path)
    history = [{"step": r.step, "loss": r.loss, "bpp": r.bpp, "phase": r.phase, **r.distortions}
               for r in result.history]
    _write_json(_out(cfg, args, "train_history.json"),
                {"provenance": cfg.provenance(), "best_step": result.best_step,
                 "best_cost": result.best_cost, "history": history})
    print(f"Trained {','.join(tasks)} at lambda={args.lam:g}: best step {result.best_step} -> {path}")


def cmd_encode(cfg: ExperimentConfig, args) -> None:
    model = load_aggregate(_require_model(args.model))
    nets = _load_nets(cfg)
    data = SceneDataset.load(os.path.join(cfg.bench_dir, args.split))
    if not 0 <= args.index < len(data):
        raise ConfigError(f"--index {args.index} outside 0..{len(data) - 1}")
    bs = encode_image(model, nets, data.images[args.index])
    path = args.bitstream or _out(cfg, args, f"{args.split}_{args.index}.txc")
    with open(path, "wb") as f:
        f.write(bs.to_bytes())
    _write_json(path + ".json", {"provenance": cfg.provenance(), "model": args.model, "split": args.split,
                                 "index": args.index, "tasks": model.task_ids, "total_bits": bs.total_bits,
                                 "bpp": bs.total_bits / (cfg.source_h * cfg.source_w)})
    print(f"Encoded {args.split}[{args.index}]: {bs.total_bits} bits -> {path}")


def cmd_decode(cfg: ExperimentConfig, args) -> None:
    model = load_aggregate(_require_model(args.model))
    if not args.bitstream or not os.path.exists(args.bitstream):
        raise DataNotFoundError(f"bitstream not found: {args.bitstream}")
    with open(args.bitstream, "rb") as f:
        bs = Bitstream.from_bytes(f.read())
    tasks = [args.unseen] if args.unseen else model.task_ids
    preds = predict_bitstream(model, _load_nets(cfg), bs, tasks, unseen=bool(args.unseen))
    path = _out(cfg, args, os.path.basename(args.bitstream) + ".predictions.json")
    _write_json(path, {"provenance": cfg.provenance(), "bitstream": args.bitstream,
                       "predictions": {t: np.asarray(p).tolist() for t, p in preds.items()}})
    print(f"Decoded {len(preds)} task(s) -> {path}")


def cmd_eval_rd(cfg: ExperimentConfig, args) -> None:
    bench = _load_bench(cfg)
    curve = run_rd_sweep(cfg, bench, cfg.tasks, parse_lambda_grid(cfg.lambda_grid), cfg.seeds)
    path = _out(cfg, args, "rd_curve.csv")
    curve.to_csv(path, cfg.config_hash())
    print(f"R-D curve with {len(curve.points)} points -> {path}")
    if args.control:
        control = run_control(cfg, bench, cfg.tasks)
        control_path = _out(cfg, args, "control.json")
        _write_json(control_path, {"provenance": cfg.provenance(control.seed), "lambdas": control.lambdas,
                                   "bpp": control.bpp, "metrics": control.metrics})
        print(f"Control run -> {control_path}")


def cmd_plateau(cfg: ExperimentConfig, args) -> None:
    for flag, path in (("--curve", args.curve), ("--control", args.control)):
        if not path or not os.path.exists(path):
            raise DataNotFoundError(f"{flag} file not found: {path}")
    curve = RDCurve.read_csv(args.curve)
    with open(args.control) as f:
        raw = json.load(f)
    control = RDPoint(raw["lambdas"], raw["provenance"]["seed"], raw["bpp"], raw["metrics"])
    tasks = [t for t in cfg.tasks if any(k.startswith(t + ".") for k in control.metrics)]
    table = plateau_table(curve, control, tasks, cfg.plateau_eps)
    table["config_hash"] = cfg.config_hash()
    table["tool_version"] = __version__
    path = _out(cfg, args, "plateau.csv")
    table.to_csv(path, index=False, float_format="%.17g")
    for row in table.itertuples():
        status = f"{row.plateau_bpp:.4f} bpp" if row.feasible else "infeasible"
        print(f"Plateau {row.task}: {status}")


def cmd_aggregate(cfg: ExperimentConfig, args) -> None:
    bench = _load_bench(cfg, _group_tasks(cfg))
    report = compare_aggregation(cfg, bench, cfg.groups, cfg.seeds)
    frame = report.to_frame()
    frame["config_hash"] = cfg.config_hash()
    frame["tool_version"] = __version__
    path = _out(cfg, args, "aggregation.csv")
    frame.to_csv(path, index=False, float_format="%.17g")
    mean = report.mean_saving()
    _write_json(_out(cfg, args, "aggregation.json"),
                {"provenance": cfg.provenance(), "groups": report.groups, "plateau_eps": cfg.plateau_eps,
                 "mean_saving": mean, "rows": report.rows})
    for row in report.rows:
        if not row["feasible"]:
            missing = ", ".join(k for k, v in row.items() if ":" in k and v is None)
            print(f"Seed {row['seed']}: infeasible ({missing} never reached the plateau)")
    if mean is None:
        print(f"No seed reached the plateau in every setting -> {path}")
    else:
        print(f"Mean saving of grouped over customized coding at the plateau: {100 * mean:.1f}% -> {path}")


def cmd_unseen(cfg: ExperimentConfig, args) -> None:
    groups = [g for g in cfg.groups if len(g) >= 3]
    if not groups:
        raise ConfigError("the unseen-task protocol needs a group of at least three tasks")
    bench = _load_bench(cfg, [t for g in groups for t in g[:3]])
    protocol = "binary+" if args.plus else "binary"
    results = []
    for group in groups:
        reports = [run_unseen_protocol(cfg, bench, group, plus=args.plus, seed=seed) for seed in cfg.seeds]
        results.append({"group": group, "mean_improvement": float(np.mean([r.improvement for r in reports])),
                        "runs": [r.to_dict() for r in reports]})
        for r in reports:
            print(f"{protocol} {'+'.join(r.supervised)} seed {r.seed}: {r.unseen_task} loss "
                  f"{r.trained_loss:.4f} (random decoder {r.random_loss:.4f})")
    path = _out(cfg, args, f"unseen_{protocol.replace('+', '_plus')}.json")
    _write_json(path, {"provenance": cfg.provenance(), "protocol": protocol, "groups": results})


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval-rd": cmd_eval_rd,
    "plateau": cmd_plateau,
    "aggregate": cmd_aggregate,
    "unseen": cmd_unseen,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taxocodec", description="Multi-task feature compression toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment config file (key = value lines)")
    common.add_argument("--seed", type=int, help="Override the seed (and the seed list)")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--tasks", help="Comma-separated task list")
    common.add_argument("--group", action="append", help="Task group name or comma list; repeatable")
    common.add_argument("--lambda-grid", help="Lambda grid, e.g. 2^-6:2^6 or 0.5,1,2")
    common.add_argument("--log-level", help="Logging level (default from TAXOCODEC_LOG_LEVEL or INFO)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="Generate the synthetic bench datasets")
    sub.add_parser("pretrain", parents=[common], help="Pretrain, qualify and freeze task nets")

    p = sub.add_parser("train", parents=[common], help="Stage-1 R-D training of a codec")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="Lambda for every task")
    p.add_argument("--freeze", action="store_true", help="Freeze the trained model before saving")
    p.add_argument("--no-rate", action="store_true", help="Control run: drop the rate term")

    for name, help_text in (("encode", "Code one bench image into a .txc bitstream"),
                            ("decode", "Decode a bitstream and run the task tails")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--model", help="Aggregate model checkpoint")
        p.add_argument("--bitstream", help="Bitstream path")
        p.add_argument("--split", default="test", choices=list(SPLITS))
        p.add_argument("--index", type=int, default=0)
        p.add_argument("--unseen", help="Decode this task through its unseen-task decoder")

    p = sub.add_parser("eval-rd", parents=[common], help="Lambda sweep to an R-D curve CSV")
    p.add_argument("--control", action="store_true", help="Also run the rate-unconstrained control")

    p = sub.add_parser("plateau", parents=[common], help="Plateau bit-rate per task")
    p.add_argument("--curve", help="R-D curve CSV")
    p.add_argument("--control", help="Control run JSON")

    sub.add_parser("aggregate", parents=[common], help="Customized vs grouped compression")
    p = sub.add_parser("unseen", parents=[common], help="Binary / Binary+ unseen-task protocol")
    p.add_argument("--plus", action="store_true", help="Binary+: feed the unseen task's feature with lambda 0")
    return parser


def _report(code: str, detail: str) -> None:
    detail = " ".join(str(detail).split()).replace('"', "'")
    print(f'error code={code} detail="{detail}"', file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log_level or log_level()).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](cfg, args)
    except TaxoCodecError as exc:
        _report(exc.code, exc.detail)
        return 2
    except Exception as exc:
        logger.debug("Unexpected failure in '%s'", args.command, exc_info=True)
        _report("INTERNAL", str(exc))
        return 1
    return 0
