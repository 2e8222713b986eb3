"""
experiments.py
Experiment protocols on the synthetic bench
===========================================

* ``run_rd_sweep``: train one model per (lambda, seed), measure actual coded
  bpp and task scores on the test split, collect an RDCurve
* ``run_control``: the same architecture trained without the rate term
* ``plateau_table``: per-task plateau bpp against the control
* ``compare_aggregation``: per-task (customized) codecs vs grouped codecs,
  each at its plateau rate
* ``run_unseen_protocol``: Binary / Binary+ unseen-task support inside a group
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .aggregation import AggregateModel, aggregate_compress, aggregate_decompress, attach_unseen_decoder
from .codec import Bitstream
from .config import ExperimentConfig, worker_threads
from .errors import ConfigError
from .metrics import PRIMARY_METRIC, MetricSuite
from .numerics import Tensor, no_grad
from .taskbench import PretrainConfig, TaskBench, TaskNet, task_spec
from .training import (RDConfig, RDCurve, RDPoint, TrainResult, parse_lambda_grid, plateau_search,
                       train_stage1, train_stage2_unseen, unseen_decoder_id, unseen_loss)

logger = logging.getLogger(__name__)


def pretrain_config(cfg: ExperimentConfig) -> PretrainConfig:
    ratios = {t: 0.95 for t in cfg.tasks}
    ratios.update(cfg.qualification_ratio)
    return PretrainConfig(steps=cfg.pretrain_steps, batch_size=16, lr=cfg.pretrain_lr, seed=cfg.seed,
                          qualification_ratio=ratios)


def build_bench(cfg: ExperimentConfig, n_jobs: int = 1) -> TaskBench:
    return TaskBench.create(cfg.seed, (cfg.train_count, cfg.val_count, cfg.test_count),
                            cfg.tasks, pretrain_config(cfg), n_jobs=n_jobs)


def rd_config(cfg: ExperimentConfig, lambdas: Dict[str, float], seed: int,
              rate_term_enabled: bool = True, steps: Optional[int] = None) -> RDConfig:
    return RDConfig(lambdas=lambdas, steps=cfg.steps if steps is None else steps,
                    batch_size=cfg.batch_size, seed=seed, rate_term_enabled=rate_term_enabled,
                    lr=cfg.lr, source_h=cfg.source_h, source_w=cfg.source_w,
                    eval_every=cfg.eval_every, val_items=cfg.val_items)


def new_model(cfg: ExperimentConfig, bench: TaskBench, tasks: Sequence[str], seed: int) -> AggregateModel:
    return AggregateModel(bench.feature_shapes(tasks), cfg.codec_overrides(), cfg.common_channels, seed=seed)


def train_model(cfg: ExperimentConfig, bench: TaskBench, tasks: Sequence[str], lambdas: Dict[str, float],
                seed: int, rate_term_enabled: bool = True, freeze: bool = True) -> Tuple[AggregateModel, TrainResult]:
    model = new_model(cfg, bench, tasks, seed)
    result = train_stage1(model, bench, rd_config(cfg, lambdas, seed, rate_term_enabled))
    return (model.freeze() if freeze else model), result


def evaluate_model(model: AggregateModel, bench: TaskBench, split: str = "test",
                   max_items: int = 128, tasks: Optional[Sequence[str]] = None,
                   unseen: bool = False) -> Tuple[float, Dict[str, float]]:
    """
    Code every item for real, decode each task from the bitstream, run the
    frozen tails and score. Returns (mean container bpp, ``task.metric`` scores).
    With ``unseen`` set, tasks are decoded through their unseen-task decoders.
    """
    data = bench.split(split)
    n = min(max_items, len(data))
    tasks = list(tasks or model.task_ids)
    sources = list(model.task_ids)
    pixels = model.codec.config.source_h * model.codec.config.source_w
    bits = 0
    decoded: Dict[str, List[np.ndarray]] = {t: [] for t in tasks}
    for i in range(n):
        images, _ = data.batch([i])
        feats = {t: bench.features(t, images).data[0] for t in sources}
        bs = aggregate_compress(model, feats)
        bits += bs.total_bits
        for t in tasks:
            key = unseen_decoder_id(model, t) if unseen else t
            decoded[t].append(aggregate_decompress(model, bs, key))

    suite, scores = MetricSuite(), {}
    for t in tasks:
        net, spec = bench.net(t), task_spec(t)
        with no_grad():
            outputs = net.tail(Tensor(np.stack(decoded[t])))
        labels = data.labels[t][:n]
        for name, value in suite.evaluate(spec.kind, net.predict(outputs), labels, spec.channels).items():
            scores[f"{t}.{name}"] = value
        if spec.kind != "regression":
            scores[f"{t}.cross_entropy"] = suite.cross_entropy(outputs.data, labels)
    return bits / (n * pixels), scores


def encode_image(model: AggregateModel, nets: Mapping[str, TaskNet], image: np.ndarray) -> Bitstream:
    """Run each task head on one 3xHxW image and code the features into one bitstream."""
    batch = Tensor(np.asarray(image, dtype=np.float32)[None])
    with no_grad():
        feats = {t: nets[t].head(batch).data[0] for t in model.task_ids}
    return aggregate_compress(model, feats)


def predict_bitstream(model: AggregateModel, nets: Mapping[str, TaskNet], bs: Bitstream,
                      tasks: Optional[Sequence[str]] = None, unseen: bool = False) -> Dict[str, np.ndarray]:
    """Decode a bitstream for each task and run the frozen tail to a prediction."""
    out = {}
    for t in tasks or model.task_ids:
        feature = aggregate_decompress(model, bs, unseen_decoder_id(model, t) if unseen else t)
        with no_grad():
            out[t] = nets[t].predict(nets[t].tail(Tensor(feature[None])))[0]
    return out


def primary_key(task: str) -> str:
    return f"{task}.{PRIMARY_METRIC[task_spec(task).kind][0]}"


# ============================================================================
# R-D SWEEP, CONTROL AND PLATEAU
# ============================================================================

def _sweep_point(cfg: ExperimentConfig, bench: TaskBench, tasks: Sequence[str],
                 lam: float, seed: int) -> RDPoint:
    lambdas = cfg.lambdas_for(list(tasks), lam)
    model, _ = train_model(cfg, bench, tasks, lambdas, seed)
    bpp, scores = evaluate_model(model, bench, "test", cfg.eval_items)
    logger.info("sweep lambda=%g seed=%d bpp=%.4f", lam, seed, bpp)
    return RDPoint(lambdas, seed, bpp, scores)


def run_rd_sweep(cfg: ExperimentConfig, bench: TaskBench, tasks: Optional[Sequence[str]] = None,
                 grid: Optional[Sequence[float]] = None, seeds: Optional[Sequence[int]] = None,
                 n_jobs: Optional[int] = None) -> RDCurve:
    tasks = list(tasks or cfg.tasks)
    grid = list(grid if grid is not None else parse_lambda_grid(cfg.lambda_grid))
    seeds = list(seeds if seeds is not None else cfg.seeds)
    jobs = [(lam, seed) for seed in seeds for lam in grid]
    points = Parallel(n_jobs=n_jobs or worker_threads())(
        delayed(_sweep_point)(cfg, bench, tasks, lam, seed) for lam, seed in jobs)
    return RDCurve(list(points))


def run_control(cfg: ExperimentConfig, bench: TaskBench, tasks: Optional[Sequence[str]] = None,
                seed: Optional[int] = None) -> RDPoint:
    """Identical architecture and schedule, rate term removed, lambda = 1 per task."""
    tasks = list(tasks or cfg.tasks)
    seed = cfg.seed if seed is None else seed
    lambdas = cfg.lambdas_for(tasks, 1.0)
    model, _ = train_model(cfg, bench, tasks, lambdas, seed, rate_term_enabled=False)
    bpp, scores = evaluate_model(model, bench, "test", cfg.eval_items)
    return RDPoint(lambdas, seed, bpp, scores)


def plateau_table(curve: RDCurve, control: RDPoint, tasks: Sequence[str], eps: float = 0.02) -> pd.DataFrame:
    rows = []
    for task in tasks:
        key = primary_key(task)
        plateau = plateau_search(curve, {key: control.metrics[key]}, eps)
        rows.append({"task": task, "metric": key, "control": control.metrics[key],
                     "plateau_bpp": plateau, "feasible": plateau is not None})
    return pd.DataFrame(rows)


# ============================================================================
# AGGREGATION
# ============================================================================

def setting_label(tasks: Sequence[str]) -> str:
    return "+".join(tasks)


def plateau_rate(cfg: ExperimentConfig, bench: TaskBench, tasks: Sequence[str], seed: int,
                 n_jobs: Optional[int] = None) -> Tuple[Optional[float], RDPoint, RDCurve]:
    """
    Plateau bpp of one codec coding ``tasks`` jointly: sweep the lambda grid,
    train the rate-free control and take the smallest rate at which every
    task's primary metric is within ``plateau_eps`` of the control.
    """
    tasks = list(tasks)
    control = run_control(cfg, bench, tasks, seed)
    curve = run_rd_sweep(cfg, bench, tasks, seeds=[seed], n_jobs=n_jobs)
    targets = {primary_key(t): control.metrics[primary_key(t)] for t in tasks}
    plateau = plateau_search(curve, targets, cfg.plateau_eps)
    if plateau is None:
        logger.warning("no plateau for %s at seed %d", setting_label(tasks), seed)
    return plateau, control, curve


def aggregation_row(seed: int, customized: Mapping[str, Optional[float]],
                    grouped: Mapping[str, Optional[float]]) -> dict:
    """
    One comparison row from per-setting plateau rates. Totals and the saving
    are only defined when every setting on both sides reached its plateau.
    """
    feasible = all(v is not None for v in customized.values()) and all(v is not None for v in grouped.values())
    custom_bpp = float(sum(customized.values())) if feasible else None
    grouped_bpp = float(sum(grouped.values())) if feasible else None
    row = {"seed": seed, "feasible": feasible, "customized_bpp": custom_bpp, "grouped_bpp": grouped_bpp,
           "saving": 1.0 - grouped_bpp / custom_bpp if feasible and custom_bpp > 0 else None}
    row.update({f"customized:{k}": v for k, v in customized.items()})
    row.update({f"grouped:{k}": v for k, v in grouped.items()})
    return row


@dataclass
class AggregationReport:
    groups: List[List[str]]
    rows: List[dict] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def mean_saving(self) -> Optional[float]:
        """Mean over the seeds where every setting reached its plateau."""
        savings = [r["saving"] for r in self.rows if r["saving"] is not None]
        return float(np.mean(savings)) if savings else None


def compare_aggregation(cfg: ExperimentConfig, bench: TaskBench, groups: Optional[Sequence[Sequence[str]]] = None,
                        seeds: Optional[Sequence[int]] = None, n_jobs: Optional[int] = None) -> AggregationReport:
    """
    Total plateau bpp of one codec per task (customized) against one codec
    per group. Each setting is compared at its own plateau, so both sides
    reach the control-level task performance; savings are relative to
    customized.
    """
    groups = [list(g) for g in (groups or cfg.groups)]
    seeds = list(seeds if seeds is not None else cfg.seeds)
    report = AggregationReport(groups)
    for seed in seeds:
        customized = {t: plateau_rate(cfg, bench, [t], seed, n_jobs)[0]
                      for t in sorted({t for g in groups for t in g})}
        grouped = {setting_label(g): plateau_rate(cfg, bench, g, seed, n_jobs)[0] for g in groups}
        row = aggregation_row(seed, customized, grouped)
        report.rows.append(row)
        if row["feasible"]:
            logger.info("aggregation seed %d: customized %.4f bpp, grouped %.4f bpp, saving %.1f%%",
                        seed, row["customized_bpp"], row["grouped_bpp"], 100.0 * row["saving"])
        else:
            missing = [k for k, v in row.items() if ":" in k and v is None]
            logger.warning("aggregation seed %d: no plateau for %s", seed, ", ".join(missing))
    return report


# ============================================================================
# UNSEEN TASKS
# ============================================================================

@dataclass
class UnseenReport:
    protocol: str
    seed: int
    unseen_task: str
    supervised: List[str]
    fed: List[str]
    random_loss: float
    trained_loss: float
    bpp: float
    scores: Dict[str, float]

    @property
    def improvement(self) -> float:
        return 1.0 - self.trained_loss / self.random_loss

    def to_dict(self) -> dict:
        out = asdict(self)
        out["improvement"] = self.improvement
        return out


def unseen_split(group: Sequence[str]) -> Tuple[List[str], str]:
    """The first two tasks of a group are supervised, the third is held out."""
    if len(group) < 3:
        raise ConfigError(f"group {setting_label(group)} needs three tasks for the unseen-task protocol")
    return list(group[:2]), group[2]


def run_unseen_protocol(cfg: ExperimentConfig, bench: TaskBench, group: Optional[Sequence[str]] = None,
                        plus: bool = False, seed: Optional[int] = None) -> UnseenReport:
    """
    Binary: the codec is trained on the first two tasks of a group, frozen,
    and a decoder for the group's third task is fitted on the frozen latent.
    Binary+ also feeds the third task's source feature into the codec with
    lambda = 0. ``group`` defaults to the first configured group.
    """
    seed = cfg.seed if seed is None else seed
    supervised, task = unseen_split(group if group is not None else cfg.groups[0])
    fed = supervised + ([task] if plus else [])
    lambdas = cfg.lambdas_for(supervised, 1.0)
    lambdas.update({t: 0.0 for t in fed if t not in supervised})
    model, _ = train_model(cfg, bench, fed, lambdas, seed)

    attach_unseen_decoder(model, unseen_decoder_id(model, task), bench.net(task).feature_shape(), seed=seed)
    random_loss = unseen_loss(model, bench, task, "test", cfg.eval_items)
    train_stage2_unseen(model, bench, task, rd_config(cfg, {}, seed, steps=cfg.unseen_steps))
    trained_loss = unseen_loss(model, bench, task, "test", cfg.eval_items)
    bpp, scores = evaluate_model(model, bench, "test", cfg.eval_items, tasks=[task], unseen=True)
    protocol = "binary+" if plus else "binary"
    logger.info("%s seed %d: unseen %s loss %.4f (random decoder %.4f)", protocol, seed, task,
                trained_loss, random_loss)
    return UnseenReport(protocol, seed, task, supervised, fed, random_loss, trained_loss, bpp, scores)
