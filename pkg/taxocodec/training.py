"""
training.py
Rate-distortion training and plateau bit-rate search
====================================================

Stage 1 tunes the shared codec together with the task ports' peripheral and
split layers against L = L_R + sum_i lambda_i * L_d_i, where L_R is bits per
source pixel and L_d_i is the loss of task i's frozen tail run on the
reconstructed feature. Stage 2 freezes everything and fits a decoder for a
task the codec never saw.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import __version__
from .aggregation import AggregateModel, UnseenDecoder, attach_unseen_decoder
from .errors import ConfigError, FrozenModelError, TrainingDivergedError, UnknownTaskError
from .layers import parameter_digest
from .numerics import Tensor, no_grad
from .optim import Adam
from .taskbench import TaskBench, task_spec

logger = logging.getLogger(__name__)

HIGHER_IS_BETTER = {"accuracy", "miou", "pixel_accuracy", "non_background_accuracy"}


class RDConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambdas: Dict[str, float] = Field(default_factory=dict)
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(8, ge=1)
    seed: int = Field(0, ge=0)
    rate_term_enabled: bool = True
    lr: float = Field(1e-3, gt=0)
    source_h: int = Field(64, ge=1)
    source_w: int = Field(64, ge=1)
    eval_every: int = Field(0, ge=0)
    val_items: int = Field(64, ge=1)
    log_every: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _check_lambdas(self):
        negative = [t for t, v in self.lambdas.items() if v < 0]
        if negative:
            raise ValueError(f"lambda must be >= 0 (tasks {negative})")
        if not self.rate_term_enabled and not any(v > 0 for v in self.lambdas.values()):
            raise ValueError("need at least one lambda > 0 when the rate term is disabled")
        return self


Scalar = Union[float, Tensor]


def rd_loss(bits: Scalar, distortions: Mapping[str, Scalar], cfg: RDConfig, batch_size: int = 1) -> Scalar:
    """L_R + sum_i lambda_i * L_d_i with L_R in bits per source pixel."""
    missing = [t for t, lam in cfg.lambdas.items() if lam > 0 and t not in distortions]
    if missing:
        raise UnknownTaskError(f"no distortion given for weighted tasks {missing}")
    total: Scalar = 0.0
    if cfg.rate_term_enabled:
        total = bits * (1.0 / (batch_size * cfg.source_h * cfg.source_w))
    for task, lam in cfg.lambdas.items():
        if lam > 0:
            total = total + distortions[task] * lam
    return total


@dataclass
class TrainRecord:
    step: int
    loss: float
    bpp: float
    distortions: Dict[str, float]
    phase: str = "train"


@dataclass
class TrainResult:
    history: List[TrainRecord] = field(default_factory=list)
    best_step: int = -1
    best_cost: float = math.inf

    def losses(self) -> List[float]:
        return [r.loss for r in self.history if r.phase == "train"]


def _scalar(x: Scalar) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def _check_bench(tasks: Sequence[str], bench: TaskBench) -> None:
    for task in tasks:
        net = bench.net(task)
        if any(p.trainable for p in net.parameters()):
            raise FrozenModelError(f"task net '{task}' must be pretrained and frozen", code="MODEL_NOT_FROZEN")


def validate(model: AggregateModel, bench: TaskBench, cfg: RDConfig, split: str = "val") -> TrainRecord:
    """Hard-quantized R-D cost on the first ``val_items`` samples of a split."""
    data = bench.split(split)
    n = min(cfg.val_items, len(data))
    bits, sums = 0.0, {t: 0.0 for t in model.task_ids}
    for start in range(0, n, cfg.batch_size):
        images, labels = data.batch(np.arange(start, min(start + cfg.batch_size, n)))
        feats = {t: bench.features(t, images) for t in model.task_ids}
        recon, batch_bits, _ = model.forward_eval(feats)
        bits += batch_bits
        with no_grad():
            for t in model.task_ids:
                net = bench.net(t)
                sums[t] += _scalar(net.loss(net.tail(recon[t]), labels[t])) * len(images)
    dists = {t: s / n for t, s in sums.items()}
    cost = _scalar(rd_loss(bits, dists, cfg, n))
    return TrainRecord(-1, cost, bits / (n * cfg.source_h * cfg.source_w), dists, phase="val")


def train_stage1(model: AggregateModel, bench: TaskBench, cfg: RDConfig) -> TrainResult:
    """
    Update codec and port weights only; the task nets stay frozen. The
    checkpoint with the lowest validation R-D cost is restored at the end.
    """
    if model.frozen:
        raise FrozenModelError("stage-1 training on a frozen model")
    _check_bench(model.task_ids, bench)
    result = TrainResult()
    if cfg.steps == 0:
        return result

    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(model.stage1_parameters(), lr=cfg.lr)
    train = bench.train
    pixels = cfg.source_h * cfg.source_w

    best_state = model.state_dict()
    first = validate(model, bench, cfg)
    first.step = 0
    result.history.append(first)
    result.best_step, result.best_cost = 0, first.loss

    for step in range(cfg.steps):
        idx = rng.integers(0, len(train), size=cfg.batch_size)
        images, labels = train.batch(idx)
        feats = {t: bench.features(t, images) for t in model.task_ids}
        recon, out = model.forward_train(feats, rng)
        dists = {}
        for t in model.task_ids:
            net = bench.net(t)
            dists[t] = net.loss(net.tail(recon[t]), labels[t])
        loss = rd_loss(out.bits, dists, cfg, cfg.batch_size)
        value = _scalar(loss)
        if not np.isfinite(value):
            logger.error("stage-1 loss became non-finite at step %d", step)
            raise TrainingDivergedError(f"stage-1 loss is non-finite at step {step}", step)

        opt.zero_grad()
        if isinstance(loss, Tensor):
            loss.backward()
        opt.step()

        bpp = _scalar(out.bits) / (cfg.batch_size * pixels)
        result.history.append(TrainRecord(step + 1, value, bpp, {t: _scalar(d) for t, d in dists.items()}))
        if (step + 1) % cfg.log_every == 0:
            logger.info("stage1 step %d loss %.4f bpp %.4f %s", step + 1, value, bpp,
                        " ".join(f"{t}={_scalar(d):.4f}" for t, d in dists.items()))

        last = step == cfg.steps - 1
        if last or (cfg.eval_every and (step + 1) % cfg.eval_every == 0):
            record = validate(model, bench, cfg)
            record.step = step + 1
            result.history.append(record)
            if record.loss < result.best_cost:
                result.best_step, result.best_cost = step + 1, record.loss
                best_state = model.state_dict()

    model.load_state_dict(best_state)
    logger.info("stage1 done: kept checkpoint from step %d (val R-D cost %.4f)", result.best_step, result.best_cost)
    return result


def _unseen_batch(model: AggregateModel, bench: TaskBench, images: np.ndarray) -> Tensor:
    """Hard-quantized shared latent for a batch of images, as the decoder sees it."""
    feats = {t: bench.features(t, images) for t in model.task_ids}
    with no_grad():
        z, _ = model.codec.analyze(model.fuse(feats))
    return Tensor(z.symbols.astype(np.float32))


def unseen_decoder_id(model: AggregateModel, task: str) -> str:
    """Registry key for the unseen decoder of ``task``; ports keep the plain task name."""
    return f"{task}@unseen" if task in model.ports else task


def unseen_loss(model: AggregateModel, bench: TaskBench, task: str, split: str = "val",
                max_items: int = 64, batch_size: int = 16) -> float:
    """Mean task loss of the attached unseen decoder on a split."""
    data = bench.split(split)
    net, decoder = bench.net(task), model.unseen[unseen_decoder_id(model, task)]
    n = min(max_items, len(data))
    total = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            images, labels = data.batch(np.arange(start, min(start + batch_size, n)))
            out = net.tail(decoder(_unseen_batch(model, bench, images)))
            total += _scalar(net.loss(out, labels[task])) * len(images)
    return total / n


def train_stage2_unseen(model: AggregateModel, bench: TaskBench, task: str, cfg: RDConfig,
                        decoder: Optional[UnseenDecoder] = None) -> Tuple[UnseenDecoder, TrainResult]:
    """Fit a decoder from the frozen shared latent to task ``task``'s feature."""
    if not model.frozen:
        raise FrozenModelError("stage-2 training needs a frozen model", code="MODEL_NOT_FROZEN")
    task_spec(task)
    _check_bench([task], bench)
    key = unseen_decoder_id(model, task)
    if key not in model.unseen:
        attach_unseen_decoder(model, key, bench.net(task).feature_shape(), decoder, seed=cfg.seed)
    decoder = model.unseen[key]
    frozen_digest = parameter_digest(model.codec)

    result = TrainResult()
    rng = np.random.default_rng([cfg.seed, 2])
    opt = Adam(decoder.parameters(), lr=cfg.lr)
    net = bench.net(task)
    for step in range(cfg.steps):
        images, labels = bench.train.batch(rng.integers(0, len(bench.train), size=cfg.batch_size))
        loss = net.loss(net.tail(decoder(_unseen_batch(model, bench, images))), labels[task])
        value = _scalar(loss)
        if not np.isfinite(value):
            logger.error("stage-2 loss became non-finite at step %d", step)
            raise TrainingDivergedError(f"stage-2 loss is non-finite at step {step}", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.history.append(TrainRecord(step + 1, value, 0.0, {task: value}))
        if (step + 1) % cfg.log_every == 0:
            logger.info("stage2 %s step %d loss %.4f", task, step + 1, value)

    if parameter_digest(model.codec) != frozen_digest:
        raise FrozenModelError("frozen codec weights changed during stage 2")
    return decoder, result


# ============================================================================
# R-D CURVES AND PLATEAU SEARCH
# ============================================================================

@dataclass
class RDPoint:
    lambdas: Dict[str, float]
    seed: int
    bpp: float
    metrics: Dict[str, float]


def format_lambda_set(lambdas: Mapping[str, float]) -> str:
    return ";".join(f"{t}={v:.17g}" for t, v in lambdas.items())


def parse_lambda_set(text: str) -> Dict[str, float]:
    if not text:
        return {}
    pairs = (item.split("=", 1) for item in text.split(";"))
    return {t: float(v) for t, v in pairs}


@dataclass
class RDCurve:
    points: List[RDPoint] = field(default_factory=list)

    def add(self, point: RDPoint) -> None:
        self.points.append(point)

    def metric_names(self) -> List[str]:
        names: List[str] = []
        for p in self.points:
            names.extend(k for k in p.metrics if k not in names)
        return names

    def to_frame(self, config_hash: str = "") -> pd.DataFrame:
        rows = []
        for p in self.points:
            row = {"lambda_set": format_lambda_set(p.lambdas), "seed": p.seed, "bpp": p.bpp}
            row.update(p.metrics)
            row["config_hash"] = config_hash
            row["tool_version"] = __version__
            rows.append(row)
        columns = ["lambda_set", "seed", "bpp"] + self.metric_names() + ["config_hash", "tool_version"]
        return pd.DataFrame(rows, columns=columns)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "RDCurve":
        metric_cols = [c for c in df.columns if c not in ("lambda_set", "seed", "bpp", "config_hash", "tool_version")]
        curve = cls()
        for _, row in df.iterrows():
            lambda_text = row["lambda_set"] if isinstance(row["lambda_set"], str) else ""
            curve.add(RDPoint(parse_lambda_set(lambda_text), int(row["seed"]), float(row["bpp"]),
                              {c: float(row[c]) for c in metric_cols if pd.notna(row[c])}))
        return curve

    def to_csv(self, path: str, config_hash: str = "") -> None:
        self.to_frame(config_hash).to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path: str) -> "RDCurve":
        return cls.from_frame(pd.read_csv(path))


def metric_direction(name: str) -> bool:
    """True when larger values are better; names are ``task.metric``."""
    return name.rsplit(".", 1)[-1] in HIGHER_IS_BETTER


def plateau_search(curve: RDCurve, control: Mapping[str, float], eps: float = 0.02,
                   higher_is_better: Optional[Mapping[str, bool]] = None) -> Optional[float]:
    """
    Smallest bpp among points whose every controlled metric is within ``eps``
    of the rate-unconstrained control. ``None`` signals an infeasible curve.
    """
    if not curve.points:
        raise ValueError("plateau search on an empty curve")
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    directions = {k: (higher_is_better or {}).get(k, metric_direction(k)) for k in control}

    def qualifies(point: RDPoint) -> bool:
        for key, ref in control.items():
            if key not in point.metrics:
                return False
            value = point.metrics[key]
            if directions[key]:
                if value < (1.0 - eps) * ref:
                    return False
            elif value > (1.0 + eps) * ref:
                return False
        return True

    feasible = [p.bpp for p in curve.points if qualifies(p)]
    return min(feasible) if feasible else None


def geometric_grid(lo: int = -6, hi: int = 6, base: float = 2.0, step: int = 1) -> List[float]:
    return [base ** k for k in range(lo, hi + 1, step)]


_POWER = re.compile(r"^\s*(\d+(?:\.\d+)?)\^(-?\d+)\s*$")


def _parse_number(text: str) -> Tuple[float, Optional[Tuple[float, int]]]:
    m = _POWER.match(text)
    if m:
        base, exp = float(m.group(1)), int(m.group(2))
        return base ** exp, (base, exp)
    return float(text), None


def parse_lambda_grid(spec: str) -> List[float]:
    """
    ``2^-6:2^6`` (geometric, exponent step 1), ``2^-6:2^6:2`` (exponent
    step 2) or a comma list such as ``0.1,0.5,2^3``.
    """
    try:
        if ":" in spec:
            parts = spec.split(":")
            if len(parts) not in (2, 3):
                raise ValueError(spec)
            (_, lo), (_, hi) = _parse_number(parts[0]), _parse_number(parts[1])
            if lo is None or hi is None or lo[0] != hi[0]:
                raise ValueError(spec)
            step = int(parts[2]) if len(parts) == 3 else 1
            if step < 1 or hi[1] < lo[1]:
                raise ValueError(spec)
            return geometric_grid(lo[1], hi[1], lo[0], step)
        values = [_parse_number(item)[0] for item in spec.split(",") if item.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse lambda grid '{spec}'") from None
    if not values or any(v < 0 for v in values):
        raise ConfigError(f"lambda grid '{spec}' must list non-negative values")
    return values
