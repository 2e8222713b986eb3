"""
config.py
Experiment configuration and environment
========================================

Configuration files are plain text, one ``key = value`` per line with ``#``
comments:

    tasks = scene, count, segmentation
    groups = scene, count, segmentation | orientation, shading, edges
    lambda_grid = 2^-6:2^6
    lambda_weights = segmentation:1, scene:0.5
    seeds = 0, 1, 2

Lists are comma separated, groups are separated by ``|`` and mappings are
written ``task:value``. Unknown keys are rejected.
"""

import hashlib
import json
import logging
import os
from typing import Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .errors import ConfigError, DataNotFoundError

logger = logging.getLogger(__name__)

ALL_TASKS = ["scene", "count", "segmentation", "orientation", "shading", "edges"]

LIST_KEYS = {"tasks", "seeds"}
GROUP_KEYS = {"groups"}
MAP_KEYS = {"lambda_weights", "qualification_ratio"}


def _check_task_list(tasks: List[str]) -> List[str]:
    unknown = [t for t in tasks if t not in ALL_TASKS]
    if unknown:
        raise ValueError(f"unknown tasks {unknown}")
    if len(set(tasks)) != len(tasks):
        raise ValueError("duplicate tasks")
    return tasks


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # bench
    tasks: List[str] = Field(default_factory=lambda: list(ALL_TASKS))
    seed: int = Field(0, ge=0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    train_count: int = Field(4096, ge=1)
    val_count: int = Field(512, ge=1)
    test_count: int = Field(512, ge=1)
    pretrain_steps: int = Field(300, ge=0)
    pretrain_lr: float = Field(3e-3, gt=0)
    qualification_ratio: Dict[str, float] = Field(default_factory=dict)

    # codec
    t_min: int = Field(-64, le=-1)
    t_max: int = Field(63, ge=1)
    latent_channels: int = Field(16, ge=1)
    hidden_channels: int = Field(32, ge=1)
    hyper_dim: int = Field(16, ge=1)
    tau: int = Field(8, ge=1)
    n_priors: int = Field(16, ge=1)
    codebook_size: int = Field(16, ge=2)
    common_channels: int = Field(8, ge=1)

    # training
    lambda_grid: str = "2^-6:2^6"
    lambda_weights: Dict[str, float] = Field(default_factory=dict)
    steps: int = Field(2000, ge=0)
    unseen_steps: int = Field(1000, ge=0)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0)
    eval_every: int = Field(0, ge=0)
    val_items: int = Field(64, ge=1)
    eval_items: int = Field(128, ge=1)
    source_h: int = Field(64, ge=1)
    source_w: int = Field(64, ge=1)

    # protocols
    groups: List[List[str]] = Field(default_factory=lambda: [ALL_TASKS[:3], ALL_TASKS[3:]])
    plateau_eps: float = Field(0.02, ge=0)

    # paths
    bench_dir: str = "runs/bench"
    out_dir: str = "runs"

    @field_validator("tasks")
    @classmethod
    def _known_tasks(cls, tasks: List[str]) -> List[str]:
        return _check_task_list(tasks)

    @field_validator("groups")
    @classmethod
    def _known_groups(cls, groups: List[List[str]]) -> List[List[str]]:
        for group in groups:
            _check_task_list(group)
            if not group:
                raise ValueError("empty task group")
        return groups

    @model_validator(mode="after")
    def _check_alphabet(self):
        if self.t_max - self.t_min + 1 > 4096:
            raise ValueError("alphabet larger than 4096 symbols")
        return self

    def codec_overrides(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "hidden_channels": self.hidden_channels,
            "hyper_dim": self.hyper_dim,
            "tau": self.tau,
            "n_priors": self.n_priors,
            "codebook_size": self.codebook_size,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "source_h": self.source_h,
            "source_w": self.source_w,
        }

    def lambdas_for(self, tasks: List[str], value: float) -> Dict[str, float]:
        return {t: value * self.lambda_weights.get(t, 1.0) for t in tasks}

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]

    def provenance(self, seed: Optional[int] = None) -> dict:
        return {"config_hash": self.config_hash(),
                "seed": self.seed if seed is None else seed,
                "tool_version": __version__}


# ============================================================================
# PARSING
# ============================================================================

def _split_list(raw: str) -> List[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def _parse_value(key: str, raw: str):
    if key in LIST_KEYS:
        return _split_list(raw)
    if key in GROUP_KEYS:
        return [_split_list(group) for group in raw.split("|")]
    if key in MAP_KEYS:
        mapping = {}
        for item in _split_list(raw):
            if ":" not in item:
                raise ConfigError(f"'{key}' expects task:value pairs, got '{item}'")
            task, value = item.split(":", 1)
            mapping[task.strip()] = value.strip()
        return mapping
    return raw


def parse_config_text(text: str) -> ExperimentConfig:
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {number}: duplicate key '{key}'")
        values[key] = _parse_value(key, raw)
    return build_config(values)


def build_config(values: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "config"
        raise ConfigError(f"{where}: {first.get('msg', 'invalid value')}") from None


def load_config(path: Optional[str] = None, **overrides) -> ExperimentConfig:
    """Read a config file (or the defaults) and apply command-line overrides."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        if not os.path.exists(path):
            raise DataNotFoundError(f"config file not found: {path}")
        with open(path) as f:
            cfg = parse_config_text(f.read())
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = build_config({**cfg.model_dump(), **overrides})
    return cfg


# ============================================================================
# ENVIRONMENT
# ============================================================================

def worker_threads() -> int:
    """Worker cap for joblib sweeps, from TAXOCODEC_THREADS (``.env`` honoured)."""
    load_dotenv()
    raw = os.environ.get("TAXOCODEC_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"TAXOCODEC_THREADS must be an integer, got '{raw}'") from None
    if threads < 1:
        raise ConfigError(f"TAXOCODEC_THREADS must be >= 1, got {threads}")
    return threads


def log_level() -> str:
    load_dotenv()
    return os.environ.get("TAXOCODEC_LOG_LEVEL", "INFO").upper()
