"""
taskbench.py
Synthetic multi-task bench
==========================

A procedural stand-in for a large multi-task image dataset. Labels are drawn
first (scene class, shapes, light direction) and the 3x64x64 image is then
rendered from them, so every label is consistent with the geometry:

    semantic:   scene (4 classes), count (1-4 shapes), segmentation (bg + 3 kinds)
    geometric:  orientation (2-channel surface normals), shading, edges

Each task gets a small convolutional network whose bottleneck activation is
the feature the codec compresses.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import joblib
import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .codec import CHECKPOINT_VERSION, read_checkpoint
from .errors import (ConfigError, DataNotFoundError, DecodeError,
                     QualificationError, ShapeMismatchError, TrainingDivergedError, UnknownTaskError)
from .layers import Conv2d, GlobalPool, Linear, Module, ReLU, Resize, Sequential, parameter_digest
from .metrics import MetricSuite
from .numerics import Tensor, l1_loss, no_grad, softmax_cross_entropy
from .optim import Adam

logger = logging.getLogger(__name__)

IMAGE_SIZE = 64
SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    channels: int
    group: str


TASKS: Dict[str, TaskSpec] = {
    "scene": TaskSpec("classification", 4, "semantic"),
    "count": TaskSpec("classification", 4, "semantic"),
    "segmentation": TaskSpec("segmentation", 4, "semantic"),
    "orientation": TaskSpec("regression", 2, "geometric"),
    "shading": TaskSpec("regression", 1, "geometric"),
    "edges": TaskSpec("segmentation", 2, "geometric"),
}

GROUPS = {
    "semantic": [t for t, s in TASKS.items() if s.group == "semantic"],
    "geometric": [t for t, s in TASKS.items() if s.group == "geometric"],
}

_BACKGROUND = np.array([[0.20, 0.30, 0.55], [0.55, 0.42, 0.20],
                        [0.25, 0.48, 0.25], [0.48, 0.25, 0.42]], dtype=np.float64)
_SHAPE_COLORS = np.array([[0.0, 0.0, 0.0], [0.92, 0.22, 0.20],
                          [0.20, 0.86, 0.32], [0.25, 0.36, 0.95]], dtype=np.float64)


def task_spec(task: str) -> TaskSpec:
    if task not in TASKS:
        raise UnknownTaskError(f"unknown task '{task}' (known: {', '.join(TASKS)})")
    return TASKS[task]


# ============================================================================
# LAYOUT AND RENDERING
# ============================================================================

@dataclass(frozen=True)
class ShapeLayout:
    kind: int        # 1 circle, 2 square, 3 triangle
    cx: float
    cy: float
    radius: float


@dataclass(frozen=True)
class SceneLayout:
    scene_class: int
    shapes: Tuple[ShapeLayout, ...]
    light: Tuple[float, float, float]

    @property
    def count_class(self) -> int:
        return len(self.shapes) - 1

    def to_dict(self) -> dict:
        return {"scene_class": self.scene_class, "light": list(self.light),
                "shapes": [asdict(s) for s in self.shapes]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneLayout":
        return cls(int(d["scene_class"]), tuple(ShapeLayout(**s) for s in d["shapes"]),
                   tuple(float(x) for x in d["light"]))


def sample_layout(seed: int, split_id: int, index: int) -> SceneLayout:
    """
    Labels for one sample. Scene and count classes follow cyclic schedules
    offset by the seed (balanced within every 16 consecutive samples);
    shapes and light come from the sample's own substream.
    """
    offsets = np.random.default_rng([seed, split_id]).integers(0, 4, size=2)
    scene_class = int((index + offsets[0]) % 4)
    n_shapes = int(((index // 4) + offsets[1]) % 4) + 1

    rng = np.random.default_rng([seed, split_id, index])
    shapes = []
    for _ in range(n_shapes):
        radius = float(rng.uniform(6.0, 12.0))
        shapes.append(ShapeLayout(
            kind=int(rng.integers(1, 4)),
            cx=float(rng.uniform(radius, IMAGE_SIZE - radius)),
            cy=float(rng.uniform(radius, IMAGE_SIZE - radius)),
            radius=radius,
        ))
    azimuth = float(rng.uniform(0.0, 2.0 * np.pi))
    elevation = float(rng.uniform(0.5, 1.2))
    light = (np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation))
    return SceneLayout(scene_class, tuple(shapes), tuple(float(x) for x in light))


def _shape_region(shape: ShapeLayout, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    dx, dy, r = xx - shape.cx, yy - shape.cy, shape.radius
    if shape.kind == 1:
        return dx * dx + dy * dy <= r * r
    if shape.kind == 2:
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    t = (dy + r) / (1.6 * r)
    return (t >= 0.0) & (t <= 1.0) & (np.abs(dx) <= t * r)


def edge_map(mask: np.ndarray) -> np.ndarray:
    """1 where a pixel's class differs from any 4-neighbour (borders replicate)."""
    padded = np.pad(mask, 1, mode="edge")
    centre = padded[1:-1, 1:-1]
    differs = ((padded[:-2, 1:-1] != centre) | (padded[2:, 1:-1] != centre)
               | (padded[1:-1, :-2] != centre) | (padded[1:-1, 2:] != centre))
    return differs.astype(np.int64)


def render(layout: SceneLayout) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Image and dense labels from a layout; a pure function of ``layout``."""
    coords = np.arange(IMAGE_SIZE, dtype=np.float64) + 0.5
    xx, yy = np.meshgrid(coords, coords)
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.int64)
    normals = np.zeros((3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    normals[2] = 1.0

    for shape in layout.shapes:
        region = _shape_region(shape, xx, yy)
        mask[region] = shape.kind
        nx = np.clip((xx - shape.cx) / (1.25 * shape.radius), -0.95, 0.95)
        ny = np.clip((yy - shape.cy) / (1.25 * shape.radius), -0.95, 0.95)
        nz = np.sqrt(np.maximum(1.0 - nx * nx - ny * ny, 0.0))
        norm = np.sqrt(nx * nx + ny * ny + nz * nz)
        for c, comp in enumerate((nx, ny, nz)):
            normals[c][region] = (comp / norm)[region]

    light = np.asarray(layout.light, dtype=np.float64)
    shading = np.clip(np.tensordot(light, normals, axes=1), 0.0, 1.0)

    sc = layout.scene_class
    ix, iy = np.meshgrid(np.arange(IMAGE_SIZE), np.arange(IMAGE_SIZE))
    pattern = [(iy // 4) % 2, (ix // 4) % 2, ((ix + iy) // 6) % 2, (ix // 8 + iy // 8) % 2][sc]
    base = _BACKGROUND[sc][:, None, None] * (0.8 + 0.2 * pattern)[None]
    colors = np.where(mask[None] > 0, _SHAPE_COLORS[mask].transpose(2, 0, 1), base)
    image = np.clip(colors * (0.4 + 0.6 * shading)[None], 0.0, 1.0).astype(np.float32)

    labels = {
        "scene": np.int64(sc),
        "count": np.int64(layout.count_class),
        "segmentation": mask,
        "orientation": normals[:2].astype(np.float32),
        "shading": shading.astype(np.float32),
        "edges": edge_map(mask),
    }
    return image, labels


@dataclass
class SceneSample:
    image: np.ndarray
    labels: Dict[str, np.ndarray]
    layout: SceneLayout


def _make_sample(seed: int, split_id: int, index: int) -> SceneSample:
    layout = sample_layout(seed, split_id, index)
    image, labels = render(layout)
    return SceneSample(image, labels, layout)


def generate(seed: int, count: int, split: str = "train", n_jobs: int = 1) -> List[SceneSample]:
    if count < 1:
        raise ConfigError(f"sample count must be >= 1, got {count}")
    if split not in SPLITS:
        raise ConfigError(f"unknown split '{split}'")
    split_id = SPLITS[split]
    return Parallel(n_jobs=n_jobs)(delayed(_make_sample)(seed, split_id, i) for i in range(count))


# ============================================================================
# DATASET
# ============================================================================

class SceneDataset:
    def __init__(self, images: np.ndarray, labels: Mapping[str, np.ndarray],
                 layouts: Sequence[SceneLayout], seed: int, split: str):
        self.images = images
        self.labels = dict(labels)
        self.layouts = list(layouts)
        self.seed = seed
        self.split = split

    @classmethod
    def from_samples(cls, samples: Sequence[SceneSample], seed: int, split: str) -> "SceneDataset":
        images = np.stack([s.image for s in samples])
        labels = {t: np.stack([np.asarray(s.labels[t]) for s in samples]) for t in TASKS}
        return cls(images, labels, [s.layout for s in samples], seed, split)

    @classmethod
    def generate(cls, seed: int, count: int, split: str = "train", n_jobs: int = 1) -> "SceneDataset":
        return cls.from_samples(generate(seed, count, split, n_jobs), seed, split)

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, indices) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        indices = np.asarray(indices)
        return self.images[indices], {t: v[indices] for t, v in self.labels.items()}

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        for task in TASKS:
            h.update(np.ascontiguousarray(self.labels[task]).tobytes())
        return h.hexdigest()

    def save(self, path: str) -> str:
        """Write ``<path>.bin`` plus the ``<path>.json`` manifest; returns the manifest path."""
        arrays = [("images", self.images)] + [(t, self.labels[t]) for t in TASKS]
        entries, offset = [], 0
        with open(path + ".bin", "wb") as f:
            for name, array in arrays:
                data = np.ascontiguousarray(array)
                f.write(data.tobytes())
                entries.append({"name": name, "dtype": data.dtype.str, "shape": list(data.shape),
                                "offset": offset})
                offset += data.nbytes
        manifest = {
            "format_version": 1,
            "tool_version": __version__,
            "seed": self.seed,
            "split": self.split,
            "count": len(self),
            "tasks": list(TASKS),
            "arrays": entries,
            "content_hash": self.content_hash(),
            "layouts": [layout.to_dict() for layout in self.layouts],
        }
        with open(path + ".json", "w") as f:
            json.dump(manifest, f, indent=1)
        logger.info("Saved %d %s samples to %s.bin", len(self), self.split, path)
        return path + ".json"

    @classmethod
    def load(cls, path: str) -> "SceneDataset":
        if path.endswith(".json") or path.endswith(".bin"):
            path = path[:-5] if path.endswith(".json") else path[:-4]
        if not (os.path.exists(path + ".json") and os.path.exists(path + ".bin")):
            raise DataNotFoundError(f"dataset not found: {path}.json / {path}.bin")
        with open(path + ".json") as f:
            manifest = json.load(f)
        raw = np.fromfile(path + ".bin", dtype=np.uint8)
        arrays = {}
        for entry in manifest["arrays"]:
            dtype = np.dtype(entry["dtype"])
            size = int(np.prod(entry["shape"])) * dtype.itemsize
            chunk = raw[entry["offset"]:entry["offset"] + size]
            if chunk.size != size:
                raise DecodeError(f"dataset file {path}.bin is truncated")
            arrays[entry["name"]] = chunk.view(dtype).reshape(entry["shape"])
        images = arrays.pop("images")
        layouts = [SceneLayout.from_dict(d) for d in manifest["layouts"]]
        dataset = cls(images, arrays, layouts, manifest["seed"], manifest["split"])
        if dataset.content_hash() != manifest["content_hash"]:
            raise DecodeError(f"dataset {path} does not match its manifest content hash")
        return dataset


# ============================================================================
# TASK NETWORKS
# ============================================================================

class TaskNet(Module):
    """
    Encoder to a 16x16x16 bottleneck, then a dense hourglass tail (resize +
    conv back to 64x64) or a pooled classification tail. ``head`` returns the
    activation at ``tap_index`` (the compressible feature), ``tail`` the rest.
    """

    def __init__(self, task_id: str, seed: int = 0, tap_index: Optional[int] = None):
        spec = task_spec(task_id)
        self.task_id = task_id
        self.kind = spec.kind
        self.out_channels = spec.channels
        rng = np.random.default_rng([seed, list(TASKS).index(task_id)])
        encoder = [Conv2d(3, 8, 3, rng, stride=2), ReLU(), Conv2d(8, 16, 3, rng, stride=2), ReLU(),
                   Conv2d(16, 16, 3, rng), ReLU()]
        if spec.kind == "classification":
            tail = [Conv2d(16, 16, 3, rng), ReLU(), Conv2d(16, 16, 3, rng, stride=2), ReLU(),
                    GlobalPool(), Linear(16, spec.channels, rng)]
        else:
            tail = [Conv2d(16, 16, 3, rng), ReLU(), Resize(32), Conv2d(16, 8, 3, rng), ReLU(),
                    Resize(IMAGE_SIZE), Conv2d(8, spec.channels, 3, rng)]
        self.body = Sequential(*encoder, *tail)
        self.tap_index = len(encoder) if tap_index is None else tap_index
        if not 1 <= self.tap_index < len(self.body):
            raise ConfigError(f"tap index {self.tap_index} outside 1..{len(self.body) - 1}")

    def head(self, images: Tensor) -> Tensor:
        return self.body[:self.tap_index](images)

    def tail(self, features: Tensor) -> Tensor:
        return self.body[self.tap_index:](features)

    def feature_shape(self) -> Tuple[int, ...]:
        with no_grad():
            return tuple(self.head(Tensor(np.zeros((1, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32))).shape[1:])

    def loss(self, outputs: Tensor, labels: np.ndarray) -> Tensor:
        if self.kind == "regression":
            target = np.asarray(labels, dtype=np.float32)
            if target.ndim == 3:
                target = target[:, None]
            return l1_loss(outputs, target)
        return softmax_cross_entropy(outputs, np.asarray(labels))

    def predict(self, outputs: Tensor) -> np.ndarray:
        data = outputs.data
        if self.kind == "regression":
            return data[:, 0] if self.out_channels == 1 else data
        return data.argmax(axis=1)

    def frozen_hash(self) -> str:
        return parameter_digest(self)


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(300, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(3e-3, gt=0)
    seed: int = Field(0, ge=0)
    # Validation loss must be at most this fraction of the best constant predictor's loss.
    qualification_ratio: Dict[str, float] = Field(default_factory=lambda: {t: 0.95 for t in TASKS})


def constant_baseline_loss(task: str, train: SceneDataset, val: SceneDataset) -> float:
    """Validation loss of the best label-independent predictor fitted on ``train``."""
    spec = task_spec(task)
    y_train, y_val = train.labels[task], val.labels[task]
    if spec.kind == "regression":
        median = np.median(y_train, axis=0)
        return float(np.abs(y_val - median[None]).mean())
    counts = np.bincount(y_train.ravel(), minlength=spec.channels).astype(np.float64) + 1.0
    log_prior = np.log(counts / counts.sum())
    return float(-log_prior[y_val.ravel()].mean())


def evaluate_net(net: TaskNet, data: SceneDataset, batch_size: int = 64) -> Tuple[float, Dict[str, float]]:
    """Mean task loss and metric scores of a net on a dataset."""
    suite, spec = MetricSuite(), task_spec(net.task_id)
    losses, preds = [], []
    with no_grad():
        for start in range(0, len(data), batch_size):
            images, labels = data.batch(np.arange(start, min(start + batch_size, len(data))))
            out = net.tail(net.head(Tensor(images)))
            losses.append(float(net.loss(out, labels[net.task_id]).data) * len(images))
            preds.append(net.predict(out))
    scores = suite.evaluate(spec.kind, np.concatenate(preds), data.labels[net.task_id], spec.channels)
    return sum(losses) / len(data), scores


def pretrain(net: TaskNet, train: SceneDataset, val: SceneDataset,
             cfg: Optional[PretrainConfig] = None) -> TaskNet:
    """Train a task net, check it qualifies on ``val`` and freeze it."""
    cfg = cfg or PretrainConfig()
    rng = np.random.default_rng([cfg.seed, list(TASKS).index(net.task_id), 7])
    opt = Adam(net.parameters(), lr=cfg.lr)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(train), size=min(cfg.batch_size, len(train)))
        images, labels = train.batch(idx)
        opt.zero_grad()
        loss = net.loss(net.tail(net.head(Tensor(images))), labels[net.task_id])
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(f"pretraining '{net.task_id}' diverged at step {step}", step)
        loss.backward()
        opt.step()
        if step % 100 == 0:
            logger.info("pretrain %s step %d loss %.4f", net.task_id, step, float(loss.data))

    val_loss, scores = evaluate_net(net, val)
    baseline = constant_baseline_loss(net.task_id, train, val)
    ratio = cfg.qualification_ratio.get(net.task_id, 0.95)
    if val_loss > ratio * baseline:
        raise QualificationError(
            f"task net '{net.task_id}' failed to qualify: val loss {val_loss:.4f} > "
            f"{ratio:.2f} x baseline {baseline:.4f}")
    net.freeze()
    logger.info("Task net %s qualified: val loss %.4f (baseline %.4f) %s", net.task_id, val_loss, baseline, scores)
    return net


# ============================================================================
# BENCH
# ============================================================================

@dataclass
class TaskBench:
    train: SceneDataset
    val: SceneDataset
    test: SceneDataset
    nets: Dict[str, TaskNet] = field(default_factory=dict)

    def net(self, task: str) -> TaskNet:
        if task not in self.nets:
            raise UnknownTaskError(f"no task net for '{task}' in this bench")
        return self.nets[task]

    def split(self, name: str) -> SceneDataset:
        if name not in SPLITS:
            raise ConfigError(f"unknown split '{name}'")
        return getattr(self, name)

    def features(self, task: str, images: np.ndarray) -> Tensor:
        with no_grad():
            return self.net(task).head(Tensor(np.asarray(images, dtype=np.float32)))

    def feature_shapes(self, tasks: Sequence[str]) -> Dict[str, Tuple[int, ...]]:
        return {t: self.net(t).feature_shape() for t in tasks}

    def frozen_hashes(self) -> Dict[str, str]:
        return {t: n.frozen_hash() for t, n in self.nets.items()}

    @classmethod
    def create(cls, seed: int, counts: Tuple[int, int, int] = (4096, 512, 512),
               tasks: Sequence[str] = tuple(TASKS), pretrain_cfg: Optional[PretrainConfig] = None,
               n_jobs: int = 1) -> "TaskBench":
        train, val, test = (SceneDataset.generate(seed, n, split, n_jobs)
                            for n, split in zip(counts, SPLITS))
        bench = cls(train, val, test)
        for task in tasks:
            bench.nets[task] = pretrain(TaskNet(task, seed), train, val, pretrain_cfg)
        return bench

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        for name in SPLITS:
            self.split(name).save(os.path.join(directory, name))
        save_task_nets(self.nets, os.path.join(directory, "tasknets.joblib"))

    @classmethod
    def load(cls, directory: str) -> "TaskBench":
        splits = [SceneDataset.load(os.path.join(directory, name)) for name in SPLITS]
        nets_path = os.path.join(directory, "tasknets.joblib")
        nets = load_task_nets(nets_path) if os.path.exists(nets_path) else {}
        return cls(*splits, nets=nets)


def save_task_nets(nets: Mapping[str, TaskNet], path: str) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "tasknets",
        "tool_version": __version__,
        "nets": {t: {"state": n.state_dict(), "tap_index": n.tap_index, "hash": n.frozen_hash()}
                 for t, n in nets.items()},
    }
    joblib.dump(payload, path)


def load_task_nets(path: str) -> Dict[str, TaskNet]:
    payload = read_checkpoint(path, "tasknets")
    nets = {}
    for task, entry in payload["nets"].items():
        net = TaskNet(task, tap_index=entry["tap_index"])
        net.load_state_dict(entry["state"])
        if net.frozen_hash() != entry["hash"]:
            raise ShapeMismatchError(f"task net '{task}' hash changed across the round trip")
        nets[task] = net.freeze()
    return nets
