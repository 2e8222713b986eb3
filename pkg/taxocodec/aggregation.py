"""
aggregation.py
Joint compression of several task features
==========================================

Each task port maps its feature through peripheral convolutions into a
common 8-channel map; the maps are concatenated along channels and coded by
one shared codec. At decode time the fused reconstruction is computed once
and every task's split decoder reads from it. After stage-1 training the
model is frozen; unseen-task decoders can then be attached that read the
shared decoded latent without touching the bitstream.
"""

import hashlib
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import joblib
import numpy as np

from . import __version__
from .codec import Bitstream, CodecConfig, CodecModel, compress, decompress_latent, read_checkpoint
from .entropy_models import QuantizedLatent
from .errors import CodebookMismatchError, ConfigError, FrozenModelError, ShapeMismatchError, UnknownTaskError
from .layers import Conv2d, Module, ReLU, Resize, Sequential, parameter_digest
from .numerics import Slice, Tensor, concat, no_grad

logger = logging.getLogger(__name__)

COMMON_CHANNELS = 8
CACHE_SIZE = 4


class TaskPort(Module):
    """Peripheral transform into the common map and the matching split decoder."""

    def __init__(self, task_id: str, feature_shape: Sequence[int], common_shape: Tuple[int, int, int],
                 fused_channels: int, offset: int, rng: np.random.Generator, identity: bool = False):
        self.task_id = task_id
        self.feature_shape = tuple(int(d) for d in feature_shape)
        self.identity = identity
        self.offset = offset
        c, h, w = self.feature_shape
        common_c, common_h, common_w = common_shape
        if identity:
            if self.feature_shape != tuple(common_shape):
                raise ShapeMismatchError(
                    f"identity port '{task_id}' needs feature shape {common_shape}, got {self.feature_shape}")
            self.peripheral = None
            self.split = None
            return
        layers = [] if (h, w) == (common_h, common_w) else [Resize((common_h, common_w))]
        self.peripheral = Sequential(*layers, Conv2d(c, common_c, 3, rng), ReLU(),
                                     Conv2d(common_c, common_c, 3, rng))
        tail = [] if (h, w) == (common_h, common_w) else [Resize((h, w))]
        self.split = Sequential(Conv2d(fused_channels, common_c, 3, rng), ReLU(),
                                Conv2d(common_c, c, 3, rng), *tail)
        self.common_channels = common_c

    def transform(self, h: Tensor) -> Tensor:
        if tuple(h.shape[1:]) != self.feature_shape:
            raise ShapeMismatchError(
                f"task '{self.task_id}' expects features {self.feature_shape}, got {tuple(h.shape[1:])}")
        return h if self.identity else self.peripheral(h)

    def reconstruct(self, fused: Tensor) -> Tensor:
        if self.identity:
            c = self.feature_shape[0]
            return Slice.apply(fused, axis=1, start=self.offset, stop=self.offset + c)
        return self.split(fused)


class UnseenDecoder(Module):
    """Maps the shared decoded latent z to the feature of a task the codec never saw."""

    def __init__(self, latent_shape: Sequence[int], feature_shape: Sequence[int],
                 rng: np.random.Generator, hidden: int = 16):
        self.latent_shape = tuple(latent_shape)
        self.feature_shape = tuple(feature_shape)
        lat, lh, lw = self.latent_shape
        c, h, w = self.feature_shape
        mid = (max((h + 1) // 2, lh), max((w + 1) // 2, lw))
        self.net = Sequential(Resize(mid), Conv2d(lat, hidden, 3, rng), ReLU(),
                              Resize((h, w)), Conv2d(hidden, c, 3, rng))

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)


@dataclass
class SharedLatent:
    z: QuantizedLatent
    fused: np.ndarray
    digest: str


class AggregateModel(Module):
    def __init__(self, feature_shapes: Mapping[str, Sequence[int]], codec_overrides: Optional[dict] = None,
                 common_channels: int = COMMON_CHANNELS, identity: bool = False, seed: int = 0):
        if not feature_shapes:
            raise ConfigError("an aggregate model needs at least one task port")
        self.settings = {
            "feature_shapes": {t: list(s) for t, s in feature_shapes.items()},
            "codec_overrides": dict(codec_overrides or {}),
            "common_channels": common_channels,
            "identity": identity,
            "seed": seed,
        }
        rng = np.random.default_rng(seed)
        first = tuple(next(iter(feature_shapes.values())))
        channels = first[0] if identity else common_channels
        common = (channels, first[1], first[2])
        fused_channels = channels * len(feature_shapes)

        self.ports: Dict[str, TaskPort] = {}
        for i, (task, shape) in enumerate(feature_shapes.items()):
            self.ports[task] = TaskPort(task, shape, common, fused_channels, i * channels, rng, identity)

        codec_fields = {"in_channels": fused_channels, "in_height": common[1], "in_width": common[2],
                        "seed": seed}
        codec_fields.update(codec_overrides or {})
        self.codec = CodecModel(CodecConfig(**codec_fields))
        self.unseen: Dict[str, UnseenDecoder] = {}
        self.frozen = False
        self.entropy_decodes = 0
        self._latent_cache: "OrderedDict[Tuple[str, str], SharedLatent]" = OrderedDict()
        self._cache_lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_latent_cache"] = OrderedDict()
        del state["_cache_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._cache_lock = threading.Lock()

    @property
    def task_ids(self) -> list:
        return list(self.ports)

    def port_parameters(self) -> list:
        return [p for port in self.ports.values() for p in port.parameters()]

    def stage1_parameters(self) -> list:
        return self.codec.parameters() + self.port_parameters()

    def freeze(self) -> "AggregateModel":
        self.codec.freeze()
        for port in self.ports.values():
            port.freeze()
        self.frozen = True
        logger.info("Aggregate model frozen (tasks: %s)", ", ".join(self.ports))
        return self

    def _check_tasks(self, tasks: Iterable[str]) -> None:
        tasks = set(tasks)
        extra = sorted(tasks - set(self.ports))
        if extra:
            raise UnknownTaskError(f"features given for unregistered tasks: {extra}")
        missing = [t for t in self.ports if t not in tasks]
        if missing:
            raise ShapeMismatchError(f"missing features for tasks: {missing}")

    def fuse(self, features: Mapping[str, Tensor]) -> Tensor:
        self._check_tasks(features)
        maps = [port.transform(features[task]) for task, port in self.ports.items()]
        return maps[0] if len(maps) == 1 else concat(maps, axis=1)

    def forward_train(self, features: Mapping[str, Tensor], rng: np.random.Generator):
        out = self.codec.forward_train(self.fuse(features), rng)
        recon = {task: port.reconstruct(out.h_hat) for task, port in self.ports.items()}
        return recon, out

    def forward_eval(self, features: Mapping[str, Tensor]):
        with no_grad():
            fused = self.fuse(features)
            h_hat, bits, z = self.codec.forward_eval(fused)
            recon = {task: port.reconstruct(h_hat) for task, port in self.ports.items()}
        return recon, bits, z


# ============================================================================
# OPERATIONS
# ============================================================================

def aggregate_compress(m: AggregateModel, features: Mapping[str, np.ndarray]) -> Bitstream:
    """One bitstream for all tasks' features (each without batch axis)."""
    m._check_tasks(features)
    with no_grad():
        fused = m.fuse({t: Tensor(np.asarray(f, dtype=np.float32)[None]) for t, f in features.items()})
    return compress(m.codec, fused.data[0])


def decode_shared(m: AggregateModel, bs: Bitstream) -> SharedLatent:
    """
    Entropy-decode a bitstream once; repeated calls with the same codec
    weights hit a small cache. Safe to call from several threads.
    """
    key = (parameter_digest(m.codec), hashlib.sha256(bs.to_bytes()).hexdigest())
    with m._cache_lock:
        shared = m._latent_cache.get(key)
        if shared is not None:
            m._latent_cache.move_to_end(key)
            return shared
    z, _ = decompress_latent(m.codec, bs)
    shared = SharedLatent(z, m.codec.synthesize(z), hashlib.sha256(z.symbols.tobytes()).hexdigest())
    with m._cache_lock:
        m.entropy_decodes += 1
        m._latent_cache[key] = shared
        m._latent_cache.move_to_end(key)
        while len(m._latent_cache) > CACHE_SIZE:
            m._latent_cache.popitem(last=False)
    return shared


def aggregate_decompress(m: AggregateModel, bs: Bitstream, task_id: str) -> np.ndarray:
    if task_id not in m.ports and task_id not in m.unseen:
        raise UnknownTaskError(f"task '{task_id}' is not registered with this model")
    shared = decode_shared(m, bs)
    with no_grad():
        if task_id in m.ports:
            out = m.ports[task_id].reconstruct(Tensor(shared.fused[None]))
        else:
            out = m.unseen[task_id](Tensor(shared.z.symbols[None].astype(np.float32)))
    return out.data[0]


def attach_unseen_decoder(m: AggregateModel, new_task_id: str, feature_shape: Sequence[int],
                          decoder: Optional[UnseenDecoder] = None, seed: int = 0) -> AggregateModel:
    if not m.frozen:
        raise FrozenModelError("unseen decoders attach only to a frozen model", code="MODEL_NOT_FROZEN")
    if new_task_id in m.ports or new_task_id in m.unseen:
        raise ConfigError(f"task '{new_task_id}' is already registered")
    if decoder is None:
        decoder = UnseenDecoder(m.codec.config.latent_shape, feature_shape, np.random.default_rng(seed))
    if decoder.feature_shape != tuple(feature_shape):
        raise ShapeMismatchError(f"decoder emits {decoder.feature_shape}, task expects {tuple(feature_shape)}")
    m.unseen[new_task_id] = decoder
    logger.info("Attached unseen-task decoder '%s'", new_task_id)
    return m


def latent_digest(m: AggregateModel, bs: Bitstream) -> str:
    return decode_shared(m, bs).digest


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_aggregate(m: AggregateModel, path: str) -> None:
    payload = {
        "format_version": 1,
        "kind": "aggregate",
        "tool_version": __version__,
        "settings": m.settings,
        "codec_config": m.codec.config.model_dump(),
        "state": m.state_dict(),
        "frozen": m.frozen,
        "unseen": {t: {"feature_shape": list(d.feature_shape), "state": d.state_dict()}
                   for t, d in m.unseen.items()},
        "codebook_hash": m.codec.codebook_hash(),
    }
    joblib.dump(payload, path)
    logger.info("Saved aggregate checkpoint to %s (%d ports, %d unseen)", path, len(m.ports), len(m.unseen))


def load_aggregate(path: str) -> AggregateModel:
    payload = read_checkpoint(path, "aggregate")
    s = payload["settings"]
    m = AggregateModel(s["feature_shapes"], s["codec_overrides"], s["common_channels"], s["identity"], s["seed"])
    own = {k: v for k, v in payload["state"].items() if not k.startswith("unseen.")}
    m.load_state_dict(own)
    if m.codec.codebook_hash() != payload["codebook_hash"]:
        raise CodebookMismatchError("codebook hash changed across the checkpoint round trip")
    if payload["frozen"]:
        m.freeze()
    for task, entry in payload["unseen"].items():
        decoder = UnseenDecoder(m.codec.config.latent_shape, entry["feature_shape"], np.random.default_rng(0))
        decoder.load_state_dict(entry["state"])
        attach_unseen_decoder(m, task, entry["feature_shape"], decoder)
    return m
