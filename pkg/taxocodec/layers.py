"""
layers.py
Parameter containers and the small set of layers the codec and task nets use
"""

import hashlib
import logging
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .errors import ShapeMismatchError
from .numerics import (Parameter, Tensor, bilinear_resize, conv2d, global_mean_pool,
                       linear, relu)

logger = logging.getLogger(__name__)


def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """
    Base container. Parameters are discovered by walking instance attributes
    in definition order, including lists and dicts of modules, so the order
    of ``named_parameters`` is stable and can be used for serialization.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = True
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data.astype(dtype))
            p.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeMismatchError(
                f"state dict keys differ: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            array = np.asarray(state[name])
            if array.shape != p.shape:
                raise ShapeMismatchError(
                    f"parameter {name}: stored shape {array.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(array.astype(p.dtype, copy=True))
            p.grad = None


def parameter_digest(module: Module) -> str:
    """SHA-256 over parameter names, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode("utf-8"))
        h.update(str(p.shape).encode("utf-8"))
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ============================================================================
# LAYERS
# ============================================================================

class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: Optional[int] = None):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32))
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = Parameter(he_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class Resize(Module):
    def __init__(self, size: Union[int, Tuple[int, int]]):
        self.size = (size, size) if isinstance(size, int) else tuple(size)

    def forward(self, x: Tensor) -> Tensor:
        return bilinear_resize(x, *self.size)


class GlobalPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return global_mean_pool(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return Sequential(*self.layers[index])
        return self.layers[index]

