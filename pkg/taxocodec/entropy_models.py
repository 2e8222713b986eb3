"""
entropy_models.py
Probability models over quantized symbols
=========================================

* discretized Gaussian PMFs over a finite integer alphabet (interior symbols
  integrate over [s - 0.5, s + 0.5], edge symbols absorb the tails)
* the zero-mean hyper model for the spatial-free vector v
* the codebook-based conditional model q(z | v): v decodes into n coefficient
  sequences, each weighting the tau codebook bases into one prior map, and a
  small convolutional head turns the prior maps into (mu, sigma) per element
"""

import logging
import zlib
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, NonFiniteError, ShapeMismatchError
from .layers import Conv2d, Linear, Module, ReLU
from .numerics import (POSITIVE_EPS, Function, Parameter, Tensor, bilinear_resize, einsum,
                       relu, softplus, split)

logger = logging.getLogger(__name__)

PMF_FLOOR = 2.0 ** -16
MAX_ALPHABET = 4096
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class Alphabet:
    t_min: int = -64
    t_max: int = 63

    def __post_init__(self):
        if not (self.t_min < 0 < self.t_max):
            raise ConfigError(f"alphabet needs t_min < 0 < t_max, got [{self.t_min}, {self.t_max}]")
        if self.size > MAX_ALPHABET:
            raise ConfigError(f"alphabet size {self.size} exceeds {MAX_ALPHABET}")

    @property
    def size(self) -> int:
        return self.t_max - self.t_min + 1

    @property
    def symbols(self) -> np.ndarray:
        return np.arange(self.t_min, self.t_max + 1, dtype=np.int64)

    def to_index(self, symbols: np.ndarray) -> np.ndarray:
        return np.asarray(symbols, dtype=np.int64) - self.t_min

    def from_index(self, indices: np.ndarray) -> np.ndarray:
        return (np.asarray(indices, dtype=np.int64) + self.t_min).astype(np.int32)


@dataclass
class QuantizedLatent:
    symbols: np.ndarray
    alphabet: Alphabet

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int32)
        if self.symbols.size and (self.symbols.min() < self.alphabet.t_min
                                  or self.symbols.max() > self.alphabet.t_max):
            raise ShapeMismatchError(
                f"symbols outside alphabet [{self.alphabet.t_min}, {self.alphabet.t_max}]")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.symbols.shape


@dataclass
class HyperVector:
    """
    The side-information vector v. In eval mode ``symbols`` are integers and
    ``scales`` a float array; during training both may be tensors (noisy v,
    trainable sigma_j).
    """
    symbols: Union[np.ndarray, Tensor]
    alphabet: Alphabet
    scales: Union[np.ndarray, Tensor]

    def __post_init__(self):
        scales = self.scales.data if isinstance(self.scales, Tensor) else np.asarray(self.scales)
        if np.any(~(scales > 0)):
            raise ShapeMismatchError("hyper scales must be strictly positive")
        if not isinstance(self.symbols, Tensor):
            QuantizedLatent(self.symbols, self.alphabet)
            self.symbols = np.asarray(self.symbols, dtype=np.int32)


@dataclass
class GaussianParams:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeMismatchError(f"mu shape {self.mu.shape} != sigma shape {self.sigma.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.mu.shape

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.mu.data, self.sigma.data


# ============================================================================
# QUANTIZATION AND DISCRETIZED GAUSSIANS
# ============================================================================

def quantize(values, alphabet: Alphabet, mode: str = "eval",
             rng: Optional[np.random.Generator] = None):
    """
    ``eval``: round half to even, clamp, return a QuantizedLatent.
    ``train``: return ``values + u`` with u ~ U(-0.5, 0.5) as a Tensor.
    """
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs a random generator")
        x = values if isinstance(values, Tensor) else Tensor(values)
        noise = rng.uniform(-0.5, 0.5, size=x.shape).astype(x.dtype)
        return x + noise
    if mode != "eval":
        raise ValueError(f"unknown quantization mode '{mode}'")
    data = values.data if isinstance(values, Tensor) else np.asarray(values)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("cannot quantize non-finite values")
    rounded = np.clip(np.rint(data), alphabet.t_min, alphabet.t_max).astype(np.int32)
    return QuantizedLatent(rounded, alphabet)


def _interval_mass(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    # Evaluate whichever tail keeps the difference away from 1 - 1.
    flip = (upper + lower) > 0
    return np.where(flip, ndtr(-lower) - ndtr(-upper), ndtr(upper) - ndtr(lower))


def _density(c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Standard normal density phi(c) and c * phi(c), both 0 at +-inf."""
    finite = np.isfinite(c)
    safe = np.where(finite, c, 0.0)
    phi = np.where(finite, np.exp(-0.5 * safe * safe) * _INV_SQRT_2PI, 0.0)
    return phi, safe * phi


def _water_fill(pmf: np.ndarray, floor: float) -> np.ndarray:
    """Raise entries to ``floor`` and rescale the rest so rows still sum to 1."""
    pmf = pmf / pmf.sum(axis=1, keepdims=True)
    pinned = pmf < floor
    while True:
        free_mass = np.where(pinned, 0.0, pmf).sum(axis=1, keepdims=True)
        budget = 1.0 - pinned.sum(axis=1, keepdims=True) * floor
        out = np.where(pinned, floor, pmf * (budget / free_mass))
        newly = (~pinned) & (out < floor)
        if not newly.any():
            return out
        pinned |= newly


def gaussian_pmf_table(mu, sigma, alphabet: Alphabet, floor: float = PMF_FLOOR) -> np.ndarray:
    """
    PMF rows for every (mu, sigma) pair, shape (len(mu), alphabet.size), in
    float64. ``floor=0`` returns the raw interval masses.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if mu.shape != sigma.shape:
        raise ShapeMismatchError(f"mu has {mu.size} entries, sigma has {sigma.size}")
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be strictly positive")
    if floor * alphabet.size >= 1.0:
        raise ConfigError(f"floor {floor} too large for an alphabet of {alphabet.size} symbols")

    centers = alphabet.symbols.astype(np.float64)
    upper = ((centers + 0.5)[None, :] - mu[:, None]) / sigma[:, None]
    lower = ((centers - 0.5)[None, :] - mu[:, None]) / sigma[:, None]
    upper[:, -1] = np.inf
    lower[:, 0] = -np.inf
    mass = np.maximum(_interval_mass(upper, lower), 0.0)
    if floor <= 0:
        return mass
    return _water_fill(mass, floor)


def discretized_gaussian_pmf(mu: float, sigma: float, alphabet: Alphabet,
                             floor: float = PMF_FLOOR) -> np.ndarray:
    return gaussian_pmf_table([mu], [sigma], alphabet, floor)[0]


def symbol_bits(symbols, mu, sigma, alphabet: Alphabet, floor: float = PMF_FLOOR) -> np.ndarray:
    """Exact -log2 q(s) per element, read from the floored PMF tables."""
    symbols = np.asarray(symbols).reshape(-1)
    table = gaussian_pmf_table(mu, sigma, alphabet, floor)
    if table.shape[0] != symbols.size:
        raise ShapeMismatchError(f"{symbols.size} symbols but {table.shape[0]} distributions")
    probs = table[np.arange(symbols.size), alphabet.to_index(symbols)]
    return -np.log2(probs)


class DiscretizedGaussianBits(Function):
    """
    Elementwise -log2 of the discretized Gaussian mass around a real-valued
    (noisy) symbol, with the same edge absorption as the PMF tables and the
    mass clipped from below at the floor (no gradient through the clip).
    """

    def forward(self, x, mu, sigma, t_min=-64, t_max=63, floor=PMF_FLOOR):
        xd, md, sd = (a.astype(np.float64) for a in (x, mu, sigma))
        upper = np.where(xd >= t_max - 0.5, np.inf, (xd + 0.5 - md) / sd)
        lower = np.where(xd <= t_min + 0.5, -np.inf, (xd - 0.5 - md) / sd)
        mass = np.maximum(_interval_mass(upper, lower), 0.0)
        self.active = mass > floor
        p = np.maximum(mass, floor)
        self.upper, self.lower, self.sigma, self.p = upper, lower, sd, p
        self.dtype = x.dtype
        return (-np.log2(p)).astype(x.dtype)

    def backward(self, grad):
        d_mass = np.where(self.active, -1.0 / (self.p * np.log(2.0)), 0.0) * grad
        phi_u, cphi_u = _density(self.upper)
        phi_l, cphi_l = _density(self.lower)
        diff = (phi_u - phi_l) / self.sigma
        g_x = d_mass * diff
        g_mu = -g_x
        g_sigma = -d_mass * (cphi_u - cphi_l) / self.sigma
        return (g_x.astype(self.dtype), g_mu.astype(self.dtype), g_sigma.astype(self.dtype))


def gaussian_bits(x: Tensor, mu: Tensor, sigma: Tensor, alphabet: Alphabet,
                  floor: float = PMF_FLOOR) -> Tensor:
    if not (x.shape == mu.shape == sigma.shape):
        raise ShapeMismatchError(
            f"gaussian_bits: value {x.shape}, mean {mu.shape} and scale {sigma.shape} differ")
    return DiscretizedGaussianBits.apply(x, mu, sigma, t_min=alphabet.t_min,
                                         t_max=alphabet.t_max, floor=floor)


def rate_bits(z, v: HyperVector, params: GaussianParams, floor: float = PMF_FLOOR):
    """
    Total bits for z under q(z | v) plus v under N(0, sigma_j).

    Integer inputs (QuantizedLatent, integer HyperVector) give an exact float
    read from the PMF tables. Tensor inputs (train mode) give a differentiable
    scalar Tensor.
    """
    if isinstance(z, QuantizedLatent):
        mu, sigma = params.arrays()
        z_bits = symbol_bits(z.symbols, mu, sigma, z.alphabet, floor).sum()
        v_symbols = np.asarray(v.symbols)
        v_scales = v.scales.data if isinstance(v.scales, Tensor) else np.asarray(v.scales)
        v_sigma = np.broadcast_to(v_scales, v_symbols.shape)
        v_bits = symbol_bits(v_symbols, np.zeros(v_symbols.shape), v_sigma, v.alphabet, floor).sum()
        return float(z_bits + v_bits)

    alphabet = v.alphabet
    z_bits = gaussian_bits(z, params.mu, params.sigma, alphabet, floor).sum()
    v_t = v.symbols if isinstance(v.symbols, Tensor) else Tensor(np.asarray(v.symbols, dtype=z.dtype))
    scales = v.scales if isinstance(v.scales, Tensor) else Tensor(np.asarray(v.scales, dtype=z.dtype))
    v_sigma = scales * np.ones(v_t.shape, dtype=z.dtype)
    v_mu = Tensor(np.zeros(v_t.shape, dtype=z.dtype))
    v_bits = gaussian_bits(v_t, v_mu, v_sigma, alphabet, floor).sum()
    return z_bits + v_bits


# ============================================================================
# CODEBOOK HYPERPRIOR
# ============================================================================

class CoefficientDecoder(Module):
    """v (B, J) -> n coefficient sequences of length tau, (B, n, tau)."""

    def __init__(self, hyper_dim: int, n_priors: int, tau: int, rng: np.random.Generator):
        self.n_priors, self.tau = n_priors, tau
        self.fc1 = Linear(hyper_dim, 4 * hyper_dim, rng)
        self.act = ReLU()
        self.fc2 = Linear(4 * hyper_dim, n_priors * tau, rng)

    def forward(self, v: Tensor) -> Tensor:
        out = self.fc2(self.act(self.fc1(v)))
        return out.reshape(v.shape[0], self.n_priors, self.tau)


def decode_coefficients(v: Union[HyperVector, Tensor, np.ndarray], decoder: CoefficientDecoder) -> Tensor:
    if isinstance(v, HyperVector):
        v = v.symbols
    if not isinstance(v, Tensor):
        v = Tensor(np.asarray(v, dtype=decoder.fc1.weight.dtype))
    if v.ndim == 1:
        v = v.reshape(1, v.shape[0])
    return decoder(v)


class Codebook(Module):
    def __init__(self, tau: int, size: int, rng: np.random.Generator):
        if tau < 1:
            raise ConfigError(f"codebook needs tau >= 1, got {tau}")
        if size < 2:
            raise ConfigError(f"codebook reference resolution must be >= 2, got {size}")
        self.bases = Parameter(rng.normal(0.0, 1.0 / np.sqrt(tau), size=(tau, size, size)).astype(np.float32))

    @property
    def tau(self) -> int:
        return self.bases.shape[0]

    @property
    def size(self) -> int:
        return self.bases.shape[1]

    def content_hash(self) -> int:
        """CRC-32 of the float32 basis bytes, carried in every bitstream header."""
        return zlib.crc32(np.ascontiguousarray(self.bases.data, dtype=np.float32).tobytes()) & 0xFFFFFFFF


def synthesize_prior(coefficients: Tensor, codebook: Codebook, target_h: int, target_w: int) -> Tensor:
    """
    Resize every basis to the target extent, then form one prior map per
    coefficient sequence as the weighted sum of the resized bases.
    """
    if target_h < 1 or target_w < 1:
        raise ShapeMismatchError(f"prior target extent {(target_h, target_w)} must be >= 1")
    if coefficients.shape[-1] != codebook.tau:
        raise ShapeMismatchError(
            f"coefficients of length {coefficients.shape[-1]} for a codebook of {codebook.tau} bases")
    resized = bilinear_resize(codebook.bases, target_h, target_w)
    if coefficients.ndim == 2:
        return einsum("nt,thw->nhw", coefficients, resized)
    return einsum("bnt,thw->bnhw", coefficients, resized)


class PredictionHead(Module):
    """Prior maps (B, n, H, W) -> mu, sigma of shape (B, C, H, W)."""

    def __init__(self, n_priors: int, latent_channels: int, rng: np.random.Generator, hidden: int = 32):
        self.n_priors, self.latent_channels = n_priors, latent_channels
        self.conv1 = Conv2d(n_priors, hidden, 3, rng)
        self.act = ReLU()
        self.conv2 = Conv2d(hidden, 2 * latent_channels, 3, rng)

    def forward(self, prior: Tensor) -> GaussianParams:
        if prior.ndim != 4 or prior.shape[1] != self.n_priors:
            raise ShapeMismatchError(
                f"prediction head expects {self.n_priors} prior channels, got shape {prior.shape}")
        out = self.conv2(self.act(self.conv1(prior)))
        mu, raw = split(out, [self.latent_channels, self.latent_channels], axis=1)
        return GaussianParams(mu, softplus(raw) + POSITIVE_EPS)


class VectorPredictionHead(Module):
    """v (B, J) -> mu, sigma of shape (B, D) for latents without spatial dims."""

    def __init__(self, hyper_dim: int, latent_dim: int, rng: np.random.Generator, hidden: int = 64):
        self.hyper_dim, self.latent_dim = hyper_dim, latent_dim
        self.fc1 = Linear(hyper_dim, hidden, rng)
        self.fc2 = Linear(hidden, 2 * latent_dim, rng)

    def forward(self, v: Tensor) -> GaussianParams:
        if v.ndim != 2 or v.shape[1] != self.hyper_dim:
            raise ShapeMismatchError(f"vector head expects (B, {self.hyper_dim}), got {v.shape}")
        out = self.fc2(relu(self.fc1(v)))
        mu, raw = split(out, [self.latent_dim, self.latent_dim], axis=1)
        return GaussianParams(mu, softplus(raw) + POSITIVE_EPS)


def predict_params(prior: Tensor, head: PredictionHead) -> GaussianParams:
    if prior.ndim == 3:
        prior = prior.reshape(1, *prior.shape)
    return head(prior)


def predict_params_vector(v: Union[HyperVector, Tensor], head: VectorPredictionHead) -> GaussianParams:
    if isinstance(v, HyperVector):
        v = v.symbols if isinstance(v.symbols, Tensor) else Tensor(np.asarray(v.symbols, dtype=np.float32))
    if v.ndim == 1:
        v = v.reshape(1, v.shape[0])
    return head(v)
