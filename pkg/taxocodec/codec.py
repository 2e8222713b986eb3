"""
codec.py
Feature codec: analysis transform, codebook hyperprior, TXC1 container
======================================================================

Pipeline for one feature tensor h:

    z = quantize(E(h))                      latent, coded second
    v = quantize(pool(f_Ha(z)))             hyper vector, coded first under N(0, sigma_j)
    (mu, sigma) = head(codebook prior(v))   derived from v only
    h_hat = D(z)

The decoder reproduces (mu, sigma) from the decoded v through the same
``entropy_parameters`` call, so both sides build identical CDF tables.

Features without spatial dimensions (shape ``(C,)``) use dense transforms
and an MLP parameter head; their header carries H = W = 0.
"""

import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import joblib
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import __version__
from .entropy_models import (Alphabet, CoefficientDecoder, Codebook, GaussianParams, HyperVector,
                             PredictionHead, QuantizedLatent, VectorPredictionHead, gaussian_pmf_table,
                             quantize, rate_bits, synthesize_prior)
from .errors import (ArtifactNotFoundError, CodebookMismatchError, ConfigError, DecodeError,
                     NonFiniteError, ShapeMismatchError, UnsupportedVersionError)
from .layers import Conv2d, GlobalPool, Linear, Module, ReLU, Resize, Sequential
from .numerics import Parameter, Tensor, no_grad
from .range_coder import CodedSegment, build_cdfs, decode, encode

logger = logging.getLogger(__name__)

MAGIC = b"TXC1"
BITSTREAM_VERSION = 1
CHECKPOINT_VERSION = 1
HEADER = struct.Struct("<4sB3HHhhIIII")


# ============================================================================
# CONFIGURATION
# ============================================================================

class CodecConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    in_channels: int = Field(16, ge=1, le=65535)
    in_height: int = Field(16, ge=0, le=65535)
    in_width: int = Field(16, ge=0, le=65535)
    latent_channels: int = Field(16, ge=1, le=65535)
    hidden_channels: int = Field(32, ge=1)
    hyper_dim: int = Field(16, ge=1, le=65535)
    tau: int = Field(8, ge=1)
    n_priors: int = Field(16, ge=1)
    codebook_size: int = Field(16, ge=2)
    t_min: int = Field(-64, ge=-32768, le=-1)
    t_max: int = Field(63, ge=1, le=32767)
    source_h: int = Field(64, ge=1)
    source_w: int = Field(64, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_shape(self):
        if (self.in_height == 0) != (self.in_width == 0):
            raise ValueError("vector features need in_height = in_width = 0")
        Alphabet(self.t_min, self.t_max)
        return self

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet(self.t_min, self.t_max)

    @property
    def is_vector(self) -> bool:
        return self.in_height == 0

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        if self.is_vector:
            return (self.in_channels,)
        return (self.in_channels, self.in_height, self.in_width)

    @property
    def latent_shape(self) -> Tuple[int, ...]:
        if self.is_vector:
            return (self.latent_channels,)
        # two stride-2, padding-1, 3x3 convolutions
        return (self.latent_channels, (self.in_height + 3) // 4, (self.in_width + 3) // 4)


# ============================================================================
# MODEL
# ============================================================================

@dataclass
class TrainOutput:
    h_hat: Tensor
    bits: Tensor
    z: Tensor
    v: Tensor


class CodecModel(Module):
    def __init__(self, config: CodecConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c, hid, lat, j = config.in_channels, config.hidden_channels, config.latent_channels, config.hyper_dim

        if config.is_vector:
            self.encoder = Sequential(Linear(c, hid, rng), ReLU(), Linear(hid, lat, rng))
            self.decoder = Sequential(Linear(lat, hid, rng), ReLU(), Linear(hid, c, rng))
            self.hyper_analysis = Sequential(Linear(lat, hid, rng), ReLU(), Linear(hid, j, rng))
            self.codebook = None
            self.coefficients = None
            self.head = VectorPredictionHead(j, lat, rng)
        else:
            mid = ((config.in_height + 1) // 2, (config.in_width + 1) // 2)
            self.encoder = Sequential(
                Conv2d(c, hid, 3, rng, stride=2), ReLU(),
                Conv2d(hid, lat, 3, rng, stride=2),
            )
            self.decoder = Sequential(
                Resize(mid), Conv2d(lat, hid, 3, rng), ReLU(),
                Resize((config.in_height, config.in_width)), Conv2d(hid, c, 3, rng),
            )
            self.hyper_analysis = Sequential(
                Conv2d(lat, hid, 3, rng), ReLU(), Conv2d(hid, j, 1, rng), GlobalPool(),
            )
            self.coefficients = CoefficientDecoder(j, config.n_priors, config.tau, rng)
            self.codebook = Codebook(config.tau, config.codebook_size, rng)
            self.head = PredictionHead(config.n_priors, lat, rng)
        # Unconstrained init such that softplus(s) = 4.
        self.hyper_scales = Parameter(np.full(j, np.log(np.expm1(4.0)), dtype=np.float32), positive=True)

    @property
    def alphabet(self) -> Alphabet:
        return self.config.alphabet

    def codebook_hash(self) -> int:
        if self.codebook is not None:
            return self.codebook.content_hash()
        crc = 0
        for _, p in self.head.named_parameters():
            crc = zlib.crc32(np.ascontiguousarray(p.data, dtype=np.float32).tobytes(), crc)
        return crc & 0xFFFFFFFF

    # ------------------------------------------------------------------ shared
    def hyper_sigma(self) -> Tensor:
        return self.hyper_scales.value

    def conditional_params(self, v: Tensor) -> GaussianParams:
        """(mu, sigma) for z given a (B, J) hyper vector."""
        if self.config.is_vector:
            return self.head(v)
        _, h, w = self.config.latent_shape
        prior = synthesize_prior(self.coefficients(v), self.codebook, h, w)
        return self.head(prior)

    def entropy_parameters(self, v_symbols: np.ndarray) -> GaussianParams:
        """
        Entropy parameters derived from decoded integer v only; the encoder
        and decoder both go through this call.
        """
        v_symbols = np.asarray(v_symbols)
        batched = v_symbols.ndim == 2
        v = Tensor(np.atleast_2d(v_symbols).astype(np.float32))
        with no_grad():
            params = self.conditional_params(v)
        if batched:
            return params
        return GaussianParams(Tensor(params.mu.data[0]), Tensor(params.sigma.data[0]))

    # ---------------------------------------------------------------- training
    def forward_train(self, h: Tensor, rng: np.random.Generator) -> TrainOutput:
        z = quantize(self.encoder(h), self.alphabet, mode="train", rng=rng)
        v = quantize(self.hyper_analysis(z), self.alphabet, mode="train", rng=rng)
        params = self.conditional_params(v)
        bits = rate_bits(z, HyperVector(v, self.alphabet, self.hyper_sigma()), params)
        return TrainOutput(self.decoder(z), bits, z, v)

    def forward_eval(self, h: Tensor) -> Tuple[Tensor, float, QuantizedLatent]:
        """Hard-quantized batch pass: (h_hat, estimated bits, z)."""
        with no_grad():
            z, v = self.analyze(h)
            params = self.entropy_parameters(v)
            sigma_v = self.hyper_sigma().data
            bits = rate_bits(z, HyperVector(v, self.alphabet, sigma_v), params)
            h_hat = self.decoder(Tensor(z.symbols.astype(np.float32)))
        return h_hat, bits, z

    # --------------------------------------------------------------- analysis
    def _run_checked(self, stack: Sequential, x: Tensor, stage: str) -> Tensor:
        for index, layer in enumerate(stack.layers):
            x = layer(x)
            if not np.all(np.isfinite(x.data)):
                raise NonFiniteError(f"non-finite activation in {stage} layer {index}", layer_index=index)
        return x

    def analyze(self, h: Tensor) -> Tuple[QuantizedLatent, np.ndarray]:
        """Batched hard quantization: z (B, *latent) and v (B, J)."""
        expected = self.config.feature_shape
        if tuple(h.shape[1:]) != expected:
            raise ShapeMismatchError(f"feature shape {tuple(h.shape[1:])} does not match codec input {expected}")
        if not np.all(np.isfinite(h.data)):
            raise NonFiniteError("non-finite values in the input features")
        with no_grad():
            y = self._run_checked(self.encoder, h, "analysis")
            z = quantize(y, self.alphabet)
            hyper = self._run_checked(self.hyper_analysis, Tensor(z.symbols.astype(np.float32)), "hyper analysis")
            v = quantize(hyper, self.alphabet)
        return z, v.symbols

    def synthesize(self, z: QuantizedLatent) -> np.ndarray:
        symbols = z.symbols
        batched = symbols.ndim == len(self.config.latent_shape) + 1
        x = Tensor(symbols.astype(np.float32))
        if not batched:
            x = x.reshape(1, *symbols.shape)
        with no_grad():
            out = self.decoder(x).data
        return out if batched else out[0]


# ============================================================================
# CONTAINER
# ============================================================================

@dataclass
class Bitstream:
    channels: int
    height: int
    width: int
    hyper_dim: int
    t_min: int
    t_max: int
    codebook_hash: int
    v_symbol_count: int
    v_segment: bytes
    z_segment: bytes
    version: int = BITSTREAM_VERSION

    @property
    def z_symbol_count(self) -> int:
        return self.channels * max(self.height, 1) * max(self.width, 1)

    def header(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.channels, self.height, self.width,
                           self.hyper_dim, self.t_min, self.t_max, self.codebook_hash,
                           self.v_symbol_count, len(self.v_segment), len(self.z_segment))

    def to_bytes(self) -> bytes:
        return self.header() + self.v_segment + self.z_segment

    @property
    def total_bits(self) -> int:
        return 8 * (HEADER.size + len(self.v_segment) + len(self.z_segment))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER.size:
            raise DecodeError(f"bitstream truncated: {len(data)} bytes, header needs {HEADER.size}")
        (magic, version, c, h, w, j, t_min, t_max, codebook_hash,
         v_count, v_len, z_len) = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise DecodeError(f"not a TXC1 bitstream (magic {magic!r})")
        if version != BITSTREAM_VERSION:
            raise UnsupportedVersionError(f"bitstream version {version} not supported")
        expected = HEADER.size + v_len + z_len
        if len(data) < expected:
            raise DecodeError(f"bitstream truncated: {len(data)} of {expected} bytes")
        if len(data) > expected:
            raise DecodeError(f"{len(data) - expected} unexpected trailing bytes")
        v_segment = bytes(data[HEADER.size:HEADER.size + v_len])
        z_segment = bytes(data[HEADER.size + v_len:expected])
        return cls(c, h, w, j, t_min, t_max, codebook_hash, v_count, v_segment, z_segment, version)


# ============================================================================
# COMPRESS / DECOMPRESS
# ============================================================================

def _v_tables(model: CodecModel, count: int) -> np.ndarray:
    sigma = model.hyper_sigma().data.astype(np.float32)
    return build_cdfs(gaussian_pmf_table(np.zeros(count), sigma, model.alphabet))


def _z_tables(model: CodecModel, v_symbols: np.ndarray) -> np.ndarray:
    mu, sigma = model.entropy_parameters(v_symbols).arrays()
    return build_cdfs(gaussian_pmf_table(mu, sigma, model.alphabet))


def compress(model: CodecModel, h: np.ndarray) -> Bitstream:
    """Code one feature tensor (no batch axis) into a TXC1 bitstream."""
    h = np.asarray(h, dtype=np.float32)
    z, v = model.analyze(Tensor(h[None]))
    z_symbols, v_symbols = z.symbols[0], v[0]
    alphabet = model.alphabet

    v_segment = encode(alphabet.to_index(v_symbols), _v_tables(model, v_symbols.size))
    z_segment = encode(alphabet.to_index(z_symbols), _z_tables(model, v_symbols))

    shape = model.config.latent_shape
    height, width = (shape[1], shape[2]) if len(shape) == 3 else (0, 0)
    return Bitstream(shape[0], height, width, model.config.hyper_dim, alphabet.t_min, alphabet.t_max,
                     model.codebook_hash(), int(v_symbols.size), v_segment.data, z_segment.data)


def decompress_latent(model: CodecModel, bs: Bitstream) -> Tuple[QuantizedLatent, np.ndarray]:
    """Entropy-decode v and z without running the synthesis transform."""
    if bs.version != BITSTREAM_VERSION:
        raise UnsupportedVersionError(f"bitstream version {bs.version} not supported")
    if bs.codebook_hash != model.codebook_hash():
        raise CodebookMismatchError(
            f"bitstream codebook hash {bs.codebook_hash:08x} != model {model.codebook_hash():08x}")
    shape = model.config.latent_shape
    stream_shape = (bs.channels,) if bs.height == 0 else (bs.channels, bs.height, bs.width)
    if stream_shape != shape or bs.hyper_dim != model.config.hyper_dim \
            or (bs.t_min, bs.t_max) != (model.alphabet.t_min, model.alphabet.t_max):
        raise ShapeMismatchError(f"bitstream latent {stream_shape} / J={bs.hyper_dim} does not fit model "
                                 f"latent {shape} / J={model.config.hyper_dim}")
    if bs.v_symbol_count != model.config.hyper_dim:
        raise DecodeError(f"bitstream carries {bs.v_symbol_count} hyper symbols, expected {model.config.hyper_dim}")

    alphabet = model.alphabet
    v_idx = decode(CodedSegment(bs.v_segment, bs.v_symbol_count), _v_tables(model, bs.v_symbol_count))
    v_symbols = alphabet.from_index(v_idx)
    z_idx = decode(CodedSegment(bs.z_segment, bs.z_symbol_count), _z_tables(model, v_symbols))
    z = QuantizedLatent(alphabet.from_index(z_idx).reshape(shape), alphabet)
    return z, v_symbols


def decompress(model: CodecModel, bs: Bitstream) -> np.ndarray:
    z, _ = decompress_latent(model, bs)
    return model.synthesize(z)


@dataclass
class RDRecord:
    bits_estimated: float
    bits_actual: int
    bpp: float
    payload_bits: int = 0
    distortions: Dict[str, float] = field(default_factory=dict)


def measure(model: CodecModel, h: np.ndarray) -> Tuple[RDRecord, Bitstream]:
    """Compress one item and book its estimated and actual rates."""
    bs = compress(model, h)
    z, v = model.analyze(Tensor(np.asarray(h, dtype=np.float32)[None]))
    params = model.entropy_parameters(v[0])
    estimated = rate_bits(QuantizedLatent(z.symbols[0], model.alphabet),
                          HyperVector(v[0], model.alphabet, model.hyper_sigma().data), params)
    actual = bs.total_bits
    record = RDRecord(
        bits_estimated=estimated,
        bits_actual=actual,
        bpp=actual / (model.config.source_h * model.config.source_w),
        payload_bits=8 * (len(bs.v_segment) + len(bs.z_segment)),
    )
    return record, bs


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_model(model: CodecModel, path: str) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "codec",
        "tool_version": __version__,
        "config": model.config.model_dump(),
        "state": model.state_dict(),
        "codebook_hash": model.codebook_hash(),
    }
    joblib.dump(payload, path)
    logger.info("Saved codec checkpoint to %s (codebook %08x)", path, payload["codebook_hash"])


def read_checkpoint(path: str, kind: str) -> dict:
    if not os.path.exists(path):
        raise ArtifactNotFoundError(f"model file not found: {path}")
    payload = joblib.load(path)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise UnsupportedVersionError(f"{path} is not a taxocodec checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {payload['format_version']} not supported")
    if payload.get("kind") != kind:
        raise ConfigError(f"{path} holds a '{payload.get('kind')}' checkpoint, expected '{kind}'")
    return payload


def codec_from_payload(config: dict, state: dict, codebook_hash: Optional[int] = None) -> CodecModel:
    model = CodecModel(CodecConfig(**config))
    model.load_state_dict(state)
    if codebook_hash is not None and model.codebook_hash() != codebook_hash:
        raise CodebookMismatchError("codebook hash changed across the checkpoint round trip")
    return model


def load_model(path: str) -> CodecModel:
    payload = read_checkpoint(path, "codec")
    model = codec_from_payload(payload["config"], payload["state"], payload["codebook_hash"])
    logger.info("Loaded codec checkpoint from %s", path)
    return model
