"""Differentiable image codec with a mean-scale hyperprior entropy model.

The codec is split into five named sub-networks (``analysis``, ``synthesis``,
``hyper_analysis``, ``hyper_synthesis``, ``factorized_prior``). The split is
load-bearing: the rate of a coded image depends on everything except
``synthesis``, so freezing the other four fixes the bitstream exactly while
the decoder remains trainable.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Literal, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BitstreamError, DimensionMismatchError

# Stability floors: no zero-width Gaussian bins, no un-codable symbols.
SIGMA_FLOOR = 0.11
P_FLOOR = 2.0 ** -15

# Integer coding supports. Eval-mode quantization clamps to these ranges so
# that rate estimates and actual coded symbols agree.
LATENT_SUPPORT = (-32, 31)
HYPER_SUPPORT = (-64, 63)

LEAKY_SLOPE = 0.2

SUBNET_NAMES = (
    "analysis",
    "synthesis",
    "hyper_analysis",
    "hyper_synthesis",
    "factorized_prior",
)

Mode = Literal["train", "eval"]


@dataclass(frozen=True)
class ArchConfig:
    """Architecture of the codec transforms.

    ``downsampling_stages`` (S) strided stages in the main transforms and
    ``hyper_downsampling_stages`` (S_h) in the hyper transforms; images must
    be divisible by ``2**(S + S_h)`` to be codable.
    """

    downsampling_stages: int = 3
    hidden_channels: int = 64
    latent_channels: int = 96
    hyper_channels: int = 32
    hyper_downsampling_stages: int = 2
    nonlinearity: str = "leaky_relu"
    kernel_size: int = 5

    def __post_init__(self):
        if self.downsampling_stages < 2:
            raise ValueError("downsampling_stages must be >= 2")
        if self.hyper_downsampling_stages < 1:
            raise ValueError("hyper_downsampling_stages must be >= 1")
        for field in ("hidden_channels", "latent_channels", "hyper_channels"):
            if getattr(self, field) < 8:
                raise ValueError(f"{field} must be >= 8")
        if self.nonlinearity not in ("leaky_relu", "gdn"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.kernel_size < 2:
            raise ValueError("kernel_size must be >= 2")

    @property
    def total_downsampling(self) -> int:
        return 2 ** (self.downsampling_stages + self.hyper_downsampling_stages)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ArchConfig":
        return cls(**data)

    def canonical(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


class GaussianParams(NamedTuple):
    """Per-element mean/scale of the conditional entropy model."""

    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class QuantizedLatents:
    """Quantized latents plus the Gaussian parameters used to code them.

    In eval mode ``y_hat - mu`` and ``z_hat`` are integer grids; in train
    mode they carry the uniform-noise proxy values instead.
    """

    y_hat: torch.Tensor
    z_hat: torch.Tensor
    gaussian: GaussianParams


class ForwardResult(NamedTuple):
    x_hat: torch.Tensor
    bpp_y: torch.Tensor
    bpp_z: torch.Tensor
    latents: QuantizedLatents


class GDN(nn.Module):
    """Generalized divisive normalization (simplified, square reparam)."""

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        self.beta_raw = nn.Parameter(torch.ones(channels))
        self.gamma_raw = nn.Parameter(0.1 * torch.eye(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        beta = self.beta_raw * self.beta_raw + 1e-6
        gamma = self.gamma_raw * self.gamma_raw
        norm = F.conv2d(x * x, gamma.unsqueeze(-1).unsqueeze(-1), beta)
        norm = torch.sqrt(norm)
        return x * norm if self.inverse else x / norm


def _act(arch: ArchConfig, channels: int, inverse: bool) -> nn.Module:
    if arch.nonlinearity == "gdn":
        return GDN(channels, inverse=inverse)
    return nn.LeakyReLU(LEAKY_SLOPE)


def _conv(in_ch: int, out_ch: int, k: int, stride: int) -> nn.Conv2d:
    pad = (k - 1) // 2 if k % 2 else (k - 2) // 2
    return nn.Conv2d(in_ch, out_ch, k, stride=stride, padding=pad)


def _deconv(in_ch: int, out_ch: int, k: int, stride: int) -> nn.ConvTranspose2d:
    pad = (k - 1) // 2 if k % 2 else (k - 2) // 2
    out_pad = (stride - 1) if k % 2 else 0
    return nn.ConvTranspose2d(
        in_ch, out_ch, k, stride=stride, padding=pad, output_padding=out_pad
    )


class FactorizedPrior(nn.Module):
    """Per-channel logistic prior for the hyper-latents.

    Each channel has a learned location and scale; the likelihood of an
    integer symbol is the logistic CDF integrated over its unit bin.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(channels))
        # softplus(raw) + SIGMA_FLOOR == 1.0 at init
        raw0 = math.log(math.expm1(1.0 - SIGMA_FLOOR))
        self.scale_raw = nn.Parameter(torch.full((channels,), raw0))

    @property
    def channels(self) -> int:
        return self.loc.shape[0]

    def location_scale(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.loc, SIGMA_FLOOR + F.softplus(self.scale_raw)


class Codec(nn.Module):
    """The four transforms plus the factorized prior, as named sub-networks."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        k = arch.kernel_size
        S, Sh = arch.downsampling_stages, arch.hyper_downsampling_stages
        h, cy, cz = arch.hidden_channels, arch.latent_channels, arch.hyper_channels

        layers: list[nn.Module] = []
        for i in range(S):
            in_ch = 3 if i == 0 else h
            out_ch = cy if i == S - 1 else h
            layers.append(_conv(in_ch, out_ch, k, 2))
            if i < S - 1:
                layers.append(_act(arch, out_ch, inverse=False))
        self.analysis = nn.Sequential(*layers)

        layers = []
        for i in range(S):
            in_ch = cy if i == 0 else h
            out_ch = 3 if i == S - 1 else h
            layers.append(_deconv(in_ch, out_ch, k, 2))
            if i < S - 1:
                layers.append(_act(arch, out_ch, inverse=True))
        self.synthesis = nn.Sequential(*layers)

        layers = []
        for i in range(Sh):
            in_ch = cy if i == 0 else h
            out_ch = cz if i == Sh - 1 else h
            layers.append(_conv(in_ch, out_ch, k, 2))
            if i < Sh - 1:
                layers.append(nn.LeakyReLU(LEAKY_SLOPE))
        self.hyper_analysis = nn.Sequential(*layers)

        layers = []
        for i in range(Sh):
            in_ch = cz if i == 0 else h
            out_ch = 2 * cy if i == Sh - 1 else h
            layers.append(_deconv(in_ch, out_ch, k, 2))
            if i < Sh - 1:
                layers.append(nn.LeakyReLU(LEAKY_SLOPE))
        self.hyper_synthesis = nn.Sequential(*layers)

        self.factorized_prior = FactorizedPrior(cz)

    def subnet(self, name: str) -> nn.Module:
        if name not in SUBNET_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    # -- transforms -----------------------------------------------------

    def run_analysis(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x, self.arch)
        return self.analysis(x)

    def run_synthesis(self, y_hat: torch.Tensor) -> torch.Tensor:
        if y_hat.dim() != 4 or y_hat.shape[1] != self.arch.latent_channels:
            raise DimensionMismatchError(
                f"latent grid must be [B,{self.arch.latent_channels},h,w], "
                f"got {tuple(y_hat.shape)}"
            )
        return self.synthesis(y_hat)

    def run_hyper_analysis(self, y: torch.Tensor) -> torch.Tensor:
        div = 2 ** self.arch.hyper_downsampling_stages
        if y.dim() != 4 or y.shape[1] != self.arch.latent_channels:
            raise DimensionMismatchError(
                f"latent grid must be [B,{self.arch.latent_channels},h,w], "
                f"got {tuple(y.shape)}"
            )
        if y.shape[2] % div or y.shape[3] % div or y.shape[2] < div or y.shape[3] < div:
            raise DimensionMismatchError(
                f"latent spatial dims {tuple(y.shape[2:])} not divisible by {div}"
            )
        return self.hyper_analysis(y)

    def run_hyper_synthesis(self, z_hat: torch.Tensor) -> GaussianParams:
        out = self.hyper_synthesis(z_hat)
        mu, raw = out.chunk(2, dim=1)
        sigma = SIGMA_FLOOR + F.softplus(raw)
        return GaussianParams(mu, sigma)

    # -- composite pipeline ---------------------------------------------

    def encode_latents(self, x: torch.Tensor) -> QuantizedLatents:
        """Deterministic eval-mode latents: the exact grids the coder sees."""
        y = self.run_analysis(x)
        z = self.run_hyper_analysis(y)
        z_hat = quantize(z, "eval")
        z_hat = torch.clamp(z_hat, *HYPER_SUPPORT)
        g = self.run_hyper_synthesis(z_hat)
        residual = torch.clamp(torch.round(y - g.mu), *LATENT_SUPPORT)
        y_hat = residual + g.mu
        return QuantizedLatents(y_hat, z_hat, g)

    def forward(
        self,
        x: torch.Tensor,
        mode: Mode = "train",
        generator: Optional[torch.Generator] = None,
    ) -> ForwardResult:
        """Full pipeline: transforms, quantization, likelihoods, rate.

        Train mode quantizes with seeded uniform noise (z drawn first, then
        y); eval mode rounds, clamps to the coding supports, and clamps the
        reconstruction to [0, 1].
        """
        _check_image(x, self.arch, full=True)
        num_pixels = x.shape[0] * x.shape[2] * x.shape[3]
        if mode == "eval":
            latents = self.encode_latents(x)
        elif mode == "train":
            y = self.run_analysis(x)
            z = self.run_hyper_analysis(y)
            z_hat = quantize(z, "train", generator=generator)
            g = self.run_hyper_synthesis(z_hat)
            y_hat = quantize(y, "train", generator=generator)
            latents = QuantizedLatents(y_hat, z_hat, g)
        else:
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

        p_y = likelihood_conditional(latents.y_hat, latents.gaussian)
        p_z = likelihood_factorized(latents.z_hat, self.factorized_prior)
        x_hat = self.run_synthesis(latents.y_hat)
        if mode == "eval":
            x_hat = torch.clamp(x_hat, 0.0, 1.0)
        bpp_y = estimate_bpp(p_y, num_pixels)
        bpp_z = estimate_bpp(p_z, num_pixels)
        return ForwardResult(x_hat, bpp_y, bpp_z, latents)


def _check_image(x: torch.Tensor, arch: ArchConfig, full: bool = False) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise DimensionMismatchError(f"image must be [B,3,H,W], got {tuple(x.shape)}")
    div = 2 ** arch.downsampling_stages
    b, _, hgt, wdt = x.shape
    if b < 1 or hgt < 32 or wdt < 32:
        raise DimensionMismatchError(
            f"image must have batch >= 1 and spatial dims >= 32, got {tuple(x.shape)}"
        )
    if hgt % div or wdt % div:
        raise DimensionMismatchError(
            f"image dims {hgt}x{wdt} not divisible by {div}"
        )
    if full:
        lo, hi = float(x.min()), float(x.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image values must lie in [0,1], got [{lo}, {hi}]")


def quantize(
    v: torch.Tensor,
    mode: Mode,
    offset: Union[torch.Tensor, float] = 0.0,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Uniform-noise proxy in train mode, offset rounding in eval mode.

    Eval mode returns ``round(v - offset) + offset`` so that an element's
    residual against the offset is exactly integer.
    """
    if mode == "train":
        noise = torch.empty_like(v).uniform_(-0.5, 0.5, generator=generator)
        return v + noise
    if mode == "eval":
        return torch.round(v - offset) + offset
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.erf(x * (2.0 ** -0.5)))


def likelihood_conditional(y_hat: torch.Tensor, g: GaussianParams) -> torch.Tensor:
    """P(symbol) under the mean-scale Gaussian with unit quantization bins.

    Evaluated symmetrically around the mean for numerical stability in the
    tails, then floored at P_FLOOR.
    """
    centered = torch.abs(y_hat - g.mu)
    upper = _std_normal_cdf((0.5 - centered) / g.sigma)
    lower = _std_normal_cdf((-0.5 - centered) / g.sigma)
    return torch.clamp(upper - lower, min=P_FLOOR)


def likelihood_factorized(
    z_hat: torch.Tensor, prior: FactorizedPrior
) -> torch.Tensor:
    """P(symbol) under the per-channel logistic prior, unit bins, floored."""
    loc, scale = prior.location_scale()
    loc = loc.view(1, -1, 1, 1)
    scale = scale.view(1, -1, 1, 1)
    centered = torch.abs(z_hat - loc)
    upper = torch.sigmoid((0.5 - centered) / scale)
    lower = torch.sigmoid((-0.5 - centered) / scale)
    return torch.clamp(upper - lower, min=P_FLOOR)


def estimate_bpp(
    likelihoods: Union[torch.Tensor, Iterable[torch.Tensor]], num_pixels: int
) -> torch.Tensor:
    """Model rate in bits per source pixel: sum(-log2 p) / num_pixels."""
    if num_pixels <= 0:
        raise ValueError(f"num_pixels must be positive, got {num_pixels}")
    if isinstance(likelihoods, torch.Tensor):
        likelihoods = [likelihoods]
    total = None
    for p in likelihoods:
        bits = (-torch.log2(p)).sum()
        total = bits if total is None else total + bits
    if total is None:
        raise ValueError("no likelihood grids given")
    return total / num_pixels


# -- construction and hashing ------------------------------------------


def new_codec(
    arch: ArchConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> Codec:
    """Build a codec with deterministic seeded initialization."""
    codec = Codec(arch)
    gen = torch.Generator().manual_seed(seed)
    for _, module in sorted(codec.named_modules()):
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            in_ch = module.in_channels
            k = module.kernel_size[0]
            bound = 1.0 / math.sqrt(in_ch * k * k)
            module.weight.data.uniform_(-bound, bound, generator=gen)
            if module.bias is not None:
                module.bias.data.uniform_(-bound, bound, generator=gen)
    return codec.to(dtype)


def _hash_tensors(
    hasher: "hashlib._Hash", named: Sequence[tuple[str, torch.Tensor]]
) -> None:
    for name, t in sorted(named, key=lambda kv: kv[0]):
        arr = t.detach().cpu().contiguous().numpy()
        hasher.update(name.encode())
        hasher.update(str(arr.dtype).encode())
        hasher.update(struct.pack("<%dq" % arr.ndim, *arr.shape) if arr.ndim else b"")
        hasher.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def params_hash(codec: Codec) -> str:
    """Content hash over the architecture and every learnable parameter."""
    hasher = hashlib.sha256()
    hasher.update(codec.arch.canonical().encode())
    hasher.update(str(_dtype_of(codec)).encode())
    _hash_tensors(hasher, list(codec.named_parameters()))
    return hasher.hexdigest()


def subnet_hash(codec: Codec, names: Sequence[str]) -> str:
    """Content hash over the named sub-networks only."""
    hasher = hashlib.sha256()
    hasher.update(codec.arch.canonical().encode())
    hasher.update(str(_dtype_of(codec)).encode())
    named = []
    for name in sorted(names):
        sub = codec.subnet(name)
        named.extend((f"{name}.{pname}", p) for pname, p in sub.named_parameters())
    _hash_tensors(hasher, named)
    return hasher.hexdigest()


def arch_hash(arch: ArchConfig) -> str:
    return hashlib.sha256(arch.canonical().encode()).hexdigest()


def _dtype_of(codec: Codec) -> torch.dtype:
    return next(codec.parameters()).dtype


# -- checkpoint container ----------------------------------------------

_CKPT_MAGIC = b"RDPC"
_CKPT_VERSION = 1


def save_checkpoint(codec: Codec, path: Union[str, Path], meta: Optional[dict] = None) -> str:
    """Persist parameters bit-exactly; returns the params hash.

    The container is a JSON header followed by the raw little-endian tensor
    bytes in sorted name order. Metadata must already be deterministic
    (no timestamps) so reruns regenerate byte-identical files.
    """
    path = Path(path)
    names = sorted(name for name, _ in codec.named_parameters())
    params = dict(codec.named_parameters())
    dtype = str(_dtype_of(codec)).replace("torch.", "")
    header = {
        "format_version": _CKPT_VERSION,
        "arch": codec.arch.to_json(),
        "dtype": dtype,
        "subnets": list(SUBNET_NAMES),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "params_hash": params_hash(codec),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        np_dtype = np.dtype(dtype).newbyteorder("<")
        for n in names:
            fh.write(params[n].detach().cpu().contiguous().numpy().astype(np_dtype).tobytes())
    return header["params_hash"]


def load_checkpoint(path: Union[str, Path]) -> tuple[Codec, dict]:
    """Load a checkpoint, rebuild the codec, and verify the content hash."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise BitstreamError(f"{path}: not a codec checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header["format_version"] != _CKPT_VERSION:
            raise BitstreamError(f"{path}: unsupported checkpoint version")
        arch = ArchConfig.from_json(header["arch"])
        torch_dtype = getattr(torch, header["dtype"])
        codec = Codec(arch).to(torch_dtype)
        params = dict(codec.named_parameters())
        np_dtype = np.dtype(header["dtype"]).newbyteorder("<")
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * np_dtype.itemsize)
            if len(raw) != count * np_dtype.itemsize:
                raise BitstreamError(f"{path}: truncated checkpoint")
            arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape)
            with torch.no_grad():
                params[entry["name"]].copy_(torch.from_numpy(arr.copy()))
    if params_hash(codec) != header["params_hash"]:
        raise BitstreamError(f"{path}: checkpoint hash mismatch")
    return codec, header["meta"]
