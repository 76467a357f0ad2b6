"""Distortion and perception measures: MSE, PSNR, SSIM, feature-space distance.

The perceptual distance follows the deep-feature recipe (channel-unit
normalized feature maps, squared distance averaged over positions, weighted
sum over layers) but defaults to a seeded random multiscale extractor so the
metric is deterministic and dependency-free. Pretrained extractors can be
plugged in through ``register_feature_extractor``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionMismatchError

PSNR_CAP_DB = 100.0
# MSE at or below this floor reports the cap (identical or near-identical images).
_PSNR_MSE_FLOOR = 1e-10

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_SSIM_C1 = (0.01) ** 2  # stabilizers for [0,1]-range images
_SSIM_C2 = (0.03) ** 2

_LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() == 4:
        return x
    raise DimensionMismatchError(f"expected [3,H,W] or [B,3,H,W], got {tuple(x.shape)}")


def _check_pair(x: torch.Tensor, x_hat: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    x, x_hat = _as_batched(x), _as_batched(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionMismatchError(
            f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}"
        )
    return x, x_hat


def mse(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """Mean squared difference over all elements, computed in double."""
    x, x_hat = _check_pair(x, x_hat)
    diff = x.double() - x_hat.double()
    return float((diff * diff).mean())


def psnr(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """-10*log10(mse) for [0,1]-range images, capped at 100 dB."""
    m = mse(x, x_hat)
    if m <= _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return min(-10.0 * math.log10(m), PSNR_CAP_DB)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords * coords) / (2.0 * sigma * sigma))
    kernel = torch.outer(g, g)
    return (kernel / kernel.sum()).view(1, 1, size, size)


_SSIM_KERNEL = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)


def _to_luma(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] == 1:
        return x.double()
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    w = _LUMA_WEIGHTS
    return (w[0] * r + w[1] * g + w[2] * b).double()


def ssim(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """Single-scale SSIM on the luma channel, valid windows only.

    11x11 Gaussian window (sigma 1.5), standard stabilizers for [0,1]
    range. Computed in double precision; symmetric in its arguments.
    """
    x, x_hat = _check_pair(x, x_hat)
    if x.shape[2] < SSIM_WINDOW or x.shape[3] < SSIM_WINDOW:
        raise DimensionMismatchError(
            f"image {tuple(x.shape[2:])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    a, b = _to_luma(x), _to_luma(x_hat)
    k = _SSIM_KERNEL

    mu_a = F.conv2d(a, k)
    mu_b = F.conv2d(b, k)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = F.conv2d(a * a, k) - mu_aa
    var_b = F.conv2d(b * b, k) - mu_bb
    cov = F.conv2d(a * b, k) - mu_ab

    num = (2.0 * mu_ab + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_aa + mu_bb + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    value = float((num / den).mean())
    # numerical guard: covariance cancellation can overshoot by ~1e-14
    return min(max(value, -1.0), 1.0)


# -- perceptual distance -------------------------------------------------

KIND_SEEDED_RANDOM = "seeded-random-multiscale"
KIND_EXTERNAL = "external-pretrained"

_DEFAULT_LAYERS = ((32, 2), (64, 2), (96, 2))


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """Deterministic description of a feature extractor.

    ``layers`` is a tuple of (channels, downsample factor) pairs applied in
    sequence. The same spec always produces bit-identical features on
    identical input. ``external_name`` selects a registered pretrained
    extractor when kind is external.
    """

    kind: str = KIND_SEEDED_RANDOM
    seed: int = 0
    layers: Tuple[Tuple[int, int], ...] = _DEFAULT_LAYERS
    layer_weights: Optional[Tuple[float, ...]] = None
    external_name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (KIND_SEEDED_RANDOM, KIND_EXTERNAL):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if not self.layers:
            raise ValueError("layers must be nonempty")
        for ch, ds in self.layers:
            if ch < 1 or ds < 1:
                raise ValueError(f"invalid layer ({ch}, {ds})")
        if self.layer_weights is not None:
            if len(self.layer_weights) != len(self.layers):
                raise ValueError("layer_weights length must match layers")
            if any(w < 0 for w in self.layer_weights):
                raise ValueError("layer_weights must be nonnegative")
        if self.kind == KIND_EXTERNAL and not self.external_name:
            raise ValueError("external-pretrained spec requires external_name")

    def weights(self) -> Tuple[float, ...]:
        if self.layer_weights is not None:
            return self.layer_weights
        n = len(self.layers)
        return tuple(1.0 / n for _ in range(n))

    def to_json(self) -> dict:
        out = {
            "kind": self.kind,
            "seed": self.seed,
            "layers": [list(l) for l in self.layers],
        }
        if self.layer_weights is not None:
            out["layer_weights"] = list(self.layer_weights)
        if self.external_name is not None:
            out["external_name"] = self.external_name
        return out

    @classmethod
    def from_json(cls, data: dict) -> "FeatureExtractorSpec":
        kwargs = dict(data)
        if "layers" in kwargs:
            kwargs["layers"] = tuple(tuple(l) for l in kwargs["layers"])
        if kwargs.get("layer_weights") is not None:
            kwargs["layer_weights"] = tuple(kwargs["layer_weights"])
        return cls(**kwargs)


class RandomMultiscaleFeatures(nn.Module):
    """Stack of seeded random convolutions; returns one feature map per layer."""

    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        gen = torch.Generator().manual_seed(spec.seed)
        convs = []
        in_ch = 3
        for out_ch, stride in spec.layers:
            conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
            std = 1.0 / math.sqrt(in_ch * 9)
            conv.weight.data.normal_(0.0, std, generator=gen)
            conv.weight.requires_grad_(False)
            convs.append(conv)
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


_EXTERNAL_REGISTRY: Dict[str, Callable[[FeatureExtractorSpec], nn.Module]] = {}
_EXTRACTOR_CACHE: Dict[FeatureExtractorSpec, nn.Module] = {}


def register_feature_extractor(
    name: str, factory: Callable[[FeatureExtractorSpec], nn.Module]
) -> None:
    """Register a pretrained extractor factory under ``name``.

    The module it builds must return a list of feature maps from forward().
    """
    _EXTERNAL_REGISTRY[name] = factory


def build_feature_extractor(spec: FeatureExtractorSpec) -> nn.Module:
    cached = _EXTRACTOR_CACHE.get(spec)
    if cached is not None:
        return cached
    if spec.kind == KIND_SEEDED_RANDOM:
        module = RandomMultiscaleFeatures(spec)
    else:
        factory = _EXTERNAL_REGISTRY.get(spec.external_name or "")
        if factory is None:
            raise ValueError(
                f"no feature extractor registered under {spec.external_name!r}"
            )
        module = factory(spec)
    module.eval()
    _EXTRACTOR_CACHE[spec] = module
    return module


def _unit_normalize(f: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt((f * f).sum(dim=1, keepdim=True))
    return f / (norm + 1e-10)


def perceptual_distance_t(
    x: torch.Tensor, x_hat: torch.Tensor, spec: FeatureExtractorSpec
) -> torch.Tensor:
    """Differentiable perceptual distance (tensor-valued, used as a loss)."""
    x, x_hat = _check_pair(x, x_hat)
    extractor = build_feature_extractor(spec)
    feats_a = extractor(x)
    feats_b = extractor(x_hat)
    weights = spec.weights()
    total = x.new_zeros(())
    for w, fa, fb in zip(weights, feats_a, feats_b):
        na, nb = _unit_normalize(fa), _unit_normalize(fb)
        sq = ((na - nb) ** 2).sum(dim=1)
        total = total + w * sq.mean()
    return total


def perceptual_distance(
    x: torch.Tensor, x_hat: torch.Tensor, spec: FeatureExtractorSpec
) -> float:
    with torch.no_grad():
        return float(perceptual_distance_t(x, x_hat, spec))


# -- per-image report ----------------------------------------------------

METRIC_CSV_HEADER = "image_id,bpp,psnr,ssim,perceptual"


@dataclass(frozen=True)
class MetricReport:
    """Per-image measurements bundled for reporting."""

    image_id: str
    bpp: float
    psnr: float
    ssim: float
    perceptual: float

    def __post_init__(self):
        if self.perceptual < 0:
            raise ValueError("perceptual distance must be >= 0")
        if not math.isfinite(self.psnr):
            raise ValueError("psnr must be finite (identical images use the cap)")

    def csv_row(self) -> str:
        """Fixed-precision rendering: bpp/psnr/perceptual 2dp, ssim 4dp."""
        return (
            f"{self.image_id},{self.bpp:.2f},{self.psnr:.2f},"
            f"{self.ssim:.4f},{self.perceptual:.2f}"
        )

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "bpp": self.bpp,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "perceptual": self.perceptual,
        }


def evaluate_image(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    bpp: float,
    spec: FeatureExtractorSpec,
    image_id: str = "img",
) -> MetricReport:
    """Bundle PSNR/SSIM/perceptual for one (original, reconstruction) pair."""
    return MetricReport(
        image_id=image_id,
        bpp=float(bpp),
        psnr=psnr(x, x_hat),
        ssim=ssim(x, x_hat),
        perceptual=perceptual_distance(x, x_hat, spec),
    )
