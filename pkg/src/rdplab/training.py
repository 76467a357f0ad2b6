"""Rate-distortion training, exact-rate freezing, and decoder fine-tuning.

The workflow: train the whole codec under distortion + lambda * rate, then
freeze every sub-network the bitstream depends on (analysis, hyper analysis,
hyper synthesis, factorized prior) and fine-tune only the synthesis
transform under gamma * distortion + perceptual. Because the frozen parts
fully determine the coded bytes, every fine-tuned decoder shares one
bitstream per image; the sweep verifies that byte-for-byte.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from . import bitstream as bs
from .analysis import PDCurve, PDPoint, assemble_curve
from .codec import (
    Codec,
    SUBNET_NAMES,
    estimate_bpp,
    likelihood_conditional,
    likelihood_factorized,
    params_hash,
    quantize,
)
from .errors import (
    ConfigError,
    FrozenParameterError,
    RateDriftError,
    TrainingDivergedError,
)
from .imageio import load_image
from .metrics import (
    FeatureExtractorSpec,
    perceptual_distance,
    perceptual_distance_t,
    psnr,
    ssim,
)

RATE_SUBNETS = bs.RATE_SUBNETS
TRAINABLE_SUBNETS = ("synthesis",)


@dataclass(frozen=True)
class TrainConfig:
    """One training stage: rate weight, perception weight, budgets, seed."""

    lambda_: float = 0.0
    gamma: float = 0.0
    learning_rate: float = 1e-4
    iterations: int = 5000
    batch_size: int = 8
    patch_size: int = 64
    seed: int = 0
    train_metric_spec: Optional[FeatureExtractorSpec] = None
    log_every: int = 50

    def __post_init__(self):
        if self.lambda_ < 0 or self.gamma < 0:
            raise ConfigError("lambda and gamma must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1 or self.patch_size < 1:
            raise ConfigError("batch_size and patch_size must be >= 1")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    def to_json(self) -> dict:
        out = {
            "lambda": self.lambda_,
            "gamma": self.gamma,
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "patch_size": self.patch_size,
            "seed": self.seed,
            "log_every": self.log_every,
        }
        if self.train_metric_spec is not None:
            out["train_metric_spec"] = self.train_metric_spec.to_json()
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        kwargs = dict(data)
        if "lambda" in kwargs:
            kwargs["lambda_"] = kwargs.pop("lambda")
        if kwargs.get("train_metric_spec") is not None:
            kwargs["train_metric_spec"] = FeatureExtractorSpec.from_json(
                kwargs["train_metric_spec"]
            )
        return cls(**kwargs)


@dataclass(frozen=True)
class FreezeMask:
    """Partition of the sub-networks into frozen and trainable sets."""

    frozen: frozenset
    trainable: frozenset

    def __post_init__(self):
        all_names = set(SUBNET_NAMES)
        if self.frozen | self.trainable != all_names:
            raise ValueError("mask must cover every sub-network")
        if self.frozen & self.trainable:
            raise ValueError("mask sets must be disjoint")

    @classmethod
    def rate_fixing(cls) -> "FreezeMask":
        return cls(frozen=frozenset(RATE_SUBNETS), trainable=frozenset(TRAINABLE_SUBNETS))

    def is_rate_fixing(self) -> bool:
        return self.frozen == frozenset(RATE_SUBNETS)


@dataclass(frozen=True)
class SweepConfig:
    """Gamma sweep: the weights to try, the fine-tune template, eval setup."""

    gammas: Tuple[float, ...]
    finetune: TrainConfig
    eval_metric_spec: FeatureExtractorSpec
    eval_images: Tuple[Path, ...]

    def __post_init__(self):
        if not self.gammas:
            raise ConfigError("gammas must be nonempty")
        if len(set(self.gammas)) != len(self.gammas):
            raise ConfigError("duplicate gamma values rejected")
        if any(g < 0 for g in self.gammas):
            raise ConfigError("gamma values must be >= 0")


STAGES = ("rd-trained", "frozen-baseline", "pd-finetuned")


@dataclass(frozen=True)
class CheckpointMeta:
    """Sidecar metadata describing where a checkpoint came from."""

    params_hash: str
    stage: str
    gamma: Optional[float] = None
    parent_hash: Optional[str] = None
    config: Optional[TrainConfig] = None
    frozen_hash: Optional[str] = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "pd-finetuned" and (self.gamma is None or not self.parent_hash):
            raise ValueError("pd-finetuned checkpoints need a gamma and a parent_hash")

    def to_json(self) -> dict:
        out = {
            "params_hash": self.params_hash,
            "stage": self.stage,
            "gamma": self.gamma,
            "parent_hash": self.parent_hash,
            "frozen_hash": self.frozen_hash,
        }
        if self.config is not None:
            out["config"] = self.config.to_json()
        return out

    @classmethod
    def from_json(cls, data: dict) -> "CheckpointMeta":
        kwargs = dict(data)
        if kwargs.get("config") is not None:
            kwargs["config"] = TrainConfig.from_json(kwargs["config"])
        return cls(**kwargs)


@dataclass(frozen=True)
class LogRecord:
    iteration: int
    loss: float
    distortion: float
    rate_bpp: Optional[float] = None
    perceptual: Optional[float] = None

    def csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else repr(v)

        return f"{self.iteration},{self.loss!r},{self.distortion!r},{fmt(self.rate_bpp)},{fmt(self.perceptual)}"


LOG_CSV_HEADER = "iteration,loss,distortion,bpp,perceptual"


def rd_loss(d: float, rate_bpp: float, lambda_: float):
    """Distortion plus lambda-weighted rate (the rate carries the weight)."""
    return d + lambda_ * rate_bpp


def pd_loss(d: float, perceptual: float, gamma: float):
    """Gamma-weighted distortion plus perceptual term."""
    return gamma * d + perceptual


def _batches(data: Iterable[torch.Tensor], batch_size: int) -> Iterator[torch.Tensor]:
    buf: List[torch.Tensor] = []
    for patch in data:
        buf.append(patch)
        if len(buf) == batch_size:
            yield torch.stack(buf)
            buf = []
    raise ConfigError("patch stream exhausted before training finished")


def _check_patch_size(codec: Codec, cfg: TrainConfig) -> None:
    div = codec.arch.total_downsampling
    if cfg.patch_size % div:
        raise ConfigError(
            f"patch_size {cfg.patch_size} not divisible by 2^(S+S_h) = {div}"
        )


def train_rd(
    codec: Codec, data: Iterable[torch.Tensor], cfg: TrainConfig
) -> Tuple[Codec, List[LogRecord]]:
    """Gradient descent on rd_loss over all sub-networks.

    The rate term uses the uniform-noise quantization proxy; the distortion
    term feeds the decoder straight-through-rounded latents, i.e. the exact
    grids it will see at coding time. Without that, the frozen baseline
    decoder carries a systematic rounding-adaptation headroom that any later
    fine-tune pockets as a spurious PSNR gain.

    Deterministic given (codec state, patch stream, cfg.seed). Aborts with
    TrainingDivergedError on a non-finite loss.
    """
    _check_patch_size(codec, cfg)
    if cfg.lambda_ <= 0:
        raise ConfigError("train_rd needs lambda > 0")
    log: List[LogRecord] = []
    if cfg.iterations == 0:
        return codec, log

    codec.requires_grad_(True)
    codec.train()
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.learning_rate)
    batches = _batches(data, cfg.batch_size)
    for it in range(cfg.iterations):
        x = next(batches)
        y = codec.run_analysis(x)
        z = codec.run_hyper_analysis(y)
        z_noisy = quantize(z, "train", generator=gen)
        g = codec.run_hyper_synthesis(z_noisy)
        y_noisy = quantize(y, "train", generator=gen)
        p_y = likelihood_conditional(y_noisy, g)
        p_z = likelihood_factorized(z_noisy, codec.factorized_prior)
        residual = y - g.mu
        y_ste = g.mu + residual + (torch.round(residual) - residual).detach()
        x_hat = codec.run_synthesis(y_ste)
        num_pixels = x.shape[0] * x.shape[2] * x.shape[3]
        d = F.mse_loss(x_hat, x)
        rate = estimate_bpp(p_y, num_pixels) + estimate_bpp(p_z, num_pixels)
        loss = rd_loss(d, rate, cfg.lambda_)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log.append(
                LogRecord(it, loss.item(), d.item(), rate_bpp=rate.item())
            )
    codec.eval()
    return codec, log


def freeze(codec: Codec) -> Tuple[Codec, FreezeMask, str]:
    """Fix the rate: freeze every bitstream-determining sub-network.

    Returns the rate-fixing mask and the frozen hash, which is the identity
    of the fixed-rate experiment.
    """
    mask = FreezeMask.rate_fixing()
    for name in mask.frozen:
        sub = codec.subnet(name)
        sub.requires_grad_(False)
        for p in sub.parameters():
            p.grad = None
    for name in mask.trainable:
        codec.subnet(name).requires_grad_(True)
    return codec, mask, bs.frozen_hash(codec)


def finetune_pd(
    codec: Codec,
    mask: FreezeMask,
    data: Iterable[torch.Tensor],
    cfg: TrainConfig,
) -> Tuple[Codec, List[LogRecord]]:
    """Minimize pd_loss updating only the synthesis transform.

    The encoder side runs in eval mode (rounded latents, exactly what the
    coder transports), so the decoder trains on the latents it will see at
    decode time. Optimizer state exists only for synthesis parameters; any
    change to a frozen parameter is a hard failure.
    """
    if not mask.is_rate_fixing():
        raise ValueError("finetune_pd requires the rate-fixing freeze mask")
    if cfg.train_metric_spec is None:
        raise ConfigError("finetune_pd needs cfg.train_metric_spec")
    _check_patch_size(codec, cfg)

    pre_hash = bs.frozen_hash(codec)
    log: List[LogRecord] = []
    if cfg.iterations == 0:
        return codec, log

    for name in mask.frozen:
        codec.subnet(name).requires_grad_(False)
    codec.subnet("synthesis").requires_grad_(True)
    codec.train()
    opt = torch.optim.Adam(codec.subnet("synthesis").parameters(), lr=cfg.learning_rate)
    batches = _batches(data, cfg.batch_size)
    for it in range(cfg.iterations):
        x = next(batches)
        with torch.no_grad():
            latents = codec.encode_latents(x)
        x_hat = codec.run_synthesis(latents.y_hat)
        d = F.mse_loss(x_hat, x)
        lp = perceptual_distance_t(x, x_hat, cfg.train_metric_spec)
        loss = pd_loss(d, lp, cfg.gamma)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log.append(
                LogRecord(it, loss.item(), d.item(), perceptual=lp.item())
            )
    codec.eval()
    if bs.frozen_hash(codec) != pre_hash:
        raise FrozenParameterError("frozen sub-network changed during fine-tuning")
    return codec, log


# -- sweep ----------------------------------------------------------------


@dataclass
class EvalResult:
    """Dataset-mean metrics plus the per-image coded bytes."""

    bpp_actual: float
    psnr: float
    ssim: float
    perceptual: float
    streams: dict


@dataclass
class SweepResult:
    curve: PDCurve
    bitstream_digests: dict
    logs: dict


def load_eval_images(paths: Sequence[Path]) -> List[Tuple[str, torch.Tensor]]:
    images = []
    for p in sorted(paths, key=lambda q: str(q)):
        images.append((Path(p).name, load_image(p).unsqueeze(0)))
    if not images:
        raise ConfigError("no evaluation images")
    return images


def evaluate_codec(
    codec: Codec,
    eval_images: Sequence[Tuple[str, torch.Tensor]],
    eval_spec: FeatureExtractorSpec,
) -> EvalResult:
    """Code and reconstruct every image; report dataset means and streams."""
    bpps, psnrs, ssims, percs = [], [], [], []
    streams = {}
    codec.eval()
    with torch.no_grad():
        for image_id, x in eval_images:
            stream = bs.encode_image(x, codec)
            latents = codec.encode_latents(x)
            x_hat = torch.clamp(codec.run_synthesis(latents.y_hat), 0.0, 1.0)
            streams[image_id] = stream
            bpps.append(bs.actual_bpp(stream, x.shape[2] * x.shape[3]))
            psnrs.append(psnr(x, x_hat))
            ssims.append(ssim(x, x_hat))
            percs.append(perceptual_distance(x, x_hat, eval_spec))
    n = len(eval_images)
    return EvalResult(
        bpp_actual=sum(bpps) / n,
        psnr=sum(psnrs) / n,
        ssim=sum(ssims) / n,
        perceptual=sum(percs) / n,
        streams=streams,
    )


def _digest(stream: bytes) -> str:
    return hashlib.sha256(stream).hexdigest()


def sweep_gamma(
    codec: Codec,
    mask: FreezeMask,
    sweep: SweepConfig,
    make_train_data: Callable[[], Iterable[torch.Tensor]],
    model_source: Optional[Callable[[float], Optional[Codec]]] = None,
    model_sink: Optional[Callable[[float, Codec, List[LogRecord]], None]] = None,
) -> SweepResult:
    """Fine-tune one decoder per gamma, all from the same frozen baseline.

    Every point is evaluated with real coded bitstreams; the sweep aborts if
    any image's bytes differ from the baseline's (the rate would no longer
    be fixed). ``model_source``/``model_sink`` let a harness resume and
    persist per-gamma models.
    """
    if not mask.is_rate_fixing():
        raise ValueError("sweep_gamma requires the rate-fixing freeze mask")
    fhash = bs.frozen_hash(codec)
    eval_images = load_eval_images(sweep.eval_images)

    baseline_eval = evaluate_codec(codec, eval_images, sweep.eval_metric_spec)
    points = [
        PDPoint(
            gamma=None,
            bpp_actual=baseline_eval.bpp_actual,
            psnr=baseline_eval.psnr,
            ssim=baseline_eval.ssim,
            perceptual=baseline_eval.perceptual,
            frozen_hash=fhash,
            checkpoint_hash=params_hash(codec),
        )
    ]
    logs: dict = {}
    base_state = copy.deepcopy(codec.state_dict())

    for gamma in sweep.gammas:
        model = model_source(gamma) if model_source else None
        if model is None:
            model = copy.deepcopy(codec)
            model.load_state_dict(base_state)
            cfg = replace(sweep.finetune, gamma=gamma)
            model, log = finetune_pd(model, mask, make_train_data(), cfg)
            logs[gamma] = log
            if model_sink:
                model_sink(gamma, model, log)
        if bs.frozen_hash(model) != fhash:
            raise FrozenParameterError(
                f"model for gamma={gamma} has a different frozen hash"
            )
        ev = evaluate_codec(model, eval_images, sweep.eval_metric_spec)
        for image_id, stream in ev.streams.items():
            if stream != baseline_eval.streams[image_id]:
                raise RateDriftError(
                    f"bitstream for {image_id} changed at gamma={gamma}"
                )
        points.append(
            PDPoint(
                gamma=gamma,
                bpp_actual=ev.bpp_actual,
                psnr=ev.psnr,
                ssim=ev.ssim,
                perceptual=ev.perceptual,
                frozen_hash=fhash,
                checkpoint_hash=params_hash(model),
            )
        )

    digests = {k: _digest(v) for k, v in baseline_eval.streams.items()}
    return SweepResult(
        curve=assemble_curve(points), bitstream_digests=digests, logs=logs
    )


def write_log_csv(log: Sequence[LogRecord], path: Path) -> None:
    lines = [LOG_CSV_HEADER] + [r.csv_row() for r in log]
    Path(path).write_text("\n".join(lines) + "\n")
