"""Training contracts: losses, freezing, fine-tuning, sweep rate-fixing."""

import pytest
import torch

from helpers import random_patches, tiny_codec
from rdplab.bitstream import frozen_hash
from rdplab.codec import params_hash
from rdplab.errors import ConfigError, FrozenParameterError, TrainingDivergedError
from rdplab.metrics import FeatureExtractorSpec
from rdplab.synthetic import generate_images
from rdplab.training import (
    CheckpointMeta,
    FreezeMask,
    SweepConfig,
    TrainConfig,
    finetune_pd,
    freeze,
    pd_loss,
    rd_loss,
    sweep_gamma,
    train_rd,
)

SPEC = FeatureExtractorSpec(seed=101, layers=((8, 2), (16, 2)))


def _rd_cfg(**kw):
    base = dict(
        lambda_=0.01, learning_rate=1e-3, iterations=40, batch_size=4,
        patch_size=32, seed=11,
    )
    base.update(kw)
    return TrainConfig(**base)


def _pd_cfg(**kw):
    base = dict(
        gamma=1.0, learning_rate=1e-4, iterations=20, batch_size=4,
        patch_size=32, seed=12, train_metric_spec=SPEC,
    )
    base.update(kw)
    return TrainConfig(**base)


# -- loss arithmetic -----------------------------------------------------------


def test_rd_loss_examples():
    assert rd_loss(0.01, 2.0, 0.1) == pytest.approx(0.21)
    assert rd_loss(0.37, 5.0, 0.0) == 0.37
    assert rd_loss(0.0, 1.0, 0.05) == 0.05


def test_pd_loss_examples():
    assert pd_loss(0.42, 0.3, 0.0) == 0.3  # gamma=0 leaves only the perceptual term
    assert pd_loss(0.01, 0.3, 1e-2) == pytest.approx(0.3001)
    assert pd_loss(0.5, 0.0, 1.0) == 0.5


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lambda_=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(iterations=-1)
    cfg = TrainConfig(lambda_=0.5, train_metric_spec=SPEC)
    assert TrainConfig.from_json(cfg.to_json()) == cfg


# -- freeze mask ------------------------------------------------------------------


def test_freeze_mask_partition():
    mask = FreezeMask.rate_fixing()
    assert mask.trainable == {"synthesis"}
    assert mask.frozen == {
        "analysis", "hyper_analysis", "hyper_synthesis", "factorized_prior",
    }
    with pytest.raises(ValueError):
        FreezeMask(frozenset({"analysis"}), frozenset({"synthesis"}))
    with pytest.raises(ValueError):
        FreezeMask(
            frozenset({"analysis", "synthesis", "hyper_analysis",
                       "hyper_synthesis", "factorized_prior"}),
            frozenset({"synthesis"}),
        )


def test_freeze_idempotent_hash(codec_tiny):
    _, _, h1 = freeze(codec_tiny)
    _, _, h2 = freeze(codec_tiny)
    assert h1 == h2


def test_frozen_hash_tracks_frozen_params_only(codec_tiny):
    _, _, h = freeze(codec_tiny)
    with torch.no_grad():
        codec_tiny.synthesis[0].weight.add_(1.0)
    assert frozen_hash(codec_tiny) == h
    with torch.no_grad():
        codec_tiny.hyper_synthesis[0].weight.add_(1.0)
    assert frozen_hash(codec_tiny) != h


# -- train_rd -----------------------------------------------------------------------


def test_train_rd_zero_iterations_noop(codec_tiny):
    h = params_hash(codec_tiny)
    _, log = train_rd(codec_tiny, random_patches(1), _rd_cfg(iterations=0))
    assert params_hash(codec_tiny) == h
    assert log == []


def test_train_rd_improves_loss():
    codec = tiny_codec(seed=3)
    codec, log = train_rd(codec, random_patches(1), _rd_cfg(iterations=200))
    assert log[-1].loss < log[0].loss


def test_train_rd_deterministic():
    runs = []
    for _ in range(2):
        codec = tiny_codec(seed=3)
        codec, _ = train_rd(codec, random_patches(1), _rd_cfg())
        runs.append(params_hash(codec))
    assert runs[0] == runs[1]


def test_train_rd_requires_positive_lambda(codec_tiny):
    with pytest.raises(ConfigError):
        train_rd(codec_tiny, random_patches(1), _rd_cfg(lambda_=0.0))


def test_train_rd_patch_divisibility(codec_tiny):
    with pytest.raises(ConfigError):
        train_rd(codec_tiny, random_patches(1, 20), _rd_cfg(patch_size=20))


def test_train_rd_divergence_aborts(codec_tiny):
    with pytest.raises(TrainingDivergedError):
        train_rd(
            codec_tiny, random_patches(1),
            _rd_cfg(learning_rate=1e12, iterations=30),
        )


# -- finetune_pd -----------------------------------------------------------------------


def _frozen_tiny():
    codec = tiny_codec(seed=3)
    codec, _ = train_rd(codec, random_patches(1), _rd_cfg())
    return freeze(codec)


def test_finetune_keeps_frozen_bits():
    codec, mask, fhash = _frozen_tiny()
    codec, log = finetune_pd(codec, mask, random_patches(2), _pd_cfg())
    assert frozen_hash(codec) == fhash
    assert len(log) >= 1


def test_finetune_zero_iterations_noop():
    codec, mask, _ = _frozen_tiny()
    h = params_hash(codec)
    _, log = finetune_pd(codec, mask, random_patches(2), _pd_cfg(iterations=0))
    assert params_hash(codec) == h and log == []


def test_finetune_requires_rate_fixing_mask():
    codec, _, _ = _frozen_tiny()
    bad = FreezeMask(
        frozenset({"analysis", "hyper_analysis", "hyper_synthesis"}),
        frozenset({"synthesis", "factorized_prior"}),
    )
    with pytest.raises(ValueError):
        finetune_pd(codec, bad, random_patches(2), _pd_cfg())


def test_finetune_requires_metric_spec():
    codec, mask, _ = _frozen_tiny()
    with pytest.raises(ConfigError):
        finetune_pd(codec, mask, random_patches(2), _pd_cfg(train_metric_spec=None))


def test_finetune_optimizer_ignores_frozen():
    codec, mask, _ = _frozen_tiny()
    # plant a sentinel value in a frozen parameter; the optimizer must not
    # see or revert it, and no gradient may accumulate on it
    sentinel = float(torch.tensor(0.123456, dtype=torch.float32))
    with torch.no_grad():
        codec.analysis[0].weight[0, 0, 0, 0] = sentinel
    codec, _ = finetune_pd(codec, mask, random_patches(2), _pd_cfg(iterations=5))
    assert float(codec.analysis[0].weight[0, 0, 0, 0]) == sentinel
    for name in mask.frozen:
        assert all(p.grad is None for p in codec.subnet(name).parameters())


def test_finetune_moves_only_synthesis():
    codec, mask, _ = _frozen_tiny()
    before = {
        name: [p.detach().clone() for p in codec.subnet(name).parameters()]
        for name in ("analysis", "synthesis", "hyper_synthesis")
    }
    codec, _ = finetune_pd(codec, mask, random_patches(2), _pd_cfg())
    for name in ("analysis", "hyper_synthesis"):
        for p0, p1 in zip(before[name], codec.subnet(name).parameters()):
            assert torch.equal(p0, p1)
    moved = any(
        not torch.equal(p0, p1)
        for p0, p1 in zip(before["synthesis"], codec.subnet("synthesis").parameters())
    )
    assert moved


def test_finetune_deterministic():
    hashes = []
    for _ in range(2):
        codec, mask, _ = _frozen_tiny()
        codec, _ = finetune_pd(codec, mask, random_patches(2), _pd_cfg())
        hashes.append(params_hash(codec))
    assert hashes[0] == hashes[1]


# -- sweep -------------------------------------------------------------------


def test_sweep_config_validation():
    pd = _pd_cfg()
    with pytest.raises(ConfigError):
        SweepConfig(gammas=(), finetune=pd, eval_metric_spec=SPEC, eval_images=())
    with pytest.raises(ConfigError):
        SweepConfig(gammas=(1.0, 1.0), finetune=pd, eval_metric_spec=SPEC, eval_images=())


def test_checkpoint_meta_validation():
    with pytest.raises(ValueError):
        CheckpointMeta(params_hash="x", stage="pd-finetuned")
    with pytest.raises(ValueError):
        CheckpointMeta(params_hash="x", stage="weird")
    meta = CheckpointMeta(params_hash="x", stage="pd-finetuned", gamma=0.5, parent_hash="y")
    assert CheckpointMeta.from_json(meta.to_json()) == meta


@pytest.fixture(scope="module")
def eval_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sweep_eval")
    generate_images(d, 3, size=32, seed=5)
    return d


def test_sweep_gamma_structure(eval_dir):
    codec, mask, fhash = _frozen_tiny()
    sweep = SweepConfig(
        gammas=(10.0, 0.0),
        finetune=_pd_cfg(iterations=8),
        eval_metric_spec=FeatureExtractorSpec(seed=202, layers=((8, 2), (16, 2))),
        eval_images=tuple(sorted(eval_dir.glob("*.png"))),
    )
    result = sweep_gamma(codec, mask, sweep, lambda: random_patches(4))
    points = result.curve.points
    assert len(points) == 3
    assert points[0].gamma is None  # baseline first
    assert [p.gamma for p in points[1:]] == [10.0, 0.0]
    assert all(p.frozen_hash == fhash for p in points)
    assert len(result.bitstream_digests) == 3
    # baseline and every fine-tuned model share each image's digest: recompute
    from rdplab.bitstream import encode_image
    import hashlib
    from rdplab.imageio import load_image

    for path in sweep.eval_images:
        x = load_image(path).unsqueeze(0)
        digest = hashlib.sha256(encode_image(x, codec)).hexdigest()
        assert result.bitstream_digests[path.name] == digest


def test_sweep_rejects_foreign_model(eval_dir):
    codec, mask, _ = _frozen_tiny()
    sweep = SweepConfig(
        gammas=(1.0,),
        finetune=_pd_cfg(iterations=2),
        eval_metric_spec=SPEC,
        eval_images=tuple(sorted(eval_dir.glob("*.png"))),
    )
    impostor = tiny_codec(seed=77)  # different frozen weights

    with pytest.raises(FrozenParameterError):
        sweep_gamma(
            codec, mask, sweep, lambda: random_patches(4),
            model_source=lambda gamma: impostor,
        )
