import math

import pytest
import torch

from cuelight import io
from cuelight.curves import apply_curves, build_enhancer
from cuelight.data import extract_quadrants
from cuelight.errors import CheckFailure, ConfigError, InvalidArgument, TrainingDiverged
from cuelight.guidance import build_description, guidance_loss
from cuelight.losses import ZeroRefConfig, total_zero_reference_loss
from cuelight.prior import PriorConfig, init_prompt_pair, prior_loss
from cuelight.synthetic import low_light_set
from cuelight.train import (
    TERMS,
    TrainConfig,
    batch_tensor,
    gradient_check,
    load_checkpoint,
    total_training_loss,
    train_enhancer,
)

from conftest import make_dataset

# a few float32 ulps at |theta| ~ 1
FLOAT32_SLACK = 5e-7
ZERO_LAMBDAS = {"lambda_prior": 0.0, "lambda_content": 0.0, "lambda_context": 0.0}


def images(n=8, size=32, seed=0):
    return low_light_set(n, seed=seed, h=size, w=size)


def patches(n_images=2, size=64, patch=32):
    return [p for ai in make_dataset(n=n_images, size=size, per_image=4) for p in extract_quadrants(ai, patch)]


def small_cfg(**kwargs):
    base = dict(batch_size=4, epochs=2, **ZERO_LAMBDAS)
    base.update(kwargs)
    return TrainConfig(**base)


def params_of(net):
    return [p.detach().clone() for p in net.parameters()]


class TestGradientCheck:
    def test_quadratic(self):
        a = torch.randn(10, 10, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        x = torch.randn(10, dtype=torch.float64)
        assert gradient_check(lambda v: v @ a @ v + (v**2).sum(), x) < 1e-8

    def test_detects_wrong_gradient(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, v):
                ctx.save_for_backward(v)
                return (v**2).sum()

            @staticmethod
            def backward(ctx, g):
                (v,) = ctx.saved_tensors
                return g * 3 * v

        assert gradient_check(Wrong.apply, torch.rand(8, dtype=torch.float64) + 0.5) > 0.1

    def test_non_finite(self):
        with pytest.raises(CheckFailure):
            gradient_check(lambda v: (v / 0.0).sum(), torch.ones(3, dtype=torch.float64))

    def test_non_finite_probe(self):
        with pytest.raises(CheckFailure):
            gradient_check(lambda v: torch.log(v).sum(), torch.full((3,), 5e-4, dtype=torch.float64))

    def test_coordinate_count(self):
        calls = []

        def fn(v):
            calls.append(1)
            return (v**2).sum()

        gradient_check(fn, torch.rand(1000, dtype=torch.float64))
        assert len(calls) == 1 + 2 * 64


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.epochs, cfg.learning_rate, cfg.weight_decay, cfg.grad_clip_norm) == (8, 200, 1e-4, 1e-4, 0.1)
        assert (cfg.lambda_prior, cfg.lambda_content, cfg.lambda_context) == (1.0, 1.0, 1.0)

    @pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"grad_clip_norm": -1}, {"batch_size": 0},
                                        {"lambda_prior": -0.5}, {"epochs": -1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_zr_from_dict(self):
        assert TrainConfig(zr={"w_tv": 50.0}).zr.w_tv == 50.0


class TestTotalLoss:
    def test_ablation_identity(self):
        net = build_enhancer(1)
        with torch.no_grad():
            net.conv7.weight.normal_(0, 0.01)
        batch = images(4)
        total, parts = total_training_loss(batch, net, small_cfg())
        x = batch_tensor(batch)
        params = net(x)
        expected = total_zero_reference_loss(apply_curves(x, params), x, params)
        assert total.item() == expected.item()
        assert parts["prior"] == parts["content"] == parts["context"] == 0.0
        assert parts["total"] == parts["zero_reference"]
        assert set(parts) == set(TERMS)

    def test_all_weights_zero(self):
        zr = ZeroRefConfig(w_exposure=0, w_spatial=0, w_color=0, w_tv=0)
        total, _ = total_training_loss(images(4), build_enhancer(), small_cfg(zr=zr))
        assert total.item() == 0.0

    def test_composition(self, backend, double):
        net = build_enhancer(2).double()
        with torch.no_grad():
            net.conv7.weight.normal_(0, 0.01)
        batch = patches()[:4]
        prompts = init_prompt_pair(PriorConfig(seed=3, init_std=1.0), dtype=torch.float64)
        heads = {"content": backend.default_head().double(), "context": backend.default_head().double()}
        cfg = small_cfg(lambda_prior=0.5, lambda_content=2.0, lambda_context=0.25)
        total, parts = total_training_loss(batch, net, cfg, backend, prompts, heads)

        x = batch_tensor(batch, torch.float64)
        params = net(x)
        enhanced = apply_curves(x, params)
        zr = total_zero_reference_loss(enhanced, x, params).item()
        prior = prior_loss(enhanced, prompts, backend).item()
        content, context = guidance_loss(
            enhanced,
            [build_description(p.content, "content") for p in batch],
            [build_description(p.context, "context") for p in batch],
            backend,
            heads,
        )
        expected = zr + 0.5 * prior + 2.0 * content.item() + 0.25 * context.item()
        assert abs(total.item() - expected) < 1e-9
        assert parts["prior"] == pytest.approx(prior, abs=1e-12)

    def test_missing_prompts(self, backend):
        with pytest.raises(ConfigError):
            total_training_loss(images(4), build_enhancer(), small_cfg(lambda_prior=1.0), backend)
        with pytest.raises(ConfigError):
            total_training_loss(images(4), build_enhancer(), small_cfg(lambda_content=1.0))

    def test_empty_batch(self):
        with pytest.raises(InvalidArgument):
            total_training_loss([], build_enhancer(), small_cfg())


class TestTrainEnhancer:
    def test_zero_epochs(self):
        net = build_enhancer(4)
        before = params_of(net)
        result = train_enhancer(images(8), small_cfg(epochs=0), net=net)
        assert result.trace == []
        assert all(torch.equal(a, b) for a, b in zip(before, result.net.parameters()))

    def test_trace_shape(self):
        result = train_enhancer(images(9), small_cfg(epochs=2))
        assert [r["step"] for r in result.trace] == [1, 2, 3, 4]
        assert [r["epoch"] for r in result.trace] == [1, 1, 2, 2]

    def test_deterministic(self):
        a = train_enhancer(images(8), small_cfg(seed=5)).trace
        b = train_enhancer(images(8), small_cfg(seed=5)).trace
        assert all(abs(x[k] - y[k]) <= 1e-7 for x, y in zip(a, b) for k in TERMS)
        assert a == b

    def test_exposure_improves(self):
        result = train_enhancer(images(8), small_cfg(epochs=10, learning_rate=1e-3))
        assert result.trace[-1]["exposure"] < result.trace[0]["exposure"]

    def test_resume_equals_uninterrupted(self, tmp_path):
        cfg = small_cfg(epochs=3)
        full = train_enhancer(images(8), cfg, checkpoint_dir=tmp_path / "full")
        assert [p.name for p in full.checkpoints] == ["epoch_0001", "epoch_0002", "epoch_0003"]
        resumed = train_enhancer(images(8), cfg, resume=tmp_path / "full" / "epoch_0001")
        assert resumed.trace == full.trace
        for a, b in zip(full.net.parameters(), resumed.net.parameters()):
            assert torch.equal(a, b)

    def test_checkpoint_contents(self, tmp_path):
        result = train_enhancer(images(8), small_cfg(epochs=2, checkpoint_every=2), checkpoint_dir=tmp_path)
        assert [p.name for p in result.checkpoints] == ["epoch_0002"]
        net, opt, epoch, trace = load_checkpoint(tmp_path / "epoch_0002")
        assert epoch == 2 and trace == result.trace
        assert len(opt.state_dict()["state"]) == len(list(net.parameters()))

    def test_max_steps(self):
        assert len(train_enhancer(images(16), small_cfg(epochs=5, max_steps=3)).trace) == 3

    def test_divergence(self, tmp_path):
        net = build_enhancer()
        with torch.no_grad():
            net.conv1.weight.fill_(float("inf"))
        with pytest.raises(TrainingDiverged) as info:
            train_enhancer(images(8), small_cfg(), net=net, checkpoint_dir=tmp_path)
        assert info.value.checkpoint is not None and io.exists(info.value.checkpoint)
        assert (tmp_path / "diverged.json").exists()

    def test_update_bound_per_coordinate(self):
        # AdamW moves each coordinate by at most lr * (wd * |theta| + adam_bound);
        # the first bias-corrected Adam step is exactly sign(g), later ones are bounded by
        # (1 - beta1) / sqrt(1 - beta2)
        cfg = small_cfg(epochs=3, learning_rate=1e-3, weight_decay=0.1)
        net = build_enhancer(6)
        with torch.no_grad():
            net.conv7.weight.normal_(0, 0.01)
        data = images(8)
        before = params_of(net)
        result = train_enhancer(data, small_cfg(epochs=1, max_steps=1, learning_rate=1e-3, weight_decay=0.1), net=net)
        for old, new in zip(before, result.net.parameters()):
            bound = 1e-3 * (0.1 * old.abs() + 1.0) + FLOAT32_SLACK
            assert ((new.detach() - old).abs() <= bound).all()
        adam_bound = 0.1 / math.sqrt(1 - 0.999)
        net = build_enhancer(6)
        prev = params_of(net)
        for step in range(1, 6):
            train_enhancer(data, TrainConfig(**{**cfg.to_dict(), "epochs": 1, "max_steps": 1, "seed": step}), net=net)
            for old, new in zip(prev, net.parameters()):
                assert ((new.detach() - old).abs() <= 1e-3 * (0.1 * old.abs() + adam_bound) + FLOAT32_SLACK).all()
            prev = params_of(net)

    @pytest.mark.filterwarnings("ignore::cuelight.errors.DegenerateBatchWarning")
    def test_heads_frozen_and_prompts_fixed(self, backend):
        heads = {"content": backend.default_head(), "context": backend.default_head()}
        before = {k: params_of(h) for k, h in heads.items()}
        prompts = init_prompt_pair(PriorConfig())
        pos = prompts.positive.clone()
        cfg = small_cfg(epochs=1, lambda_prior=1.0, lambda_content=1.0, lambda_context=1.0)
        train_enhancer(patches(), cfg, backend, prompts, heads)
        for k, h in heads.items():
            assert not h.trainable
            assert all(torch.equal(a, b) for a, b in zip(before[k], h.parameters()))
        assert torch.equal(prompts.positive, pos)

    def test_too_few_items(self):
        with pytest.raises(InvalidArgument):
            train_enhancer(images(3), small_cfg())
