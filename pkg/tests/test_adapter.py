"""Action-adapter tests: loss oracles, gradient check, seeded sampling."""

import math

import numpy as np
import pytest
import torch

from decodyn.adapter import AdapterDenoiser, adapter_loss, sample_actions
from decodyn.config import AdapterConfig
from decodyn.schedules import make_schedule

CODE_DIM = 6
FUSED_DIM = 10
TEXT_DIM = 5
CHUNK = 4


def toy_model(**overrides) -> AdapterDenoiser:
    cfg = AdapterConfig(chunk_len=CHUNK, layers=2, width=16, heads=2, schedule_steps=10, **overrides)
    return AdapterDenoiser(cfg, CODE_DIM, FUSED_DIM, TEXT_DIM, seed=19)


def toy_schedule():
    return make_schedule("linear", 10, 1e-4, 0.02)


def toy_batch(b=2, seed=0):
    g = np.random.default_rng(seed)
    code = torch.from_numpy(g.normal(size=(b, CODE_DIM)))
    fused = torch.from_numpy(g.normal(size=(b, 7, FUSED_DIM)))
    text = torch.from_numpy(g.normal(size=(b, TEXT_DIM)))
    chunk = torch.from_numpy(g.uniform(-1, 1, size=(b, CHUNK, 3)))
    return code, fused, text, chunk


def warmed_model(seed=17, **overrides) -> AdapterDenoiser:
    model = toy_model(**overrides)
    g = np.random.default_rng(seed)
    with torch.no_grad():
        for p in model.parameters():
            p += torch.from_numpy(0.1 * g.normal(size=tuple(p.shape)))
    return model


class _EchoNoise:
    def __init__(self, eps):
        self.eps = eps

    def __call__(self, chunk_noised, s, code_flat, fused_pooled, text):
        return self.eps


class TestAdapterLoss:
    def test_fresh_model_scores_exact_noise_energy(self):
        model = toy_model()
        sch = toy_schedule()
        code, fused, text, chunk = toy_batch()
        eps = torch.from_numpy(np.random.default_rng(3).normal(size=tuple(chunk.shape)))
        loss = adapter_loss(model, sch, code, fused, text, chunk, s=np.array([2, 9]), eps=eps)
        assert loss.item() == (eps**2).sum(dim=(1, 2)).mean().item()

    def test_fresh_model_expected_loss_is_chunk_dimensionality(self):
        model = toy_model()
        sch = toy_schedule()
        b = 4096
        g = np.random.default_rng(7)
        code = torch.from_numpy(g.normal(size=(b, CODE_DIM)))
        fused = torch.from_numpy(g.normal(size=(b, 7, FUSED_DIM)))
        text = torch.from_numpy(g.normal(size=(b, TEXT_DIM)))
        chunk = torch.from_numpy(g.uniform(-1, 1, size=(b, CHUNK, 3)))
        loss = adapter_loss(model, sch, code, fused, text, chunk, g=np.random.default_rng(8))
        dim = CHUNK * 3
        se = math.sqrt(2.0 * dim / b)
        assert abs(loss.item() - dim) < 3 * se

    def test_perfect_noise_prediction_scores_zero(self):
        sch = toy_schedule()
        code, fused, text, chunk = toy_batch()
        eps = torch.from_numpy(np.random.default_rng(5).normal(size=tuple(chunk.shape)))
        loss = adapter_loss(_EchoNoise(eps), sch, code, fused, text, chunk, s=np.array([1, 10]), eps=eps)
        assert loss.item() == 0.0

    def test_gradients_flow_into_conditioning_inputs(self):
        # End-to-end coupling depends on this: the inverse model upstream
        # of the code receives gradient through the adapter loss.
        model = warmed_model()
        sch = toy_schedule()
        code, fused, text, chunk = toy_batch()
        code = code.requires_grad_(True)
        fused = fused.requires_grad_(True)
        loss = adapter_loss(model, sch, code, fused, text, chunk, g=np.random.default_rng(0))
        loss.backward()
        assert code.grad is not None and code.grad.abs().sum() > 0
        assert fused.grad is not None and fused.grad.abs().sum() > 0

    def test_fused_gradient_blocked_when_flag_off(self):
        model = warmed_model(condition_on_fused=False)
        sch = toy_schedule()
        code, fused, text, chunk = toy_batch()
        fused = fused.requires_grad_(True)
        loss = adapter_loss(model, sch, code, fused, text, chunk, g=np.random.default_rng(0))
        grad = torch.autograd.grad(loss, fused, allow_unused=True)[0]
        assert grad is None or grad.abs().max().item() == 0.0

    def test_wrong_chunk_shape_rejected(self):
        model = toy_model()
        sch = toy_schedule()
        code, fused, text, chunk = toy_batch()
        with pytest.raises(ValueError):
            adapter_loss(model, sch, code, fused, text, chunk[:, :2], g=np.random.default_rng(0))

    def test_finite_difference_gradients(self):
        model = warmed_model()
        sch = toy_schedule()
        code, fused, text, chunk = toy_batch(seed=9)
        s = np.array([4, 8])
        eps = torch.from_numpy(np.random.default_rng(10).normal(size=tuple(chunk.shape)))

        def loss_value():
            return adapter_loss(model, sch, code, fused, text, chunk, s=s, eps=eps)

        loss = loss_value()
        model.zero_grad()
        loss.backward()
        rng = np.random.default_rng(23)
        checked = 0
        for name, p in model.named_parameters():
            flat = p.detach().reshape(-1)
            gflat = p.grad.reshape(-1)
            for idx in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                idx = int(idx)
                h = 1e-5 * (1.0 + abs(float(flat[idx])))
                with torch.no_grad():
                    orig = float(flat[idx])
                    p.reshape(-1)[idx] = orig + h
                    up = loss_value().item()
                    p.reshape(-1)[idx] = orig - h
                    down = loss_value().item()
                    p.reshape(-1)[idx] = orig
                fd = (up - down) / (2 * h)
                auto = float(gflat[idx])
                # Sub-1e-8 disagreement is central-difference cancellation
                # noise, relevant only where the true gradient is ~0.
                err = abs(fd - auto)
                assert err < max(1e-8, 1e-4 * max(abs(fd), abs(auto))), (
                    f"{name}[{idx}]: fd={fd} auto={auto}"
                )
                checked += 1
        assert checked >= 20


class TestSampling:
    def test_deterministic_for_fixed_seed(self):
        model = warmed_model()
        sch = toy_schedule()
        code, fused, text, _ = toy_batch(b=1)
        a = sample_actions(model, sch, code, fused, text, steps=4, seed=3)
        b = sample_actions(model, sch, code, fused, text, steps=4, seed=3)
        assert np.array_equal(a, b)

    def test_seed_changes_output(self):
        model = warmed_model()
        sch = toy_schedule()
        code, fused, text, _ = toy_batch(b=1)
        a = sample_actions(model, sch, code, fused, text, steps=4, seed=3)
        b = sample_actions(model, sch, code, fused, text, steps=4, seed=4)
        assert not np.array_equal(a, b)

    def test_output_shape_and_bounds(self):
        model = warmed_model()
        sch = toy_schedule()
        for seed in range(8):
            code, fused, text, _ = toy_batch(b=1, seed=seed)
            out = sample_actions(model, sch, 3 * code, fused, text, steps=2, seed=seed)
            assert out.shape == (CHUNK, 3)
            assert out.min() >= -1.0
            assert out.max() <= 1.0

    def test_default_step_count_comes_from_config(self):
        model = warmed_model()
        sch = toy_schedule()
        code, fused, text, _ = toy_batch(b=1)
        by_default = sample_actions(model, sch, code, fused, text, seed=5)
        explicit = sample_actions(model, sch, code, fused, text, steps=model.cfg.sample_steps, seed=5)
        assert np.array_equal(by_default, explicit)

    def test_code_conditioning_changes_sampled_chunk(self):
        model = warmed_model()
        sch = toy_schedule()
        code, fused, text, _ = toy_batch(b=1)
        a = sample_actions(model, sch, code, fused, text, steps=4, seed=3)
        b = sample_actions(model, sch, code + 1.0, fused, text, steps=4, seed=3)
        assert not np.array_equal(a, b)

    def test_fused_ignored_when_flag_off(self):
        model = warmed_model(condition_on_fused=False)
        sch = toy_schedule()
        code, fused, text, _ = toy_batch(b=1)
        a = sample_actions(model, sch, code, fused, text, steps=4, seed=3)
        b = sample_actions(model, sch, code, fused * -7.0, text, steps=4, seed=3)
        assert np.array_equal(a, b)
