"""Inverse-model tests: quantization oracles, mask contracts, bottleneck.

quantize is checked against a brute-force nearest-neighbor scan, the
straight-through estimator against the identity-gradient contract, and the
encoder mask by perturbing future tokens and asserting frame-t outputs do
not move. The finite-difference check uses a surrogate loss that freezes
the quantization assignment at the base point, which is exactly what the
straight-through estimator linearizes.
"""

import types

import numpy as np
import pytest
import torch

from decodyn.config import GidmConfig
from decodyn.gidm import (
    Gidm,
    LatentActionCode,
    MlpIdm,
    codebook_utilization,
    gidm_loss,
    quantize,
    vq_loss,
)

FEATURE_DIM = 16
TEXT_DIM = 6
NUM_PATCHES = 4
SLOTS = 6


def toy_cfg(**overrides) -> GidmConfig:
    base = dict(
        num_queries=2,
        latent_dim=8,
        codebook_size=8,
        layers=2,
        width=32,
        heads=2,
        decoder_layers=1,
        dead_code_steps=200,
    )
    base.update(overrides)
    return GidmConfig(**base)


def toy_model(seed=13, **overrides) -> Gidm:
    return Gidm(toy_cfg(**overrides), FEATURE_DIM, TEXT_DIM, SLOTS, NUM_PATCHES, seed=seed)


def toy_batch(b=3, seed=0, n_future=NUM_PATCHES):
    g = np.random.default_rng(seed)
    e_t = torch.from_numpy(g.normal(size=(b, NUM_PATCHES, FEATURE_DIM)))
    e_f = torch.from_numpy(g.normal(size=(b, n_future, FEATURE_DIM)))
    text = torch.from_numpy(g.normal(size=(b, TEXT_DIM)))
    return e_t, e_f, text


class TestQuantize:
    def test_brute_force_oracle_equivalence(self):
        # 10^4 random vectors against an exhaustive python-loop scan.
        g = np.random.default_rng(7)
        codebook = torch.from_numpy(g.normal(size=(17, 5)))
        cont = torch.from_numpy(g.normal(size=(250, 40, 5)))
        code = quantize(codebook, cont)
        cb = codebook.numpy()
        flat = cont.numpy().reshape(-1, 5)
        idx_flat = code.indices.reshape(-1)
        assert flat.shape[0] == 10_000
        for i in range(flat.shape[0]):
            dists = [float(((flat[i] - cb[k]) ** 2).sum()) for k in range(17)]
            best = dists.index(min(dists))
            assert idx_flat[i] == best
        assert np.array_equal(code.quantized.numpy().reshape(-1, 5), cb[idx_flat])

    def test_documented_examples(self):
        codebook = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
        near_zero = quantize(codebook, torch.tensor([[[0.2, 0.1]]], dtype=torch.float64))
        assert near_zero.indices.tolist() == [[0]]
        assert near_zero.quantized[0, 0].tolist() == [0.0, 0.0]

        tie = quantize(codebook, torch.tensor([[[0.5, 0.5]]], dtype=torch.float64))
        assert tie.indices.tolist() == [[0]]

        exact = quantize(codebook, torch.tensor([[[1.0, 1.0]]], dtype=torch.float64))
        assert exact.indices.tolist() == [[1]]
        assert vq_loss(exact, beta_commit=0.25).item() == 0.0

    def test_straight_through_gradient_identity(self):
        g = np.random.default_rng(3)
        codebook = torch.from_numpy(g.normal(size=(6, 4)))
        cont = torch.from_numpy(g.normal(size=(2, 3, 4))).requires_grad_(True)
        code = quantize(codebook, cont)
        (code.straight_through**2).sum().backward()
        # d/dx of sum((x + sg(q - x))^2) is 2 * value-at-quantized, exactly.
        assert torch.equal(cont.grad, 2.0 * code.straight_through.detach())

    def test_no_gradient_leaks_into_codebook_through_st(self):
        g = np.random.default_rng(4)
        codebook = torch.from_numpy(g.normal(size=(6, 4))).requires_grad_(True)
        cont = torch.from_numpy(g.normal(size=(2, 3, 4))).requires_grad_(True)
        code = quantize(codebook, cont)
        grads = torch.autograd.grad(
            (code.straight_through**2).sum(), [cont, codebook], allow_unused=True
        )
        assert grads[0] is not None
        assert grads[1] is None

    def test_vq_loss_gradient_routing(self):
        g = np.random.default_rng(5)
        codebook = torch.from_numpy(g.normal(size=(6, 4))).requires_grad_(True)
        cont = torch.from_numpy(g.normal(size=(2, 3, 4))).requires_grad_(True)
        code = quantize(codebook, cont)
        loss = vq_loss(code, beta_commit=0.25)
        loss.backward()
        # Codebook term moves the codebook, commitment moves the encoder.
        assert codebook.grad is not None and codebook.grad.abs().sum() > 0
        n = cont.numel()
        expected_cont = 0.25 * 2.0 * (cont.detach() - code.quantized.detach()) / n
        assert torch.allclose(cont.grad, expected_cont, rtol=0, atol=1e-15)

    def test_quantized_rows_are_codebook_rows(self):
        g = np.random.default_rng(6)
        codebook = torch.from_numpy(g.normal(size=(9, 3)))
        code = quantize(codebook, torch.from_numpy(g.normal(size=(4, 2, 3))))
        for b in range(4):
            for q in range(2):
                k = code.indices[b, q]
                assert torch.equal(code.quantized[b, q], codebook[k])


class TestUtilization:
    def test_all_equal(self):
        assert codebook_utilization(np.zeros((5, 4), dtype=int), 32) == 1 / 32

    def test_all_present(self):
        assert codebook_utilization(np.arange(32), 32) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            codebook_utilization(np.zeros((0,), dtype=int), 32)


class TestEncoderMask:
    def test_future_perturbation_never_moves_frame_t_outputs(self):
        model = toy_model()
        e_t, e_f, text = toy_batch()
        _, hidden_a = model.encode_with_tokens(e_t, e_f, text)
        _, hidden_b = model.encode_with_tokens(e_t, torch.zeros_like(e_f), text)
        _, hidden_c = model.encode_with_tokens(e_t, e_f + 3.0, text)
        assert (hidden_a - hidden_b).abs().max().item() <= 1e-7
        assert (hidden_a - hidden_c).abs().max().item() <= 1e-7

    def test_future_perturbation_does_move_query_outputs(self):
        model = toy_model()
        e_t, e_f, text = toy_batch()
        cont_a = model.encode_latent_action(e_t, e_f, text)
        cont_b = model.encode_latent_action(e_t, torch.zeros_like(e_f), text)
        assert not torch.allclose(cont_a, cont_b)

    def test_no_autograd_path_from_future_to_frame_t(self):
        model = toy_model()
        e_t, e_f, text = toy_batch()
        e_f = e_f.requires_grad_(True)
        _, hidden = model.encode_with_tokens(e_t, e_f, text)
        grad = torch.autograd.grad(hidden.sum(), e_f, allow_unused=True)[0]
        assert grad is None or grad.abs().max().item() == 0.0

    def test_identity_transition_deterministic(self):
        model = toy_model()
        e_t, _, text = toy_batch()
        a = model.encode_latent_action(e_t, e_t, text)
        b = model.encode_latent_action(e_t, e_t, text)
        assert torch.equal(a, b)

    def test_token_permutation_invariance_without_positional(self):
        model = toy_model()
        e_t, e_f, text = toy_batch()
        perm = torch.from_numpy(np.random.default_rng(1).permutation(e_f.shape[1]))
        a = model.encode_latent_action(e_t, e_f, text, use_positional=False)
        b = model.encode_latent_action(e_t, e_f[:, perm], text, use_positional=False)
        assert (a - b).abs().max().item() < 1e-6

    def test_positional_encodings_break_permutation_invariance(self):
        model = toy_model()
        e_t, e_f, text = toy_batch()
        perm = torch.from_numpy(np.array([1, 0, 3, 2]))
        a = model.encode_latent_action(e_t, e_f, text, use_positional=True)
        b = model.encode_latent_action(e_t, e_f[:, perm], text, use_positional=True)
        assert not torch.allclose(a, b)

    def test_variable_future_length_within_slots(self):
        model = toy_model()
        e_t, _, text = toy_batch()
        e_f6 = torch.from_numpy(np.random.default_rng(2).normal(size=(3, SLOTS, FEATURE_DIM)))
        cont = model.encode_latent_action(e_t, e_f6, text)
        assert cont.shape == (3, 2, 8)
        with pytest.raises(ValueError):
            model.encode_latent_action(
                e_t, torch.zeros(3, SLOTS + 1, FEATURE_DIM, dtype=torch.float64), text
            )

    def test_instruction_flag_off_ignores_text(self):
        model = toy_model(use_instruction=False)
        e_t, e_f, text = toy_batch()
        a = model.encode_latent_action(e_t, e_f, text)
        b = model.encode_latent_action(e_t, e_f, 5.0 + text)
        c = model.encode_latent_action(e_t, e_f, None)
        assert torch.equal(a, b)
        assert torch.equal(a, c)


class TestDecoderBottleneck:
    def test_decoder_has_no_path_to_future_features(self):
        # Fix the code, vary nothing else: the decode result may depend on
        # e_future only through the code, so with a detached code there is
        # no autograd edge back to it.
        model = toy_model()
        e_t, e_f, text = toy_batch()
        e_f = e_f.requires_grad_(True)
        cont = model.encode_latent_action(e_t, e_f, text)
        code = model.discretize(cont)
        frozen = LatentActionCode(
            continuous=code.continuous.detach(),
            quantized=code.quantized.detach(),
            straight_through=code.straight_through.detach(),
            indices=code.indices,
        )
        pred = model.decode_future(e_t, frozen)
        grad = torch.autograd.grad(pred.sum(), e_f, allow_unused=True)[0]
        assert grad is None

    def test_same_code_same_prediction(self):
        model = toy_model()
        e_t, e_f, text = toy_batch()
        code = model.discretize(model.encode_latent_action(e_t, e_f, text))
        a = model.decode_future(e_t, code)
        b = model.decode_future(e_t, code)
        assert torch.equal(a, b)

    def test_different_futures_same_index_nearly_same_decode(self):
        # Two continuous vectors snapping to the same codebook row give the
        # same quantized value; straight-through adds only rounding noise.
        model = toy_model()
        e_t, e_f, text = toy_batch()
        cont1 = model.encode_latent_action(e_t, e_f, text)
        cont2 = cont1 + 1e-9
        c1 = model.discretize(cont1)
        c2 = model.discretize(cont2)
        assert np.array_equal(c1.indices, c2.indices)
        p1 = model.decode_future(e_t, c1)
        p2 = model.decode_future(e_t, c2)
        assert (p1 - p2).abs().max().item() < 1e-6


class TestGidmLoss:
    def test_perfect_decoder_scores_zero_prediction_loss(self):
        model = toy_model()
        e_t, e_f, text = toy_batch()
        oracle = types.SimpleNamespace(
            encode_latent_action=model.encode_latent_action,
            discretize=model.discretize,
            bottleneck_loss=model.bottleneck_loss,
            decode_future=lambda et, code: e_f,
        )
        _, parts, _ = gidm_loss(oracle, e_t, e_f, text)
        assert parts["loss_pred"] == 0.0

    def test_continuous_on_codebook_entry_scores_zero_vq(self):
        model = toy_model()
        e_t, e_f, text = toy_batch()
        rows = model.codebook.detach()[torch.tensor([[0, 1], [2, 3], [4, 5]])]
        oracle = types.SimpleNamespace(
            encode_latent_action=lambda *a, **k: rows,
            discretize=model.discretize,
            bottleneck_loss=model.bottleneck_loss,
            decode_future=model.decode_future,
        )
        _, parts, code = gidm_loss(oracle, e_t, e_f, text)
        assert parts["loss_vq"] == 0.0
        assert torch.equal(code.quantized, rows)

    def test_total_is_sum_of_parts(self):
        model = toy_model()
        e_t, e_f, text = toy_batch()
        total, parts, _ = gidm_loss(model, e_t, e_f, text)
        assert abs(total.item() - (parts["loss_pred"] + parts["loss_vq"])) < 1e-12

    def test_gradients_reach_encoder_and_codebook(self):
        model = toy_model()
        e_t, e_f, text = toy_batch()
        total, _, _ = gidm_loss(model, e_t, e_f, text)
        total.backward()
        assert model.token_embed.weight.grad.abs().sum() > 0
        assert model.codebook.grad.abs().sum() > 0
        assert model.dec_head.weight.grad.abs().sum() > 0

    def test_finite_difference_on_upstream_parameters(self):
        # The straight-through path makes the real loss piecewise; central
        # differences are taken on a surrogate that freezes the assignment
        # (offset and stop-gradient buffers pinned at the base point),
        # which is the function the estimator actually differentiates.
        model = toy_model(seed=29)
        e_t, e_f, text = toy_batch(seed=31)
        beta = model.cfg.beta_commit

        total, _, code = gidm_loss(model, e_t, e_f, text)
        model.zero_grad()
        total.backward()
        delta0 = (code.quantized - code.continuous).detach()
        quant0 = code.quantized.detach()

        def surrogate():
            cont = model.encode_latent_action(e_t, e_f, text)
            frozen = types.SimpleNamespace(straight_through=cont + delta0)
            pred = model.decode_future(e_t, frozen)
            l_pred = ((pred - e_f) ** 2).mean()
            commit = beta * ((cont - quant0) ** 2).mean()
            return (l_pred + commit).item()

        upstream = {
            name: p
            for name, p in model.named_parameters()
            if name.split(".")[0]
            in ("token_embed", "text_embed", "queries", "pos_patch", "pos_future_extra",
                "group_instr", "group_t0", "group_t1", "blocks", "norm", "out_proj")
        }
        assert len(upstream) > 10
        rng = np.random.default_rng(37)
        checked = 0
        for name, p in upstream.items():
            flat = p.detach().reshape(-1)
            gflat = p.grad.reshape(-1)
            for idx in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                idx = int(idx)
                h = 1e-5 * (1.0 + abs(float(flat[idx])))
                with torch.no_grad():
                    orig = float(flat[idx])
                    p.reshape(-1)[idx] = orig + h
                    up = surrogate()
                    p.reshape(-1)[idx] = orig - h
                    down = surrogate()
                    p.reshape(-1)[idx] = orig
                fd = (up - down) / (2 * h)
                auto = float(gflat[idx])
                err = abs(fd - auto)
                assert err < max(1e-8, 1e-3 * max(abs(fd), abs(auto))), (
                    f"{name}[{idx}]: fd={fd} auto={auto}"
                )
                checked += 1
        assert checked >= 20

    def test_identity_transitions_trainable_to_small_error(self):
        model = toy_model()
        g = np.random.default_rng(99)
        e_t = torch.from_numpy(0.5 * g.normal(size=(8, NUM_PATCHES, FEATURE_DIM)))
        text = torch.from_numpy(g.normal(size=(8, TEXT_DIM)))
        opt = torch.optim.Adam(model.parameters(), lr=3e-3)
        for _ in range(300):
            opt.zero_grad()
            total, parts, _ = gidm_loss(model, e_t, e_t, text)
            total.backward()
            opt.step()
        assert parts["loss_pred"] <= 1e-3


class TestDiscretizeModes:
    def test_continuous_mode_is_identity(self):
        model = toy_model(quantize_mode="continuous")
        cont = torch.from_numpy(np.random.default_rng(0).normal(size=(2, 2, 8)))
        code = model.discretize(cont)
        assert torch.equal(code.quantized, cont)
        assert torch.equal(code.straight_through, cont)
        assert model.bottleneck_loss(code).item() == 0.0

    def test_binning_snaps_to_known_centers(self):
        model = toy_model(quantize_mode="binning", codebook_size=4)
        # 4 levels over [-2, 2]: centers -1.5, -0.5, 0.5, 1.5.
        cont = torch.tensor([[[0.3, -0.3, 1.2, -1.9, 0.6, -0.6, 1.8, -1.2]]], dtype=torch.float64)
        code = model.discretize(cont)
        assert code.quantized[0, 0].tolist() == [0.5, -0.5, 1.5, -1.5, 0.5, -0.5, 1.5, -1.5]

    def test_binning_straight_through_and_clamp(self):
        model = toy_model(quantize_mode="binning")
        cont = torch.from_numpy(np.random.default_rng(1).normal(size=(2, 2, 8))).requires_grad_(True)
        code = model.discretize(cont)
        assert code.quantized.abs().max().item() <= 2.0
        code.straight_through.sum().backward()
        assert torch.equal(cont.grad, torch.ones_like(cont))

    def test_gaussian_mixture_soft_assignment(self):
        model = toy_model(quantize_mode="gaussian_mixture")
        cont = torch.from_numpy(np.random.default_rng(2).normal(size=(2, 2, 8)))
        code = model.discretize(cont)
        lo = model.codebook.detach().min(dim=0).values
        hi = model.codebook.detach().max(dim=0).values
        assert bool((code.quantized >= lo - 1e-9).all())
        assert bool((code.quantized <= hi + 1e-9).all())
        # A vector sitting exactly on a far-isolated row collapses onto it.
        with torch.no_grad():
            model.codebook[0] = 50.0
        on_row = model.codebook.detach()[0][None, None].clone()
        code2 = model.discretize(on_row)
        assert (code2.quantized - on_row).abs().max().item() < 1e-6
        assert code2.indices.tolist() == [[0]]

    def test_unknown_mode_rejected(self):
        model = toy_model()
        with pytest.raises(ValueError):
            model.discretize(torch.zeros(1, 2, 8, dtype=torch.float64), mode="kmeans")


class TestDeadCodes:
    def test_reseeds_only_stale_entries(self):
        model = toy_model()
        before = model.codebook.detach().clone()
        unused = np.zeros(8, dtype=int)
        unused[2] = 200
        unused[5] = 999
        batch = torch.from_numpy(np.random.default_rng(11).normal(size=(3, 2, 8)))
        dead = model.reseed_dead_codes(unused, batch, np.random.default_rng(12))
        assert dead == [2, 5]
        after = model.codebook.detach()
        flat = batch.reshape(-1, 8)
        for k in range(8):
            if k in dead:
                assert not torch.equal(after[k], before[k])
                assert any(torch.equal(after[k], flat[i]) for i in range(flat.shape[0]))
            else:
                assert torch.equal(after[k], before[k])

    def test_no_stale_entries_no_change(self):
        model = toy_model()
        before = model.codebook.detach().clone()
        dead = model.reseed_dead_codes(
            np.zeros(8, dtype=int),
            torch.zeros(2, 2, 8, dtype=torch.float64),
            np.random.default_rng(0),
        )
        assert dead == []
        assert torch.equal(model.codebook.detach(), before)


class TestMlpBaseline:
    def make(self, **overrides):
        return MlpIdm(toy_cfg(**overrides), FEATURE_DIM, TEXT_DIM, SLOTS, NUM_PATCHES, seed=41)

    def test_shapes_and_loss(self):
        model = self.make()
        e_t, e_f, text = toy_batch()
        cont = model.encode_latent_action(e_t, e_f, text)
        assert cont.shape == (3, 2, 8)
        total, parts, code = gidm_loss(model, e_t, e_f, text)
        total.backward()
        assert code.indices.shape == (3, 2)
        assert parts["loss_pred"] > 0

    def test_shares_discretize_behavior(self):
        model = self.make()
        cont = torch.from_numpy(np.random.default_rng(3).normal(size=(2, 2, 8)))
        code = model.discretize(cont)
        oracle = quantize(model.codebook, cont)
        assert np.array_equal(code.indices, oracle.indices)

    def test_pooling_ignores_token_order(self):
        model = self.make()
        e_t, e_f, text = toy_batch()
        perm = torch.from_numpy(np.array([2, 0, 3, 1]))
        a = model.encode_latent_action(e_t, e_f, text)
        b = model.encode_latent_action(e_t[:, perm], e_f, text)
        assert (a - b).abs().max().item() < 1e-9
