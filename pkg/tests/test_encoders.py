"""Frozen encoder contracts: determinism, shapes, metric behavior."""

import dataclasses

import numpy as np
import pytest
from scipy import stats

from decodyn.config import ExperimentConfig
from decodyn.encoders import FrozenEncoders, nearest_frame_index
from decodyn.rng import stream
from decodyn.synthworld import Action, Instruction, init_env, render, step


@pytest.fixture(scope="module")
def cfg():
    return ExperimentConfig()


@pytest.fixture(scope="module")
def enc(cfg):
    return FrozenEncoders(cfg.encoders, cfg.env.image_size)


class TestLatentEncoder:
    def test_zero_image_gives_bias(self, cfg, enc):
        z = enc.encode_latent(np.zeros((32, 32, 3)))
        assert z.shape == enc.latent_shape
        assert np.allclose(z, enc.b_latent[:, None, None], atol=0, rtol=0)

    def test_deterministic(self, cfg, enc):
        img = render(init_env(cfg.env, 0), cfg.env)
        assert np.array_equal(enc.encode_latent(img), enc.encode_latent(img))

    def test_shape_mismatch_rejected(self, enc):
        with pytest.raises(ValueError):
            enc.encode_latent(np.zeros((16, 16, 3)))
        with pytest.raises(ValueError):
            enc.encode_latent(np.zeros((32, 32)))

    def test_color_pairs_distinct(self, cfg, enc):
        # 1000 scene pairs differing only in one object's color id must map
        # to distinct latents.
        n_distinct = 0
        for i in range(1000):
            s = init_env(cfg.env, 70_000 + i)
            obj = s.objects[0]
            alt_color = (obj.color_id + 1) % cfg.env.num_colors
            s2 = dataclasses.replace(
                s, objects=(dataclasses.replace(obj, color_id=alt_color),) + s.objects[1:]
            )
            za = enc.encode_latent(render(s, cfg.env))
            zb = enc.encode_latent(render(s2, cfg.env))
            n_distinct += not np.array_equal(za, zb)
        assert n_distinct == 1000

    def test_batch_matches_single(self, cfg, enc):
        imgs = np.stack([render(init_env(cfg.env, i), cfg.env) for i in range(4)])
        zb = enc.encode_latent(imgs)
        for i in range(4):
            assert np.array_equal(zb[i], enc.encode_latent(imgs[i]))


class TestFeatureEncoder:
    def test_unit_norms(self, cfg, enc):
        f = enc.encode_features(render(init_env(cfg.env, 1), cfg.env))
        assert f.shape == (cfg.encoders.num_patches, cfg.encoders.feature_dim)
        assert np.allclose(np.linalg.norm(f, axis=-1), 1.0, atol=1e-6)

    def test_identical_patches_identical_tokens(self, cfg, enc):
        # Patches with identical content produce identical tokens; swapping
        # two such patches leaves the feature map unchanged.
        img = np.zeros((32, 32, 3))
        img[2:6, 2:6] = 0.7
        img[2 + 8 : 6 + 8, 2:6] = 0.7
        f = enc.encode_features(img)
        assert np.array_equal(f[0], f[4])

    def test_distance_tracks_displacement(self, cfg, enc):
        # Straight-line motions at varied speed and frame gap: feature
        # distance must rank with effector displacement (Spearman > 0.8).
        g = stream(99, "encoder-spearman")
        dists, disps = [], []
        for pair in range(500):
            s = init_env(cfg.env, 20_000 + pair)
            ang = g.uniform(0, 2 * np.pi)
            speed = g.uniform(0.1, 1.0)
            n = int(g.integers(1, 9))
            delta = speed * np.array([np.cos(ang), np.sin(ang)])
            f0 = enc.encode_features(render(s, cfg.env))
            cur = s
            for _ in range(n):
                cur = step(cur, Action(delta, 0.0), cfg.env)
            f1 = enc.encode_features(render(cur, cfg.env))
            dists.append(float(np.linalg.norm(f1 - f0)))
            disps.append(float(np.linalg.norm(cur.effector - s.effector)))
        rho = stats.spearmanr(disps, dists).statistic
        assert rho > 0.8

    def test_shape_mismatch_rejected(self, enc):
        with pytest.raises(ValueError):
            enc.encode_features(np.zeros((8, 8, 3)))


class TestInstructionEncoder:
    def test_deterministic(self, enc):
        a = enc.encode_instruction(Instruction(1, 2, 3))
        b = enc.encode_instruction(Instruction(1, 2, 3))
        assert np.array_equal(a, b)

    def test_color_difference_isolated_to_color_block(self, enc):
        a = enc.encode_instruction(Instruction(0, 1, 2))
        b = enc.encode_instruction(Instruction(0, 3, 2))
        task_d, color_d = 16, 8
        assert np.array_equal(a[:task_d], b[:task_d])
        assert not np.array_equal(a[task_d : task_d + color_d], b[task_d : task_d + color_d])
        assert np.array_equal(a[task_d + color_d :], b[task_d + color_d :])

    def test_full_vocabulary_pairwise_distinct(self, enc):
        vecs = []
        for t in range(4):
            for c in range(4):
                for r in range(4):
                    vecs.append(enc.encode_instruction(Instruction(t, c, r)))
        vecs = np.stack(vecs)
        d = np.linalg.norm(vecs[:, None, :] - vecs[None, :, :], axis=-1)
        off_diag = d[~np.eye(len(vecs), dtype=bool)]
        assert off_diag.min() > 0

    def test_unknown_ids_rejected(self, enc):
        with pytest.raises(ValueError):
            enc.encode_instruction(Instruction(0, 9, 0))
        with pytest.raises(ValueError):
            enc.encode_instruction(Instruction(0, 0, 9))


class TestFrozenness:
    def test_checksum_stable_across_instances(self, cfg):
        a = FrozenEncoders(cfg.encoders, cfg.env.image_size)
        b = FrozenEncoders(cfg.encoders, cfg.env.image_size)
        assert a.checksum() == b.checksum()

    def test_checksum_depends_on_seed(self, cfg):
        alt = dataclasses.replace(cfg.encoders, weights_seed=999)
        a = FrozenEncoders(cfg.encoders, cfg.env.image_size)
        b = FrozenEncoders(alt, cfg.env.image_size)
        assert a.checksum() != b.checksum()


class TestNearestFrame:
    def test_exact_match_and_tie_rule(self, cfg, enc):
        imgs = np.stack([render(init_env(cfg.env, i), cfg.env) for i in range(6)])
        lat = enc.encode_latent(imgs)
        assert nearest_frame_index(lat[3], lat) == 3
        stacked = np.concatenate([lat[:1], lat])
        assert nearest_frame_index(lat[0], stacked) == 0
