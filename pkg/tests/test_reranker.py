"""Transformer forward/backward contracts: encodings, token assembly,
attention extraction, finite-difference gradients, training determinism."""

import math

import numpy as np
import pytest

from epiguide.errors import CacheMismatch, MissingGeometry, NonFiniteActivation, ShapeMismatch
from epiguide.geometry import FundamentalMatrix, epipolar_line, random_rank2_matrix, relative_fundamental
from epiguide.guides import GridSpec, rasterize_guide
from epiguide.losses import bce_with_logit
from epiguide.reranker import (
    CrossAttentionMaps,
    EpeInput,
    ModelConfig,
    RerankerParams,
    TokenSequence,
    TrainingPair,
    TrainSchedule,
    assemble_tokens,
    attention_concentration,
    backward,
    epe_vectors_for_pixels,
    forward,
    frequency_encode,
    init_params,
    load_checkpoint,
    match_logit,
    pair_loss,
    save_checkpoint,
    train,
)

from geomtools import random_orbit_pair

TINY = ModelConfig(s=3, m=8, heads=2, layers=2, mlp_width=16, num_freqs=2, seed=3)


def random_grids(config, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    shape = (config.n_cells, config.m)
    return scale * rng.standard_normal(shape), scale * rng.standard_normal(shape)


def random_guide(config, seed=0, width=48, height=48):
    grid = GridSpec(s=config.s, width=width, height=height)
    f = random_rank2_matrix(seed)
    return rasterize_guide(f, grid, grid)


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            ModelConfig(m=30, heads=4)
        with pytest.raises(ValueError):
            ModelConfig(m=8, num_freqs=4)
        with pytest.raises(ValueError):
            ModelConfig(layers=0)
        with pytest.raises(ValueError):
            ModelConfig(loss_variant="both")
        with pytest.raises(ValueError):
            ModelConfig(lambda_epi=-0.5)

    def test_roundtrip_json(self):
        config = ModelConfig(s=5, m=16, heads=4, lambda_epi=0.25, loss_variant="max_epi")
        assert ModelConfig.from_json(config.as_json()) == config


class TestFrequencyEncode:
    def test_origin_alternates_zero_one(self):
        enc = frequency_encode((0.0, 0.0), num_freqs=3, m=16)
        expected = np.zeros(16)
        expected[1:12:2] = 1.0
        assert np.array_equal(enc, expected)

    def test_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            enc = frequency_encode(rng.random(2), num_freqs=4, m=32)
            assert np.all(enc >= -1.0) and np.all(enc <= 1.0)

    def test_grid_cells_distinct(self):
        s = 7
        encs = np.stack(
            [
                frequency_encode(((c + 0.5) / s, (r + 0.5) / s), num_freqs=4, m=32)
                for r in range(s)
                for c in range(s)
            ]
        )
        diffs = np.linalg.norm(encs[:, None, :] - encs[None, :, :], axis=2)
        diffs[np.arange(49), np.arange(49)] = np.inf
        assert diffs.min() > 1e-3


class TestAssembly:
    def test_sequence_length(self):
        config = ModelConfig(s=7, m=32, heads=2, layers=1, num_freqs=4, seed=0)
        params = init_params(config)
        g1, g2 = random_grids(config)
        seq = assemble_tokens(g1, g2, params)
        assert seq.tokens.shape == (100, 32)

    def test_additive_structure(self):
        params = init_params(TINY)
        g1, g2 = random_grids(TINY, seed=1)
        seq = assemble_tokens(g1, g2, params)
        n = TINY.n_cells
        psi = np.stack(
            [
                frequency_encode(((c + 0.5) / 3, (r + 0.5) / 3), TINY.num_freqs, TINY.m)
                for r in range(3)
                for c in range(3)
            ]
        )
        assert np.array_equal(seq.tokens[0], params["cls"])
        assert np.array_equal(seq.tokens[n + 1], params["sep"])
        assert np.allclose(seq.tokens[1 : n + 1], g1 + psi + params["beta1"], atol=0)
        assert np.allclose(seq.tokens[n + 2 :], g2 + psi + params["beta2"], atol=0)

    def test_swap_permutes_blocks_and_betas(self):
        params = init_params(TINY)
        g1, g2 = random_grids(TINY, seed=2)
        n = TINY.n_cells
        fwd = assemble_tokens(g1, g2, params)
        swp = assemble_tokens(g2, g1, params)
        assert np.allclose(
            swp.tokens[1 : n + 1] - params["beta1"],
            fwd.tokens[n + 2 :] - params["beta2"],
            rtol=0.0,
            atol=1e-12,
        )
        assert np.allclose(
            swp.tokens[n + 2 :] - params["beta2"],
            fwd.tokens[1 : n + 1] - params["beta1"],
            rtol=0.0,
            atol=1e-12,
        )

    def test_missing_geometry(self):
        config = ModelConfig(s=3, m=8, heads=2, layers=1, num_freqs=2, epe_enabled=True)
        params = init_params(config)
        g1, g2 = random_grids(config)
        with pytest.raises(MissingGeometry):
            assemble_tokens(g1, g2, params)

    def test_shape_mismatch(self):
        params = init_params(TINY)
        g1, g2 = random_grids(TINY)
        with pytest.raises(ShapeMismatch):
            assemble_tokens(g1[:5], g2, params)


class TestEpe:
    def test_line_mates_equal_pencil(self):
        config = ModelConfig(s=3, m=16, heads=2, layers=1, num_freqs=3, epe_enabled=True)
        f = random_rank2_matrix(8)
        epe = EpeInput(f=f)
        x1 = np.array([40.0, 60.0])
        line = epipolar_line(f, x1)
        p0 = -line.c * np.array([line.a, line.b])
        d = np.array([-line.b, line.a])
        pix2 = np.stack([p0 + 10.0 * d, p0 - 35.0 * d, p0 + 200.0 * d])
        enc1, enc2 = epe_vectors_for_pixels(epe, config, x1[None, :], pix2)
        for row in enc2:
            assert np.linalg.norm(row - enc2[0]) < 1e-6
        assert np.linalg.norm(enc1[0] - enc2[0]) < 1e-6

    def test_line_mates_equal_views(self):
        config = ModelConfig(s=3, m=16, heads=2, layers=1, num_freqs=3, epe_enabled=True)
        v1, v2 = random_orbit_pair(np.random.default_rng(4))
        f = relative_fundamental(v1, v2)
        epe = EpeInput(f=f, view1=v1, view2=v2, pair_seed=11)
        x1 = np.array([100.0, 120.0])
        line = epipolar_line(f, x1)
        p0 = -line.c * np.array([line.a, line.b])
        d = np.array([-line.b, line.a])
        pix2 = np.stack([p0 + 5.0 * d, p0 + 90.0 * d])
        enc1, enc2 = epe_vectors_for_pixels(epe, config, x1[None, :], pix2)
        assert np.linalg.norm(enc2[0] - enc2[1]) < 1e-6
        assert np.linalg.norm(enc1[0] - enc2[0]) < 1e-6

    def test_reference_pixel_deterministic_in_pair_seed(self):
        config = ModelConfig(s=3, m=16, heads=2, layers=1, num_freqs=3, epe_enabled=True)
        v1, v2 = random_orbit_pair(np.random.default_rng(5))
        f = relative_fundamental(v1, v2)
        pix = np.array([[10.0, 20.0], [200.0, 40.0]])
        a = epe_vectors_for_pixels(EpeInput(f, v1, v2, pair_seed=3), config, pix, pix)
        b = epe_vectors_for_pixels(EpeInput(f, v1, v2, pair_seed=3), config, pix, pix)
        c = epe_vectors_for_pixels(EpeInput(f, v1, v2, pair_seed=4), config, pix, pix)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert not np.array_equal(a[0], c[0])


class TestForward:
    def test_zero_weights_logit_is_bias(self):
        params = init_params(TINY)
        for name, t in params.tensors.items():
            key = name.rsplit(".", 1)[-1]
            if key not in ("ln1_g", "ln2_g"):
                params.tensors[name] = np.zeros_like(t)
        params.tensors["match_b"] = np.asarray(1.75)
        g1, g2 = random_grids(TINY, seed=3)
        logit, maps, _ = forward(params, assemble_tokens(g1, g2, params))
        assert logit == 1.75
        assert np.all(maps.a12 == 0.0) and np.all(maps.a21 == 0.0)

    def test_softmax_rows_sum_to_one(self):
        params = init_params(TINY)
        g1, g2 = random_grids(TINY, seed=4, scale=2.0)
        _, _, cache = forward(params, assemble_tokens(g1, g2, params))
        for layer in cache.layers:
            sums = layer["att"].sum(axis=2)
            assert np.max(np.abs(sums - 1.0)) < 1e-9

    def test_image2_permutation_permutes_maps(self):
        params = init_params(TINY)
        g1, g2 = random_grids(TINY, seed=5)
        n = TINY.n_cells
        base = assemble_tokens(g1, g2, params)
        perm = np.random.default_rng(0).permutation(n)
        tokens = base.tokens.copy()
        tokens[n + 2 :] = tokens[n + 2 :][perm]
        _, maps_p, _ = forward(params, TokenSequence(tokens=tokens, s=TINY.s))
        _, maps_0, _ = forward(params, base)
        assert np.allclose(maps_p.a12, maps_0.a12[:, :, perm], atol=1e-12)
        assert np.allclose(maps_p.a21, maps_0.a21[:, perm, :], atol=1e-12)

    def test_maps_reshape_to_grid_of_patches(self):
        config = ModelConfig(s=7, m=16, heads=2, layers=1, num_freqs=2, seed=1)
        params = init_params(config)
        g1, g2 = random_grids(config, seed=6)
        _, maps, _ = forward(params, assemble_tokens(g1, g2, params))
        assert maps.a12.shape == (2, 49, 49)
        tiled = maps.a12[0].reshape(7, 7, 7, 7)
        assert np.array_equal(tiled[2, 3], maps.a12[0][2 * 7 + 3].reshape(7, 7))

    def test_non_finite_raises(self):
        params = init_params(TINY)
        params.tensors["layer0.w1"] = np.full_like(params.tensors["layer0.w1"], 1e200)
        params.tensors["layer0.w2"] = np.full_like(params.tensors["layer0.w2"], 1e200)
        g1, g2 = random_grids(TINY, seed=7)
        with pytest.raises(NonFiniteActivation):
            forward(params, assemble_tokens(g1, g2, params))


class TestBackward:
    def test_cache_mismatch(self):
        params = init_params(TINY)
        g1, g2 = random_grids(TINY, seed=8)
        _, _, cache = forward(params, assemble_tokens(g1, g2, params))
        with pytest.raises(CacheMismatch):
            backward(params.copy(), cache, d_logit=1.0)

    def test_zero_weight_gradients_confined_to_match_head(self):
        params = init_params(TINY)
        for name, t in params.tensors.items():
            key = name.rsplit(".", 1)[-1]
            if key not in ("ln1_g", "ln2_g"):
                params.tensors[name] = np.zeros_like(t)
        g1, g2 = random_grids(TINY, seed=9)
        result = pair_loss(params, assemble_tokens(g1, g2, params), label=1)
        assert float(np.abs(result.grads["match_b"])) > 0.0
        for name, g in result.grads.items():
            if name not in ("match_b", "match_w"):
                assert np.all(g == 0.0), name
        # CLS starts at the zero embedding, so even match_w sees a zero grad
        assert np.all(result.grads["match_w"] == 0.0)

    def _fd_run(self, variant, lam, seed):
        config = ModelConfig(
            s=3,
            m=8,
            heads=2,
            layers=2,
            mlp_width=16,
            num_freqs=2,
            lambda_epi=lam,
            loss_variant=variant,
            seed=seed,
        )
        params = init_params(config)
        g1, g2 = random_grids(config, seed=seed)
        guide = random_guide(config, seed=seed)

        def value(p):
            return pair_loss(p, assemble_tokens(g1, g2, p), 1, guide).total

        base = pair_loss(params, assemble_tokens(g1, g2, params), 1, guide)
        worst = 0.0
        h = 1e-5
        for name in params.tensors:
            grad = np.atleast_1d(result_grad := base.grads[name])
            flat_param = np.atleast_1d(params.tensors[name])
            for idx in range(flat_param.size):
                probe = params.copy()
                target = np.atleast_1d(probe.tensors[name])
                target.flat[idx] += h
                up = value(probe)
                target.flat[idx] -= 2 * h
                down = value(probe)
                fd = (up - down) / (2 * h)
                an = float(grad.flat[idx])
                rel = abs(fd - an) / max(1e-5, abs(fd), abs(an))
                worst = max(worst, rel)
        return worst

    def test_finite_difference_epi(self):
        assert self._fd_run("epi", 0.7, seed=11) < 1e-4

    def test_finite_difference_match_only(self):
        assert self._fd_run("none", 0.0, seed=12) < 1e-4

    def test_lambda_component_exactly_linear(self):
        from epiguide.reranker import _attention_loss

        def decomposed(lam):
            config = ModelConfig(
                s=3, m=8, heads=2, layers=2, mlp_width=16, num_freqs=2,
                lambda_epi=lam, loss_variant="epi", seed=13,
            )
            params = init_params(config)
            g1, g2 = random_grids(config, seed=13)
            guide = random_guide(config, seed=13)
            seq = assemble_tokens(g1, g2, params)
            logit, maps, cache = forward(params, seq)
            _, d_logit = bce_with_logit(logit, 1)
            match = backward(params, cache, d_logit=d_logit)
            _, d_maps = _attention_loss(maps, guide, "epi")
            attn = backward(params, cache, d_logit=0.0, d_maps=d_maps)
            got = pair_loss(params, seq, 1, guide).grads
            return match, attn, got

        m1, a1, got1 = decomposed(1.0)
        m2, a2, got2 = decomposed(2.0)
        for key in got1:
            assert np.array_equal(got1[key], m1[key] + 1.0 * a1[key])
            assert np.array_equal(got2[key], m2[key] + 2.0 * a2[key])
            assert np.array_equal(2.0 * (1.0 * a1[key]), 2.0 * a1[key])


def tiny_dataset(config, n_pairs=6, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        g1 = rng.standard_normal((config.n_cells, config.m))
        label = i % 2
        if label:
            g2 = g1 + 0.1 * rng.standard_normal(g1.shape)
            guide = random_guide(config, seed=100 + i)
        else:
            g2 = rng.standard_normal(g1.shape)
            guide = None
        pairs.append(TrainingPair(grid1=g1, grid2=g2, label=label, guide=guide))
    return pairs


class TestTraining:
    def test_same_seed_bit_identical(self):
        dataset = tiny_dataset(TINY)
        schedule = TrainSchedule(phase1_epochs=1, phase2_epochs=1, learning_rate=1e-3)
        p1, log1 = train(dataset, TINY, schedule)
        p2, log2 = train(dataset, TINY, schedule)
        for key in p1.tensors:
            assert np.array_equal(p1.tensors[key], p2.tensors[key])
        assert log1 == log2

    def test_variant_none_equals_lambda_zero(self):
        dataset = tiny_dataset(TINY)
        schedule = TrainSchedule(phase1_epochs=1, phase2_epochs=2, learning_rate=1e-3)
        none_cfg = ModelConfig(
            s=3, m=8, heads=2, layers=2, mlp_width=16, num_freqs=2,
            loss_variant="none", lambda_epi=1.0, seed=3,
        )
        zero_cfg = ModelConfig(
            s=3, m=8, heads=2, layers=2, mlp_width=16, num_freqs=2,
            loss_variant="epi", lambda_epi=0.0, seed=3,
        )
        pn, _ = train(dataset, none_cfg, schedule)
        pz, _ = train(dataset, zero_cfg, schedule)
        for key in pn.tensors:
            assert np.array_equal(pn.tensors[key], pz.tensors[key])

    def test_match_bce_improves(self):
        dataset = tiny_dataset(TINY, n_pairs=10, seed=5)
        schedule = TrainSchedule(phase1_epochs=4, phase2_epochs=0, learning_rate=3e-3)
        _, log = train(dataset, TINY, schedule)
        assert log[-1]["match_bce"] < log[0]["match_bce"]

    def test_divergence_reports_context(self):
        dataset = tiny_dataset(TINY)
        schedule = TrainSchedule(phase1_epochs=1, phase2_epochs=0, learning_rate=1e150)
        with pytest.raises(NonFiniteActivation) as err:
            train(dataset, TINY, schedule)
        assert "epoch" in str(err.value) and "step" in str(err.value)

    def test_concentration_measurable(self):
        dataset = tiny_dataset(TINY)
        params = init_params(TINY)
        value = attention_concentration(params, [p for p in dataset if p.label == 1])
        assert np.isfinite(value) and value > 0.0

    def test_checkpoint_roundtrip(self, tmp_path):
        params = init_params(TINY)
        path = tmp_path / "model.epga"
        save_checkpoint(path, params)
        back = load_checkpoint(path)
        assert back.config == TINY
        for key, t in params.tensors.items():
            assert np.array_equal(back.tensors[key], t.astype(np.float32).astype(np.float64))

    def test_match_logit_smoke(self):
        params = init_params(TINY)
        g1, g2 = random_grids(TINY, seed=20)
        value = match_logit(params, g1, g2)
        assert np.isfinite(value)
