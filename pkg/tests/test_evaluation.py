"""Metric proxies, trace aggregation, sweeps, and rank statistics."""

import numpy as np
import pytest

from strata import attention as attn
from strata.denoiser import DenoiserConfig, init_weights
from strata.evaluation import (
    HIST_BINS,
    LAMBDA_GRID,
    SweepSetup,
    alignment_score,
    class_prototypes,
    color_histograms,
    cond_alignment_score,
    diversity_score,
    guidance_sweep,
    lambda_sweep,
    mode_trend,
    pooled_features,
    score_difference_trace,
    spearman_rank_correlation,
)
from strata.numerics import Rng, ShapeError, randn
from strata.sampler import (
    GuidanceConfig,
    Trace,
    fusion_uniform,
    generate,
    invert_image,
    make_schedule,
)

CFG = DenoiserConfig(
    image_size=8, channels=3, token_dim=16, num_heads=2, num_blocks=2, num_classes=4
)


def _img(seed):
    return np.tanh(randn((3, 8, 8), Rng(seed)))


@pytest.fixture(scope="module")
def w():
    return init_weights(CFG, Rng(3))


class TestHistograms:
    def test_rows_are_distributions(self):
        h = color_histograms(_img(1))
        assert h.shape == (3, HIST_BINS)
        assert np.allclose(h.sum(axis=1), 1.0)
        assert np.all(h >= 0)

    def test_hand_oracle(self):
        # constant -1 lands in bin 0; constant ~+1 lands in the last bin
        img = np.stack([np.full((2, 2), -1.0), np.full((2, 2), 0.999), np.zeros((2, 2))])
        h = color_histograms(img)
        assert h[0, 0] == 1.0
        assert h[1, -1] == 1.0
        assert h[2, HIST_BINS // 2] == 1.0


class TestAlignment:
    def test_self_alignment_is_one(self, w):
        img = _img(5)
        assert alignment_score(img, img, w) == pytest.approx(1.0, abs=1e-12)

    def test_symmetric_shape_check(self, w):
        with pytest.raises(ShapeError):
            alignment_score(np.zeros((3, 8, 8)), np.zeros((3, 4, 4)), w)

    def test_bounded_above_by_one(self, w):
        a, b = _img(1), _img(2)
        assert alignment_score(a, b, w) <= 1.0 + 1e-12

    def test_pooled_features_shape(self, w):
        assert pooled_features(_img(1), w).shape == (CFG.token_dim,)


class TestPrototypes:
    def test_prototype_of_single_image_class_scores_one(self, w):
        class _DS:
            images = np.stack([_img(1), _img(2)])
            labels = np.array([1, 2])

        protos = class_prototypes(_DS(), w)
        assert set(protos) == {1, 2}
        assert cond_alignment_score(_DS.images[0], 1, protos, w) == pytest.approx(1.0)

    def test_missing_prototype_raises(self, w):
        with pytest.raises(KeyError):
            cond_alignment_score(_img(1), 9, {1: np.ones(4)}, w)


class TestDiversity:
    def test_identical_images_score_zero(self, w):
        img = _img(3)
        assert diversity_score([img, img, img], w) == pytest.approx(0.0, abs=1e-12)

    def test_requires_two_images(self, w):
        with pytest.raises(ValueError):
            diversity_score([_img(1)], w)

    def test_matches_pairwise_oracle(self, w):
        imgs = [_img(i) for i in range(3)]
        feats = [pooled_features(im, w) for im in imgs]
        want = np.mean(
            [
                np.linalg.norm(feats[0] - feats[1]),
                np.linalg.norm(feats[0] - feats[2]),
                np.linalg.norm(feats[1] - feats[2]),
            ]
        )
        assert diversity_score(imgs, w) == pytest.approx(float(want), abs=1e-12)


class TestTraceAggregation:
    def test_per_step_mean_over_layers(self):
        rows = [
            (0, 99, 1, 0.6, 0.4, 0.2),
            (0, 99, 2, 0.8, 0.2, 0.6),
            (1, 49, 1, 0.5, 0.5, 0.0),
            (1, 49, 2, 0.5, 0.5, -0.4),
        ]
        curve = score_difference_trace(Trace(rows=rows), 2)
        assert curve == pytest.approx([0.4, -0.2])

    def test_missing_step_raises(self):
        with pytest.raises(ValueError):
            score_difference_trace(Trace(rows=[(0, 9, 1, 0.5, 0.5, 0.0)]), 2)

    def test_out_of_range_step_raises(self):
        with pytest.raises(ValueError):
            score_difference_trace(Trace(rows=[(5, 9, 1, 0.5, 0.5, 0.0)]), 2)


class TestSpearman:
    def test_perfect_monotone(self):
        assert spearman_rank_correlation([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
        assert spearman_rank_correlation([1, 2, 3, 4], [9, 7, 5, 3]) == pytest.approx(-1.0)

    def test_nonlinear_monotone_still_one(self):
        x = [0.0, 0.33, 0.5, 0.67, 1.0]
        y = [np.exp(v) for v in x]
        assert spearman_rank_correlation(x, y) == pytest.approx(1.0)

    def test_ties_use_average_ranks(self):
        rho = spearman_rank_correlation([1, 2, 2, 3], [1, 2, 3, 4])
        assert 0.9 < rho < 1.0

    def test_constant_input_gives_zero(self):
        assert spearman_rank_correlation([1, 1, 1], [1, 2, 3]) == 0.0


@pytest.fixture(scope="module")
def setup(w):
    s = make_schedule(num_train_steps=100, num_inference_steps=6)
    prompt = _img(11)
    chain = invert_image(prompt, 1, w, s)

    class _DS:
        images = np.stack([_img(20), _img(21), _img(22)])
        labels = np.array([1, 2, 3])

    return SweepSetup(
        weights=w, schedule=s, chain=chain, prompt_image=prompt,
        positive_cond=1, negative_cond=3, seeds=[0, 1],
        prototypes=class_prototypes(_DS(), w),
    )


class TestSweeps:
    def test_guidance_sweep_covers_grid(self, setup):
        f = fusion_uniform(attn.CONCATENATION, 6)
        rows = guidance_sweep([1.0, 7.5], ["conflicting", "conflict_free"], setup, f)
        assert len(rows) == 4
        assert {(r["scale"], r["mode"]) for r in rows} == {
            (1.0, "conflicting"), (1.0, "conflict_free"),
            (7.5, "conflicting"), (7.5, "conflict_free"),
        }
        for r in rows:
            assert np.isfinite(r["alignment"]) and np.isfinite(r["cond_alignment"])

    def test_scale_one_rows_agree_across_branch_wirings(self, setup):
        # at scale 1 the negative branch cancels, so wiring cannot matter
        f = fusion_uniform(attn.CONCATENATION, 6)
        rows = guidance_sweep([1.0], ["conflicting", "conflict_free", "none"], setup, f)
        scores = [r["alignment"] for r in rows]
        assert max(scores) - min(scores) < 1e-10

    def test_lambda_sweep_runs_standard_grid(self, setup):
        g = GuidanceConfig(scale=2.0, mode="conflict_free", positive_cond=1, negative_cond=3)
        rows = lambda_sweep(list(LAMBDA_GRID), setup, g, 6)
        assert [r["lambda_p"] for r in rows] == [0.0, 0.33, 0.5, 0.67, 1.0]

    def test_lambda_zero_equals_original_attention_bitwise(self, setup):
        g = GuidanceConfig(scale=2.0, mode="conflict_free", positive_cond=1, negative_cond=3)
        img_strat0, _ = generate(
            setup.weights, setup.chain, g,
            fusion_uniform(attn.stratified(1.0, 0.0), 6),
            setup.schedule, setup.rng_for(0),
        )
        img_orig, _ = generate(
            setup.weights, setup.chain, g, fusion_uniform(attn.ORIGINAL, 6),
            setup.schedule, setup.rng_for(0),
        )
        assert np.array_equal(img_strat0, img_orig)

    def test_mode_trend_reports_mean_and_se(self, setup):
        f = fusion_uniform(attn.CONCATENATION, 6)
        variants = {
            mode: (
                GuidanceConfig(scale=2.0, mode=mode, positive_cond=1, negative_cond=3),
                f,
            )
            for mode in ("conflicting", "conflict_free")
        }
        trend = mode_trend(setup, variants, 6)
        assert set(trend) == {"conflicting", "conflict_free"}
        for mean, se in trend.values():
            assert -1.0 <= mean <= 1.0
            assert se >= 0.0

    def test_rng_for_is_deterministic(self, setup):
        a = setup.rng_for(4)
        b = setup.rng_for(4)
        assert a.normal(3) == pytest.approx(b.normal(3))
