import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from bem import backbone, inference, metrics, pipeline
from bem.backbone import BackboneSpec
from bem.errors import ConfigError, ContractError, DimensionError, MetricError
from bem.inference import CandidateSet, InferenceConfig, mc_aggregate, rank_select, select_index
from bem.pipeline import PipelineConfig, compose_illumination

PCFG = PipelineConfig(r="1/4")


def _skimage_valid_ssim(a, b):
    """SSIM map from scikit-image restricted to fully contained windows."""
    vals = []
    for c in range(a.shape[0]):
        _, smap = structural_similarity(
            a[c], b[c], data_range=1.0, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, full=True,
        )
        vals.append(smap[5:-5, 5:-5])
    return float(np.mean(vals))


class TestPSNR:
    def test_identical_is_inf(self, rng):
        a = rng.uniform(size=(3, 8, 8))
        assert metrics.psnr(a, a) == math.inf

    def test_constant_offset(self, rng):
        a = rng.uniform(0, 0.8, size=(3, 16, 16))
        assert abs(metrics.psnr(a, a + 0.1) - 20.0) < 1e-9

    def test_symmetric(self, rng):
        a, b = rng.uniform(size=(2, 3, 8, 8))
        assert metrics.psnr(a, b) == metrics.psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            metrics.psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestSSIM:
    def test_self_is_one(self, rng):
        a = rng.uniform(size=(3, 32, 32))
        assert metrics.ssim(a, a) == 1.0

    def test_matches_skimage_valid_region(self, rng):
        a = rng.uniform(size=(3, 40, 36))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        assert metrics.ssim(a, b) == pytest.approx(_skimage_valid_ssim(a, b), abs=1e-10)

    def test_checkerboard_inverse(self):
        yy, xx = np.mgrid[0:32, 0:32]
        a = ((yy // 4 + xx // 4) % 2).astype(float)[None]
        s = metrics.ssim(a, 1.0 - a)
        assert s < 0.1
        assert s == pytest.approx(_skimage_valid_ssim(a, 1.0 - a), abs=1e-10)

    def test_symmetric(self, rng):
        a, b = rng.uniform(size=(2, 3, 16, 16))
        assert metrics.ssim(a, b) == metrics.ssim(b, a)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            metrics.ssim(np.zeros((3, 10, 32)), np.zeros((3, 10, 32)))

    def test_grayscale(self, rng):
        a = rng.uniform(size=(16, 16))
        assert metrics.ssim(a, a) == 1.0


class TestIQA:
    def test_exposure_dominates_for_constants(self):
        assert metrics.builtin_iqa(np.full((3, 16, 16), 0.5)) > metrics.builtin_iqa(np.full((3, 16, 16), 0.05))

    def test_deterministic(self, rng):
        a = rng.uniform(size=(3, 16, 16))
        assert metrics.builtin_iqa(a) == metrics.builtin_iqa(a.copy())

    def test_gradient_image_beats_flat(self):
        ramp = np.tile(np.linspace(0.1, 0.9, 32), (32, 1))
        img = np.stack([ramp, ramp.T, ramp])
        flat = np.full((3, 32, 32), 0.5)
        lum = metrics.luminance(img)
        # hand evaluation of the three terms
        expected = -4 * (lum.mean() - 0.5) ** 2 + lum.std() + 0.25 * metrics.gradient_entropy(lum)
        assert metrics.builtin_iqa(img) == pytest.approx(expected, rel=1e-12)
        assert metrics.builtin_iqa(flat) == pytest.approx(0.0, abs=1e-15)
        assert metrics.builtin_iqa(img) > metrics.builtin_iqa(flat)

    def test_registry(self):
        metrics.register_metric("neg_mean", lambda im: -float(np.mean(im)))
        assert metrics.get_metric("neg_mean")(np.ones(3)) == -1.0
        assert "neg_mean" in metrics.available_metrics()
        with pytest.raises(MetricError):
            metrics.get_metric("clip-iqa")
        with pytest.raises(MetricError):
            metrics.register_metric("x", 3)


class TestConfig:
    def test_defaults(self):
        c = InferenceConfig()
        assert c.K == 25 and c.mode == "mc"

    def test_rank_needs_metric(self):
        with pytest.raises(ConfigError):
            InferenceConfig(mode="rank")
        InferenceConfig(mode="rank", iqa="builtin")

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            InferenceConfig(K=0)


def _cs(values, shape=(3, 2, 2)):
    return CandidateSet(np.stack([np.full(shape, v) for v in values]), list(range(len(values))))


class TestAggregate:
    def test_two_point_mean(self):
        assert np.allclose(mc_aggregate(_cs([0.2, 0.6])).data, 0.4)

    def test_identical_candidates_exact(self, rng):
        z = rng.uniform(size=(3, 4, 4)).astype(np.float32)
        cs = CandidateSet(np.stack([z] * 7), list(range(7)))
        assert np.array_equal(mc_aggregate(cs).data, z)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 10_000))
    def test_permutation_invariant(self, k, seed):
        r = np.random.default_rng(seed)
        z = r.uniform(size=(k, 3, 2, 2))
        perm = r.permutation(k)
        a = mc_aggregate(CandidateSet(z, list(range(k)))).data
        b = mc_aggregate(CandidateSet(z[perm], list(perm))).data
        assert np.array_equal(a, b)
        np.testing.assert_allclose(a, z.mean(axis=0), rtol=1e-12)

    def test_empty(self):
        with pytest.raises(ContractError):
            mc_aggregate(CandidateSet(np.zeros((0, 3, 2, 2)), []))


class TestRank:
    def test_brightness_hand_evaluated(self):
        x = np.full((3, 8, 8), 0.5)
        cs = _cs([0.2, 0.5, 0.9])
        xc = pipeline.coarse_input(x, PCFG).data
        expected = [np.mean((xc + 0.025 * v) * v) for v in (0.2, 0.5, 0.9)]
        z = rank_select(x, cs, PCFG, "brightness")
        assert cs.selected == int(np.argmax(expected)) == 2
        assert np.allclose(z.data, 0.9)
        np.testing.assert_allclose(cs.scores, expected, rtol=1e-6)

    def test_single_candidate(self):
        cs = _cs([0.3])
        rank_select(np.full((3, 8, 8), 0.5), cs, PCFG, "builtin")
        assert cs.selected == 0

    def test_ties_lowest_index(self):
        assert select_index([1.0, 3.0, 3.0, 2.0]) == 1
        cs = _cs([0.4, 0.4, 0.4])
        rank_select(np.full((3, 8, 8), 0.5), cs, PCFG, "brightness")
        assert cs.selected == 0

    def test_non_finite_score_names_candidate(self):
        metrics.register_metric("nan_on_bright", lambda im: float("nan") if im.mean() > 0.1 else 0.0)
        with pytest.raises(MetricError, match="candidate 2"):
            rank_select(np.full((3, 8, 8), 0.5), _cs([0.01, 0.02, 0.9]), PCFG, "nan_on_bright")

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=40))
    def test_monotone_transform_invariance(self, scores):
        # integer-valued scores keep every transform strictly increasing after rounding
        s = np.asarray(scores, dtype=np.float64)
        k = select_index(s)
        for f in (lambda v: 3.0 * v + 7.0, lambda v: np.exp(v / 100.0), lambda v: v**3, lambda v: np.arctan(v / 1000.0)):
            assert select_index(f(s)) == k


@pytest.fixture(scope="module")
def models():
    F = backbone.build(BackboneSpec(3, 3, 2, 1), "bayesian", seed=0)
    G = backbone.build(BackboneSpec(6, 3, 2, 1), seed=0)
    return F, G


class TestEnhance:
    def test_structure_counts(self, models, rng):
        F, G = models
        x = rng.uniform(0, 0.3, size=(3, 32, 32))
        pipeline.counters.reset()
        f0, g0 = F.calls, G.calls
        out = inference.enhance(x, F, G, PCFG, InferenceConfig(K=25))
        assert pipeline.counters.stage1_forward == 25 and pipeline.counters.stage2_forward == 1
        assert F.calls - f0 == 25 and G.calls - g0 == 1
        assert out.shape == (3, 32, 32)

    def test_k1_modes_identical(self, models, rng):
        F, G = models
        x = rng.uniform(0, 0.3, size=(3, 32, 32))
        a = inference.enhance(x, F, G, PCFG, InferenceConfig(K=1, mode="mc"))
        b = inference.enhance(x, F, G, PCFG, InferenceConfig(K=1, mode="rank", iqa="builtin"))
        assert np.array_equal(a.data, b.data)

    def test_degenerate_posterior_modes_identical(self, rng):
        F = backbone.build(BackboneSpec(3, 3, 2, 1), "bayesian", seed=1)
        G = backbone.build(BackboneSpec(6, 3, 2, 1), seed=1)
        for p in F.weights:
            p.rho.data[...] = -200.0
        x = rng.uniform(0, 0.3, size=(3, 32, 32))
        cs = inference.sample_candidates(x, F, PCFG, InferenceConfig(K=4))
        assert all(np.array_equal(cs.z[0], z) for z in cs.z)
        a = inference.enhance(x, F, G, PCFG, InferenceConfig(K=4, mode="mc"))
        b = inference.enhance(x, F, G, PCFG, InferenceConfig(K=4, mode="rank", iqa="builtin"))
        assert np.array_equal(a.data, b.data)

    def test_thread_count_does_not_change_candidates(self, models, rng):
        F, _ = models
        x = rng.uniform(0, 0.3, size=(3, 32, 32))
        a = inference.sample_candidates(x, F, PCFG, InferenceConfig(K=6, seed=3, threads=1))
        b = inference.sample_candidates(x, F, PCFG, InferenceConfig(K=6, seed=3, threads=3))
        c = inference.sample_candidates(x, F, PCFG, InferenceConfig(K=6, seed=3, threads=1))
        assert np.array_equal(a.z, b.z) and np.array_equal(a.z, c.z)
        assert a.z.shape == (6, 3, 8, 8)
        assert len({z.tobytes() for z in a.z}) == 6

    def test_rank_scores_coarse_composites(self, models, rng):
        F, G = models
        x = rng.uniform(0, 0.3, size=(3, 32, 32))
        res = inference.run_inference(x, F, G, PCFG, InferenceConfig(K=5, mode="rank", iqa="builtin"))
        xc = pipeline.coarse_input(x, PCFG)
        ref = [metrics.builtin_iqa(compose_illumination(xc, z, PCFG.alpha).data) for z in res.candidates.z]
        np.testing.assert_array_equal(res.candidates.scores, ref)
        assert np.array_equal(res.z_star.data, res.candidates.z[int(np.argmax(ref))])

    def test_rejects_batch(self, models, rng):
        F, G = models
        with pytest.raises(ContractError):
            inference.enhance(rng.uniform(size=(2, 3, 32, 32)), F, G, PCFG, InferenceConfig(K=1))
