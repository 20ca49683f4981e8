import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from bem import ndtensor as nd
from bem.errors import ContractError, DimensionError, DomainError
from bem.ndtensor import Tape, Tensor, backward, precision
from bem.variational import (
    RHO_INIT,
    SIGMA_INIT,
    AdaptivePrior,
    BayesModule,
    EpsilonSource,
    VariationalParams,
    elbo_minibatch_loss,
    ema_update,
    inverse_softplus,
    kl_diag_gaussian,
    sample_weights,
    softplus_np,
)

from conftest import max_rel_err, numeric_grad


def quad_kl(mq, sq, mp, sp):
    """KL[q||p] by adaptive quadrature of q(w) log(q(w)/p(w))."""
    q, p = stats.norm(mq, sq), stats.norm(mp, sp)

    def f(w):
        return q.pdf(w) * (q.logpdf(w) - p.logpdf(w))

    lo, hi = mq - 12 * sq, mq + 12 * sq
    val, _ = integrate.quad(f, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=400, points=[mq])
    return val


class TestSoftplus:
    def test_init_sigma(self):
        assert softplus_np(np.float64(RHO_INIT)) == pytest.approx(SIGMA_INIT, abs=1e-15)

    def test_rho_init_formula(self):
        assert RHO_INIT == pytest.approx(math.log(math.expm1(0.05)), abs=1e-15)

    @given(st.floats(1e-6, 50.0))
    def test_inverse_roundtrip(self, s):
        assert softplus_np(inverse_softplus(s)) == pytest.approx(s, rel=1e-9)

    def test_positive_for_very_negative_rho(self):
        assert softplus_np(np.float64(-700.0)) > 0


class TestEpsilonSource:
    def test_same_index_bit_identical(self):
        a = EpsilonSource(7, 3).at(5, (4, 4))
        b = EpsilonSource(7, 3).at(5, (4, 4))
        assert np.array_equal(a, b)

    def test_draw_advances(self):
        src = EpsilonSource(7, 3)
        a, b = src.draw(10), src.draw(10)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, EpsilonSource(7, 3).at(0, 10))

    def test_streams_differ(self):
        a = EpsilonSource.from_label(0, "infer:0").draw(1000)
        b = EpsilonSource.from_label(0, "infer:1").draw(1000)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.15

    def test_label_equals_numeric_stream(self):
        from bem.variational import stream_id

        assert np.array_equal(
            EpsilonSource.from_label(1, "stage1").draw(5), EpsilonSource(1, stream_id("stage1")).draw(5)
        )


class TestSampleWeights:
    def test_statistics(self):
        n = 100_000
        p = VariationalParams(np.zeros(n), np.full(n, inverse_softplus(1.0)))
        w = sample_weights(p, EpsilonSource(0, 0)).data
        assert abs(w.mean()) < 4 / math.sqrt(n)
        assert abs(w.var() - 1.0) < 0.05

    def test_tiny_sigma_returns_mu(self):
        with precision(64):
            mu = np.linspace(-1, 1, 10)
            p = VariationalParams(mu, np.full(10, -40.0))
            assert np.max(p.sigma) < 1e-12
            w = sample_weights(p, EpsilonSource(0, 0)).data
            np.testing.assert_allclose(w, mu, atol=1e-12, rtol=0)

    def test_fixed_noise_array(self):
        p = VariationalParams(np.zeros(3), np.full(3, inverse_softplus(2.0)))
        out = sample_weights(p, np.array([1.0, -1.0, 0.5])).data
        np.testing.assert_allclose(out, [2.0, -2.0, 1.0], rtol=1e-6)

    def test_noise_shape_mismatch(self):
        p = VariationalParams(np.zeros(3), np.zeros(3))
        with pytest.raises(DimensionError):
            sample_weights(p, np.zeros(4))

    def test_mu_rho_shape_mismatch(self):
        with pytest.raises(DimensionError):
            VariationalParams(np.zeros(3), np.zeros(2))

    def test_pathwise_gradients_by_regression(self):
        """d mean / d mu = 1 and d std / d rho = sigmoid(rho), estimated from samples."""
        n, rho0, h = 200_000, 0.3, 0.05
        eps = EpsilonSource(3, 0).draw(n)
        stds, means = [], []
        for d in (-h, 0.0, h):
            p = VariationalParams(np.full(n, 0.7 + d), np.full(n, rho0 + d))
            w = sample_weights(p, eps).data
            stds.append(w.std())
            means.append(w.mean())
        d_mean = (means[2] - means[0]) / (2 * h)
        d_std = (stds[2] - stds[0]) / (2 * h)
        sig = 1.0 / (1.0 + math.exp(-rho0))
        assert d_mean == pytest.approx(1.0, rel=0.02)
        assert d_std == pytest.approx(sig, rel=0.02)

    def test_tape_gradients(self):
        with precision(64):
            mu = Tensor(np.array([0.2, -0.1]), requires_grad=True)
            rho = Tensor(np.array([0.5, -1.0]), requires_grad=True)
            p = VariationalParams(mu, rho)
            e = np.array([1.5, -0.5])
            with Tape() as tape:
                loss = nd.sum(sample_weights(p, e))
            g = backward(loss, tape, wrt=[mu, rho])
            np.testing.assert_allclose(g[mu], [1.0, 1.0])
            sig = 1.0 / (1.0 + np.exp(-rho.data))
            np.testing.assert_allclose(g[rho], e * sig, rtol=1e-12)


class TestKL:
    def test_self_divergence_zero(self):
        mu, s = np.array([0.3, -2.0]), np.array([0.1, 4.0])
        assert kl_diag_gaussian((mu, s), (mu, s)).item() == 0.0

    def test_unit_shift(self):
        with precision(64):
            assert kl_diag_gaussian((1.0, 1.0), (0.0, 1.0)).item() == pytest.approx(0.5, abs=1e-15)

    def test_matches_quadrature(self, rng):
        with precision(64):
            for _ in range(100):
                mq, mp = rng.uniform(-2, 2, 2)
                sq, sp = rng.uniform(0.2, 3.0, 2)
                kl = kl_diag_gaussian((mq, sq), (mp, sp)).item()
                assert abs(kl - quad_kl(mq, sq, mp, sp)) < 1e-8

    def test_textbook_form(self, rng):
        with precision(64):
            mq, mp = rng.normal(size=20), rng.normal(size=20)
            sq, sp = rng.uniform(0.05, 2, 20), rng.uniform(0.05, 2, 20)
            ref = np.sum(np.log(sp / sq) + (sq**2 + (mq - mp) ** 2) / (2 * sp**2) - 0.5)
            assert kl_diag_gaussian((mq, sq), (mp, sp)).item() == pytest.approx(ref, rel=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(-5, 5), st.floats(1e-3, 10), st.floats(-5, 5), st.floats(1e-3, 10)
    )
    def test_non_negative(self, mq, sq, mp, sp):
        with precision(64):
            assert kl_diag_gaussian((mq, sq), (mp, sp)).item() >= 0.0

    def test_non_positive_sigma(self):
        with pytest.raises(DomainError):
            kl_diag_gaussian((0.0, 0.0), (0.0, 1.0))
        with pytest.raises(DomainError):
            kl_diag_gaussian((0.0, 1.0), (0.0, -1.0))

    def test_gradient_only_wrt_q(self, rng):
        with precision(64):
            mq = Tensor(rng.normal(size=5), requires_grad=True)
            sq = Tensor(rng.uniform(0.5, 1.5, 5), requires_grad=True)
            mp, sp = rng.normal(size=5), rng.uniform(0.5, 1.5, 5)

            def f(a, b):
                return kl_diag_gaussian((a, b), (mp, sp)).item()

            with Tape() as tape:
                kl = kl_diag_gaussian((mq, sq), (mp, sp))
            g = backward(kl, tape, wrt=[mq, sq])
            num = numeric_grad(f, [mq.data.copy(), sq.data.copy()])
            assert max_rel_err(g[mq], num[0]) < 1e-7
            assert max_rel_err(g[sq], num[1]) < 1e-7


def _toy_posterior(shapes, rng, dtype=np.float64):
    return BayesModule(
        {
            n: VariationalParams(
                Tensor(rng.normal(scale=0.5, size=s), dtype=dtype),
                Tensor(rng.uniform(-3, -1, size=s), dtype=dtype),
                name=n,
            )
            for n, s in shapes.items()
        }
    )


class TestEMA:
    def test_beta_one_frozen(self, rng):
        post = _toy_posterior({"a": (3,)}, rng)
        prior = AdaptivePrior({"a": np.zeros(3)}, {"a": np.ones(3)}, beta=1.0)
        new = ema_update(prior, post)
        assert np.array_equal(new.mu_ema["a"], np.zeros(3))
        assert np.array_equal(new.sigma_ema["a"], np.ones(3))
        assert new.step == 1

    def test_beta_zero_replaces(self, rng):
        post = _toy_posterior({"a": (3,)}, rng)
        prior = AdaptivePrior({"a": np.zeros(3)}, {"a": np.ones(3)}, beta=0.0)
        new = ema_update(prior, post)
        np.testing.assert_array_equal(new.mu_ema["a"], post["a"].mu.data)
        np.testing.assert_array_equal(new.sigma_ema["a"], post["a"].sigma)

    def test_one_step_arithmetic(self):
        post = BayesModule({"a": VariationalParams(np.ones(1), np.zeros(1))})
        prior = AdaptivePrior({"a": np.zeros(1)}, {"a": np.ones(1)}, beta=0.9)
        assert ema_update(prior, post).mu_ema["a"][0] == pytest.approx(0.1, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 10_000))
    def test_convexity(self, beta, seed):
        rng = np.random.default_rng(seed)
        post = _toy_posterior({"a": (4,)}, rng)
        prior = AdaptivePrior({"a": rng.normal(size=4)}, {"a": rng.uniform(0.1, 2, 4)}, beta=beta)
        new = ema_update(prior, post)
        for old, cur, upd in (
            (prior.mu_ema["a"], post["a"].mu.data, new.mu_ema["a"]),
            (prior.sigma_ema["a"], post["a"].sigma, new.sigma_ema["a"]),
        ):
            lo, hi = np.minimum(old, cur), np.maximum(old, cur)
            tol = 1e-12 * (1 + np.abs(hi))
            assert np.all(upd >= lo - tol) and np.all(upd <= hi + tol)

    def test_shape_mismatch(self, rng):
        post = _toy_posterior({"a": (3,)}, rng)
        prior = AdaptivePrior({"a": np.zeros(4)}, {"a": np.ones(4)})
        with pytest.raises(DimensionError):
            ema_update(prior, post)

    def test_prior_holds_no_tensors(self, rng):
        post = _toy_posterior({"a": (3,)}, rng)
        new = ema_update(AdaptivePrior.from_posterior(post), post)
        assert all(isinstance(v, np.ndarray) for v in new.mu_ema.values())

    def test_from_posterior_kl_zero(self, rng):
        post = _toy_posterior({"a": (3,), "b": (2, 2)}, rng)
        assert AdaptivePrior.from_posterior(post).kl(post).item() == 0.0

    def test_invalid_prior(self):
        with pytest.raises(DomainError):
            AdaptivePrior({"a": np.zeros(1)}, {"a": np.zeros(1)})
        with pytest.raises(ContractError):
            AdaptivePrior({"a": np.zeros(1)}, {"a": np.ones(1)}, beta=1.5)


def _linear_forward(x, w):
    """y = x * a + b with per-feature weights; small enough for exhaustive checks."""
    return x * w["a"] + w["b"]


class TestElbo:
    def test_sigma_zero_reduces_to_mse(self, rng):
        with precision(64):
            post = BayesModule(
                {
                    "a": VariationalParams(rng.normal(size=4), np.full(4, -60.0)),
                    "b": VariationalParams(rng.normal(size=4), np.full(4, -60.0)),
                }
            )
            x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
            prior = AdaptivePrior.standard_normal(post)
            terms = elbo_minibatch_loss(x, y, _linear_forward, post, prior, 0.0, 1, EpsilonSource(0, 0))
            pred = x * post["a"].mu.data + post["b"].mu.data
            ref = np.sum((pred - y) ** 2) / 5
            assert terms.total.item() == pytest.approx(ref, rel=1e-12)

    def test_identity_network_is_kl_only(self, rng):
        with precision(64):
            post = BayesModule({"u": VariationalParams(rng.normal(size=3), np.full(3, -1.0))})
            x = rng.normal(size=(4, 3))
            prior = AdaptivePrior.standard_normal(post)
            terms = elbo_minibatch_loss(
                x, x, lambda xx, w: xx, post, prior, 1.0, 2, EpsilonSource(0, 0)
            )
            assert terms.data.item() == 0.0
            assert terms.total.item() == pytest.approx(prior.kl(post).item(), rel=1e-14)

    def test_empty_batch(self, rng):
        post = BayesModule({"a": VariationalParams(np.zeros(2), np.zeros(2))})
        with pytest.raises(ContractError):
            elbo_minibatch_loss(
                np.zeros((0, 2)), np.zeros((0, 2)), _linear_forward, post,
                AdaptivePrior.from_posterior(post), 1.0, 1, EpsilonSource(0, 0),
            )

    def test_needs_eps(self, rng):
        post = BayesModule({"a": VariationalParams(np.zeros(2), np.zeros(2))})
        with pytest.raises(ContractError):
            elbo_minibatch_loss(np.zeros((1, 2)), np.zeros((1, 2)), _linear_forward, post,
                                AdaptivePrior.from_posterior(post), 1.0)

    def test_l1_mode(self, rng):
        with precision(64):
            post = BayesModule({"a": VariationalParams(np.ones(2), np.full(2, -60.0)),
                                "b": VariationalParams(np.zeros(2), np.full(2, -60.0))})
            x = np.array([[1.0, 2.0]])
            y = np.array([[0.0, 4.0]])
            terms = elbo_minibatch_loss(x, y, _linear_forward, post, AdaptivePrior.from_posterior(post),
                                        0.0, 1, EpsilonSource(0, 0), data_term="l1")
            assert terms.data.item() == pytest.approx(3.0, abs=1e-12)

    def test_finite_difference_gradients(self, rng):
        with precision(64):
            shapes = {"a": (6,), "b": (6,)}
            post = _toy_posterior(shapes, rng)
            prior = AdaptivePrior({n: rng.normal(size=s) for n, s in shapes.items()},
                                  {n: rng.uniform(0.3, 1, s) for n, s in shapes.items()})
            x, y = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
            params = post.parameters()

            def loss_value(*arrays):
                for p, a in zip(params, arrays):
                    p.data = a
                return elbo_minibatch_loss(x, y, _linear_forward, post, prior, 0.3, 2,
                                           EpsilonSource(9, 0)).total.item()

            base = [p.data.copy() for p in params]
            with Tape() as tape:
                terms = elbo_minibatch_loss(x, y, _linear_forward, post, prior, 0.3, 2, EpsilonSource(9, 0))
            g = backward(terms.total, tape, wrt=params)
            analytic = [g[p].copy() for p in params]
            num = numeric_grad(loss_value, [b.copy() for b in base])
            for a, n in zip(analytic, num):
                assert max_rel_err(a, n) < 1e-6
