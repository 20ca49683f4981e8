"""Mean-field Gaussian variational machinery.

Posterior ``q(w) = N(mu, diag(sigma^2))`` with ``sigma = softplus(rho)``,
reparameterised sampling, closed-form diagonal KL, the EMA-tracked adaptive
prior and the minibatch ELBO loss.
"""

import zlib
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import ndtensor as nd
from .errors import ContractError, DimensionError, DomainError
from .ndtensor import Tensor, record

SIGMA_INIT = 0.05


def softplus_np(rho):
    return np.logaddexp(0.0, rho).astype(np.asarray(rho).dtype, copy=False)


def inverse_softplus(sigma):
    """``rho`` such that ``softplus(rho) == sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return sigma + np.log(-np.expm1(-sigma))


RHO_INIT = float(inverse_softplus(SIGMA_INIT))


def stream_id(label):
    """Stable integer id for a named random stream (``"stage1"``, ``"infer:3"`` ...)."""
    return zlib.crc32(str(label).encode("utf-8"))


class EpsilonSource:
    """Reproducible standard-normal noise keyed by ``(seed, stream, draw index)``.

    Each draw builds a fresh PCG64 generator from a ``SeedSequence`` whose
    spawn key is ``(stream, index)``, so any draw can be regenerated in
    isolation and distinct streams never share state.
    """

    def __init__(self, seed, stream=0):
        if isinstance(stream, str):
            stream = stream_id(stream)
        self.seed = int(seed)
        self.stream = int(stream)
        self.index = 0

    @classmethod
    def from_label(cls, seed, label):
        return cls(seed, stream_id(label))

    def at(self, index, shape, dtype=np.float64):
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream, int(index)))
        gen = np.random.Generator(np.random.PCG64(ss))
        return gen.standard_normal(shape, dtype=np.dtype(dtype).type)

    def draw(self, shape, dtype=np.float64):
        out = self.at(self.index, shape, dtype)
        self.index += 1
        return out

    def generator(self):
        """A numpy Generator for non-Gaussian draws on this stream (consumes one index)."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream, self.index))
        self.index += 1
        return np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"EpsilonSource(seed={self.seed}, stream={self.stream}, index={self.index})"


class VariationalParams:
    """Mean ``mu`` and unconstrained spread ``rho`` of one weight tensor."""

    def __init__(self, mu, rho, name=None):
        mu = mu if isinstance(mu, Tensor) else Tensor(mu)
        rho = rho if isinstance(rho, Tensor) else Tensor(rho, dtype=mu.dtype)
        if mu.shape != rho.shape:
            raise DimensionError(f"mu {mu.shape} and rho {rho.shape} differ in shape")
        mu.requires_grad = True
        rho.requires_grad = True
        self.mu = mu
        self.rho = rho
        self.name = name

    @property
    def shape(self):
        return self.mu.shape

    @property
    def sigma(self):
        return softplus_np(self.rho.data)

    def __repr__(self):
        return f"VariationalParams({self.name!r}, shape={self.shape})"


def sample_weights(params, eps):
    """Reparameterised draw ``mu + softplus(rho) * epsilon``.

    ``eps`` is an :class:`EpsilonSource` (one draw is consumed) or a
    pre-drawn array of the parameter's shape.
    """
    if isinstance(eps, EpsilonSource):
        eps = eps.draw(params.shape, params.mu.dtype)
    eps = np.asarray(eps, dtype=params.mu.dtype)
    if eps.shape != params.shape:
        raise DimensionError(f"noise {eps.shape} does not match parameter {params.shape}")
    return params.mu + nd.softplus(params.rho) * Tensor(eps)


def kl_diag_gaussian(q, p):
    """KL[q || p] between diagonal Gaussians, summed over all coordinates.

    ``q = (mu_q, sigma_q)`` may hold Tensors and is differentiated through;
    ``p = (mu_p, sigma_p)`` is treated as a constant.
    """
    mu_q, sigma_q = (nd.as_tensor(v) for v in q)
    mu_p = np.asarray(p[0].data if isinstance(p[0], Tensor) else p[0])
    sigma_p = np.asarray(p[1].data if isinstance(p[1], Tensor) else p[1])
    sq = sigma_q.data
    if np.any(sq <= 0) or np.any(sigma_p <= 0):
        raise DomainError("KL requires strictly positive standard deviations")
    try:
        np.broadcast_shapes(mu_q.shape, sq.shape, mu_p.shape, sigma_p.shape)
    except ValueError:
        raise DimensionError(
            f"KL operands disagree: {mu_q.shape}, {sq.shape}, {mu_p.shape}, {sigma_p.shape}"
        ) from None
    diff = mu_q.data - mu_p
    u = np.log(sq / sigma_p)
    # 0.5*expm1(2u) - u is the sigma part written to stay >= 0 near u == 0
    terms = 0.5 * np.expm1(2.0 * u) - u + 0.5 * (diff / sigma_p) ** 2
    out = np.asarray(terms.sum(), dtype=mu_q.dtype)
    var_p = sigma_p * sigma_p
    mshape, sshape = mu_q.shape, sigma_q.shape

    def vjp(g):
        gm = nd.ops._unbroadcast(g * diff / var_p, mshape) if mu_q.requires_grad else None
        gs = nd.ops._unbroadcast(g * (sq / var_p - 1.0 / sq), sshape) if sigma_q.requires_grad else None
        return (
            None if gm is None else gm.astype(mu_q.dtype, copy=False),
            None if gs is None else gs.astype(sigma_q.dtype, copy=False),
        )

    return record("kl_diag_gaussian", out, (mu_q, sigma_q), vjp)


class BayesModule:
    """Ordered collection of :class:`VariationalParams`, one per weight tensor."""

    def __init__(self, params=None):
        self.layers = dict(params or {})

    def __getitem__(self, name):
        return self.layers[name]

    def __iter__(self):
        return iter(self.layers.values())

    def __len__(self):
        return len(self.layers)

    def names(self):
        return list(self.layers)

    def parameters(self):
        out = []
        for p in self.layers.values():
            out.extend((p.mu, p.rho))
        return out

    def num_params(self):
        return sum(p.mu.size + p.rho.size for p in self.layers.values())

    def sample(self, eps):
        """Draw every weight tensor with one noise draw from ``eps``."""
        if not self.layers:
            return {}
        dtype = next(iter(self.layers.values())).mu.dtype
        total = sum(p.mu.size for p in self.layers.values())
        flat = eps.draw(total, dtype)
        out = {}
        offset = 0
        for name, p in self.layers.items():
            n = p.mu.size
            out[name] = sample_weights(p, flat[offset : offset + n].reshape(p.shape))
            offset += n
        return out

    def means(self):
        return {name: p.mu for name, p in self.layers.items()}


@dataclass
class AdaptivePrior:
    """Gaussian prior whose parameters track the posterior by EMA.

    ``beta == 1`` freezes the prior, which is how a fixed prior such as
    ``N(0, I)`` is represented (see :meth:`standard_normal`).
    """

    mu_ema: dict
    sigma_ema: dict
    beta: float = 0.999
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"EMA decay must lie in [0, 1], got {self.beta}")
        for name, s in self.sigma_ema.items():
            if np.any(s <= 0):
                raise DomainError(f"prior sigma for {name!r} must be positive")

    @classmethod
    def from_posterior(cls, posterior, beta=0.999):
        """Prior initialised as an exact copy of the posterior (KL starts at 0)."""
        return cls(
            {n: p.mu.data.copy() for n, p in posterior.layers.items()},
            {n: p.sigma.copy() for n, p in posterior.layers.items()},
            beta=beta,
        )

    @classmethod
    def standard_normal(cls, posterior):
        return cls(
            {n: np.zeros(p.shape, p.mu.dtype) for n, p in posterior.layers.items()},
            {n: np.ones(p.shape, p.mu.dtype) for n, p in posterior.layers.items()},
            beta=1.0,
        )

    def kl(self, posterior):
        """Sum of per-layer KL[q || prior] as a tape-tracked scalar."""
        total = None
        for name, p in posterior.layers.items():
            term = kl_diag_gaussian(
                (p.mu, nd.softplus(p.rho)), (self.mu_ema[name], self.sigma_ema[name])
            )
            total = term if total is None else total + term
        return total if total is not None else Tensor(0.0)


def ema_update(prior, posterior):
    """One EMA step of the prior toward the current posterior; returns a new prior."""
    beta = prior.beta
    mu_new, sigma_new = {}, {}
    for name, p in posterior.layers.items():
        if name not in prior.mu_ema:
            raise DimensionError(f"prior has no entry for layer {name!r}")
        if prior.mu_ema[name].shape != p.shape:
            raise DimensionError(
                f"prior {prior.mu_ema[name].shape} and posterior {p.shape} differ for {name!r}"
            )
        if beta == 1.0:
            mu_new[name] = prior.mu_ema[name]
            sigma_new[name] = prior.sigma_ema[name]
            continue
        mu_new[name] = beta * prior.mu_ema[name] + (1.0 - beta) * p.mu.data
        sigma_new[name] = beta * prior.sigma_ema[name] + (1.0 - beta) * p.sigma
    return AdaptivePrior(mu_new, sigma_new, beta=beta, step=prior.step + 1)


class ElboTerms(NamedTuple):
    total: Tensor
    data: Tensor
    kl: Tensor


def elbo_minibatch_loss(
    x,
    y,
    forward: Callable,
    posterior: BayesModule,
    prior: AdaptivePrior,
    kl_weight: float,
    n_mc: int = 1,
    eps: EpsilonSource = None,
    data_term: str = "l2",
):
    """Minibatch variational loss.

    ``forward(x, weights)`` evaluates the network with a dict of sampled
    weight tensors.  ``x`` and ``y`` carry the batch on axis 0.  The data
    term is the per-sample squared L2 norm (or L1 norm with
    ``data_term="l1"``) averaged over the batch and ``n_mc`` fresh weight
    draws; the KL against ``prior`` is scaled by ``kl_weight``.
    """
    x = nd.as_tensor(x)
    y = nd.as_tensor(y)
    m = x.shape[0] if x.ndim else 0
    if m < 1:
        raise ContractError("empty minibatch")
    if n_mc < 1:
        raise ContractError(f"n_mc must be >= 1, got {n_mc}")
    if kl_weight < 0:
        raise ContractError(f"kl_weight must be non-negative, got {kl_weight}")
    if eps is None:
        raise ContractError("a Bayesian loss needs an EpsilonSource")
    data = None
    for _ in range(n_mc):
        pred = forward(x, posterior.sample(eps))
        resid = pred - y
        err = nd.square(resid) if data_term == "l2" else nd.abs(resid)
        term = nd.sum(err)
        data = term if data is None else data + term
    data = data * (1.0 / (m * n_mc))
    kl = prior.kl(posterior)
    total = data + kl * kl_weight
    return ElboTerms(total, data, kl)


@dataclass
class PriorTrace:
    """Per-step record of prior statistics, used for inspection plots."""

    steps: list = field(default_factory=list)
    mean_sigma: list = field(default_factory=list)

    def append(self, prior):
        self.steps.append(prior.step)
        sig = np.concatenate([s.ravel() for s in prior.sigma_ema.values()])
        self.mean_sigma.append(float(sig.mean()))
