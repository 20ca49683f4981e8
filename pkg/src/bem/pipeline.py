"""Two-stage enhancement pipeline: coarse Bayesian stage, full-resolution refinement.

Stage I maps a low-passed, downsampled input to a coarse illumination map
``z`` with a Bayesian backbone.  The illumination relates input and target
through ``y = (x + alpha * z) * z``; Stage II is a deterministic backbone
fed with ``[x, z]`` at full resolution.
"""

import logging
import math
import threading
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from . import ndtensor as nd
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, DomainError, NonFiniteError
from .ndtensor import Tape, Tensor, backward
from .optim import Adam, cosine_lr
from .variational import AdaptivePrior, EpsilonSource, ema_update, elbo_minibatch_loss

log = logging.getLogger(__name__)


class _Counters:
    """Process-wide pipeline counters used by structural tests."""

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        self.stage1_forward = 0
        self.stage2_forward = 0

    def bump(self, name):
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)


counters = _Counters()


def _fraction(value):
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1 << 20)
    return Fraction(value)


@dataclass
class PipelineConfig:
    """Scale factor ``r`` (rational), composition scalar ``alpha`` and LP cutoff."""

    r: Fraction = Fraction(1, 16)
    alpha: float = 0.025
    lp_keep_fraction: Optional[float] = None

    def __post_init__(self):
        try:
            self.r = _fraction(self.r)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"r: cannot parse {self.r!r}") from exc
        if not 0 < self.r <= 1:
            raise ConfigError(f"r must lie in (0, 1], got {self.r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.lp_keep_fraction is not None and not 0 < self.lp_keep_fraction <= 1:
            raise ConfigError(f"lp_keep_fraction must lie in (0, 1], got {self.lp_keep_fraction}")

    @property
    def keep_fraction(self):
        return float(self.r) if self.lp_keep_fraction is None else float(self.lp_keep_fraction)

    def coarse_size(self, h, w):
        ch, cw = h * self.r, w * self.r
        if ch.denominator != 1 or cw.denominator != 1 or ch < 1 or cw < 1:
            raise ConfigError(f"{h}x{w} image times r={self.r} is not a positive integer size")
        return int(ch), int(cw)


@dataclass
class TrainConfig:
    batch_size: int = 8
    iters_stage1: int = 2000
    iters_stage2: int = 1000
    lr_init: float = 2e-4
    lr_final: float = 1e-6
    kl_weight: Optional[float] = None
    n_mc: int = 1
    seed: int = 0
    crop_size: int = 32
    ema_beta: float = 0.999
    clip_norm: float = 1.0
    data_term: str = "l2"

    def __post_init__(self):
        for name in ("batch_size", "n_mc", "crop_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("iters_stage1", "iters_stage2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.lr_final <= self.lr_init:
            raise ConfigError(f"need 0 < lr_final <= lr_init, got {self.lr_final}, {self.lr_init}")
        if self.kl_weight is not None and self.kl_weight < 0:
            raise ConfigError("kl_weight must be non-negative")
        if not 0 <= self.ema_beta <= 1:
            raise ConfigError("ema_beta must lie in [0, 1]")
        if self.data_term not in ("l2", "l1"):
            raise ConfigError(f"data_term must be 'l2' or 'l1', got {self.data_term!r}")

    def resolved_kl_weight(self, n_samples):
        if self.kl_weight is not None:
            return self.kl_weight
        return min(1.0, self.batch_size / max(n_samples, 1))


# -- image-space operations ---------------------------------------------------------


def lowpass(x, keep_fraction):
    """Zero every FFT bin above ``keep_fraction / 2`` cycles/sample on either axis."""
    x = nd.as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    mask = nd.lowpass_mask(h, w, keep_fraction)
    if mask.all():
        return nd.irfft2(nd.rfft2(x), h, w)
    spec = nd.rfft2(x)
    spec = spec * Tensor(mask[..., None].astype(x.dtype))
    return nd.irfft2(spec, h, w)


def coarse_input(x, cfg):
    """``Down(LP(x), r)``: low-pass then bilinear resize to the coarse grid."""
    x = nd.as_tensor(x)
    ch, cw = cfg.coarse_size(x.shape[-2], x.shape[-1])
    return nd.bilinear_resize(lowpass(x, cfg.keep_fraction), ch, cw)


def compose_illumination(x, z, alpha):
    """``(x + alpha * z) * z``."""
    x, z = nd.as_tensor(x), nd.as_tensor(z)
    if x.shape != z.shape:
        raise DimensionError(f"compose_illumination: x {x.shape} vs z {z.shape}")
    if alpha < 0:
        raise DomainError(f"alpha must be non-negative, got {alpha}")
    return (x + z * alpha) * z


def invert_illumination(x, y, alpha):
    """Non-negative root ``z`` of ``(x + alpha z) z = y``: ``(sqrt(x^2 + 4 alpha y) - x) / (2 alpha)``."""
    x, y = nd.as_tensor(x), nd.as_tensor(y)
    if alpha <= 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    if x.shape != y.shape:
        raise DimensionError(f"invert_illumination: x {x.shape} vs y {y.shape}")
    if np.any(y.data < 0):
        raise DomainError("target intensities must be non-negative")
    root = nd.sqrt(nd.square(x) + y * (4.0 * alpha))
    return (root - x) * (1.0 / (2.0 * alpha))


def illumination_target(x, y, pcfg):
    """Ground-truth illumination ``LP(invert(x, y))`` at full resolution."""
    return lowpass(invert_illumination(x, y, pcfg.alpha), pcfg.keep_fraction)


def stage1_sample(x, F, cfg, eps, coarse=None):
    """One posterior-sampled Stage-I pass; returns ``z`` at coarse resolution.

    ``coarse`` may carry a precomputed ``coarse_input(x, cfg)`` so repeated
    sampling does not redo the low-pass filter.
    """
    xc = coarse_input(x, cfg) if coarse is None else coarse
    counters.bump("stage1_forward")
    return F.forward(xc, eps)


def stage2_forward(x, z_up, G):
    """``G([x, z_up])`` with channel concatenation; ``z_up`` must match ``x`` in size."""
    x, z_up = nd.as_tensor(x), nd.as_tensor(z_up)
    if x.shape[-2:] != z_up.shape[-2:]:
        raise DimensionError(f"stage2_forward: x {x.shape} vs z {z_up.shape}; upsample z first")
    c_total = x.shape[-3] + z_up.shape[-3]
    if c_total != G.spec.in_channels:
        raise DimensionError(
            f"stage2_forward: G expects {G.spec.in_channels} channels, got {x.shape[-3]}+{z_up.shape[-3]}"
        )
    counters.bump("stage2_forward")
    return G.forward(nd.concat([x, z_up], axis=-3))


# -- data ----------------------------------------------------------------------------


class PairedData:
    """In-memory paired dataset: ``x`` (N,C,H,W) and ``targets`` (N,T,C,H,W)."""

    def __init__(self, x, targets):
        x = np.asarray(x)
        targets = np.asarray(targets)
        if targets.ndim == 4:
            targets = targets[:, None]
        if x.ndim != 4 or targets.ndim != 5 or targets.shape[0] != x.shape[0] or targets.shape[2:] != x.shape[1:]:
            raise DimensionError(f"inconsistent dataset shapes x {x.shape}, targets {targets.shape}")
        self.x = x
        self.targets = targets

    def __len__(self):
        return self.x.shape[0]

    @property
    def n_targets(self):
        return self.targets.shape[1]

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            raise ContractError("empty dataset")
        x = np.stack([np.asarray(s.x) for s in samples])
        n_t = min(len(s.targets) for s in samples)
        targets = np.stack([np.stack([np.asarray(t) for t in s.targets[:n_t]]) for s in samples])
        return cls(x, targets)


class PairSampler:
    """Minibatch sampler pairing each visited input with a uniformly drawn target.

    Inputs are visited in per-epoch shuffled order; each visit draws its
    target index independently, realising the one-to-many mapping.
    """

    def __init__(self, data, batch_size, seed, crop_size=None):
        self.data = data
        self.batch_size = batch_size
        self.rng = EpsilonSource.from_label(seed, "data").generator()
        self.crop_size = crop_size
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def _next_indices(self):
        out = []
        while len(out) < self.batch_size:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.data))
                self._pos = 0
            take = min(self.batch_size - len(out), len(self._order) - self._pos)
            out.extend(self._order[self._pos : self._pos + take])
            self._pos += take
        return np.asarray(out, dtype=np.int64)

    def next_batch(self):
        """Return ``(x, y, idx, target_idx)`` arrays for one minibatch."""
        idx = self._next_indices()
        tgt = self.rng.integers(0, self.data.n_targets, size=len(idx))
        x = self.data.x[idx]
        y = self.data.targets[idx, tgt]
        h, w = x.shape[-2:]
        cs = self.crop_size
        if cs is not None and cs < min(h, w):
            top = self.rng.integers(0, h - cs + 1, size=len(idx))
            left = self.rng.integers(0, w - cs + 1, size=len(idx))
            x = np.stack([x[i, :, t : t + cs, l : l + cs] for i, (t, l) in enumerate(zip(top, left))])
            y = np.stack([y[i, :, t : t + cs, l : l + cs] for i, (t, l) in enumerate(zip(top, left))])
        return x, y, idx, tgt


# -- training ------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    data: float
    kl: float
    lr: float

    @property
    def total(self):
        return self.data + self.kl


@dataclass
class TrainResult:
    model: object
    prior: Optional[AdaptivePrior] = None
    history: list = field(default_factory=list)
    kl_weight: float = 0.0

    def totals(self):
        return np.array([r.data + self.kl_weight * r.kl for r in self.history])


def _finite_or_raise(value, step):
    if not math.isfinite(value):
        raise DivergenceError(step)


def train_stage1(data, F, prior, cfg, pcfg, on_step: Callable = None):
    """Fit the coarse model ``F`` to ground-truth illumination at coarse resolution.

    Bayesian ``F`` minimises the minibatch ELBO against ``prior`` and updates
    the prior by EMA after each optimiser step (``prior.beta == 1`` keeps it
    fixed).  A deterministic ``F`` is trained on the data term alone, which
    gives the one-to-one baseline.  ``on_step(record)`` is called after every
    step.  Returns a :class:`TrainResult`; the recorded ``kl`` is unweighted.
    """
    dtype = F.dtype
    kl_weight = cfg.resolved_kl_weight(len(data))
    if F.bayesian and prior is None:
        prior = AdaptivePrior.from_posterior(F.weights, beta=cfg.ema_beta)
    result = TrainResult(F, prior, [], kl_weight if F.bayesian else 0.0)
    if cfg.iters_stage1 == 0:
        return result
    sampler = PairSampler(data, cfg.batch_size, cfg.seed, cfg.crop_size)
    opt = Adam(F.parameters(), lr=cfg.lr_init, clip_norm=cfg.clip_norm)
    eps = EpsilonSource.from_label(cfg.seed, "stage1")
    for step in range(cfg.iters_stage1):
        lr = cosine_lr(step, cfg.iters_stage1, cfg.lr_init, cfg.lr_final)
        x, y, _, _ = sampler.next_batch()
        x = Tensor(x, dtype=dtype)
        y = Tensor(y, dtype=dtype)
        try:
            xc = coarse_input(x, pcfg)
            zc = coarse_input(invert_illumination(x, y, pcfg.alpha), pcfg)
            with Tape() as tape:
                if F.bayesian:
                    terms = elbo_minibatch_loss(
                        xc, zc, F.apply, F.weights, prior, kl_weight, cfg.n_mc, eps, cfg.data_term
                    )
                    loss, data_v, kl_v = terms.total, terms.data.item(), terms.kl.item()
                else:
                    resid = F.forward(xc) - zc
                    err = nd.square(resid) if cfg.data_term == "l2" else nd.abs(resid)
                    loss = nd.sum(err) * (1.0 / xc.shape[0])
                    data_v, kl_v = loss.item(), 0.0
            _finite_or_raise(loss.item(), step)
            grads = backward(loss, tape, wrt=F.parameters())
        except NonFiniteError as exc:
            raise DivergenceError(step, f"non-finite value at step {step}: {exc}") from exc
        opt.step(grads, lr)
        if F.bayesian:
            prior = ema_update(prior, F.weights)
        rec = StepRecord(step, data_v, kl_v, lr)
        result.history.append(rec)
        if on_step is not None:
            on_step(rec)
        if step % 500 == 0:
            log.info("stage1 step %d data %.5g kl %.5g lr %.3g", step, data_v, kl_v, lr)
    result.prior = prior
    return result


def train_stage2(data, G, cfg, pcfg, on_batch: Callable = None, on_step: Callable = None):
    """Fit the refinement model ``G`` with an L1 loss.

    The illumination input is the ground-truth ``LP(invert(x, y))`` computed
    from each sampled pair; no Stage-I model is involved.  ``on_batch(x, y,
    z)`` receives the arrays actually fed to ``G``.
    """
    dtype = G.dtype
    result = TrainResult(G, None, [], 0.0)
    if cfg.iters_stage2 == 0:
        return result
    sampler = PairSampler(data, cfg.batch_size, cfg.seed, cfg.crop_size)
    opt = Adam(G.parameters(), lr=cfg.lr_init, clip_norm=cfg.clip_norm)
    for step in range(cfg.iters_stage2):
        lr = cosine_lr(step, cfg.iters_stage2, cfg.lr_init, cfg.lr_final)
        x, y, _, _ = sampler.next_batch()
        x = Tensor(x, dtype=dtype)
        y = Tensor(y, dtype=dtype)
        try:
            z = illumination_target(x, y, pcfg)
            if on_batch is not None:
                on_batch(x.data, y.data, z.data)
            with Tape() as tape:
                pred = stage2_forward(x, z, G)
                loss = nd.mean(nd.abs(pred - y))
            _finite_or_raise(loss.item(), step)
            grads = backward(loss, tape, wrt=G.parameters())
        except NonFiniteError as exc:
            raise DivergenceError(step, f"non-finite value at step {step}: {exc}") from exc
        opt.step(grads, lr)
        rec = StepRecord(step, loss.item(), 0.0, lr)
        result.history.append(rec)
        if on_step is not None:
            on_step(rec)
        if step % 500 == 0:
            log.info("stage2 step %d l1 %.5g lr %.3g", step, rec.data, lr)
    return result


def config_fields(cls):
    return {f.name: f for f in fields(cls)}
