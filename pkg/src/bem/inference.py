"""K-candidate inference: sample coarse illuminations, aggregate or rank, refine once."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import ndtensor as nd
from .errors import ConfigError, ContractError, MetricError
from .metrics import get_metric
from .ndtensor import Tensor
from .pipeline import coarse_input, compose_illumination, stage1_sample, stage2_forward
from .variational import EpsilonSource

MODES = ("mc", "rank")


@dataclass
class InferenceConfig:
    K: int = 25
    mode: str = "mc"
    iqa: Optional[str] = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "rank" and not self.iqa:
            raise ConfigError("rank mode needs an IQA metric name")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class CandidateSet:
    """K coarse illumination samples, stacked on axis 0."""

    z: np.ndarray
    streams: list
    scores: Optional[np.ndarray] = None
    selected: Optional[int] = None

    def __post_init__(self):
        if self.scores is not None and len(self.scores) != len(self.z):
            raise ContractError("one score per candidate required")

    def __len__(self):
        return len(self.z)


def candidate_stream(seed, k):
    return EpsilonSource.from_label(seed, f"infer:{k}")


def sample_candidates(x, F, pcfg, icfg, coarse=None):
    """Draw ``icfg.K`` independent Stage-I samples.

    Candidate ``k`` always uses stream ``infer:k``, so results do not depend
    on ``icfg.threads``.
    """
    x = nd.as_tensor(x)
    xc = coarse_input(x, pcfg) if coarse is None else coarse
    sources = [candidate_stream(icfg.seed, k) for k in range(icfg.K)]

    def one(src):
        return stage1_sample(x, F, pcfg, src, coarse=xc).data

    if icfg.threads > 1 and icfg.K > 1:
        with ThreadPoolExecutor(max_workers=icfg.threads) as pool:
            zs = list(pool.map(one, sources))
    else:
        zs = [one(s) for s in sources]
    return CandidateSet(np.stack(zs), [s.stream for s in sources])


def mc_aggregate(cs):
    """Elementwise mean of the candidates.

    Values are sorted along the candidate axis and summed as offsets from the
    minimum, which makes the result independent of candidate order and exact
    when all candidates agree.
    """
    if len(cs) == 0:
        raise ContractError("cannot aggregate an empty candidate set")
    zs = np.sort(np.asarray(cs.z), axis=0)
    base = zs[0]
    return Tensor(base + (zs - base).sum(axis=0) / len(zs), dtype=zs.dtype)


def select_index(scores):
    """Index of the highest score, lowest index on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(scores))
    if bad.size:
        raise MetricError(f"non-finite IQA score for candidate {int(bad[0])}")
    return int(np.argmax(scores))


def score_candidates(x, cs, pcfg, metric, coarse=None):
    """Score each candidate's coarse composite ``(x_c + alpha z_k) * z_k``."""
    xc = coarse_input(x, pcfg) if coarse is None else coarse
    scores = []
    for k, z in enumerate(cs.z):
        s = float(metric(compose_illumination(xc, Tensor(z, dtype=z.dtype), pcfg.alpha).data))
        if not math.isfinite(s):
            raise MetricError(f"non-finite IQA score for candidate {k}")
        scores.append(s)
    return np.asarray(scores)


def rank_select(x, cs, pcfg, metric, coarse=None):
    """Return the candidate whose coarse composite scores highest under ``metric``."""
    if isinstance(metric, str):
        metric = get_metric(metric)
    cs.scores = score_candidates(x, cs, pcfg, metric, coarse)
    cs.selected = select_index(cs.scores)
    z = cs.z[cs.selected]
    return Tensor(z, dtype=z.dtype)


class Enhancement(NamedTuple):
    image: Tensor
    candidates: CandidateSet
    z_star: Tensor


def run_inference(x, F, G, pcfg, icfg, metric=None):
    """Full K-candidate inference returning the output and its intermediates."""
    x = nd.as_tensor(x)
    if x.ndim != 3:
        raise ContractError(f"expected a single (C,H,W) image, got {x.shape}")
    xc = coarse_input(x, pcfg)
    cs = sample_candidates(x, F, pcfg, icfg, coarse=xc)
    if icfg.mode == "mc":
        z_star = mc_aggregate(cs)
    else:
        z_star = rank_select(x, cs, pcfg, metric or icfg.iqa, coarse=xc)
    z_up = nd.bilinear_resize(z_star, x.shape[-2], x.shape[-1])
    y_hat = stage2_forward(x, z_up, G)
    return Enhancement(y_hat, cs, z_star)


def enhance(x, F, G, pcfg, icfg, metric=None):
    """Enhanced image: K coarse samples, one aggregate, one full-resolution refinement."""
    return run_inference(x, F, G, pcfg, icfg, metric).image
