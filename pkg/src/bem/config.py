"""Flat ``key = value`` run configuration.

Blank lines and text after ``#`` are ignored.  Every key must be a field of
:class:`RunConfig`; anything else is rejected with the offending key named.
"""

import typing
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .backbone import BackboneSpec
from .errors import BemError, ConfigError
from .inference import InferenceConfig
from .pipeline import PipelineConfig, TrainConfig
from .synthdata import DegradeParams


@dataclass
class RunConfig:
    # paths
    data_dir: str = "data"
    out_dir: str = "runs"
    # randomness
    seed: int = 0
    dtype: str = "float32"
    # synthetic data
    synth_count: int = 16
    synth_size: int = 32
    n_targets: int = 2
    exposure_spread: float = 0.3
    gamma: float = 2.0
    gain: float = 0.35
    noise_sigma: float = 0.01
    noisy_target_fraction: float = 0.0
    # pipeline
    r: str = "1/16"
    alpha: float = 0.025
    lp_keep_fraction: Optional[float] = None
    # backbones
    s1_base_channels: int = 8
    s1_levels: int = 1
    s2_base_channels: int = 16
    s2_levels: int = 2
    blocks_per_level: int = 1
    activation: str = "silu"
    # training
    batch_size: int = 8
    iters_stage1: int = 2000
    iters_stage2: int = 1000
    lr_init: float = 2e-4
    lr_final: float = 1e-6
    kl_weight: Optional[float] = None
    n_mc: int = 1
    crop_size: int = 32
    ema_beta: float = 0.999
    clip_norm: float = 1.0
    # inference
    K: int = 25
    mode: str = "mc"
    iqa: Optional[str] = None
    threads: int = 1

    def pipeline_config(self):
        return PipelineConfig(Fraction(self.r), self.alpha, self.lp_keep_fraction)

    def train_config(self):
        return TrainConfig(
            batch_size=self.batch_size,
            iters_stage1=self.iters_stage1,
            iters_stage2=self.iters_stage2,
            lr_init=self.lr_init,
            lr_final=self.lr_final,
            kl_weight=self.kl_weight,
            n_mc=self.n_mc,
            seed=self.seed,
            crop_size=self.crop_size,
            ema_beta=self.ema_beta,
            clip_norm=self.clip_norm,
        )

    def inference_config(self, **overrides):
        kw = dict(K=self.K, mode=self.mode, iqa=self.iqa, seed=self.seed, threads=self.threads)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        if kw["mode"] == "rank" and not kw["iqa"]:
            kw["iqa"] = "builtin"
        return InferenceConfig(**kw)

    def backbone_spec(self, stage):
        if stage == 1:
            return BackboneSpec(3, 3, self.s1_base_channels, self.s1_levels, self.blocks_per_level, self.activation)
        return BackboneSpec(6, 3, self.s2_base_channels, self.s2_levels, self.blocks_per_level, self.activation)

    def degrade_params(self):
        return DegradeParams(self.gamma, self.gain, self.noise_sigma)

    def validate(self):
        """Construct every derived object so invalid values fail before any work."""
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: expected float32 or float64, got {self.dtype!r}")
        try:
            self.pipeline_config()
            self.train_config()
            self.inference_config()
            self.backbone_spec(1)
            self.backbone_spec(2)
            self.degrade_params()
        except ConfigError:
            raise
        except (BemError, ValueError, ZeroDivisionError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _convert(name, ftype, raw):
    args = typing.get_args(ftype)
    optional = type(None) in args
    base = next(a for a in args if a is not type(None)) if optional else ftype
    if optional and raw.lower() in ("", "none"):
        return None
    try:
        if base is int:
            return int(raw)
        if base is float:
            return float(Fraction(raw)) if "/" in raw else float(raw)
        return raw
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {base.__name__}") from None


_FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_config(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} ({source}:{lineno})")
        values[key] = _convert(key, _FIELDS[key].type, raw)
    return RunConfig(**values).validate()


def load_config(path):
    if path is None:
        return RunConfig().validate()
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))
