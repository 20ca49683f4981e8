"""Procedural one-to-many paired datasets and binary PPM I/O."""

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DomainError, PPMFormatError, UnsupportedDepthError
from .variational import EpsilonSource

MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class DegradeParams:
    gamma: float = 2.0
    gain: float = 0.35
    noise_sigma: float = 0.01
    color_cast: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.gain <= 1:
            raise DomainError(f"gain must lie in (0, 1], got {self.gain}")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be non-negative")
        if len(self.color_cast) != 3 or min(self.color_cast) <= 0:
            raise DomainError(f"color_cast must be three positive gains, got {self.color_cast}")


@dataclass
class Sample:
    x: np.ndarray
    targets: list
    scene_id: str = ""
    variant_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.targets:
            raise ContractError("a sample needs at least one target")
        for t in self.targets:
            if np.shape(t) != np.shape(self.x):
                raise ContractError(f"target shape {np.shape(t)} differs from input {np.shape(self.x)}")


def _scene(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, off = rng.uniform(-1, 1, size=3)
        img[c] = off + a * xx + b * yy
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, size=3)[:, None, None]
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, size - 4, size=2)
            h, w = rng.integers(3, size // 2 + 1, size=2)
            mask = (yy * (size - 1) >= y0) & (yy * (size - 1) < y0 + h)
            mask &= (xx * (size - 1) >= x0) & (xx * (size - 1) < x0 + w)
        else:
            cy, cx = rng.uniform(0, 1, size=2)
            rad = rng.uniform(0.08, 0.3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad * rad
        img = np.where(mask[None], color, img)
    img = img + 0.03 * rng.standard_normal(img.shape)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def gen_clean(seed, count, size):
    """``count`` deterministic (3, size, size) scenes stretched to span [0, 1]."""
    if size < 16:
        raise ContractError(f"size must be >= 16, got {size}")
    rng = EpsilonSource.from_label(seed, "clean").generator()
    return [_scene(rng, size) for _ in range(count)]


def degrade(y, p, eps):
    """``clamp(cast * gain * y**gamma + N(0, sigma^2), 0, 1)``."""
    y = np.asarray(y, dtype=np.float64)
    cast = np.asarray(p.color_cast, dtype=np.float64).reshape((-1,) + (1,) * (y.ndim - 1))
    x = cast * p.gain * np.power(y, p.gamma)
    if p.noise_sigma > 0:
        x = x + p.noise_sigma * eps.draw(y.shape, np.float64)
    return np.clip(x, 0.0, 1.0)


def target_gains(n_targets, spread):
    """Exposure gains ``1-s .. 1+s``, rescaled so the brightest is 1 and nothing clips."""
    if n_targets < 1:
        raise ContractError("n_targets must be >= 1")
    if not 0 <= spread < 1:
        raise DomainError(f"exposure spread must lie in [0, 1), got {spread}")
    if n_targets == 1:
        return np.ones(1)
    return np.linspace(1.0 - spread, 1.0 + spread, n_targets) / (1.0 + spread)


def gen_one_to_many(
    seed,
    count,
    size,
    n_targets=2,
    exposure_spread=0.3,
    params=None,
    noisy_target_fraction=0.0,
    noisy_target_sigma=0.05,
):
    """Degraded inputs each paired with ``n_targets`` differently exposed references.

    A fraction ``noisy_target_fraction`` of all targets receives extra
    Gaussian noise, imitating low-quality references in real datasets.
    """
    params = params or DegradeParams()
    clean = gen_clean(seed, count, size)
    eps = EpsilonSource.from_label(seed, "degrade")
    noise_rng = EpsilonSource.from_label(seed, "target-noise").generator()
    gains = target_gains(n_targets, exposure_spread)
    samples = []
    for i, y in enumerate(clean):
        x = degrade(y, params, eps)
        targets = []
        for g in gains:
            t = y * g
            if noisy_target_fraction > 0 and noise_rng.random() < noisy_target_fraction:
                t = np.clip(t + noisy_target_sigma * noise_rng.standard_normal(t.shape), 0.0, 1.0)
            targets.append(t)
        samples.append(Sample(x, targets, f"scene{i:05d}", [f"t{j}" for j in range(len(gains))]))
    return samples


# -- PPM -------------------------------------------------------------------------------

_WS = b" \t\n\r\v\f"


def quantize(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img):
    """Bytes of a binary P6 file for a (3,H,W) or (1,H,W) image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ContractError(f"PPM needs a (3,H,W) or (1,H,W) image, got {img.shape}")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + quantize(img).transpose(1, 2, 0).tobytes()


def write_ppm(path, img):
    data = encode_ppm(img)
    with open(path, "wb") as fh:
        fh.write(data)


def _header_token(buf, pos):
    while pos < len(buf):
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c in _WS:
            pos += 1
        else:
            break
    m = re.compile(rb"[0-9]+").match(buf, pos)
    if m is None:
        raise PPMFormatError("expected an unsigned integer in the header", pos)
    return int(m.group()), m.end()


def decode_ppm(buf):
    """Decode P6 bytes to a float64 (3,H,W) array in [0, 1]."""
    if buf[:2] != b"P6":
        raise PPMFormatError("missing P6 magic", 0)
    w, pos = _header_token(buf, 2)
    h, pos = _header_token(buf, pos)
    maxval, pos = _header_token(buf, pos)
    if maxval > 255:
        raise UnsupportedDepthError(f"maxval {maxval} is not 8-bit; only maxval <= 255 is supported", pos)
    if maxval < 1 or w < 1 or h < 1:
        raise PPMFormatError(f"invalid header values width={w} height={h} maxval={maxval}", pos)
    if pos >= len(buf) or buf[pos : pos + 1] not in _WS:
        raise PPMFormatError("expected a single whitespace byte after maxval", pos)
    pos += 1
    need = 3 * w * h
    if len(buf) - pos < need:
        raise PPMFormatError(f"truncated payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / maxval


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


# -- on-disk datasets -----------------------------------------------------------------


def write_dataset(samples, out_dir):
    """Write PPM files plus a JSON-lines manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        x_name = f"{s.scene_id}_x.ppm"
        write_ppm(out / x_name, s.x)
        t_names = []
        for j, t in enumerate(s.targets):
            vid = s.variant_ids[j] if j < len(s.variant_ids) else f"t{j}"
            name = f"{s.scene_id}_{vid}.ppm"
            write_ppm(out / name, t)
            t_names.append(name)
        rec = {"scene_id": s.scene_id, "x_path": x_name, "target_paths": t_names}
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    manifest = out / MANIFEST_NAME
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))
    return manifest


def read_manifest(path):
    """Parse a manifest into records with paths resolved against its directory."""
    path = Path(path)
    base = path.parent
    recs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                recs.append(
                    {
                        "scene_id": rec["scene_id"],
                        "x_path": base / rec["x_path"],
                        "target_paths": [base / t for t in rec["target_paths"]],
                    }
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ContractError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return recs


def load_dataset(path):
    return [
        Sample(
            read_ppm(r["x_path"]),
            [read_ppm(t) for t in r["target_paths"]],
            r["scene_id"],
            [os.path.splitext(os.path.basename(t))[0] for t in r["target_paths"]],
        )
        for r in read_manifest(path)
    ]
