"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BEMC" | u32 version | u8 stage | u32 len + UTF-8 JSON header
    | tensor table | [stage 1: f64 beta | u64 step | prior tensor table]
    | u32 CRC32 of every preceding byte

The JSON header holds the BackboneSpec, the model kind and the pipeline
settings, serialised with sorted keys so equal inputs give equal bytes.
A tensor table is ``u32 count`` followed by, per tensor, ``u16 name length,
name, u8 dtype code, u8 rank, u32 dims..., payload``.
"""

import json
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .backbone import BackboneSpec, Model, from_named_tensors
from .errors import CheckpointError
from .pipeline import PipelineConfig
from .variational import AdaptivePrior

MAGIC = b"BEMC"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    stage: int
    model: Model
    prior: Optional[AdaptivePrior] = None
    pipeline: Optional[PipelineConfig] = None


def _pack_table(tensors):
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            code, rank = self.unpack("<BB")
            if code not in CODE_DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dims = self.unpack(f"<{rank}I")
            dt = CODE_DTYPES[code]
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(dims)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
        return out


def _pipeline_dict(pcfg):
    if pcfg is None:
        return None
    return {"alpha": float(pcfg.alpha), "lp_keep_fraction": pcfg.lp_keep_fraction, "r": str(pcfg.r)}


def encode_checkpoint(stage, model, prior=None, pcfg=None):
    if stage not in (1, 2):
        raise CheckpointError(f"stage must be 1 or 2, got {stage}")
    if stage == 1 and model.bayesian and prior is None:
        raise CheckpointError("a Bayesian stage-1 checkpoint needs its prior")
    header = {
        "kind": model.kind,
        "pipeline": _pipeline_dict(pcfg),
        "spec": model.spec.to_dict(),
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IB", VERSION, stage), struct.pack("<I", len(hjson)), hjson]
    parts.append(_pack_table(model.named_tensors()))
    if stage == 1:
        if prior is None:
            parts.append(struct.pack("<B", 0))
        else:
            parts.append(struct.pack("<BdQ", 1, float(prior.beta), int(prior.step)))
            table = {}
            for name in prior.mu_ema:
                table[name + ".mu"] = prior.mu_ema[name]
                table[name + ".sigma"] = prior.sigma_ema[name]
            parts.append(_pack_table(table))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(buf):
    if len(buf) < len(MAGIC) + 9:
        raise CheckpointError("file too short to be a checkpoint")
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic; not a BEM checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch; checkpoint is corrupt")
    rd = _Reader(buf[:-4])
    rd.take(4)
    version, stage = rd.unpack("<IB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if stage not in (1, 2):
        raise CheckpointError(f"invalid stage tag {stage}")
    (hlen,) = rd.unpack("<I")
    try:
        header = json.loads(rd.take(hlen).decode("utf-8"))
        spec = BackboneSpec(**header["spec"])
        kind = header["kind"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    try:
        model = from_named_tensors(spec, kind, rd.table())
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"tensor table does not match the architecture: {exc}") from exc
    prior = None
    if stage == 1:
        (has_prior,) = rd.unpack("<B")
        if has_prior:
            beta, step = rd.unpack("<dQ")
            table = rd.table()
            names = [n[: -len(".mu")] for n in table if n.endswith(".mu")]
            prior = AdaptivePrior(
                {n: table[n + ".mu"] for n in names},
                {n: table[n + ".sigma"] for n in names},
                beta=beta,
                step=step,
            )
    if rd.pos != len(rd.buf):
        raise CheckpointError(f"{len(rd.buf) - rd.pos} trailing bytes before the CRC")
    pcfg = None
    if header.get("pipeline"):
        p = header["pipeline"]
        pcfg = PipelineConfig(Fraction(p["r"]), p["alpha"], p["lp_keep_fraction"])
    return Checkpoint(stage, model, prior, pcfg)


def save_checkpoint(path, stage, model, prior=None, pcfg=None):
    data = encode_checkpoint(stage, model, prior, pcfg)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_checkpoint(path, expect_stage=None):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ck = decode_checkpoint(buf)
    if expect_stage is not None and ck.stage != expect_stage:
        raise CheckpointError(f"{path} is a stage-{ck.stage} checkpoint, expected stage {expect_stage}")
    return ck
