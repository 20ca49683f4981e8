"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 training
diverged, 4 checkpoint missing/corrupt/mismatched, 5 file I/O problem.
"""

import argparse
import csv
import io
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import backbone, checkpoint, inference, metrics, pipeline, synthdata
from . import ndtensor as nd
from .config import load_config
from .errors import (
    BemError,
    CheckpointError,
    ConfigError,
    DivergenceError,
    MetricError,
    PPMFormatError,
)
from .ndtensor import Tensor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECKPOINT = 4
EXIT_IO = 5

log = logging.getLogger("bem")


class CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _fmt(v):
    """Shortest round-tripping text for a float; ``inf`` for the PSNR sentinel."""
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _manifest_path(cfg, override=None):
    if override:
        return Path(override)
    return Path(cfg.data_dir) / synthdata.MANIFEST_NAME


def _ckpt_path(cfg, stage, override=None):
    return Path(override) if override else Path(cfg.out_dir) / f"stage{stage}.bemc"


# -- commands ------------------------------------------------------------------------


def cmd_synth(cfg, args):
    samples = synthdata.gen_one_to_many(
        cfg.seed,
        cfg.synth_count,
        cfg.synth_size,
        cfg.n_targets,
        cfg.exposure_spread,
        cfg.degrade_params(),
        cfg.noisy_target_fraction,
    )
    out = Path(args.out or cfg.data_dir)
    manifest = synthdata.write_dataset(samples, out)
    print(manifest)
    return EXIT_OK


def cmd_train(cfg, args):
    stage = args.stage
    tcfg = cfg.train_config()
    pcfg = cfg.pipeline_config()
    samples = synthdata.load_dataset(_manifest_path(cfg, args.manifest))
    if not samples:
        raise CommandError(EXIT_IO, "dataset is empty; nothing to train on")
    data = pipeline.PairedData.from_samples(samples)
    kind = "deterministic" if (stage == 2 or args.baseline) else "bayesian"
    model = backbone.build(cfg.backbone_spec(stage), kind, seed=cfg.seed, dtype=cfg.dtype)
    ckpt = _ckpt_path(cfg, stage, args.out)
    log_path = Path(args.log) if args.log else ckpt.with_suffix(".csv")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "data", "kl", "lr"])

        def on_step(rec):
            writer.writerow([rec.step, _fmt(rec.data), _fmt(rec.kl), _fmt(rec.lr)])

        if stage == 1:
            result = pipeline.train_stage1(data, model, None, tcfg, pcfg, on_step=on_step)
        else:
            result = pipeline.train_stage2(data, model, tcfg, pcfg, on_step=on_step)
    checkpoint.save_checkpoint(ckpt, stage, model, result.prior, pcfg)
    print(ckpt)
    return EXIT_OK


def _load_models(cfg, args):
    ck1 = checkpoint.load_checkpoint(_ckpt_path(cfg, 1, args.stage1), expect_stage=1)
    ck2 = checkpoint.load_checkpoint(_ckpt_path(cfg, 2, args.stage2), expect_stage=2)
    if ck1.model.spec.out_channels + 3 != ck2.model.spec.in_channels:
        raise CheckpointError("stage-1 output channels do not match the stage-2 input")
    if ck1.pipeline and ck2.pipeline and ck1.pipeline != ck2.pipeline:
        raise CheckpointError(f"stage checkpoints disagree on pipeline settings: {ck1.pipeline} vs {ck2.pipeline}")
    pcfg = ck1.pipeline or cfg.pipeline_config()
    return ck1.model, ck2.model, pcfg


def _candidate_preview(z, alpha):
    # z of any target in [0, 1] is bounded by 1/sqrt(alpha); map that range onto [0, 1]
    return np.asarray(z) * math.sqrt(alpha)


def cmd_infer(cfg, args):
    icfg = cfg.inference_config(K=args.k, mode=args.mode, iqa=args.iqa, threads=args.threads)
    F, G, pcfg = _load_models(cfg, args)
    x = synthdata.read_ppm(args.inp)
    with nd.precision(F.dtype):
        x_t = Tensor(x, dtype=F.dtype)
        res = inference.run_inference(x_t, F, G, pcfg, icfg)
        cs = res.candidates
        if args.dump_candidates:
            out = Path(args.dump_candidates)
            out.mkdir(parents=True, exist_ok=True)
            if cs.scores is None:
                metric = metrics.get_metric(icfg.iqa or "builtin")
                cs.scores = inference.score_candidates(x_t, cs, pcfg, metric)
            for k, z in enumerate(cs.z):
                synthdata.write_ppm(out / f"candidate_{k:03d}.ppm", _candidate_preview(z, pcfg.alpha))
            with open(out / "scores.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["k", "score", "selected"])
                for k, s in enumerate(cs.scores):
                    w.writerow([k, _fmt(s), int(k == cs.selected)])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    synthdata.write_ppm(args.out, res.image.data)
    print(args.out)
    return EXIT_OK


def cmd_eval(cfg, args):
    recs = synthdata.read_manifest(args.ref)
    if not recs:
        raise CommandError(EXIT_IO, f"manifest {args.ref} lists no samples")
    pred_dir = Path(args.pred)
    missing = [str(pred_dir / f"{r['scene_id']}.ppm") for r in recs if not (pred_dir / f"{r['scene_id']}.ppm").is_file()]
    missing += [str(p) for r in recs for p in r["target_paths"] if not Path(p).is_file()]
    if missing:
        raise CommandError(EXIT_IO, "missing files:\n  " + "\n  ".join(missing))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scene_id", "target", "psnr", "ssim"])
    best_p, best_s = [], []
    for r in recs:
        pred = synthdata.read_ppm(pred_dir / f"{r['scene_id']}.ppm")
        ps, ss = [], []
        for t in r["target_paths"]:
            ref = synthdata.read_ppm(t)
            ps.append(metrics.psnr(pred, ref))
            ss.append(metrics.ssim(pred, ref))
            w.writerow([r["scene_id"], Path(t).stem, _fmt(ps[-1]), _fmt(ss[-1])])
        best_p.append(max(ps))
        best_s.append(max(ss))
        w.writerow([r["scene_id"], "best", _fmt(best_p[-1]), _fmt(best_s[-1])])
    w.writerow(["mean", "best", _fmt(np.mean(best_p)), _fmt(np.mean(best_s))])
    text = buf.getvalue()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def bench_timings(cfg, k, size, seed=0, repeats=1):
    """Seconds for BEM with ``k`` candidates, a naive full-resolution BNN, and one DNN pass."""
    pcfg = cfg.pipeline_config()
    icfg = inference.InferenceConfig(K=k, mode="mc", seed=seed)
    F = backbone.build(cfg.backbone_spec(1), "bayesian", seed=seed, dtype=cfg.dtype)
    G = backbone.build(cfg.backbone_spec(2), "deterministic", seed=seed, dtype=cfg.dtype)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0, 0.3, size=(3, size, size)), dtype=cfg.dtype)

    def bem():
        inference.enhance(x, F, G, pcfg, icfg)

    def naive():
        # every candidate runs the Bayesian stage and the refinement at full resolution
        xl = pipeline.lowpass(x, pcfg.keep_fraction)
        for j in range(k):
            z = F.forward(xl, inference.candidate_stream(seed, j))
            pipeline.stage2_forward(x, z, G)

    def dnn():
        pipeline.stage2_forward(x, pipeline.lowpass(x, pcfg.keep_fraction), G)

    out = {}
    for name, fn in (("bem", bem), ("naive_bnn", naive), ("dnn", dnn)):
        fn()  # warm-up: JIT compilation and caches
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        out[name] = best
    return out


def cmd_bench(cfg, args):
    with nd.precision(cfg.dtype):
        t = bench_timings(cfg, args.k, args.size, cfg.seed, args.repeats)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "k", "size", "seconds", "ratio_to_bem"])
    for name in ("bem", "naive_bnn", "dnn"):
        w.writerow([name, args.k, args.size, f"{t[name]:.6f}", f"{t[name] / t['bem']:.4f}"])
    text = buf.getvalue()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bem", description="Two-stage Bayesian image enhancement")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic one-to-many dataset")
    s.add_argument("--out", help="output directory (default: data_dir from the config)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train one stage")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--manifest", help="dataset manifest (default: data_dir/manifest.jsonl)")
    s.add_argument("--out", help="checkpoint path (default: out_dir/stageN.bemc)")
    s.add_argument("--log", help="per-step CSV log (default: checkpoint path with .csv)")
    s.add_argument("--baseline", action="store_true", help="stage 1 only: deterministic network")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="enhance one PPM image")
    s.add_argument("--mode", choices=inference.MODES)
    s.add_argument("--k", type=int, help="number of candidates (default from config, 25)")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dump-candidates", metavar="DIR")
    s.add_argument("--threads", type=int)
    s.add_argument("--iqa", help=f"rank metric; registered: {', '.join(metrics.available_metrics())}")
    s.add_argument("--stage1", help="stage-1 checkpoint (default: out_dir/stage1.bemc)")
    s.add_argument("--stage2", help="stage-2 checkpoint (default: out_dir/stage2.bemc)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of predictions against a manifest")
    s.add_argument("--pred", required=True, help="directory of <scene_id>.ppm predictions")
    s.add_argument("--ref", required=True, help="reference manifest")
    s.add_argument("--out", help="also write the CSV here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="time BEM against a naive BNN and a DNN")
    s.add_argument("--k", type=int, default=25)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--out", help="also write the CSV here")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        with nd.precision(cfg.dtype):
            return args.func(cfg, args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, PPMFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MetricError, BemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
