import argparse
import logging
import sys
from pathlib import Path

import numpy as np

import evaluate
import oracles
import sampler
import schedule
import trainer
from config import load_config
from constants import EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING, EXIT_OK, EXIT_THRESHOLD
from denoiser import POSTERIOR_VARIANCE, PREDICT_X0, init_params
from errors import DDPMError, MissingArtifactError, TrainingDivergenceError
from logger import setup_logging
from records import write_json

logger = logging.getLogger("main")


def build_parser():
    parser = argparse.ArgumentParser(prog="ddpm", description="Desk-scale denoising diffusion toolkit")
    parser.add_argument("--config", default=None, help="Run config JSON (default: ./config.json)")
    parser.add_argument("--seed", type=int, default=None, help="Override the config seed")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="Write the per-level schedule CSV")
    p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="Train a denoiser (or write an oracle checkpoint)")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--resume", default=None, help="Checkpoint to resume from")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("sample", help="Ancestral sampling from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--out", default=None)
    p.add_argument("--denoise-final", action="store_true")
    p.add_argument("--trace", default=None, help="Directory for per-level trace CSVs")
    p.add_argument("--svg", default=None, help="SVG scatter path (D = 2 only)")

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", default=None)
    p.add_argument("--metrics", nargs="+", default=None)
    return parser


def _overrides(args):
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        out["train"] = {"steps": args.steps}
    if args.log_level:
        out["log_level"] = args.log_level
    return out


def cmd_schedule(args, cfg):
    s = cfg.schedule
    path = Path(args.out) if args.out else Path(cfg.output_dir) / "schedule.csv"
    schedule.export_csv(s, path)
    print(f"{s.describe()}: SNR(1)={s.snr_at(1):.6g} SNR(T)={s.snr_at(s.T):.6g}")
    print(f"Lambda_1={s.signal(1):.6g} Lambda_T={s.signal(s.T):.6g}")
    print(f"Wrote {path}")
    return EXIT_OK


def _oracle(cfg):
    kind, m = cfg.model.kind, cfg.model
    s, spec = cfg.schedule, cfg.data
    if kind == "mixture_oracle":
        return oracles.MixtureOracle(spec, s, m.mode, m.variance_mode)
    if kind == "unit_gaussian_oracle":
        return oracles.UnitGaussianOracle(s, spec.dim, m.mode, m.variance_mode)
    if kind == "linear":
        return oracles.LinearPredictor(s, m.slopes if m.slopes is not None else s.cum_lambdas, spec.dim, m.variance_mode)
    return oracles.ZeroPredictor(s, spec.dim, m.mode, m.variance_mode)


def cmd_train(args, cfg):
    s, spec = cfg.schedule, cfg.data
    resume = trainer.load_checkpoint(args.resume) if args.resume else None
    if args.run_dir:
        run_dir = Path(args.run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    elif resume is not None:
        run_dir = Path(args.resume).parent
    else:
        run_dir = trainer.make_run_dir(cfg.output_dir, cfg.seed)
    write_json(run_dir / "config.json", cfg.raw)

    if cfg.model.kind != "network":
        model = _oracle(cfg)
        path = trainer.save_checkpoint(run_dir / trainer.FINAL_CHECKPOINT, model, None, 0, None, s, spec)
        print(f"Wrote {cfg.model.kind} checkpoint {path}")
        return EXIT_OK

    m = cfg.model
    init = init_params(spec.dim, s.T, np.random.default_rng(cfg.seed), m.hidden, m.embed_dim, m.mode, m.variance_mode)
    logger.info("Training %d parameters with %s for %d steps", init.size, cfg.train.objective, cfg.train.steps)
    result = trainer.train(cfg.train, spec, s, init, run_dir=run_dir, resume=resume)
    if result.losses:
        print(f"Final loss {result.losses[-1]:.6g} after {cfg.train.steps} steps")
    print(f"Run directory {run_dir}")
    return EXIT_OK


def cmd_sample(args, cfg):
    ckpt = trainer.load_checkpoint(args.checkpoint)
    rng = np.random.default_rng([cfg.seed, 2])
    denoise_final = args.denoise_final or cfg.eval.denoise_final
    trace = sampler.generate(ckpt.sampling_model, ckpt.schedule, args.n, rng, keep_trace=args.trace is not None,
                             denoise_final=denoise_final, seed=cfg.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "samples.csv"
    sampler.export_samples(trace, out)
    if args.trace:
        sampler.export_trace(trace, Path(args.trace))
    if args.svg:
        if ckpt.spec.dim == 2:
            evaluate.write_svg_scatter(args.svg, trace.samples)
        else:
            logger.warning("Skipping --svg %s: scatter plots need D = 2, data has D = %d", args.svg, ckpt.spec.dim)
    print(f"Wrote {args.n} samples to {out}")
    return EXIT_OK


def _reference_model(ckpt, seed):
    """A second parameter setting for the ELBO constancy check."""
    model = ckpt.model
    if hasattr(model, "num_levels"):
        hidden = tuple(W.shape[1] for W in model.weights[:-1])
        return init_params(model.data_dim, model.num_levels, np.random.default_rng([seed, 3]), hidden,
                           model.embed_dim, model.mode, model.variance_mode)
    return oracles.ZeroPredictor(ckpt.schedule, ckpt.spec.dim, model.mode, model.variance_mode)


def cmd_eval(args, cfg):
    ckpt = trainer.load_checkpoint(args.checkpoint)
    model, s, spec = ckpt.sampling_model, ckpt.schedule, ckpt.spec
    ev = cfg.eval
    metrics = tuple(args.metrics) if args.metrics else ev.metrics
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    report = evaluate.MetricReport(metadata={
        "seed": cfg.seed, "n": ev.n_samples, "schedule": s.describe(),
        "checkpoint": str(args.checkpoint), "step": ckpt.step,
    })

    samples = None
    if "moments" in metrics or "histogram_kl" in metrics:
        trace = sampler.generate(model, s, ev.n_samples, np.random.default_rng([cfg.seed, 2]),
                                 keep_trace=False, denoise_final=ev.denoise_final, seed=cfg.seed)
        samples = trace.samples
        if ev.svg and spec.dim == 2:
            evaluate.write_svg_scatter(out_dir / "samples.svg", samples)
    if "moments" in metrics:
        moments = evaluate.moment_errors(samples, spec)
        report.add("moment_mean_z", np.max(np.abs(moments["mean_error"]) / moments["mean_se"]))
        report.add("moment_var_z", np.max(np.abs(moments["var_error"]) / moments["var_se"]))
    if "histogram_kl" in metrics:
        report.add("histogram_kl", evaluate.histogram_kl(samples, spec, ev.bins, ev.range))
    if "score_error" in metrics:
        sweep = evaluate.score_error_sweep(model, spec, s, ev.score_levels)
        for t, rmse in sweep.items():
            report.add(f"score_rmse_t{t}", rmse)
        report.add("score_rmse", max(sweep.values()))
    if "endpoint_invariance" in metrics:
        ep = ev.endpoint
        pairs = [evaluate.matched_schedules(T, ep.beta1, ep.beta_end) for T in ep.T_values]
        gaps = evaluate.endpoint_invariance_gap(
            lambda sched: oracles.MixtureOracle(spec, sched, PREDICT_X0, POSTERIOR_VARIANCE),
            spec, pairs, ep.method, ep.n, cfg.seed,
        )
        evaluate.export_endpoint_gaps(gaps, out_dir / "endpoint_gaps.csv")
        report.add("endpoint_relative_gap", gaps[-1].relative_gap)
        report.add("endpoint_increases", sum(b.gap > a.gap for a, b in zip(gaps, gaps[1:])))
    if "elbo_constancy" in metrics:
        result = evaluate.elbo_constancy_gap(model, _reference_model(ckpt, cfg.seed), spec, s, ev.elbo_n, cfg.seed)
        report.add("elbo_constancy_gap", result.gap)
        # identical models give identical rows, so a zero stderr only comes with a zero gap
        report.add("elbo_constancy_se", result.gap / result.stderr if result.stderr > 0 else 0.0)

    report.write_json(out_dir / "report.json")
    report.append_csv(out_dir / "summary.csv")
    for name, value in sorted(report.metrics.items()):
        print(f"{name}: {value:.6g}")
    thresholds = {"endpoint_increases": 0, **ev.thresholds}
    failed = report.violations(thresholds)
    if failed:
        print(f"Threshold violated: {', '.join(failed)}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


COMMANDS = {"schedule": cmd_schedule, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args), use_env=args.seed is None)
    except DDPMError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    setup_logging(cfg.log_level, cfg.log_dir)

    try:
        return COMMANDS[args.command](args, cfg)
    except MissingArtifactError as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except TrainingDivergenceError as exc:
        logger.error("%s", exc)
        return EXIT_DIVERGED
    except DDPMError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
