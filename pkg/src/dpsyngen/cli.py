"""``dpsyngen`` command line.

Every subcommand accepts ``--seed``, ``--config`` and ``--out`` and writes a
``resolved_config.json`` plus its CSV/tensor outputs and figures into the
output directory (``--out``, else ``$DPSYNGEN_OUT``, else ``./runs``).

Failures print one JSON line to stderr, ``{"error": <kind>, "exit": <code>,
"message": ...}``, and exit with the code from EXIT_CODES.
"""

import argparse
import csv
import json
import math
import os
import sys
import time
import warnings

import numpy as np

from . import plotting
from .config import output_dir, resolve, write_resolved
from .data import load_dataset, read_tensor, tile, write_pgm, write_tensor
from .diffusion import DdpmSchedule
from .errors import (BudgetExhaustedError, ConfigurationError, DPSynGenError, IdxFormatError,
                     NotFoundError, NumericalError, OutOfRegionError, RejectedInputError)
from .evaluation import FeatureExtractor, cas, frechet_feature_distance, write_metrics_report
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .pipeline import (DataSource, PhaseConfig, SamplerGrid, TrainRun, band_from_ddpm_steps,
                       ddim_sample, forward_then_clean, stage_switch_sample, train_syngen)
from .privacy import DPConfig, calibrate_noise, compute_epsilon, rdp_account
from .rng import stream
from .stages import (COARSE_DEFAULTS, CLEANING_DEFAULTS, Variant, cleaning_thresholds,
                     coarse_thresholds, default_plan, make_curve, make_stage_plan)
from .synthgen import generate_batch
from .theorems import TheoremTrial, analytic_thm1_step, toy_sampler, verify_thm1, verify_thm2

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "missing-file": 4,
    "bad-input": 5,
    "numerical": 6,
    "budget-exhausted": 7,
    "not-found": 8,
    "out-of-region": 9,
    "internal": 1,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config seeds)")
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("--out", default=None, help="output directory")


def build_parser():
    parser = _Parser(prog="dpsyngen", description="DP diffusion training with synthetic stage data")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write dead-leaves or salt-pepper images")
    _common(p)
    p.add_argument("--kind", choices=["dead-leaves", "salt-pepper"], default="dead-leaves")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--p", type=float, default=None, help="salt-pepper white probability")
    p.add_argument("--size", type=int, default=None)

    p = sub.add_parser("thresholds", help="alpha_bar/SNR curve and default stage thresholds")
    _common(p)
    p.add_argument("--curve-out", default=None)

    p = sub.add_parser("train", help="two-phase training, one model per seed")
    _common(p)
    p.add_argument("--variant", choices=["coarse", "cleaning", "finetune", "baseline"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--epochs", type=float)
    p.add_argument("--non-private", action="store_true")
    p.add_argument("--dataset")

    p = sub.add_parser("sample", help="deterministic sampling from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("stage-switch", help="sample with one model inside a noise band")
    _common(p)
    p.add_argument("--context", required=True, help="checkpoint used inside the band")
    p.add_argument("--other", required=True, help="checkpoint used outside the band")
    p.add_argument("--band", type=float, nargs=2, metavar=("LO", "HI"),
                   help="ln(sigma) band (lo, hi]; default is between the stage thresholds")
    p.add_argument("--ddpm-steps", type=int, nargs=2, metavar=("LO", "HI"),
                   help="band given as DDPM step indices instead")
    p.add_argument("--n", type=int, default=None)

    p = sub.add_parser("clean-test", help="noise test images to tau then denoise")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float, default=math.log(0.05))
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--dataset")

    p = sub.add_parser("verify-theorems", help="Monte Carlo checks of both stage results")
    _common(p)
    p.add_argument("--draws", type=int, default=20_000)
    p.add_argument("--nu1", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--nu2", type=float, default=2.0)
    p.add_argument("--alphas", type=float, nargs="+", default=[0.999, 0.9997, 0.99997])

    p = sub.add_parser("evaluate", help="Frechet feature distance and CAS of a sample tensor")
    _common(p)
    p.add_argument("--samples", required=True)
    p.add_argument("--labels", default=None, help="tensor of generated labels (enables CAS)")
    p.add_argument("--method", default="model")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--dataset")

    p = sub.add_parser("account", help="calibrate a noise multiplier or account a fixed one")
    _common(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--q", type=float)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--noise-multiplier", type=float)
    return parser


# -- helpers ----------------------------------------------------------------

def _setup(args, **overrides):
    if args.config and not os.path.exists(args.config):
        raise FileNotFoundError(args.config)
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    cfg = resolve(args.config, {**overrides, "out": args.out})
    out = output_dir(cfg.out)
    write_resolved(cfg, os.path.join(out, "resolved_config.json"))
    return cfg, out


def _seed(cfg):
    return cfg.seeds[0]


def _emit(out, name, images):
    """Tensor container, PGM mosaic and PNG figure for a batch of images."""
    write_tensor(os.path.join(out, f"{name}.tensor"), images)
    if len(images):
        write_pgm(os.path.join(out, f"{name}.pgm"), tile(np.clip(images, 0, 1)))
        plotting.plot_samples(images[:64], os.path.join(out, f"{name}.png"))


def _load(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return load_checkpoint(path)[0]


def _plan(cfg):
    if cfg.variant == "baseline":
        return None
    pair = cfg.tau_pair()
    if pair is None:
        return default_plan(Variant(cfg.variant))
    return make_stage_plan(Variant(cfg.variant), *pair)


def _print_kv(**kw):
    print(" ".join(f"{k}={v}" for k, v in kw.items()))


# -- subcommands ------------------------------------------------------------

def cmd_gen_synthetic(args):
    cfg, out = _setup(args, image_size=args.size)
    kw = {"p": args.p} if args.kind == "salt-pepper" and args.p is not None else {}
    images = generate_batch(args.kind, args.n, _seed(cfg), cfg.image_size, **kw)
    _emit(out, f"synthetic_{args.kind}", images)
    _print_kv(kind=args.kind, n=len(images), out=out)


def cmd_thresholds(args):
    _, out = _setup(args)
    curve = make_curve()
    curve.write_csv(args.curve_out or os.path.join(out, "curve.csv"))
    clean = cleaning_thresholds(snap=1)
    exact = cleaning_thresholds()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        coarse = coarse_thresholds(curve)
    for w in caught:
        print(f"note: {w.message}", file=sys.stderr)
    alphas = [1.0 / (1.0 + math.exp(2 * t)) for t in clean]
    plotting.plot_curve(curve, os.path.join(out, "curve.png"), clean, coarse)
    print(f"cleaning tau=({clean[0]:g}, {clean[1]:g}) alpha_bar_targets=(0.9997, 0.998) "
          f"alpha_bar_at_tau=({alphas[0]:.5f}, {alphas[1]:.5f}) "
          f"exact_ln_sigma=({exact[0]:.4f}, {exact[1]:.4f})")
    print(f"coarse tau=({coarse[0]:g}, {coarse[1]:g})")


def _train_one(cfg, seed, ds):
    images = ds.images[:cfg.n_train]
    labels = ds.labels[:cfg.n_train]
    private = DataSource(images, labels, name="private")
    plan = _plan(cfg)
    synthetic = None
    if plan is not None:
        synthetic = DataSource(generate_batch(cfg.synthetic_kind, cfg.synthetic_n, seed,
                                              cfg.image_size), name="synthetic")
    dp = None
    if cfg.private:
        dp = DPConfig(cfg.epsilon, cfg.delta, cfg.clip, cfg.q,
                      max(1, int(math.ceil(cfg.private_epochs / cfg.q - 1e-9))),
                      cfg.noise_multiplier, cfg.multiplicity)
    run = TrainRun(
        private=private, plan=plan, synthetic=synthetic,
        phase1=PhaseConfig(lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.synthetic_epochs),
        phase2=PhaseConfig(lr=cfg.lr, batch_size=cfg.batch_size, early_stop=False),
        dp=dp, private_epochs=cfg.private_epochs, hidden=tuple(cfg.hidden),
        conditional=cfg.conditional, num_classes=int(labels.max()) + 1 if cfg.conditional else 0)
    return train_syngen(run, seed)


def cmd_train(args):
    cfg, out = _setup(args, variant=args.variant, epsilon=args.epsilon, epochs=args.epochs,
                      dataset=args.dataset, private=False if args.non_private else None)
    rows = []
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        ds = load_dataset(cfg.dataset, cfg.n_train, seed)
        res = _train_one(cfg, seed, ds)
        tag = f"{cfg.variant}_seed{seed}"
        save_checkpoint(os.path.join(out, f"{tag}.ckpt"), res.params,
                        extra={"variant": cfg.variant, "seed": seed})
        res.write_metrics(os.path.join(out, f"{tag}_metrics.csv"))
        plotting.plot_losses(res.metrics, os.path.join(out, f"{tag}_loss.png"))
        eps = res.ledger.epsilon(cfg.delta) if res.ledger.steps else 0.0
        if res.ledger.steps:
            res.ledger.write_csv(os.path.join(out, f"{tag}_ledger.csv"), cfg.delta)
            plotting.plot_ledger(res.ledger.per_step_rows(cfg.delta),
                                 os.path.join(out, f"{tag}_ledger.png"), cfg.epsilon)
        if cfg.n_samples:
            samples = ddim_sample(res.params, SamplerGrid(steps=cfg.sampler_steps), cfg.n_samples,
                                  stream(seed, "sampler"))
            _emit(out, f"{tag}_samples", samples)
        rows.append({"seed": seed, "variant": cfg.variant, "epsilon": eps,
                     "private_steps": res.ledger.steps, "seconds": time.perf_counter() - t0,
                     **{f"reads_{k}": v for k, v in res.reads.items()}})
        _print_kv(seed=seed, variant=cfg.variant, epsilon=f"{eps:.6g}", steps=res.ledger.steps)
    with open(os.path.join(out, "train_summary.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_sample(args):
    cfg, out = _setup(args, n_samples=args.n, sampler_steps=args.steps)
    params = _load(args.checkpoint)
    images = ddim_sample(params, SamplerGrid(steps=cfg.sampler_steps), cfg.n_samples,
                         stream(_seed(cfg), "sampler"))
    _emit(out, "samples", images)
    _print_kv(n=len(images), out=out)


def cmd_stage_switch(args):
    cfg, out = _setup(args, n_samples=args.n)
    if args.ddpm_steps:
        band = band_from_ddpm_steps(*args.ddpm_steps, DdpmSchedule.linear())
    else:
        band = tuple(args.band) if args.band else (CLEANING_DEFAULTS[1], COARSE_DEFAULTS[0])
    ctx, other = _load(args.context), _load(args.other)
    images = stage_switch_sample(ctx, other, band, SamplerGrid(steps=cfg.sampler_steps),
                                 cfg.n_samples, stream(_seed(cfg), "sampler"))
    _emit(out, "stage_switch", images)
    _print_kv(band_lo=f"{band[0]:.4f}", band_hi=f"{band[1]:.4f}", n=len(images))


def cmd_clean_test(args):
    cfg, out = _setup(args, dataset=args.dataset, n_samples=args.n)
    params = _load(args.checkpoint)
    ds = load_dataset(cfg.dataset, cfg.n_samples, 5_000 + _seed(cfg))
    x = ds.images[:cfg.n_samples]
    rec = forward_then_clean(params, x, args.tau, SamplerGrid(steps=cfg.sampler_steps),
                             stream(_seed(cfg), "sampler"))
    mse = float(np.mean((rec - x) ** 2))
    injected = math.exp(2 * args.tau)
    with open(os.path.join(out, "clean_test.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["tau", "mse", "injected_noise_energy", "ratio"])
        w.writerow([repr(args.tau), repr(mse), repr(injected), repr(mse / injected)])
    _emit(out, "clean_test", rec)
    _print_kv(tau=f"{args.tau:.4f}", mse=f"{mse:.6g}", ratio=f"{mse / injected:.4g}")


def cmd_verify_theorems(args):
    cfg, out = _setup(args)
    seed = _seed(cfg)
    size = cfg.image_size
    sched = DdpmSchedule.linear()
    bars, sp = toy_sampler("bars16", size), toy_sampler("salt-pepper", size)
    t1 = TheoremTrial(bars, sp, size * size, nu=args.nu1, gamma=args.gamma, draws=args.draws)
    r1 = verify_thm1(t1, sched, rng=seed)
    r1.write_csv(os.path.join(out, "thm1_exceedance.csv"))
    plotting.plot_exceedance(r1, os.path.join(out, "thm1_exceedance.png"), args.gamma)
    n_star = analytic_thm1_step(sched, math.sqrt(size * size), args.nu1)
    _print_kv(thm1_N=r1.N, analytic_N=n_star, identity_error=f"{r1.identity_error:.3g}")

    t2 = TheoremTrial(bars, sp, size * size, nu=args.nu2, draws=args.draws)
    report = verify_thm2(t2, args.alphas, rng=seed)
    report.write_csv(os.path.join(out, "thm2_bound.csv"))
    plotting.plot_bound_report(report, os.path.join(out, "thm2_bound.png"))
    for r in report.rows:
        _print_kv(alpha_bar=r.alpha_bar, empirical_p=f"{r.empirical_p:.4g}",
                  gamma_bound=f"{r.gamma_bound:.4g}", status=r.status)
    if not report.passed:
        raise NumericalError("cleaning-stage bound violated beyond Monte Carlo slack")


def cmd_evaluate(args):
    cfg, out = _setup(args, dataset=args.dataset, epsilon=args.epsilon)
    if not os.path.exists(args.samples):
        raise FileNotFoundError(args.samples)
    gen = read_tensor(args.samples)
    seed = _seed(cfg)
    train = load_dataset(cfg.dataset, cfg.n_train, seed)
    test = load_dataset(cfg.dataset, 1000, 5_000 + seed)
    extractor = FeatureExtractor.fit(train.images)
    row = {"method": args.method, "epsilon": cfg.epsilon if args.epsilon is not None else "",
           "seed": seed, "frechet_feature_distance": frechet_feature_distance(extractor, test.images, gen)}
    if args.labels:
        labels = read_tensor(args.labels).astype(int)
        rep = cas(gen, labels, test.images, test.labels, seed=seed)
        row.update(cas_logreg=rep.accuracy["logreg"], cas_mlp=rep.accuracy["mlp"])
    write_metrics_report(os.path.join(out, "metrics.csv"), [row])
    _print_kv(**{k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def cmd_account(args):
    cfg, out = _setup(args, epsilon=args.epsilon, delta=args.delta, q=args.q,
                      noise_multiplier=args.noise_multiplier)
    if args.noise_multiplier is None:
        sigma = calibrate_noise(cfg.epsilon, cfg.delta, cfg.q, args.steps)
    else:
        sigma = args.noise_multiplier
    eps = compute_epsilon(cfg.q, sigma, args.steps, cfg.delta)
    ledger = rdp_account(cfg.q, sigma, args.steps)
    _, order = ledger.epsilon_and_order(cfg.delta)
    with open(os.path.join(out, "account.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["q", "steps", "delta", "sigma_noise", "epsilon", "order"])
        w.writerow([repr(cfg.q), args.steps, repr(cfg.delta), repr(sigma), repr(eps), repr(order)])
    _print_kv(sigma_noise=f"{sigma:.6f}", epsilon=f"{eps:.6f}", order=order)


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "thresholds": cmd_thresholds,
    "train": cmd_train,
    "sample": cmd_sample,
    "stage-switch": cmd_stage_switch,
    "clean-test": cmd_clean_test,
    "verify-theorems": cmd_verify_theorems,
    "evaluate": cmd_evaluate,
    "account": cmd_account,
}


def _classify(exc):
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, ConfigurationError):
        return "config"
    if isinstance(exc, FileNotFoundError):
        return "missing-file"
    if isinstance(exc, BudgetExhaustedError):
        return "budget-exhausted"
    if isinstance(exc, NotFoundError):
        return "not-found"
    if isinstance(exc, OutOfRegionError):
        return "out-of-region"
    if isinstance(exc, NumericalError):
        return "numerical"
    if isinstance(exc, (RejectedInputError, IdxFormatError, DPSynGenError)):
        return "bad-input"
    return "internal"


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        COMMANDS[args.command](args)
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error line
        kind = _classify(exc)
        msg = str(exc) or type(exc).__name__
        if isinstance(exc, FileNotFoundError) and exc.filename:
            msg = f"no such file: {exc.filename}"
        print(json.dumps({"error": kind, "exit": EXIT_CODES[kind], "message": msg}), file=sys.stderr)
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
