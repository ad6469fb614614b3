"""Command-line front end: train, eval, ablate, sweep, theory, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from tmur import evaluation as ev
from tmur.datasets import (
    DataError,
    SyntheticSpec,
    add_gaussian_noise,
    generate_synthetic,
    load_manifest,
    perturb_view_strength,
    random_view_factors,
    save_dataset,
    stratified_split,
)
from tmur.engine import ShapeError
from tmur.evidential import DomainError, ScaleFamily
from tmur.model import ModelConfig, TMURModel
from tmur.objectives import ConfigError, LossWeights
from tmur.theory import (
    XOR_DEMO_SPEC,
    CheckFailure,
    check_theorem1,
    check_theorem2,
    log_grid,
    routing_gap_learning_demo,
    xor_instance,
)
from tmur.training import PROTOCOL_SEEDS, TrainConfig, fit

log = logging.getLogger("tmur")

EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed_list(args) -> list[int]:
    if getattr(args, "seeds", None):
        if args.seed is not None:
            raise UsageError("--seed and --seeds are mutually exclusive")
        if args.seeds == "five":
            return list(PROTOCOL_SEEDS)
        return _ints(args.seeds)
    return [args.seed if args.seed is not None else PROTOCOL_SEEDS[0]]


# ------------------------------------------------------------------ shared training plumbing


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="dataset manifest (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="'five' for the protocol seeds or a comma-separated list")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--beta", type=float, default=0.05)
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--rho", type=float, default=1.5)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--hidden", type=_ints, default=[256], help="expert/router hidden widths, e.g. 256 or 256,128")
    p.add_argument("--aligned-dim", type=int, default=64)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--no-attention", action="store_true", help="router sees raw concatenated views")


def _configs(args, ds, seed: int, **overrides) -> tuple[ModelConfig, TrainConfig]:
    weights = LossWeights(
        lam=overrides.get("lam", args.lam),
        beta=overrides.get("beta", args.beta),
        gamma=overrides.get("gamma", args.gamma),
        rho=args.rho,
    )
    try:
        model_cfg = ModelConfig(
            ds.view_dims,
            ds.num_classes,
            aligned_dim=args.aligned_dim,
            expert_hidden_dims=tuple(args.hidden),
            routing_temperature=args.tau,
            attention=overrides.get("attention", not args.no_attention),
        )
        train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, base_lr=args.lr, seed=seed,
                                weights=weights, bins=args.bins)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return model_cfg, train_cfg


def write_report(directory: Path, report: ev.MetricsReport, extra: dict | None = None, prefix: str = "") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    values = dict(report.scalars())
    values["bins"] = report.bins
    values.update(extra or {})
    (directory / f"{prefix}metrics.txt").write_text(ev.metrics_text(values))
    (directory / f"{prefix}reliability_confidence.csv").write_text(ev.table_csv(report.confidence_table))
    (directory / f"{prefix}reliability_uncertainty.csv").write_text(ev.table_csv(report.uncertainty_table))
    (directory / f"{prefix}uncertainty_histogram.csv").write_text(ev.histogram_csv(report.histogram))


def run_training(args, ds, seed: int, directory: Path, **overrides) -> dict:
    model_cfg, train_cfg = _configs(args, ds, seed, **overrides)
    model = TMURModel(model_cfg, seed=seed)
    rep = fit(model, ds, train_cfg)
    directory.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "manifest": str(Path(args.manifest).resolve()),
        "dataset": ds.name,
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
    }
    (directory / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    model.save(directory / "model.json")
    last = rep.losses[-1]
    write_report(
        directory,
        rep.final,
        {
            "best_test_accuracy": rep.best_test_accuracy,
            "best_epoch": rep.best_epoch,
            "final_loss_total": last.total,
            "final_loss_fused": last.fused,
            "final_loss_view": last.view,
            "final_loss_bal": last.bal,
            "final_loss_div": last.div,
            "epochs": train_cfg.epochs,
            "seed": seed,
        },
    )
    lines = ["epoch,fused,view,bal,div,total,train_accuracy,test_accuracy"]
    for i, (lb, tr, te) in enumerate(zip(rep.losses, rep.train_accuracy, rep.test_accuracy)):
        lines.append(",".join([str(i), *(repr(x) for x in (lb.fused, lb.view, lb.bal, lb.div, lb.total, tr, te))]))
    (directory / "trace.csv").write_text("\n".join(lines) + "\n")
    # wall time varies between runs, so it stays out of metrics.txt
    (directory / "timing.txt").write_text(f"wall_time_seconds={rep.wall_time:.3f}\n")
    log.info("seed %d: accuracy %.4f (%.1fs)", seed, rep.final.accuracy, rep.wall_time)
    return {"seed": seed, **rep.final.scalars(), "best_test_accuracy": rep.best_test_accuracy}


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def _summary(results: list[dict]) -> str:
    keys = ["accuracy", "prob_ece", "u_ece", "mean_uncertainty", "best_test_accuracy"]
    out = {"seeds": ",".join(str(r["seed"]) for r in results)}
    for k in keys:
        m, s = _mean_std([r[k] for r in results])
        out[f"{k}_mean"] = m
        out[f"{k}_std"] = s
    return ev.metrics_text(out)


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    seeds = _seed_list(args)
    ds = load_manifest(args.manifest)
    out = Path(args.out)
    results = [run_training(args, ds, seed, out / f"seed_{seed}") for seed in seeds]
    (out / "summary.txt").write_text(_summary(results))
    for r in results:
        print(f"seed={r['seed']} accuracy={r['accuracy']:.4f} u_ece={r['u_ece']:.4f}")
    m, s = _mean_std([r["accuracy"] for r in results])
    print(f"accuracy={100 * m:.2f} +- {100 * s:.2f} over {len(results)} seed(s)")
    return 0


def _eval_split(model: TMURModel, ds, which: str):
    if which == "all":
        return ds
    seed = model.meta.get("split_seed", model.seed)
    ratio = model.meta.get("split_ratio", 0.8)
    _, test_idx = stratified_split(ds.labels, ratio, seed)
    return ds.subset(test_idx)


def cmd_eval(args) -> int:
    model = TMURModel.load(args.model)
    ds = load_manifest(args.manifest)
    if ds.view_dims != model.config.view_dims or ds.num_classes != model.config.num_classes:
        raise DataError(f"dataset dims {ds.view_dims} / K={ds.num_classes} do not match the model")
    part = _eval_split(model, ds, args.split)
    if model.standardizer is not None:
        part = part.with_views(model.standardizer.transform(part.views))
    out = Path(args.out)

    runs: list[tuple[str, object, dict]] = []
    if args.perturb is None:
        runs.append(("clean", part, {}))
    elif args.perturb == "noise":
        if not args.sigma:
            raise UsageError("--perturb noise needs --sigma")
        for s in args.sigma:
            runs.append((f"sigma_{s:g}", add_gaussian_noise(part, s, args.noise_seed), {"sigma": s}))
    else:
        if args.factors is None or args.factors == "random":
            factors = random_view_factors(part.num_views, args.noise_seed)
        else:
            factors = _floats(args.factors)
        runs.append(("scaled", perturb_view_strength(part, factors), {"factors": ",".join(repr(float(f)) for f in factors)}))

    for label, data, extra in runs:
        preds = ev.predictions(model, data.views, data.labels)
        report = ev.evaluate(preds, args.bins)
        target = out if len(runs) == 1 else out / label
        write_report(target, report, extra)
        if args.per_view:
            for i, p in enumerate(ev.expert_predictions(model, data.views, data.labels)):
                write_report(target / "per_view", ev.evaluate(p, args.bins), prefix=f"expert_{i}_")
        print(f"{label}: accuracy={report.accuracy:.4f} prob_ece={report.prob_ece:.4f} "
              f"u_ece={report.u_ece:.4f} mean_u={report.mean_uncertainty:.4f}")
    return 0


ABLATIONS = {
    "bal": ("w/o L_bal", {"beta": 0.0}),
    "div": ("w/o L_div", {"gamma": 0.0}),
    "attention": ("w/o cross-attention", {"attention": False}),
}


def cmd_ablate(args) -> int:
    if args.which not in (*ABLATIONS, "all"):
        raise UsageError(f"unknown ablation {args.which!r}; choose from bal, div, attention, all")
    seeds = _seed_list(args) if (args.seed is not None or args.seeds) else list(PROTOCOL_SEEDS)
    ds = load_manifest(args.manifest)
    out = Path(args.out)
    variants = [("full", "TMUR (full)", {})]
    for key in (ABLATIONS if args.which == "all" else [args.which]):
        label, overrides = ABLATIONS[key]
        variants.append((key, label, overrides))
    lines = ["variant," + ",".join(f"seed_{s}" for s in seeds) + ",mean,std"]
    for key, label, overrides in variants:
        accs = [run_training(args, ds, s, out / key / f"seed_{s}", **overrides)["accuracy"] for s in seeds]
        m, sd = _mean_std(accs)
        lines.append(",".join([label, *(repr(a) for a in accs), repr(m), repr(sd)]))
        print(f"{label}: {100 * m:.2f} +- {100 * sd:.2f}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_sweep(args) -> int:
    if not args.beta_grid or not args.gamma_grid:
        raise UsageError("beta and gamma grids must be non-empty")
    seeds = _seed_list(args)
    ds = load_manifest(args.manifest)
    out = Path(args.out)
    surface = np.zeros((len(args.beta_grid), len(args.gamma_grid)))
    lines = ["beta,gamma,accuracy"]
    for i, b in enumerate(args.beta_grid):
        for j, g in enumerate(args.gamma_grid):
            accs = [
                run_training(args, ds, s, out / f"beta_{b:g}_gamma_{g:g}" / f"seed_{s}", beta=b, gamma=g)["accuracy"]
                for s in seeds
            ]
            surface[i, j] = float(np.mean(accs))
            lines.append(f"{b!r},{g!r},{surface[i, j]!r}")
    (out / "surface.csv").write_text("\n".join(lines) + "\n")
    delta = max_neighbor_delta(surface)
    (out / "smoothness.txt").write_text(ev.metrics_text({"cells": surface.size, "max_neighbor_delta": delta}))
    print(f"{surface.size} cells, max neighbour delta {delta:.4f}")
    return 0


def max_neighbor_delta(surface: np.ndarray) -> float:
    """Largest absolute accuracy change between horizontally/vertically adjacent cells."""
    deltas = [0.0]
    if surface.shape[0] > 1:
        deltas.append(float(np.abs(np.diff(surface, axis=0)).max()))
    if surface.shape[1] > 1:
        deltas.append(float(np.abs(np.diff(surface, axis=1)).max()))
    return max(deltas)


def cmd_theory(args) -> int:
    out = Path(args.out) if args.out else None
    if args.check == "thm1":
        pattern = _floats(args.pattern)
        report = check_theorem1(ScaleFamily(np.array(pattern)), log_grid(), strict=False)
        lines, ok = report.lines(), report.passed
    elif args.check == "thm2":
        report = check_theorem2(xor_instance(args.mu), strict=False)
        lines, ok = report.lines(), report.passed
    elif args.check == "gap-demo":
        seeds = _seed_list(args)
        spec = replace(XOR_DEMO_SPEC, num_samples=args.samples)
        report = routing_gap_learning_demo(spec, seeds, epochs=args.epochs, min_margin=args.min_margin)
        lines = ["seed,full_accuracy,local_accuracy,margin"]
        lines += [f"{s},{f!r},{l!r},{m!r}" for s, f, l, m in report.rows()]
        lines.append(f"status={'PASS' if report.passed else 'FAIL'}")
        ok = report.passed
    else:
        raise UsageError(f"unknown check {args.check!r}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.check}.txt").write_text(text)
    return 0 if ok else EXIT_CHECK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        num_samples=args.samples,
        num_classes=args.classes,
        view_dims=tuple(args.dims),
        informative=args.informative,
        noise=args.noise,
        mode=args.mode,
        separation=args.separation,
        seed=args.seed,
        name=args.name,
    )
    path = save_dataset(generate_synthetic(spec), args.out)
    print(path)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tmur", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a manifest, one artifact per seed")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model, optionally under perturbation")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--perturb", choices=("scale", "noise"))
    p.add_argument("--sigma", type=_floats)
    p.add_argument("--factors", help="comma-separated per-view factors, or 'random'")
    p.add_argument("--noise-seed", type=int, default=0, help="seed for noise / random factors")
    p.add_argument("--per-view", action="store_true", help="also write per-expert tables")
    p.add_argument("--bins", type=int, default=15)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full model vs ablated variants over seeds")
    _add_model_flags(p)
    p.add_argument("--which", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="accuracy surface over beta x gamma")
    _add_model_flags(p)
    p.add_argument("--beta-grid", type=_floats, required=True)
    p.add_argument("--gamma-grid", type=_floats, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("theory", help="numerical checks of the scale-bias and routing-gap results")
    p.add_argument("--check", required=True)
    p.add_argument("--pattern", default="2,1,1", help="support pattern for thm1")
    p.add_argument("--mu", type=float, default=2.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--samples", type=int, default=XOR_DEMO_SPEC.num_samples)
    p.add_argument("--min-margin", type=float, default=-0.01)
    p.add_argument("--out")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("synth", help="write a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dims", type=_ints, default=[10, 12])
    p.add_argument("--informative", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--mode", choices=("static", "sample-dependent"), default="static")
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tmur: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"tmur: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"tmur: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DomainError, ShapeError) as exc:
        print(f"tmur: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckFailure as exc:
        print(f"tmur: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
