"""Command line interface: ``gamlm <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import pfsa
from .armodel import ArModel, TrainConfig, cross_entropy, train_ar
from .distill import DistillConfig, distill_cyclic, distill_two_stage, write_distilled
from .experiment import ExperimentConfig, expand_grid, gen_data, run_experiment, sweep
from .features import FeatureSpec, empirical_moments, motif_frequency
from .gam import Training1Config, load_gam, save_gam, train_gam, write_training_log

log = logging.getLogger("gamlm")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _experiment_config(args) -> ExperimentConfig:
    d = _load_config(getattr(args, "config", None))
    for name in ("motif", "n", "process", "dsize", "ft", "treg", "mode", "ds_size", "test_size", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    return ExperimentConfig.from_dict(d)


def _ar_config(args, seed_default: int = 0) -> TrainConfig:
    d = _load_config(getattr(args, "ar_config", None))
    for name in ("seed", "max_epochs", "patience", "hidden_dim"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    d.setdefault("seed", seed_default)
    return TrainConfig(**d)


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override it")
    p.add_argument("--motif")
    p.add_argument("--n", type=int)
    p.add_argument("--process", choices=("pure", "mixture"))
    p.add_argument("--dsize", type=int)
    p.add_argument("--ft")
    p.add_argument("--treg", choices=("rs", "snis"))
    p.add_argument("--mode", choices=("two_stage", "cyclic"))
    p.add_argument("--ds-size", dest="ds_size", type=int)
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--seed", type=int)


def _add_ar_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ar-config", help="JSON training config for the autoregressive model")
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)


def cmd_gen_data(args) -> int:
    cfg = _experiment_config(args)
    data = gen_data(cfg, Path(args.out))
    print(json.dumps({"entropy_per_char": data.entropy_per_char, "D": len(data.D),
                      "V": len(data.V), "T": len(data.T)}))
    return 0


def cmd_train_ar(args) -> int:
    D = pfsa.read_dataset(args.train)
    V = pfsa.read_dataset(args.val)
    model = train_ar(D, V, _ar_config(args, args.seed or 0))
    model.save(args.out)
    print(json.dumps({"best_val_ce": model.meta["best_val_ce"], "epochs_run": model.meta["epochs_run"]}))
    return 0


def cmd_train_gam(args) -> int:
    r = ArModel.load(args.r)
    D = pfsa.read_dataset(args.train)
    V = pfsa.read_dataset(args.val)
    spec = FeatureSpec.create(args.motif, args.ft, args.feature_seed)
    d = _load_config(args.t1_config)
    d.update(treg=args.treg, seed=args.seed)
    g = train_gam(r, D, V, Training1Config(**d), spec)
    save_gam(g, args.out, args.r)
    if args.log:
        write_training_log(args.log, g.history)
    print(json.dumps({"lambda": dict(zip(spec.active_names, map(float, g.lam))), "epochs": len(g.history)}))
    return 0


def cmd_distill(args) -> int:
    g = load_gam(args.gam)
    d = _load_config(args.distill_config)
    d.update(mode=args.mode, seed=args.seed)
    if args.ds_size is not None:
        d["ds_size"] = args.ds_size
    dcfg = DistillConfig(**d)
    ar_cfg = _ar_config(args, args.seed + 1)
    if dcfg.mode == "cyclic" or dcfg.merge_true:
        if not (args.train and args.val):
            raise ValueError("cyclic mode and merge_true need --train and --val")
        D, V = pfsa.read_dataset(args.train), pfsa.read_dataset(args.val)
    else:
        D = V = None
    if dcfg.mode == "two_stage":
        pi, stats, (train, val) = distill_two_stage(g, dcfg, ar_cfg, D, V)
    else:
        t1 = Training1Config(**{**_load_config(args.t1_config), "seed": args.seed + 2})
        pi, stats, (train, val) = distill_cyclic(g, D, V, dcfg, ar_cfg, t1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pi.save(out / "pi.npz")
    write_distilled(out, train, val, {"gam": args.gam, "config": asdict(dcfg), "stats": asdict(stats)})
    print(json.dumps({"acceptance_rates": stats.acceptance_rates, "n_train": stats.n_train}))
    return 0


def cmd_eval(args) -> int:
    model = ArModel.load(args.model)
    T = pfsa.read_dataset(args.test)
    samples = model.sample(args.samples, args.seed)
    out = {"cross_entropy": cross_entropy(model, T)}
    if args.motif:
        out["motif_frequency"] = motif_frequency(args.motif, samples)
        spec = FeatureSpec.create(args.motif, args.ft, args.feature_seed)
        out["moments"] = dict(zip(spec.active_names, map(float, empirical_moments(spec, samples))))
    print(json.dumps(out))
    return 0


def cmd_run(args) -> int:
    rep = run_experiment(_experiment_config(args), args.out)
    print(json.dumps(rep.row()))
    return 0 if rep.status == "ok" else 1


def cmd_sweep(args) -> int:
    spec = _load_config(args.config)
    cfgs = expand_grid(spec.get("base", {}), spec.get("grid", {}))
    reports = sweep(cfgs, args.out, plot=not args.no_plot)
    failed = [r.status for r in reports if r.status != "ok"]
    print(json.dumps({"runs": len(reports), "failed": failed}))
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gamlm", description="GAM training and distillation for motif languages")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample D, V, T from the motif process")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-ar", help="train an autoregressive model")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_ar_flags(p)
    p.set_defaults(func=cmd_train_ar)

    p = sub.add_parser("train-gam", help="fit the GAM coefficients (Training-1)")
    p.add_argument("--r", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--motif", required=True)
    p.add_argument("--ft", default="1001111")
    p.add_argument("--treg", choices=("rs", "snis"), default="rs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-seed", dest="feature_seed", type=int, default=0)
    p.add_argument("--t1-config", dest="t1_config")
    p.add_argument("--log", help="CSV training log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_gam)

    p = sub.add_parser("distill", help="distill a GAM into a new autoregressive model (Training-2)")
    p.add_argument("--gam", required=True)
    p.add_argument("--mode", choices=("two_stage", "cyclic"), default="two_stage")
    p.add_argument("--ds-size", dest="ds_size", type=int)
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distill-config", dest="distill_config")
    p.add_argument("--t1-config", dest="t1_config")
    _add_ar_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="cross-entropy on a test set, motif frequency of samples")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--motif")
    p.add_argument("--ft", default="1001111")
    p.add_argument("--feature-seed", dest="feature_seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full pipeline for one config")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid of runs with long CSV, tables and plots")
    p.add_argument("--config", required=True, help='JSON {"base": {...}, "grid": {"dsize": [...]}}')
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
