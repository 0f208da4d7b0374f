"""Command line: dataset generation, training, evaluation and verification suites.

    python -m app.cli gen-data --desk-scale --out runs/data
    python -m app.cli train --data runs/data --filter ekf --loss nll --out runs/ekf
    python -m app.cli eval --data runs/data --checkpoint runs/ekf/checkpoint.dfck --out runs/ekf
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional

from app import __version__
from app.core import autodiff as ad
from app.core.config import settings
from app.core.errors import DataError, DfkitError, NumericError, UsageError
from app.utils.validators import FILTER_CHOICES, check_regime_flags, load_config_file, resolve_filter, validated

logger = logging.getLogger("dfkit")

RUN_MANIFEST = "run.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--out", default=None, help="output directory (default: settings.out_dir)")
    p.add_argument("--threads", type=int, default=None, help="worker threads")
    p.add_argument("--precision", choices=["float32", "float64"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="TOML key/value file; explicit flags win")
    p.add_argument("--verbose", action="store_true")
    return p


def _filter_flags(p: argparse.ArgumentParser, default_filter: Optional[str]) -> None:
    p.add_argument("--filter", choices=FILTER_CHOICES, default=default_filter)
    p.add_argument("--particles", type=int, default=None, help="samples/particles per step")
    p.add_argument("--alpha-re", type=float, default=None)
    p.add_argument("--resample-every", type=int, default=None)
    p.add_argument("--gmm-sigma", type=float, default=None)
    p.add_argument("--ukf-preset", choices=["paper", "julier", "scaled"], default=None)
    p.add_argument("--ukf-alpha", type=float, default=None)
    p.add_argument("--ukf-kappa", type=float, default=None)
    p.add_argument("--ukf-beta", type=float, default=None)


def build_parser() -> Dict[str, argparse.ArgumentParser]:
    """The top-level parser under key "" plus one parser per command."""
    common = _common()
    root = _Parser(prog="dfkit", description="Differentiable Bayesian filters")
    root.add_argument("--version", action="version", version=f"dfkit {__version__}")
    sub = root.add_subparsers(dest="command", parser_class=_Parser)
    parsers = {"": root}

    p = sub.add_parser("gen-data", parents=[common], help="simulate disc-tracking datasets")
    p.add_argument("--distractors", type=int, default=5)
    p.add_argument("--sigma-p", type=float, default=0.1)
    p.add_argument("--sigma-v", type=float, default=2.0)
    p.add_argument("--hetero-q", action="store_true")
    p.add_argument("--correlated-q", action="store_true")
    p.add_argument("--desk-scale", action="store_true", help="32x32 images, 300/50/50 sequences")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--length", type=int, default=50)
    p.add_argument("--train", type=int, default=None)
    p.add_argument("--val", type=int, default=None)
    p.add_argument("--test", type=int, default=None)
    p.set_defaults(handler=cmd_gen_data)
    parsers["gen-data"] = p

    p = sub.add_parser("pretrain-sensor", parents=[common], help="supervised sensor pretraining")
    p.add_argument("--data", default=None)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--hetero-r", action="store_true")
    p.add_argument("--full-cov", action="store_true")
    p.add_argument("--max-sequences", type=int, default=None)
    p.set_defaults(handler=cmd_pretrain_sensor)
    parsers["pretrain-sensor"] = p

    p = sub.add_parser("train", parents=[common], help="train filter models end to end")
    p.add_argument("--data", default=None)
    _filter_flags(p, "ekf")
    p.add_argument("--loss", choices=["mse", "nll", "mix"], default="nll")
    p.add_argument("--seq-len", type=int, default=10)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--hetero-r", action="store_true")
    p.add_argument("--hetero-q", action="store_true")
    p.add_argument("--full-cov", action="store_true")
    p.add_argument("--freeze-sensor", action="store_true")
    p.add_argument("--freeze-process", action="store_true")
    p.add_argument("--analytic-process", action="store_true")
    p.add_argument("--preset", choices=["from-scratch", "noise-only"], default="from-scratch")
    p.add_argument("--init-from", default=None, help="checkpoint to take sensor/process weights from")
    p.add_argument("--init-cov", type=_float_list, default=None, help="diagonal of the initial covariance")
    p.add_argument("--max-sequences", type=int, default=None)
    p.set_defaults(handler=cmd_train)
    parsers["train"] = p

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--checkpoint", default=None)
    _filter_flags(p, None)
    p.add_argument("--eval-seeds", type=_int_list, default=[1, 2])
    p.add_argument("--traces", action="store_true", help="write per-step traces.csv")
    p.add_argument("--max-sequences", type=int, default=None)
    p.set_defaults(handler=cmd_eval)
    parsers["eval"] = p

    p = sub.add_parser("compare", parents=[common], help="tabulate evaluation reports")
    p.add_argument("reports", nargs="*")
    p.set_defaults(handler=cmd_compare)
    parsers["compare"] = p

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference autodiff verification")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--skip-filters", action="store_true")
    p.set_defaults(handler=cmd_gradcheck)
    parsers["gradcheck"] = p

    p = sub.add_parser("oracle-check", parents=[common], help="compare filters with a closed-form Kalman filter")
    p.add_argument("--filter", choices=["ekf", "ukf", "mcukf", "pf", "all"], default="all")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--trials", type=int, default=1)
    p.set_defaults(handler=cmd_oracle_check)
    parsers["oracle-check"] = p
    return parsers


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parsers = build_parser()
    args = parsers[""].parse_args(argv)
    if not args.command:
        raise UsageError("no command given (try --help)")
    if args.config:
        values = load_config_file(args.config)
        command = parsers[args.command]
        known = {a.dest for a in command._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {', '.join(unknown)}")
        command.set_defaults(**values)
        args = parsers[""].parse_args(argv)
    return args


def _out(args) -> str:
    out = args.out or settings.out_dir
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e.strerror or e}") from e
    return out


def _require(args, name: str) -> Any:
    value = getattr(args, name)
    if value is None:
        raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")
    return value


def _split_path(data: str, split: str) -> str:
    path = os.path.join(data, f"{split}.dfds")
    if not os.path.exists(path):
        raise DataError(f"no {split} split in {data} (expected {path})")
    return path


def write_run_manifest(out: str, args: argparse.Namespace, outputs: Dict[str, Any],
                       resolved: Optional[Dict[str, Any]] = None) -> str:
    config = {k: v for k, v in vars(args).items() if k != "handler"}
    manifest = {"tool": "dfkit", "version": __version__, "command": args.command, "args": config,
                "resolved": resolved or {}, "outputs": outputs}
    path = os.path.join(out, RUN_MANIFEST)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    return path


def cmd_gen_data(args) -> Dict[str, Any]:
    from app.services.discworld import DESK_SPLITS, PAPER_SPLITS, NoiseRegime, SceneSpec, generate_dataset

    kind = check_regime_flags(args.hetero_q, args.correlated_q)
    size = args.image_size or (32 if args.desk_scale else 100)
    splits = dict(DESK_SPLITS if args.desk_scale else PAPER_SPLITS)
    for name in ("train", "val", "test"):
        if getattr(args, name) is not None:
            splits[name] = getattr(args, name)
    if args.length < 1 or any(c < 0 for c in splits.values()):
        raise UsageError("--length must be positive and split sizes nonnegative")
    regime = validated(NoiseRegime, {"kind": kind, "sigma_qp": args.sigma_p, "sigma_qv": args.sigma_v})
    scene = validated(SceneSpec, {"image_size": size, "num_distractors": args.distractors})
    out = _out(args)
    paths = generate_dataset(out, splits, args.length, scene, regime, args.seed, args.threads)
    print(f"✅ dataset: {size}x{size} images, {args.distractors} distractors, {kind} process noise")
    resolved = {"regime": regime.model_dump(), "scene": scene.model_dump(), "splits": splits}
    write_run_manifest(out, args, paths, resolved)
    return paths


def _load_records(args, split: str):
    from app.services.dataset_store import read_split

    return read_split(_split_path(_require(args, "data"), split), args.max_sequences)


def cmd_pretrain_sensor(args) -> Dict[str, Any]:
    from app.models.bundle import FilterModels, ModelOptions, disc_models_spec
    from app.services.trainer import PretrainConfig, pretrain_sensor

    manifest, train = _load_records(args, "train")
    _, val = _load_records(args, "val")
    options = ModelOptions(image_size=manifest.image_size, process="analytic", hetero_r=args.hetero_r,
                           full_cov=args.full_cov, q_init=1.0, r_init=100.0)
    models = FilterModels(disc_models_spec(options, args.seed))
    config = validated(PretrainConfig, {
        "epochs": args.epochs, "lr": args.lr or settings.learning_rate, "batch_size": args.batch,
        "seed": args.seed, "precision": args.precision or settings.precision,
        "threads": args.threads or settings.threads,
    })
    out = _out(args)
    result = pretrain_sensor(models, train, val, config, out)
    print(f"✅ sensor checkpoint: {result.checkpoint}")
    write_run_manifest(out, args, result.model_dump(), {"options": options.model_dump(),
                                                        "pretrain": config.model_dump()})
    return result.model_dump()


def _label(args, filter_name: str) -> str:
    tags = [t for t, on in (("hetero-r", args.hetero_r), ("hetero-q", args.hetero_q), ("full-cov", args.full_cov))
            if on]
    parts = [filter_name, args.loss, f"k{args.seq_len}", args.preset] + tags
    return "/".join(parts)


def cmd_train(args) -> Dict[str, Any]:
    from app.models.bundle import FilterModels, ModelOptions, disc_models_spec
    from app.models.checkpoint import load_checkpoint
    from app.services.trainer import TrainConfig, Trainer, apply_preset, freeze_components, transfer_params

    filter_cfg = resolve_filter(args.filter, particles=args.particles, gmm_sigma=args.gmm_sigma,
                                alpha_re=args.alpha_re, resample_every=args.resample_every,
                                ukf_preset=args.ukf_preset, ukf_alpha=args.ukf_alpha, ukf_kappa=args.ukf_kappa,
                                ukf_beta=args.ukf_beta, loss=args.loss)
    if args.init_from and not os.path.exists(args.init_from):
        raise UsageError(f"checkpoint not found: {args.init_from}")
    train_cfg = validated(TrainConfig, {
        k: v for k, v in {
            "loss": args.loss, "seq_len": args.seq_len, "epochs": args.epochs, "lr": args.lr,
            "batch_size": args.batch, "init_cov_diag": args.init_cov, "seed": args.seed,
            "precision": args.precision, "threads": args.threads,
        }.items() if v is not None
    })
    # UKF guard before any data is read
    if filter_cfg.kind == "ukf":
        filter_cfg.ukf.check(4)
    manifest, train = _load_records(args, "train")
    _, val = _load_records(args, "val")

    options = ModelOptions(image_size=manifest.image_size, hetero_q=args.hetero_q, hetero_r=args.hetero_r,
                           full_cov=args.full_cov, learned_likelihood=filter_cfg.pf_update == "learned")
    options = apply_preset(options, args.preset)
    if args.analytic_process:
        options = options.model_copy(update={"process": "analytic"})
    models = FilterModels(disc_models_spec(options, args.seed))
    if args.init_from:
        _, source = load_checkpoint(args.init_from)
        copied = transfer_params(models.params, source, ("sensor.", "process.", "likelihood."), skip=("sensor.r.",))
        print(f"✅ initialized {len(copied)} tensors from {args.init_from}")
    elif args.preset == "noise-only":
        print("⚠️ noise-only preset without --init-from: the sensor stays at its random initialization")
    freeze_components(models, sensor=args.freeze_sensor or args.preset == "noise-only",
                      process=args.freeze_process)

    out = _out(args)
    label = _label(args, args.filter)
    trainer = Trainer(models, filter_cfg, train_cfg, out, label=label,
                      extra_config={"options": options.model_dump(), "preset": args.preset,
                                    "filter_name": args.filter})
    result = trainer.fit(train, val)
    print(f"✅ checkpoint: {result.checkpoint} (best step {result.best_step})")
    write_run_manifest(out, args, result.model_dump(), {"filter": filter_cfg.model_dump(),
                                                        "train": train_cfg.model_dump(),
                                                        "options": options.model_dump()})
    return result.model_dump()


def cmd_eval(args) -> Dict[str, Any]:
    from app.services.evaluator import EvalConfig, evaluate, load_trained
    from app.services.filter_config import FilterConfig

    checkpoint = _require(args, "checkpoint")
    if not os.path.exists(checkpoint):
        raise UsageError(f"checkpoint not found: {checkpoint}")
    models, filter_cfg, manifest = load_trained(checkpoint)
    label = manifest.config.get("label", "run")
    if args.filter:
        filter_cfg = resolve_filter(args.filter, eval_particles=args.particles, gmm_sigma=args.gmm_sigma,
                                    alpha_re=args.alpha_re, resample_every=args.resample_every,
                                    ukf_preset=args.ukf_preset, ukf_alpha=args.ukf_alpha,
                                    ukf_kappa=args.ukf_kappa, ukf_beta=args.ukf_beta)
        label = f"{label}@{args.filter}"
    else:
        overrides = {k: v for k, v in {"sample_count_eval": args.particles, "gmm_sigma": args.gmm_sigma,
                                       "alpha_re": args.alpha_re, "resample_every": args.resample_every}.items()
                     if v is not None}
        if filter_cfg.kind != "pf" and set(overrides) - {"sample_count_eval"}:
            raise UsageError(f"particle filter flags do not apply to the stored {filter_cfg.kind} filter")
        filter_cfg = validated(FilterConfig, {**filter_cfg.model_dump(), **overrides})
    if filter_cfg.pf_update == "learned" and models.likelihood is None:
        raise UsageError("the checkpoint has no likelihood network for a learned particle update")
    ad.set_precision(args.precision or manifest.config.get("train", {}).get("precision", settings.precision))

    _, records = _load_records(args, args.split)
    config = validated(EvalConfig, {
        "eval_seeds": args.eval_seeds,
        "init_cov_diag": manifest.config.get("train", {}).get("init_cov_diag", [25.0]),
        "threads": args.threads or settings.threads,
    })
    out = _out(args)
    traces = os.path.join(out, "traces.csv") if args.traces else None
    report = evaluate(records, models, filter_cfg, config, label=label, traces_path=traces,
                      echo={"checkpoint": checkpoint, "split": args.split})
    path = os.path.join(out, "report.json")
    with open(path, "w") as f:
        f.write(report.model_dump_json(indent=2))
    corr = "undefined" if report.corr_undefined else f"{report.corr_R_visibility:.3f}"
    print(f"✅ {report.label}: rmse {report.rmse:.3f}, nll {report.nll:.3f}, corr {corr}, "
          f"D_Q {'-' if report.D_Q is None else f'{report.D_Q:.4f}'}")
    outputs = {"report": path, **({"traces": traces} if traces else {})}
    write_run_manifest(out, args, outputs, {"filter": filter_cfg.model_dump(), "eval": config.model_dump()})
    return outputs


def cmd_compare(args) -> Dict[str, Any]:
    from app.services.reports import compare, format_table, load_report, write_comparison

    if not args.reports:
        raise UsageError("compare needs at least one report")
    rows = compare([load_report(p) for p in args.reports])
    out = _out(args)
    paths = write_comparison(rows, out)
    print(format_table(rows))
    write_run_manifest(out, args, paths)
    return paths


def cmd_gradcheck(args) -> Dict[str, Any]:
    from app.core.gradcheck import run_op_suite
    from app.services.oracle import filter_gradcheck_suite

    reports = {f"op.{k}": v for k, v in run_op_suite(seed=args.seed, tol=args.tol, trials=args.trials).items()}
    if not args.skip_filters:
        reports.update(filter_gradcheck_suite(seed=args.seed, tol=args.tol))
    failed = [name for name, r in reports.items() if not r.passed]
    out = _out(args)
    path = os.path.join(out, "gradcheck.json")
    with open(path, "w") as f:
        json.dump({"passed": not failed, "tol": args.tol,
                   "checks": {k: v.model_dump() for k, v in reports.items()}}, f, indent=2)
    for name, r in reports.items():
        print(f"{'✅' if r.passed else '❌'} {name}: max relative error {r.max_rel_error:.2e}")
    write_run_manifest(out, args, {"report": path})
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    return {"report": path}


def cmd_oracle_check(args) -> Dict[str, Any]:
    from app.services.oracle import ORACLE_FILTERS, oracle_check

    kinds = ORACLE_FILTERS if args.filter == "all" else [args.filter]
    if args.trials < 1 or args.steps < 1:
        raise UsageError("--trials and --steps must be positive")
    if args.samples is not None and args.filter in ("ekf", "ukf"):
        raise UsageError(f"--samples does not apply to --filter {args.filter}")
    results: Dict[str, Any] = {}
    failed = []
    for kind in kinds:
        reports = [oracle_check(kind, args.seed + i, args.steps, args.samples) for i in range(args.trials)]
        pass_rate = sum(r.passed for r in reports) / len(reports)
        ok = pass_rate == 1.0 if kind in ("ekf", "ukf") else pass_rate >= 0.95
        results[kind] = {"passed": ok, "pass_rate": pass_rate,
                         "max_mean_dev": max(r.max_mean_dev for r in reports),
                         "trials": [r.model_dump() for r in reports]}
        print(f"{'✅' if ok else '❌'} {kind}: max mean deviation {results[kind]['max_mean_dev']:.3e} "
              f"({pass_rate:.0%} of {len(reports)} trials within tolerance)")
        if not ok:
            failed.append(kind)
    out = _out(args)
    path = os.path.join(out, "oracle.json")
    with open(path, "w") as f:
        json.dump(results, f, indent=2)
    write_run_manifest(out, args, {"report": path})
    if failed:
        raise NumericError(f"oracle check failed for {', '.join(failed)}")
    return {"report": path}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.precision:
            ad.set_precision(args.precision)
        handler: Callable[[argparse.Namespace], Dict[str, Any]] = args.handler
        handler(args)
        return 0
    except DfkitError as e:
        logger.debug("command failed", exc_info=True)
        print(e.line(), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.debug("command failed", exc_info=True)
        error = DataError(f"I/O failure: {e}")
        print(error.line(), file=sys.stderr)
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
