"""Command-line front end: ``fpkit <subcommand> ...``.

stdout carries data (JSON or CSV), stderr carries the resolved configuration
and log messages. Exit codes: 0 success, 2 invalid input or parameter,
3 numeric failure, 4 diverged training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from importlib import resources
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bayeslab import (
    SCORE_IDS,
    MixtureSpec,
    ThresholdRule,
    chow_reject_region,
    draw,
    bayes_classifier,
    fp_risk_from_accept,
    ood_reject_region,
    ood_risk_from_accept,
    sweep_thresholds,
)
from .calibration import RULES, apply_temperature, decompose_score, fit_temperature
from .errors import DivergedTraining, FpkitError, InvalidInput
from .evalcore import SCORE_KINDS, EvalSet, compute_score, correctness, evalset_to_csv, read_evalset
from .metrics import full_report, rc_curve

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_DIVERGED = 0, 2, 3, 4
LOG_BASE = "natural"


def load_schema(name: str) -> dict:
    """Shipped JSON schema for a command's output (report, temperature, ...)."""
    res = resources.files("fpkit").joinpath("schemas", f"{name}.schema.json")
    return json.loads(res.read_text(encoding="utf-8"))


def thread_cap() -> int:
    """Worker count from FPKIT_THREADS (default 1)."""
    raw = os.environ.get("FPKIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidInput(f"FPKIT_THREADS must be an integer, got {raw!r}") from None


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _log_config(command: str, config: dict) -> None:
    sys.stderr.write(json.dumps({"command": command, "config": config}, sort_keys=True, default=str) + "\n")


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)


def _load_evalset(args) -> EvalSet:
    return read_evalset(args.logits, getattr(args, "features", None), getattr(args, "head", None))


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _score_params(args, kind: str) -> dict:
    if kind == "energy":
        return {"T": args.energy_t}
    if kind == "odin_t":
        return {"T": args.odin_t}
    if kind == "react_msp":
        return {"percentile": args.react_percentile}
    return {}


# --------------------------------------------------------------------------
# subcommands


def cmd_evaluate(args) -> int:
    scores = _csv_list(args.scores)
    for s in scores:
        if s not in SCORE_KINDS:
            raise InvalidInput(f"unknown score {s!r}; choose from {', '.join(SCORE_KINDS)}")
    workers = thread_cap()
    config = {
        "logits": args.logits, "features": args.features, "head": args.head, "scores": scores,
        "params": {s: _score_params(args, s) for s in scores}, "ece_bins": args.ece_bins,
        "tpr_target": args.tpr_target, "x1000": args.x1000, "threads": workers, "log_base": LOG_BASE,
    }
    _log_config("evaluate", config)
    ev = _load_evalset(args)

    def one(kind):
        return full_report(ev, kind, _score_params(args, kind), args.ece_bins, args.tpr_target)

    if workers > 1 and len(scores) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(one, scores))
    else:
        reports = [one(k) for k in scores]
    factor = 1000.0 if args.x1000 else 1.0
    out = {
        "log_base": LOG_BASE,
        "aurc_scale": factor,
        "n": ev.n,
        "num_classes": ev.num_classes,
        "reports": [(r.scaled(factor) if args.x1000 else r).to_dict() for r in reports],
    }
    _emit(_dumps(out), args.output)
    return EXIT_OK


def cmd_rc_curve(args) -> int:
    params = _score_params(args, args.score)
    _log_config("rc-curve", {"logits": args.logits, "score": args.score, "params": params})
    ev = _load_evalset(args)
    curve = rc_curve(compute_score(ev, args.score, **params), correctness(ev))
    _emit(curve.to_csv(), args.output)
    return EXIT_OK


def cmd_fit_temperature(args) -> int:
    config = {"holdout": args.holdout, "t_min": args.t_min, "t_max": args.t_max, "tol": args.tol,
              "apply": args.apply, "apply_output": args.apply_output}
    _log_config("fit-temperature", config)
    holdout = read_evalset(args.holdout)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_temperature(holdout, args.t_min, args.t_max, args.tol)
    for w in caught:
        sys.stderr.write(f"warning: {w.message}\n")
    out = {"fit_split": Path(args.holdout).name, **fit.to_dict(), "log_base": LOG_BASE}
    if args.apply:
        target = read_evalset(args.apply)
        text = evalset_to_csv(apply_temperature(target, fit.T))
        if args.apply_output:
            Path(args.apply_output).write_text(text, encoding="utf-8", newline="\n")
        else:
            sys.stderr.write("note: --apply without --apply-output; scaled logits not written\n")
    _emit(_dumps(out), args.output)
    return EXIT_OK


def cmd_decompose(args) -> int:
    _log_config("decompose", {"logits": args.logits, "rule": args.rule, "bins": args.bins,
                              "posterior": args.posterior})
    ev = read_evalset(args.logits)
    q = None
    if args.posterior:
        try:
            q = np.loadtxt(args.posterior, delimiter=",", skiprows=1, ndmin=2)
        except ValueError as exc:
            raise InvalidInput(f"{args.posterior}: {exc}") from exc
    est = decompose_score(ev, args.rule, args.bins, q)
    _emit(_dumps({**est.to_dict(), "log_base": LOG_BASE}), args.output)
    return EXIT_OK


def _derived_seeds(seed: int, n: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def cmd_train(args) -> int:
    from .flatopt import LossSpec, TrainConfig, make_dataset, model_evalset, train

    cfg = TrainConfig(
        method=args.method, loss=LossSpec(args.loss, args.loss_param), mixup_alpha=args.mixup_alpha,
        epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr, momentum=args.momentum,
        weight_decay=args.weight_decay, sam_rho=args.sam_rho, swa_start=args.swa_start,
        swa_cycle=args.swa_cycle, swa_lr=args.swa_lr, seed=args.seed,
        hidden=tuple(int(h) for h in _csv_list(args.hidden)),
    ).resolved()
    s_train, s_test, s_out = _derived_seeds(args.seed, 3)
    data_cfg = {"dataset": args.dataset, "n_train": args.n_train, "n_test": args.n_test,
                "noise": args.noise, "label_noise": args.label_noise,
                "test_label_noise": args.test_label_noise, "n_outliers": args.n_outliers,
                "data_seeds": [s_train, s_test, s_out]}
    _log_config("train", {"train": cfg.to_dict(), "data": data_cfg, "out_dir": args.out_dir})

    train_set = make_dataset(args.dataset, args.n_train, args.noise, args.label_noise, s_train)
    test_set = make_dataset(args.dataset, args.n_test, args.noise, args.test_label_noise, s_test)
    outliers = make_dataset("ring_ood", args.n_outliers, seed=s_out) if args.n_outliers else None
    result = train(cfg, train_set, test_set, outliers)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = result.model
    (out / "model.json").write_text(model.to_json() + "\n", encoding="utf-8", newline="\n")
    if len(test_set):
        ev = model_evalset(model, test_set)
        (out / "test_logits.csv").write_text(evalset_to_csv(ev), encoding="utf-8", newline="\n")
    (out / "history.csv").write_text(result.history_csv(), encoding="utf-8", newline="\n")
    (out / "config.json").write_text(_dumps({"train": cfg.to_dict(), "data": data_cfg}),
                                     encoding="utf-8", newline="\n")
    last = result.history[-1] if result.history else {}
    sys.stderr.write(f"done: test_acc={last.get('test_acc')} test_auroc={last.get('test_auroc')}\n")
    return EXIT_OK


def _parse_grid(text: str) -> np.ndarray:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise InvalidInput("--grid must be start:stop:num or a comma list")
        return np.linspace(float(parts[0]), float(parts[1]), int(parts[2]))
    return np.array([float(v) for v in _csv_list(text)])


def cmd_simulate(args) -> int:
    spec = MixtureSpec.from_json(args.spec)
    workers = thread_cap()
    config = {"spec": spec.to_dict(), "sweep": args.sweep, "score": args.score, "grid": args.grid,
              "n_mc": args.n_mc, "seed": args.seed, "shards": args.shards, "threads": workers,
              "model": args.model}
    _log_config("simulate", config)
    model = None
    if args.model:
        from .flatopt import MlpModel

        try:
            model = MlpModel.from_dict(json.loads(Path(args.model).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise InvalidInput(f"cannot load model {args.model}: {exc}") from exc
    if args.sweep:
        table = sweep_thresholds(spec, args.score, _parse_grid(args.grid), args.n_mc, args.seed,
                                 model, args.shards, workers)
        _emit(table.to_csv(), args.output)
        return EXIT_OK

    s = draw(spec, args.n_mc, args.seed, args.shards, workers)
    bayes = bayes_classifier(spec, s.x_in)
    chow = ThresholdRule("true_posterior_max", 1.0 - spec.cost)
    dens = ThresholdRule("density_ratio", spec.ood_threshold)
    fp_chow = fp_risk_from_accept(spec, chow.accept(spec, s.x_in), s.y_in, bayes)
    ood_dens = ood_risk_from_accept(spec, dens.accept(spec, s.x_in), dens.accept(spec, s.x_out))
    fp_dens = fp_risk_from_accept(spec, dens.accept(spec, s.x_in), s.y_in, bayes)
    ood_chow = ood_risk_from_accept(spec, chow.accept(spec, s.x_in), chow.accept(spec, s.x_out))
    out = {
        "chow_threshold": 1.0 - spec.cost,
        "density_threshold": spec.ood_threshold,
        "chow_region": chow_reject_region(spec).to_dict(),
        "ood_region": ood_reject_region(spec).to_dict(),
        "risks": {
            "chow_rule": {"fp_risk": fp_chow.value, "fp_stderr": fp_chow.stderr,
                          "ood_risk": ood_chow.value, "ood_stderr": ood_chow.stderr},
            "density_rule": {"fp_risk": fp_dens.value, "fp_stderr": fp_dens.stderr,
                             "ood_risk": ood_dens.value, "ood_stderr": ood_dens.stderr},
        },
        "n_mc": args.n_mc,
        "seed": args.seed,
        "shards": args.shards,
    }
    _emit(_dumps(out), args.output)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_score_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--energy-t", type=float, default=1.0, help="energy temperature (default 1)")
    p.add_argument("--odin-t", type=float, default=1000.0, help="ODIN temperature (default 1000)")
    p.add_argument("--react-percentile", type=float, default=90.0,
                   help="ReAct clipping percentile of pooled activations (default 90)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpkit", description="Failure prediction and confidence toolkit.")
    parser.add_argument("--version", action="version", version=f"fpkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="metrics report for one or more confidence scores")
    p.add_argument("logits", help="CSV with header l0..l{K-1},label")
    p.add_argument("--features", help="companion features CSV f0..f{D-1} (for react_msp)")
    p.add_argument("--head", help="classifier head JSON (for react_msp)")
    p.add_argument("--scores", default="msp", help="comma-separated score kinds (default msp)")
    p.add_argument("--ece-bins", type=int, default=15)
    p.add_argument("--tpr-target", type=float, default=0.95)
    p.add_argument("--x1000", action="store_true", help="multiply AURC and E-AURC by 1000")
    p.add_argument("-o", "--output")
    _add_score_params(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rc-curve", help="risk-coverage curve as CSV coverage,risk")
    p.add_argument("logits")
    p.add_argument("--features")
    p.add_argument("--head")
    p.add_argument("--score", default="msp", choices=SCORE_KINDS)
    p.add_argument("-o", "--output")
    _add_score_params(p)
    p.set_defaults(func=cmd_rc_curve)

    p = sub.add_parser("fit-temperature", help="fit a softmax temperature on a held-out split")
    p.add_argument("holdout", help="split used to fit T (e.g. validation or test)")
    p.add_argument("--t-min", type=float, default=0.05)
    p.add_argument("--t-max", type=float, default=100.0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--apply", help="logits CSV to rescale with the fitted T")
    p.add_argument("--apply-output", help="where to write the rescaled logits CSV")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_fit_temperature)

    p = sub.add_parser("decompose", help="calibration / grouping / aleatoric decomposition")
    p.add_argument("logits")
    p.add_argument("--rule", default="log_loss", choices=RULES)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--posterior", help="CSV of true class posteriors q0..q{K-1}, one header row")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train", help="train the built-in MLP on a synthetic dataset")
    p.add_argument("--method", default="sgd", choices=("sgd", "sam", "swa", "fmfp"))
    p.add_argument("--dataset", default="two_moons", choices=("two_moons", "gaussian_blobs"))
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--noise", type=float, default=None, help="input noise std (dataset default if omitted)")
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--test-label-noise", type=float, default=0.0)
    p.add_argument("--n-outliers", type=int, default=0, help="ring_ood outliers for ce_plus_oe")
    p.add_argument("--loss", default="ce", choices=("ce", "focal", "label_smoothing", "l1_logit",
                                                     "logitnorm", "ce_plus_oe", "ce_plus_crl"))
    p.add_argument("--loss-param", type=float, default=None, help="gamma / epsilon / lambda / tau")
    p.add_argument("--mixup-alpha", type=float, default=None)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--sam-rho", type=float, default=None)
    p.add_argument("--swa-start", type=int, default=None)
    p.add_argument("--swa-cycle", type=int, default=1)
    p.add_argument("--swa-lr", type=float, default=None)
    p.add_argument("--hidden", default="32,32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="Bayes reject rules on a Gaussian mixture")
    p.add_argument("--spec", required=True, help="mixture spec JSON")
    p.add_argument("--sweep", action="store_true", help="emit a threshold sweep CSV")
    p.add_argument("--score", default="true_posterior_max", choices=SCORE_IDS)
    p.add_argument("--grid", default="0:1:21", help="start:stop:num or comma list of thresholds")
    p.add_argument("--model", help="model JSON for msp_of_model")
    p.add_argument("--n-mc", type=int, default=100_000)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergedTraining as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DIVERGED
    except (FpkitError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"error: numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
