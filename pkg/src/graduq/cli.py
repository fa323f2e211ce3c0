"""Command-line surface.

Subcommands: train, score, eval-ood, eval-calibration, active-learn,
verify. Configuration files are strict JSON: any unknown key is an error.
All randomness flows from the single seed in the config (or --seed).

Exit codes: 0 success, 1 domain/config error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .data import Dataset, gen_gaussian_clusters, load_csv, load_idx
from .errors import ConfigError, GraduqError
from .experiments import (
    ActiveLearnConfig,
    CalibrationConfig,
    OodExperimentConfig,
    run_active_learning,
    run_calibration_experiment,
    run_ood_experiment,
    scorer_config_for,
)
from .models import ModelConfig, deserialize_model, serialize_model
from .reports import write_metrics_csv, write_report, write_scores_csv
from .rng import derive_key
from .scoring import METHODS, ScorerConfig, score_sample, with_sample_seed
from .training import OptimizerConfig, fit
from .verification import (
    CHECKS,
    SeparationConfig,
    VerificationReport,
    check_gradient_separation,
    check_posterior_gaussian,
    run_all_checks,
)

# spec'd CLI defaults; the depth rate applies to regrad_star, perturbation
# scorers get sigma 0.008 unless the config sets sigma explicitly
SCORER_DEFAULTS = {
    "method": "regrad_star",
    "norm": "l2",
    "lambda": 0.3,
    "sigma": 0.02,
    "n_perturb": 100,
    "fgsm_a": 0.0001,
    "dropout_rate": 0.4,
    "mc_samples": 100,
}

MODEL_KEYS = {
    "architecture",
    "input_shape",
    "num_classes",
    "hidden",
    "conv_channels",
    "kernel_size",
    "dense_width",
    "use_bias",
}
OPTIMIZER_KEYS = {"lr_schedule", "momentum", "weight_decay", "batch_size", "max_epochs"}
DATA_KEYS = {"kind", "num_classes", "n_per_class", "means", "std", "path", "images", "labels"}
TOP_KEYS = {"seed", "out_dir", "model", "optimizer", "scorer", "data", "experiment"}
OOD_KEYS = {
    "cluster_offset",
    "cluster_std",
    "n_train_per_class",
    "n_test_per_class",
    "ring_n",
    "ring_noise",
    "ring_radius",
    "methods",
    "seeds",
    "val_fraction",
    "val_acc_floor",
}
CALIBRATION_KEYS = {
    "cluster_offset",
    "cluster_std",
    "n_train_per_class",
    "n_test_per_class",
    "methods",
    "seeds",
    "val_fraction",
}
ACTIVE_KEYS = {
    "m1",
    "m2",
    "cycles",
    "cluster_offset",
    "cluster_std",
    "n_pool_per_class",
    "n_val_per_class",
    "n_test_per_class",
    "acquisition",
    "seeds",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage + exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _strict_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _strict_keys(doc, TOP_KEYS, "config")
    for section, keys in (
        ("model", MODEL_KEYS),
        ("optimizer", OPTIMIZER_KEYS),
        ("scorer", set(SCORER_DEFAULTS)),
        ("data", DATA_KEYS),
    ):
        if section in doc:
            if not isinstance(doc[section], dict):
                raise ConfigError(f"config section {section!r} must be an object")
            _strict_keys(doc[section], keys, f"config.{section}")
    return doc


def model_config_from(doc: dict) -> ModelConfig:
    section = dict(doc.get("model", {}))
    section.setdefault("architecture", "mlp")
    section.setdefault("input_shape", [2])
    section.setdefault("num_classes", 2)
    return ModelConfig(
        architecture=section["architecture"],
        input_shape=tuple(section["input_shape"]),
        num_classes=int(section["num_classes"]),
        hidden=tuple(section.get("hidden", (64, 64))),
        conv_channels=tuple(section.get("conv_channels", (32, 32))),
        kernel_size=int(section.get("kernel_size", 4)),
        dense_width=int(section.get("dense_width", 128)),
        use_bias=bool(section.get("use_bias", True)),
    )


def optimizer_config_from(doc: dict, seed: int) -> OptimizerConfig:
    section = doc.get("optimizer", {})
    schedule = section.get("lr_schedule", [[0, 1e-2]])
    return OptimizerConfig(
        lr_schedule=tuple((int(e), float(lr)) for e, lr in schedule),
        momentum=float(section.get("momentum", 0.9)),
        weight_decay=float(section.get("weight_decay", 5e-4)),
        batch_size=int(section.get("batch_size", 128)),
        max_epochs=int(section.get("max_epochs", 30)),
        seed=seed,
    )


def scorer_config_from(doc: dict, method: str | None, seed: int) -> ScorerConfig:
    section = dict(doc.get("scorer", {}))
    chosen = method or section.get("method", SCORER_DEFAULTS["method"])
    if chosen not in METHODS:
        raise ConfigError(f"unknown method {chosen!r}; choose from {METHODS}")
    sigma_default = 0.008 if chosen in ("perturb_x", "perturb_theta") else SCORER_DEFAULTS["sigma"]
    lambda_default = SCORER_DEFAULTS["lambda"] if chosen == "regrad_star" else 0.0
    return ScorerConfig(
        method=chosen,
        norm=section.get("norm", SCORER_DEFAULTS["norm"]),
        selectivity=float(section.get("lambda", lambda_default)),
        sigma=float(section.get("sigma", sigma_default)),
        n_perturb=int(section.get("n_perturb", SCORER_DEFAULTS["n_perturb"])),
        fgsm_bound=float(section.get("fgsm_a", SCORER_DEFAULTS["fgsm_a"])),
        dropout_rate=float(section.get("dropout_rate", SCORER_DEFAULTS["dropout_rate"])),
        mc_samples=int(section.get("mc_samples", SCORER_DEFAULTS["mc_samples"])),
        seed=seed,
    )


def dataset_from(doc: dict, seed: int) -> Dataset:
    section = dict(doc.get("data", {}))
    kind = section.get("kind", "clusters")
    if kind == "clusters":
        num_classes = int(section.get("num_classes", 2))
        n_per_class = int(section.get("n_per_class", 200))
        std = float(section.get("std", 0.0125))
        means = section.get("means")
        if means is None:
            means = [[-0.5, 0.0], [0.5, 0.0]][:num_classes]
            if num_classes != 2:
                raise ConfigError("data.means is required for num_classes != 2")
        return gen_gaussian_clusters(num_classes, n_per_class, np.asarray(means, dtype=float), std, seed)
    if kind == "csv":
        if "path" not in section:
            raise ConfigError("data.path is required for kind=csv")
        return load_csv(section["path"])
    if kind == "idx":
        if "images" not in section or "labels" not in section:
            raise ConfigError("data.images and data.labels are required for kind=idx")
        return load_idx(section["images"], section["labels"])
    raise ConfigError(f"unknown data kind {kind!r}")


def _as_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _as_jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _as_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _as_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _out_path(doc: dict, arg_out: str | None, default_name: str) -> str | None:
    if arg_out:
        return arg_out
    out_dir = doc.get("out_dir")
    if out_dir:
        return os.path.join(out_dir, default_name)
    return None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    doc = load_config(args.config)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    model_cfg = model_config_from(doc)
    data = dataset_from(doc, derive_key(seed, "train-data")[0])
    n = len(data)
    n_val = max(1, n // 10)
    val = data.subset(np.arange(n - n_val, n), "val")
    train = data.subset(np.arange(0, n - n_val), "train")
    opt = optimizer_config_from(doc, derive_key(seed, "fit")[0])
    report = fit(model_cfg, opt, train, val)
    serialize_model(report.params, args.out)
    if args.report:
        write_report(
            {
                "experiment": "train",
                "seed": seed,
                "selected_epoch": report.selected_epoch,
                "train_loss": report.train_loss,
                "val_accuracy": report.val_accuracy,
                "model_file": args.out,
            },
            args.report,
        )
    print(
        f"trained {model_cfg.architecture} for {opt.max_epochs} epochs; "
        f"selected epoch {report.selected_epoch} "
        f"(val acc {report.val_accuracy[report.selected_epoch]:.4f}) -> {args.out}"
    )
    return 0


def cmd_score(args) -> int:
    doc = load_config(args.config)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    params = deserialize_model(args.model)
    data = load_csv(args.data)
    cfg = scorer_config_from(doc, args.method, seed)
    rows = []
    for i, x in enumerate(data.x):
        score = score_sample(params, x, with_sample_seed(cfg, i))
        rows.append((i, cfg.method, score.value))
    if args.out:
        write_scores_csv(rows, args.out)
        print(f"wrote {len(rows)} scores to {args.out}")
    else:
        print("sample_index,method,score")
        for i, method, value in rows:
            print(f"{i},{method},{value!r}")
    return 0


def cmd_eval_ood(args) -> int:
    doc = load_config(args.config)
    section = dict(doc.get("experiment", {}))
    _strict_keys(section, OOD_KEYS, "config.experiment")
    base = OodExperimentConfig()
    scorer = scorer_config_from(doc, "regrad_star", 0)
    if "n_perturb" not in doc.get("scorer", {}):
        scorer = dataclasses.replace(scorer, n_perturb=base.scorer.n_perturb)
    config = OodExperimentConfig(
        cluster_offset=float(section.get("cluster_offset", base.cluster_offset)),
        cluster_std=float(section.get("cluster_std", base.cluster_std)),
        n_train_per_class=int(section.get("n_train_per_class", base.n_train_per_class)),
        n_test_per_class=int(section.get("n_test_per_class", base.n_test_per_class)),
        ring_n=int(section.get("ring_n", base.ring_n)),
        ring_noise=float(section.get("ring_noise", base.ring_noise)),
        ring_radius=section.get("ring_radius", None),
        model=model_config_from(doc),
        optimizer=optimizer_config_from(doc, 0) if "optimizer" in doc else base.optimizer,
        scorer=scorer,
        methods=tuple(section.get("methods", base.methods)),
        seeds=tuple(section.get("seeds", base.seeds)),
        val_fraction=float(section.get("val_fraction", base.val_fraction)),
        val_acc_floor=float(section.get("val_acc_floor", base.val_acc_floor)),
        threads=args.threads,
    )
    report = run_ood_experiment(config)
    doc_out = {
        "experiment": "ood",
        "config": _as_jsonable(config),
        "per_method": _as_jsonable(report.per_method),
    }
    path = _out_path(doc, args.out, "ood_report.json")
    if path:
        write_report(doc_out, path)
        print(f"wrote {path}")
    if args.csv:
        rows = []
        for method, vals in report.per_method.items():
            for metric in ("auroc", "aupr"):
                for seed, value in zip(config.seeds, vals[metric]):
                    rows.append((method, seed, metric, value))
        write_metrics_csv(rows, args.csv)
        print(f"wrote {args.csv}")
    for method, vals in sorted(report.per_method.items()):
        print(
            f"{method:18s} AUROC {vals['auroc_mean']:.4f} +- {vals['auroc_std']:.4f}   "
            f"AUPR {vals['aupr_mean']:.4f} +- {vals['aupr_std']:.4f}"
        )
    return 0


def cmd_eval_calibration(args) -> int:
    doc = load_config(args.config)
    section = dict(doc.get("experiment", {}))
    _strict_keys(section, CALIBRATION_KEYS, "config.experiment")
    base = CalibrationConfig()
    config = CalibrationConfig(
        cluster_offset=float(section.get("cluster_offset", base.cluster_offset)),
        cluster_std=float(section.get("cluster_std", base.cluster_std)),
        n_train_per_class=int(section.get("n_train_per_class", base.n_train_per_class)),
        n_test_per_class=int(section.get("n_test_per_class", base.n_test_per_class)),
        model=model_config_from(doc),
        optimizer=optimizer_config_from(doc, 0) if "optimizer" in doc else base.optimizer,
        methods=tuple(section.get("methods", base.methods)),
        seeds=tuple(section.get("seeds", base.seeds)),
        val_fraction=float(section.get("val_fraction", base.val_fraction)),
        threads=args.threads,
    )
    report = run_calibration_experiment(config)
    doc_out = {
        "experiment": "calibration",
        "config": _as_jsonable(config),
        "per_method": _as_jsonable(report.per_method),
    }
    path = _out_path(doc, args.out, "calibration_report.json")
    if path:
        write_report(doc_out, path)
        print(f"wrote {path}")
    for method, vals in sorted(report.per_method.items()):
        print(f"{method:18s} rAULC {vals['raulc_mean']:.4f} +- {vals['raulc_std']:.4f}")
    return 0


def cmd_active_learn(args) -> int:
    doc = load_config(args.config)
    section = dict(doc.get("experiment", {}))
    _strict_keys(section, ACTIVE_KEYS, "config.experiment")
    offset = float(section.get("cluster_offset", 0.5))
    std = float(section.get("cluster_std", 0.25))
    n_pool = int(section.get("n_pool_per_class", 150))
    n_val = int(section.get("n_val_per_class", 30))
    n_test = int(section.get("n_test_per_class", 150))
    seeds = tuple(section.get("seeds", (0, 1, 2, 3, 4)))
    acquisition = section.get("acquisition", "scorer")
    means = np.array([[-offset, 0.0], [offset, 0.0]])
    per_seed = []
    for seed in seeds:
        full_train = gen_gaussian_clusters(2, n_pool, means, std, seed=derive_key(seed, "pool")[0])
        val = gen_gaussian_clusters(2, n_val, means, std, seed=derive_key(seed, "val")[0])
        test = gen_gaussian_clusters(2, n_test, means, std, seed=derive_key(seed, "test")[0])
        config = ActiveLearnConfig(
            m1=int(section.get("m1", 4)),
            m2=int(section.get("m2", 2)),
            cycles=int(section.get("cycles", 10)),
            acquisition=acquisition,
            seed=seed,
            threads=args.threads,
        )
        result = run_active_learning(config, full_train, val, test)
        per_seed.append(
            {
                "seed": seed,
                "accuracy": result.accuracy,
                "nll": result.nll,
                "mean_accuracy": result.mean_accuracy,
                "final_accuracy": result.accuracy[-1],
                "mean_nll": result.mean_nll,
            }
        )
        print(
            f"seed {seed}: final ACC {result.accuracy[-1]:.4f}  mean ACC {result.mean_accuracy:.4f}  "
            f"mean NLL {result.mean_nll:.4f}"
        )
    doc_out = {
        "experiment": "active_learning",
        "acquisition": acquisition,
        "per_seed": _as_jsonable(per_seed),
        "mean_final_accuracy": float(np.mean([r["final_accuracy"] for r in per_seed])),
    }
    path = _out_path(doc, args.out, f"active_learning_{acquisition}.json")
    if path:
        write_report(doc_out, path)
        print(f"wrote {path}")
    return 0


def _verification_report_doc(reports: list[VerificationReport]) -> dict:
    return {
        "experiment": "verification",
        "checks": [
            {
                "check": r.check,
                "passed": r.passed,
                "inconclusive": r.inconclusive,
                "measurements": _as_jsonable(r.measurements),
                "tolerances": _as_jsonable(r.tolerances),
                "notes": r.notes,
            }
            for r in reports
        ],
        "all_passed": all(r.passed for r in reports),
    }


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.prop == "all":
        reports = run_all_checks(seed=seed)
    elif args.prop == "posterior-gaussian":
        reports = [check_posterior_gaussian(seed=seed)]
    elif args.prop == "gradient-separation":
        reports = [check_gradient_separation(SeparationConfig(seed=seed))]
    elif args.prop in ("perturbation-transfer", "kl-gradient-bound"):
        reports = [r for r in run_all_checks(seed=seed) if r.check == args.prop.replace("-", "_")]
    else:
        raise ConfigError(f"unknown check {args.prop!r}")
    for r in reports:
        status = "PASS" if r.passed else ("INCONCLUSIVE" if r.inconclusive else "FAIL")
        print(f"[{status}] {r.check}")
    if args.out:
        write_report(_verification_report_doc(reports), args.out)
        print(f"wrote {args.out}")
    return 0 if all(r.passed for r in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graduq", description="gradient-based uncertainty scoring toolkit")
    parser.add_argument("--threads", type=int, default=1, help="worker cap; results identical for any value")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a classifier and save it")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--report", default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_score = sub.add_parser("score", help="score a dataset with one method")
    p_score.add_argument("--model", required=True)
    p_score.add_argument("--data", required=True, help="CSV with header x0..xk,label")
    p_score.add_argument("--method", default=None, choices=list(METHODS))
    p_score.add_argument("--config", default=None)
    p_score.add_argument("--out", default=None)
    p_score.add_argument("--seed", type=int, default=None)
    p_score.set_defaults(func=cmd_score)

    p_ood = sub.add_parser("eval-ood", help="in-distribution vs ring OOD detection")
    p_ood.add_argument("--config", default=None)
    p_ood.add_argument("--out", default=None)
    p_ood.add_argument("--csv", default=None)
    p_ood.set_defaults(func=cmd_eval_ood)

    p_cal = sub.add_parser("eval-calibration", help="rAULC uncertainty calibration")
    p_cal.add_argument("--config", default=None)
    p_cal.add_argument("--out", default=None)
    p_cal.set_defaults(func=cmd_eval_calibration)

    p_al = sub.add_parser("active-learn", help="uncertainty-guided acquisition")
    p_al.add_argument("--config", default=None)
    p_al.add_argument("--out", default=None)
    p_al.set_defaults(func=cmd_active_learn)

    p_verify = sub.add_parser("verify", help="numerical checks of the theory")
    p_verify.add_argument("--prop", default="all",
                          choices=["all", *[c.replace("_", "-") for c in CHECKS]])
    p_verify.add_argument("--out", default=None)
    p_verify.add_argument("--seed", type=int, default=None)
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except GraduqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
