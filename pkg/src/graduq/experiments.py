"""The three evaluation protocols at desk scale: OOD detection, uncertainty
calibration, and uncertainty-guided active learning.

Every experiment is a pure function of its config: data generation,
training, and scoring all derive their streams from the config seeds, so
reports are bit-reproducible and independent of the worker thread count.

The default geometry is two tight Gaussian blobs at distance 0.5 from the
origin with an enclosing ring just outside their support. At that input
scale the validation-selected network keeps soft probabilities, which is
the regime where gradient scores separate the ring from the blobs; trained
to saturation, every score collapses onto the ring's confident arcs.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from .data import Dataset, gen_gaussian_clusters, gen_ood_ring
from .errors import DomainError, ExperimentError
from .metrics import aupr, auroc, raulc
from .models import ModelConfig, ParameterSet
from .rng import derive_key, derive_rng
from .scoring import ScorerConfig, score_sample, with_sample_seed
from .training import OptimizerConfig, evaluate, fit

DEFAULT_METHODS = (
    "entropy",
    "vterm",
    "negrad",
    "ungrad",
    "gradnorm",
    "exgrad",
    "regrad",
    "regrad_star",
    "perturb_x",
    "perturb_theta",
    "mc_aa",
    "inserted_dropout",
)

# Gaussian perturbation scorers default to sigma 0.008; smoothing keeps the
# base sigma (0.02 by default)
METHOD_SIGMA = {"perturb_x": 0.008, "perturb_theta": 0.008}


def scorer_config_for(method: str, base: ScorerConfig) -> ScorerConfig:
    """Per-method config derived from one base: only regrad_star keeps the
    depth-weighting rate, and perturbation scorers get their own sigma."""
    cfg = replace(base, method=method)
    if method != "regrad_star":
        cfg = replace(cfg, selectivity=0.0)
    if method in METHOD_SIGMA:
        cfg = replace(cfg, sigma=METHOD_SIGMA[method])
    return cfg


def score_dataset(
    params: ParameterSet,
    xs: np.ndarray,
    cfg: ScorerConfig,
    threads: int = 1,
) -> np.ndarray:
    """Score every input; per-sample seeds make the result independent of
    the thread count."""

    def one(i: int) -> float:
        return score_sample(params, xs[i], with_sample_seed(cfg, i)).value

    indices = range(len(xs))
    if threads <= 1:
        return np.array([one(i) for i in indices])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.array(list(pool.map(one, indices)))


def _resolve_methods(
    methods, base: ScorerConfig
) -> dict[str, ScorerConfig | Callable]:
    if isinstance(methods, Mapping):
        return dict(methods)
    return {m: scorer_config_for(m, base) for m in methods}


# ---------------------------------------------------------------------------
# OOD detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OodExperimentConfig:
    cluster_offset: float = 0.5
    cluster_std: float = 0.0125
    n_train_per_class: int = 200
    n_test_per_class: int = 150
    ring_n: int = 300
    ring_noise: float = 0.003
    ring_radius: float | None = None  # default: just outside the ID support
    model: ModelConfig = ModelConfig("mlp", (2,), 2)
    optimizer: OptimizerConfig = OptimizerConfig(
        lr_schedule=((0, 1e-2),), momentum=0.9, weight_decay=5e-4, batch_size=64, max_epochs=10
    )
    scorer: ScorerConfig = ScorerConfig(
        method="regrad_star", selectivity=0.3, sigma=0.02, n_perturb=50
    )
    methods: tuple[str, ...] = ("regrad_star", "exgrad", "negrad", "gradnorm")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    val_fraction: float = 0.1
    val_acc_floor: float = 0.9
    threads: int = 1

    def resolved_ring_radius(self) -> float:
        if self.ring_radius is not None:
            return self.ring_radius
        support = self.cluster_offset + 3.0 * self.cluster_std
        return support + 3.0 * self.ring_noise + 0.01 * self.cluster_offset


@dataclass
class OodReport:
    config: OodExperimentConfig
    per_method: dict[str, dict[str, list[float] | float]]

    def summary(self) -> dict:
        return {
            method: {
                "auroc_mean": vals["auroc_mean"],
                "auroc_std": vals["auroc_std"],
                "aupr_mean": vals["aupr_mean"],
                "aupr_std": vals["aupr_std"],
            }
            for method, vals in self.per_method.items()
        }


def _train_for_seed(
    cfg_model: ModelConfig,
    optimizer: OptimizerConfig,
    train_full: Dataset,
    val_fraction: float,
    seed: int,
) -> tuple[ParameterSet, float]:
    n = len(train_full)
    n_val = max(1, int(round(n * val_fraction)))
    val = train_full.subset(np.arange(n - n_val, n), "val")
    train = train_full.subset(np.arange(0, n - n_val), "train")
    opt = replace(optimizer, seed=derive_key(seed, "fit")[0])
    report = fit(cfg_model, opt, train, val)
    acc, _ = evaluate(report.params, val)
    return report.params, acc


def run_ood_experiment(
    config: OodExperimentConfig = OodExperimentConfig(),
    methods: Mapping[str, ScorerConfig | Callable] | None = None,
) -> OodReport:
    """Per seed: draw clusters and ring, train, score, compute AUROC/AUPR
    with the ring as the positive class. `methods` may map names to scorer
    configs or to plain callables (params, x, sample_seed) -> float."""
    mu = config.cluster_offset
    means = np.array([[-mu, 0.0], [mu, 0.0]])
    resolved = (
        _resolve_methods(config.methods, config.scorer) if methods is None else dict(methods)
    )
    radius = config.resolved_ring_radius()
    results: dict[str, dict] = {m: {"auroc": [], "aupr": []} for m in resolved}
    for seed in config.seeds:
        train_full = gen_gaussian_clusters(
            2, config.n_train_per_class, means, config.cluster_std, seed=derive_key(seed, "train")[0]
        )
        id_test = gen_gaussian_clusters(
            2, config.n_test_per_class, means, config.cluster_std, seed=derive_key(seed, "test")[0]
        )
        ood = gen_ood_ring(
            radius,
            config.ring_n,
            config.ring_noise,
            seed=derive_key(seed, "ood")[0],
            id_support_radius=mu + 3.0 * config.cluster_std,
        )
        params, val_acc = _train_for_seed(
            config.model, config.optimizer, train_full, config.val_fraction, seed
        )
        if val_acc < config.val_acc_floor:
            raise ExperimentError(
                f"seed {seed}: validation accuracy {val_acc:.3f} below floor {config.val_acc_floor}"
            )
        for name, scorer in resolved.items():
            if isinstance(scorer, ScorerConfig):
                scorer_seeded = replace(scorer, seed=derive_key(seed, "score", name)[0])
                id_scores = score_dataset(params, id_test.x, scorer_seeded, config.threads)
                ood_scores = score_dataset(params, ood.x, scorer_seeded, config.threads)
            else:
                base = derive_key(seed, "score", name)[0]
                id_scores = np.array([scorer(params, x, base + i) for i, x in enumerate(id_test.x)])
                ood_scores = np.array([scorer(params, x, base + i) for i, x in enumerate(ood.x)])
            results[name]["auroc"].append(auroc(ood_scores, id_scores))
            results[name]["aupr"].append(aupr(ood_scores, id_scores))
    per_method = {}
    for name, vals in results.items():
        per_method[name] = {
            "auroc": vals["auroc"],
            "aupr": vals["aupr"],
            "auroc_mean": float(np.mean(vals["auroc"])),
            "auroc_std": float(np.std(vals["auroc"])),
            "aupr_mean": float(np.mean(vals["aupr"])),
            "aupr_std": float(np.std(vals["aupr"])),
        }
    return OodReport(config, per_method)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationConfig:
    """Overlapping blobs so the trained model makes some mistakes; rAULC
    then measures how well each score ranks those mistakes last."""

    cluster_offset: float = 0.5
    cluster_std: float = 0.3
    n_train_per_class: int = 200
    n_test_per_class: int = 200
    model: ModelConfig = ModelConfig("mlp", (2,), 2)
    optimizer: OptimizerConfig = OptimizerConfig(
        lr_schedule=((0, 1e-2),), momentum=0.9, weight_decay=5e-4, batch_size=64, max_epochs=30
    )
    scorer: ScorerConfig = ScorerConfig(
        method="regrad_star", selectivity=0.3, sigma=0.02, n_perturb=50
    )
    methods: tuple[str, ...] = ("regrad_star", "exgrad", "entropy")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    val_fraction: float = 0.1
    threads: int = 1


@dataclass
class CalibrationReport:
    config: CalibrationConfig
    per_method: dict[str, dict[str, list[float] | float]]


def run_calibration_experiment(
    config: CalibrationConfig = CalibrationConfig(),
    methods: Mapping[str, ScorerConfig | Callable] | None = None,
) -> CalibrationReport:
    mu = config.cluster_offset
    means = np.array([[-mu, 0.0], [mu, 0.0]])
    resolved = (
        _resolve_methods(config.methods, config.scorer) if methods is None else dict(methods)
    )
    results: dict[str, list[float]] = {m: [] for m in resolved}
    for seed in config.seeds:
        train_full = gen_gaussian_clusters(
            2, config.n_train_per_class, means, config.cluster_std, seed=derive_key(seed, "train")[0]
        )
        test = gen_gaussian_clusters(
            2, config.n_test_per_class, means, config.cluster_std, seed=derive_key(seed, "test")[0]
        )
        params, _ = _train_for_seed(
            config.model, config.optimizer, train_full, config.val_fraction, seed
        )
        from .training import _batch_log_proba  # noqa: PLC0415

        logp = _batch_log_proba(params, test.x)
        correct = (np.argmax(logp, axis=1) == test.y).astype(np.float64)
        if correct.all():
            warnings.warn(f"seed {seed}: all test predictions correct; rAULC is 1 by convention", stacklevel=2)
        for name, scorer in resolved.items():
            if isinstance(scorer, ScorerConfig):
                scorer_seeded = replace(scorer, seed=derive_key(seed, "score", name)[0])
                scores = score_dataset(params, test.x, scorer_seeded, config.threads)
            else:
                base = derive_key(seed, "score", name)[0]
                scores = np.array([scorer(params, x, base + i) for i, x in enumerate(test.x)])
            results[name].append(1.0 if correct.all() else raulc(correct, scores))
    per_method = {
        name: {"raulc": vals, "raulc_mean": float(np.mean(vals)), "raulc_std": float(np.std(vals))}
        for name, vals in results.items()
    }
    return CalibrationReport(config, per_method)


# ---------------------------------------------------------------------------
# active learning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActiveLearnConfig:
    m1: int = 4
    m2: int = 2
    cycles: int = 10
    model: ModelConfig = ModelConfig("mlp", (2,), 2, hidden=(16,))
    optimizer: OptimizerConfig = OptimizerConfig(
        lr_schedule=((0, 5e-2),), momentum=0.9, weight_decay=5e-4, batch_size=16, max_epochs=60
    )
    scorer: ScorerConfig = ScorerConfig(
        method="regrad_star", selectivity=0.3, sigma=0.02, n_perturb=8
    )
    acquisition: str = "scorer"  # "scorer" | "random"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.m1 < self.model.num_classes:
            raise DomainError("m1 must cover every class")
        if self.m2 < 0 or self.cycles < 1:
            raise DomainError("m2 must be >= 0 and cycles >= 1")
        if self.acquisition not in ("scorer", "random"):
            raise DomainError(f"unknown acquisition {self.acquisition!r}")


@dataclass
class ActiveLearnResult:
    accuracy: list[float]
    nll: list[float]
    acquired: list[int]  # pool indices in acquisition order

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def mean_nll(self) -> float:
        return float(np.mean(self.nll))


def _balanced_initial(train: Dataset, m1: int, seed: int) -> np.ndarray:
    classes = np.unique(train.y)
    if m1 % len(classes) != 0:
        raise DomainError(f"m1={m1} must be a multiple of {len(classes)} classes")
    per_class = m1 // len(classes)
    rng = derive_rng(seed, "initial")
    picked = []
    for c in classes:
        candidates = np.flatnonzero(train.y == c)
        if len(candidates) < per_class:
            raise DomainError(f"class {c}: not enough samples for the initial pick")
        picked.append(rng.choice(candidates, size=per_class, replace=False))
    return np.sort(np.concatenate(picked))


def run_active_learning(
    config: ActiveLearnConfig, full_train: Dataset, val: Dataset, test: Dataset
) -> ActiveLearnResult:
    """Retrain from scratch each cycle on the labeled set, then acquire the
    m2 highest-uncertainty pool samples (ties to the lowest pool index).

    full_train provides both the balanced initial labeled set and the
    acquisition pool (its remaining samples)."""
    initial = _balanced_initial(full_train, config.m1, config.seed)
    labeled = list(initial)
    pool_available = sorted(set(range(len(full_train))) - set(labeled))
    if config.cycles * config.m2 > len(pool_available):
        raise ExperimentError(
            f"pool of {len(pool_available)} cannot supply {config.cycles}x{config.m2} acquisitions"
        )
    opt = replace(config.optimizer, seed=derive_key(config.seed, "fit")[0])
    accs: list[float] = []
    nlls: list[float] = []
    acquired: list[int] = []
    rng_random = derive_rng(config.seed, "random-acquire")
    for cycle in range(config.cycles):
        report = fit(config.model, opt, full_train.subset(labeled), val)
        acc, nll = evaluate(report.params, test)
        accs.append(acc)
        nlls.append(nll)
        if config.m2 == 0 or cycle == config.cycles - 1:
            continue
        if config.acquisition == "random":
            chosen = sorted(
                rng_random.choice(len(pool_available), size=config.m2, replace=False).tolist()
            )
            picks = [pool_available[i] for i in chosen]
        else:
            scorer = replace(config.scorer, seed=derive_key(config.seed, "score", cycle)[0])
            scores = score_dataset(
                report.params, full_train.x[pool_available], scorer, config.threads
            )
            order = np.argsort(-scores, kind="mergesort")  # ties -> lowest pool index
            picks = [pool_available[i] for i in order[: config.m2]]
        acquired.extend(picks)
        labeled.extend(picks)
        pool_available = [i for i in pool_available if i not in set(picks)]
    return ActiveLearnResult(accs, nlls, acquired)
