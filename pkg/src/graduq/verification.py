"""Numerical checks of the theoretical claims behind gradient-based scoring.

Four checks, each returning a VerificationReport:

  posterior_gaussian    a 1-parameter logistic model's grid posterior
                        approaches its Gaussian (MLE, inverse-information)
                        approximation as the sample count grows
  perturbation_transfer a first-layer weight perturbation constructed from
                        an input perturbation reproduces it exactly
  gradient_separation   after training to a small loss, gradient scores on
                        training-dense regions are far below scores on
                        unseen regions
  kl_gradient_bound     the probability-weighted gradient-norm sum times
                        E||dtheta|| upper-bounds the Monte-Carlo KL under
                        small parameter noise

Distances between the grid posterior and its Gaussian comparator are taken
between standardized densities (both rescaled by the posterior's natural
width); the raw-density supremum plateaus at a skewness-driven constant, so
only the standardized distance can be expected to shrink with sample size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import gen_gaussian_clusters
from .errors import ConfigError, DomainError
from .models import ModelConfig, ParameterSet, forward_logits, init_parameters, predict_proba
from .rng import derive_key, derive_rng
from .scoring import ScorerConfig, kl_divergence, per_class_gradients, regrad_score
from .training import MomentumState, OptimizerConfig, nll_loss_and_grads, sgd_step

CHECKS = (
    "posterior_gaussian",
    "perturbation_transfer",
    "gradient_separation",
    "kl_gradient_bound",
)


@dataclass
class VerificationReport:
    check: str
    passed: bool
    inconclusive: bool = False
    measurements: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    notes: str = ""


# ---------------------------------------------------------------------------
# posterior_gaussian
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def posterior_sup_distance(n: int, seed: int, theta_true: float = 1.0) -> dict:
    """Standardized sup-distance between the grid posterior and its Gaussian
    approximation for p(y=1|x,theta) = sigmoid(theta * x) with n samples.

    Grid over [-5, 5] at step 1e-3, flat prior, trapezoid normalization,
    MLE by grid argmax. The Gaussian comparator is N(theta*, 1/(n*F)) with F
    the empirical per-sample Fisher information at theta*. All-same-label
    draws are discarded and redrawn from the next substream.
    """
    if n < 2:
        raise DomainError("need at least two samples")
    x = y = None
    for attempt in range(32):
        rng = derive_rng(seed, "posterior", n, attempt)
        x = rng.standard_normal(n)
        y = (rng.random(n) < _sigmoid(theta_true * x)).astype(np.float64)
        if 0.0 < y.mean() < 1.0:
            break
    else:
        raise DomainError("could not draw a two-label sample")
    grid = np.arange(-5.0, 5.0 + 1e-9, 1e-3)
    loglik = np.zeros_like(grid)
    for lo in range(0, n, 500):
        z = grid[:, None] * x[lo : lo + 500][None, :]
        loglik += (y[lo : lo + 500][None, :] * z - np.logaddexp(0.0, z)).sum(axis=1)
    loglik -= loglik.max()
    dens = np.exp(loglik)
    posterior = dens / np.trapezoid(dens, grid)
    theta_star = float(grid[int(np.argmax(posterior))])
    p_star = _sigmoid(theta_star * x)
    fisher = float(np.mean(x * x * p_star * (1.0 - p_star)))
    width = 1.0 / np.sqrt(n * fisher)
    gauss = np.exp(-0.5 * ((grid - theta_star) / width) ** 2) / (np.sqrt(2.0 * np.pi) * width)
    return {
        "n": n,
        "theta_star": theta_star,
        "fisher": fisher,
        "posterior_integral": float(np.trapezoid(posterior, grid)),
        "sup_distance": float(np.max(np.abs(posterior - gauss))) * width,
    }


def check_posterior_gaussian(
    n_values: tuple[int, ...] = (50, 500, 5000),
    seed: int = 0,
    replicates: int = 5,
    theta_true: float = 1.0,
) -> VerificationReport:
    """Pass iff the sup-distance strictly decreases along n_values for every
    replicate."""
    if len(n_values) < 2 or sorted(n_values) != list(n_values):
        raise DomainError("n_values must be increasing with at least two entries")
    per_replicate = []
    integral_ok = True
    for r in range(replicates):
        rows = [posterior_sup_distance(n, derive_key(seed, "rep", r)[0], theta_true) for n in n_values]
        dists = [row["sup_distance"] for row in rows]
        integral_ok &= all(abs(row["posterior_integral"] - 1.0) <= 1e-6 for row in rows)
        per_replicate.append(dists)
    monotone = all(all(d[i] > d[i + 1] for i in range(len(d) - 1)) for d in per_replicate)
    return VerificationReport(
        check="posterior_gaussian",
        passed=bool(monotone and integral_ok),
        measurements={
            "n_values": list(n_values),
            "sup_distances": per_replicate,
            "posterior_integral_ok": integral_ok,
        },
        tolerances={"posterior_integral": 1e-6},
        notes="standardized sup-distance must strictly decrease in n for every replicate",
    )


# ---------------------------------------------------------------------------
# perturbation_transfer
# ---------------------------------------------------------------------------


def check_perturbation_transfer(
    params: ParameterSet, x: np.ndarray, dx: np.ndarray, tolerance: float = 1e-10
) -> VerificationReport:
    """Construct first-layer weight perturbations dW[k, j] = W[k, j] * dx[k] / x[k]
    and verify f(x, theta + dtheta) equals f(x + dx, theta) to within
    `tolerance` (the first-layer pre-activations agree exactly, so this is
    an identity, not a first-order approximation).

    Coordinates with x[k] == 0 are skipped: their dx is forced to zero and
    reported.
    """
    if params.config.architecture != "mlp":
        raise DomainError("transfer check needs a dense first layer")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    dx = np.asarray(dx, dtype=np.float64).reshape(-1)
    if x.shape != dx.shape or x.shape != params.config.input_shape:
        raise DomainError(f"x and dx must have shape {params.config.input_shape}")
    zero = x == 0.0
    dx_eff = np.where(zero, 0.0, dx)
    first = params.layers[0]
    ratio = np.where(zero, 0.0, dx_eff / np.where(zero, 1.0, x))
    perturbed = params.copy()
    perturbed.layers[0].weight += first.weight * ratio[:, None]
    logits_param = forward_logits(perturbed, x).data
    logits_input = forward_logits(params, x + dx_eff).data
    deviation = float(np.max(np.abs(logits_param - logits_input)))
    return VerificationReport(
        check="perturbation_transfer",
        passed=deviation <= tolerance,
        measurements={"max_deviation": deviation, "skipped_coordinates": int(zero.sum())},
        tolerances={"max_deviation": tolerance},
    )


# ---------------------------------------------------------------------------
# gradient_separation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeparationConfig:
    """Train on two tight blobs along one axis, score fresh ID points
    against blobs rotated onto the orthogonal axis (same scale, zero
    training density)."""

    cluster_offset: float = 0.5
    cluster_std: float = 0.0125
    n_train_per_class: int = 1000
    n_eval: int = 200
    loss_floor: float = 1e-3
    median_ratio: float = 0.2
    max_epochs: int = 400
    learning_rate: float = 5e-2
    batch_size: int = 256
    seed: int = 0


def check_gradient_separation(cfg: SeparationConfig = SeparationConfig()) -> VerificationReport:
    mu = cfg.cluster_offset
    id_means = np.array([[-mu, 0.0], [mu, 0.0]])
    ood_means = np.array([[0.0, -mu], [0.0, mu]])
    train = gen_gaussian_clusters(
        2, cfg.n_train_per_class, id_means, cfg.cluster_std, seed=derive_key(cfg.seed, "train")[0]
    )
    id_eval = gen_gaussian_clusters(
        2, cfg.n_eval // 2, id_means, cfg.cluster_std, seed=derive_key(cfg.seed, "id")[0]
    )
    ood_eval = gen_gaussian_clusters(
        2, cfg.n_eval // 2, ood_means, cfg.cluster_std, seed=derive_key(cfg.seed, "ood")[0]
    )
    model_cfg = ModelConfig("mlp", (2,), 2)
    opt = OptimizerConfig(
        lr_schedule=((0, cfg.learning_rate),),
        momentum=0.9,
        weight_decay=0.0,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        seed=derive_key(cfg.seed, "fit")[0],
    )
    params = init_parameters(model_cfg, opt.seed)
    state = MomentumState(params)
    shuffle = derive_rng(opt.seed, "shuffle")
    score_cfg = ScorerConfig(method="regrad")
    n = len(train)
    probe = id_eval.x[: min(50, len(id_eval))]
    loss = float("inf")
    epoch_medians: list[float] = []
    epoch_losses: list[float] = []
    for epoch in range(cfg.max_epochs):
        perm = shuffle.permutation(n)
        total = 0.0
        for lo in range(0, n, opt.batch_size):
            idx = perm[lo : lo + opt.batch_size]
            batch_loss, grads = nll_loss_and_grads(params, train.x[idx], train.y[idx])
            sgd_step(params, grads, state, opt, opt.lr_at(epoch))
            total += batch_loss * len(idx)
        loss = total / n
        epoch_losses.append(loss)
        epoch_medians.append(
            float(np.median([regrad_score(params, x, score_cfg).value for x in probe]))
        )
        if loss < cfg.loss_floor:
            break
    if loss >= cfg.loss_floor:
        return VerificationReport(
            check="gradient_separation",
            passed=False,
            inconclusive=True,
            measurements={"final_loss": loss, "epochs": len(epoch_losses)},
            tolerances={"loss_floor": cfg.loss_floor},
            notes="training did not reach the loss floor; separation untested",
        )
    median_id = float(np.median([regrad_score(params, x, score_cfg).value for x in id_eval.x]))
    median_ood = float(np.median([regrad_score(params, x, score_cfg).value for x in ood_eval.x]))
    return VerificationReport(
        check="gradient_separation",
        passed=median_id <= cfg.median_ratio * median_ood,
        measurements={
            "final_loss": loss,
            "median_id": median_id,
            "median_ood": median_ood,
            "ratio": median_id / median_ood,
            "id_median_by_epoch": epoch_medians,
            "loss_by_epoch": epoch_losses,
        },
        tolerances={"median_ratio": cfg.median_ratio, "loss_floor": cfg.loss_floor},
    )


# ---------------------------------------------------------------------------
# kl_gradient_bound
# ---------------------------------------------------------------------------


def kl_bound_for_input(
    params: ParameterSet, x, sigma: float, trials: int, seed: int
) -> dict:
    """Monte-Carlo E[KL(p(theta) || p(theta + dtheta))] against the bound
    sum_c p_c ||g_c||_2 * E||dtheta|| estimated from the same draws."""
    if trials < 1:
        raise DomainError("need at least one trial")
    clean = predict_proba(params, x)
    bundles, probs = per_class_gradients(params, x)
    flat_norms = []
    for bundle in bundles:
        total = 0.0
        for _, gw, gb in bundle.per_layer:
            total += float(np.sum(gw * gw)) + float(np.sum(gb * gb))
        flat_norms.append(np.sqrt(total))
    grad_term = float(np.dot(probs.probs, flat_norms))
    rng = derive_rng(seed, "klbound")
    kl_total = 0.0
    norm_total = 0.0
    for _ in range(trials):
        noisy = params.copy()
        sq = 0.0
        for layer in noisy.layers:
            dw = sigma * rng.standard_normal(layer.weight.shape)
            db = sigma * rng.standard_normal(layer.bias.shape)
            layer.weight += dw
            layer.bias += db
            sq += float(np.sum(dw * dw)) + float(np.sum(db * db))
        norm_total += np.sqrt(sq)
        kl_total += kl_divergence(clean, predict_proba(noisy, x))
    kl_mc = kl_total / trials
    bound = grad_term * (norm_total / trials)
    return {"kl": kl_mc, "bound": bound, "ratio": kl_mc / bound if bound > 0 else 0.0}


def check_kl_gradient_bound(
    params: ParameterSet,
    inputs: np.ndarray,
    sigma: float = 1e-3,
    trials: int = 100,
    seed: int = 0,
    slack: float = 1.05,
    min_fraction: float = 0.95,
) -> VerificationReport:
    """Pass iff KL <= slack * bound for at least min_fraction of inputs.

    The bound is first-order in the perturbation, so sigma must be small;
    values above 1e-2 are outside the regime and rejected.
    """
    if sigma > 1e-2:
        raise ConfigError(f"sigma {sigma} is outside the small-perturbation regime (max 1e-2)")
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    rows = [
        kl_bound_for_input(params, x, sigma, trials, derive_key(seed, "input", i)[0])
        for i, x in enumerate(inputs)
    ]
    within = [r["kl"] <= slack * r["bound"] or (r["kl"] < 1e-15 and r["bound"] < 1e-12) for r in rows]
    fraction = float(np.mean(within))
    return VerificationReport(
        check="kl_gradient_bound",
        passed=fraction >= min_fraction,
        measurements={
            "fraction_within_bound": fraction,
            "mean_ratio": float(np.mean([r["ratio"] for r in rows])),
            "max_ratio": float(np.max([r["ratio"] for r in rows])),
            "sigma": sigma,
            "trials": trials,
        },
        tolerances={"slack": slack, "min_fraction": min_fraction},
    )


def kl_bound_ratio_sweep(
    params: ParameterSet,
    inputs: np.ndarray,
    sigmas: tuple[float, ...] = (1e-3, 5e-4, 1e-4),
    trials: int = 100,
    seed: int = 0,
) -> list[float]:
    """Mean KL/bound ratio per sigma; first-order slack means the ratio
    shrinks as sigma does."""
    out = []
    for sigma in sigmas:
        rows = [
            kl_bound_for_input(params, x, sigma, trials, derive_key(seed, "sweep", i)[0])
            for i, x in enumerate(inputs)
        ]
        out.append(float(np.mean([r["ratio"] for r in rows])))
    return out


def run_all_checks(seed: int = 0) -> list[VerificationReport]:
    """The four checks with their demo settings, in a fixed order."""
    reports = [check_posterior_gaussian(seed=seed)]

    rng = derive_rng(seed, "transfer-demo")
    worst = 0.0
    skipped = 0
    for i in range(10):
        cfg = ModelConfig("mlp", (4,), 3, hidden=(16,))
        params = init_parameters(cfg, derive_key(seed, "transfer", i)[0])
        x = rng.standard_normal(4)
        dx = 1e-3 * rng.standard_normal(4)
        rep = check_perturbation_transfer(params, x, dx)
        worst = max(worst, rep.measurements["max_deviation"])
        skipped += rep.measurements["skipped_coordinates"]
    reports.append(
        VerificationReport(
            check="perturbation_transfer",
            passed=worst <= 1e-10,
            measurements={"max_deviation": worst, "models": 10, "skipped_coordinates": skipped},
            tolerances={"max_deviation": 1e-10},
        )
    )

    reports.append(check_gradient_separation(SeparationConfig(seed=seed)))

    demo_cfg = ModelConfig("mlp", (2,), 2, hidden=(16,))
    demo_params = init_parameters(demo_cfg, derive_key(seed, "bound-model")[0])
    demo_inputs = derive_rng(seed, "bound-inputs").standard_normal((50, 2))
    reports.append(check_kl_gradient_bound(demo_params, demo_inputs, trials=50, seed=seed))
    return reports
