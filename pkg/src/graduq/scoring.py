"""Uncertainty scorers for a trained classifier.

Gradient scorers share one convention: the "norm" of a per-parameter
gradient is the depth-weighted sum over parameterized layers of that
layer's gradient norm, sum_l exp(rate*l) * ||g_l||. With rate 0 the weights
are exactly 1.0, so the unweighted scorer is literally the rate-0 code
path; this makes the identity reductions exact rather than approximate.
Per-layer norms are L2 by default, L1 optionally.

Scores, with p_c = p(y=c|x) and g_c = d log p_c / d params:

  entropy           -sum_c p_c log p_c
  vterm             sum_c |p_c - 1/C|
  negrad            ||sum_c p_c g_c||         (identically 0: sum_c p_c g_c = grad of sum_c p_c = 0)
  ungrad            (1/C) sum_c ||g_c||
  gradnorm          ||(1/C) sum_c g_c||       (one backward on the uniform-weighted sum)
  exgrad            sum_c p_c ||g_c||
  regrad            sum_c sqrt(p_c ||g_c||_2^2) = sum_c sqrt(p_c) ||g_c||_2
  regrad_star       regrad over input-noise-smoothed gradients with depth
                    weighting; class weights use the clean-input p_c
  perturb_x         mean_i KL(p(.|x + dx_i) || p(.|x)),  dx ~ N(0, sigma^2 I)
  perturb_theta     mean_i KL(p(.|x; theta + dt_i) || p(.|x; theta))
  mc_aa             H(mean_i p_i) - mean_i H(p_i) over single-step
                    sign-gradient perturbations with uniform magnitude
  inserted_dropout  H(mean_i p_i) - mean_i H(p_i) over stochastic forwards

All scorers are pure functions of (params, x, cfg): randomness comes only
from cfg.seed, so results are reproducible and schedule-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError
from .models import (
    DropoutModel,
    ParameterSet,
    ProbVector,
    forward_with_leaves,
    insert_dropout,
    predict_proba,
)
from .rng import derive_rng

METHODS = (
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

NORMS = ("l1", "l2")

GRADIENT_METHODS = ("negrad", "ungrad", "gradnorm", "exgrad", "regrad", "regrad_star")


@dataclass(frozen=True)
class ScorerConfig:
    """Method selector plus every scorer hyperparameter.

    selectivity is the exponential depth-weighting rate (0 disables it);
    sigma and n_perturb control Gaussian input/parameter perturbations;
    fgsm_bound is the magnitude bound for sign-gradient perturbations;
    mc_samples counts Monte-Carlo forwards for ensemble scorers.
    """

    method: str = "regrad"
    norm: str = "l2"
    selectivity: float = 0.0
    sigma: float = 0.02
    n_perturb: int = 100
    fgsm_bound: float = 1e-4
    dropout_rate: float = 0.4
    mc_samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}; choose l1 or l2")
        if self.selectivity < 0:
            raise ConfigError("selectivity rate must be >= 0")
        if self.n_perturb < 0:
            raise ConfigError("n_perturb must be >= 0")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise DomainError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if self.fgsm_bound < 0:
            raise DomainError("fgsm_bound must be >= 0")


@dataclass(frozen=True)
class UncertaintyScore:
    value: float
    method: str
    per_layer: tuple[tuple[int, float], ...] | None = None

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise DomainError(f"uncertainty score must be finite and >= 0, got {self.value}")


@dataclass
class GradientBundle:
    """Per-layer gradients mirroring a ParameterSet's shapes."""

    per_layer: list[tuple[int, np.ndarray, np.ndarray]]  # (layer_index, d_weight, d_bias)

    def layer_indices(self) -> list[int]:
        return [l for l, _, _ in self.per_layer]


def _bundle_from_flat(params: ParameterSet, flat: list[np.ndarray]) -> GradientBundle:
    pairs = [
        (layer.layer_index, flat[2 * i], flat[2 * i + 1])
        for i, layer in enumerate(params.layers)
    ]
    return GradientBundle(pairs)


def bundle_weighted_sum(bundles: list[GradientBundle], weights) -> GradientBundle:
    """sum_i weights[i] * bundles[i], layer by layer."""
    out = []
    for layer_pos in range(len(bundles[0].per_layer)):
        idx = bundles[0].per_layer[layer_pos][0]
        gw = sum(w * b.per_layer[layer_pos][1] for w, b in zip(weights, bundles))
        gb = sum(w * b.per_layer[layer_pos][2] for w, b in zip(weights, bundles))
        out.append((idx, gw, gb))
    return GradientBundle(out)


def layer_norms(bundle: GradientBundle, norm: str = "l2") -> list[tuple[int, float]]:
    """Per-layer gradient norms over weight and bias entries jointly."""
    out = []
    for idx, gw, gb in bundle.per_layer:
        if norm == "l2":
            value = math.sqrt(float(np.sum(gw * gw)) + float(np.sum(gb * gb)))
        elif norm == "l1":
            value = float(np.sum(np.abs(gw))) + float(np.sum(np.abs(gb)))
        else:
            raise ConfigError(f"unknown norm {norm!r}")
        out.append((idx, value))
    return out


def layer_selective_aggregate(per_layer_norms, rate: float) -> float:
    """sum_l exp(rate * l) * norm_l; rate 0 gives the plain sum exactly."""
    if rate < 0:
        raise ConfigError("selectivity rate must be >= 0")
    return float(sum(math.exp(rate * l) * v for l, v in per_layer_norms))


def bundle_norm(bundle: GradientBundle, cfg: ScorerConfig) -> float:
    return layer_selective_aggregate(layer_norms(bundle, cfg.norm), cfg.selectivity)


# ---------------------------------------------------------------------------
# gradient computation
# ---------------------------------------------------------------------------


def per_class_gradients(params: ParameterSet, x) -> tuple[list[GradientBundle], ProbVector]:
    """For each class c, the gradient of log p(y=c|x) w.r.t. every parameter.

    One shared forward record, exactly C backward passes.
    """
    logits, leaves = forward_with_leaves(params, x)
    if logits.data.shape[0] != 1:
        raise DomainError("per_class_gradients expects a single input")
    logp = ad.log_softmax(logits)
    flat = [t for pair in leaves for t in pair]
    bundles = []
    for c in range(params.config.num_classes):
        target = ad.sum_all(ad.pick_rows(logp, [c]))
        bundles.append(_bundle_from_flat(params, ad.backward(target, flat)))
    return bundles, ProbVector(np.exp(logp.data[0]))


def smoothed_per_class_gradients(
    params: ParameterSet, x, sigma: float, n_perturb: int, seed: int
) -> tuple[list[GradientBundle], ProbVector]:
    """Per-class gradients averaged over the clean input and n_perturb
    Gaussian-perturbed copies.

    The average of gradients equals the gradient of the averaged
    log-probabilities (differentiation is linear), so this still costs one
    backward pass per class. n_perturb = 0 reproduces the raw gradients
    bit-for-bit. The returned probabilities are for the clean input.
    """
    if sigma <= 0:
        raise DomainError(f"smoothing sigma must be positive, got {sigma}")
    if n_perturb < 0:
        raise DomainError("n_perturb must be >= 0")
    from .models import _check_input, _forward_parts, make_leaves  # noqa: PLC0415

    x = _check_input(params.config, np.asarray(x, dtype=np.float64))
    rng = derive_rng(seed, "smooth")
    leaves = make_leaves(params)
    inputs = [x] + [x + sigma * rng.standard_normal(x.shape) for _ in range(n_perturb)]
    logps = []
    clean_logp = None
    for i, xi in enumerate(inputs):
        _, logits = _forward_parts(params, ad.Tensor(xi), leaves)
        logp = ad.log_softmax(logits)
        if i == 0:
            clean_logp = logp
        logps.append(logp)
    total = logps[0]
    for term in logps[1:]:
        total = ad.add(total, term)
    mean_logp = ad.scale(total, 1.0 / (n_perturb + 1))
    flat = [t for pair in leaves for t in pair]
    bundles = []
    for c in range(params.config.num_classes):
        target = ad.sum_all(ad.pick_rows(mean_logp, [c]))
        bundles.append(_bundle_from_flat(params, ad.backward(target, flat)))
    return bundles, ProbVector(np.exp(clean_logp.data[0]))


# ---------------------------------------------------------------------------
# information measures
# ---------------------------------------------------------------------------


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0.0
    return float(-(p[nz] * np.log(p[nz])).sum())


def kl_divergence(p, q) -> float:
    """sum_c p_c log(p_c / q_c); q is clamped below at 1e-12."""
    p = p.probs if isinstance(p, ProbVector) else np.asarray(p, dtype=np.float64)
    q = q.probs if isinstance(q, ProbVector) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"kl_divergence: lengths differ, {p.shape} vs {q.shape}")
    q = np.maximum(q, 1e-12)
    nz = p > 0.0
    return max(float((p[nz] * np.log(p[nz] / q[nz])).sum()), 0.0)


# ---------------------------------------------------------------------------
# scorers
# ---------------------------------------------------------------------------


def entropy_score(p: ProbVector) -> UncertaintyScore:
    return UncertaintyScore(entropy(p.probs), "entropy")


def vterm_score(p: ProbVector) -> UncertaintyScore:
    C = p.num_classes
    return UncertaintyScore(float(np.abs(p.probs - 1.0 / C).sum()), "vterm")


def negrad_score(params: ParameterSet, x, cfg: ScorerConfig) -> UncertaintyScore:
    """||sum_c p_c g_c||: analytically zero, since sum_c p_c d(log p_c)
    = d(sum_c p_c) = d(1) = 0.

    Computed with a single backward pass on the probability-weighted sum of
    log-probabilities. The weights are bit-identical to the softmax values
    used by the backward rule, so the cancellation happens once, at the
    softmax, and the result is exactly zero whenever the probabilities sum
    to 1 in floats (and roundoff crumbs otherwise)."""
    logits, leaves = forward_with_leaves(params, x)
    if logits.data.shape[0] != 1:
        raise DomainError("negrad_score expects a single input")
    logp = ad.log_softmax(logits)
    weights = np.exp(logp.data)
    target = ad.sum_all(ad.mul(logp, ad.Tensor(weights)))
    flat = [t for pair in leaves for t in pair]
    bundle = _bundle_from_flat(params, ad.backward(target, flat))
    return UncertaintyScore(bundle_norm(bundle, cfg), "negrad")


def ungrad_score(params: ParameterSet, x, cfg: ScorerConfig) -> UncertaintyScore:
    bundles, _ = per_class_gradients(params, x)
    C = len(bundles)
    return UncertaintyScore(sum(bundle_norm(b, cfg) for b in bundles) / C, "ungrad")


def gradnorm_score(params: ParameterSet, x, cfg: ScorerConfig) -> UncertaintyScore:
    logits, leaves = forward_with_leaves(params, x)
    logp = ad.log_softmax(logits)
    target = ad.scale(ad.sum_all(logp), 1.0 / params.config.num_classes)
    flat = [t for pair in leaves for t in pair]
    bundle = _bundle_from_flat(params, ad.backward(target, flat))
    return UncertaintyScore(bundle_norm(bundle, cfg), "gradnorm")


def exgrad_score(params: ParameterSet, x, cfg: ScorerConfig) -> UncertaintyScore:
    bundles, p = per_class_gradients(params, x)
    value = sum(pc * bundle_norm(b, cfg) for pc, b in zip(p.probs, bundles))
    return UncertaintyScore(float(value), "exgrad")


def _regrad_value(bundles, probs, cfg: ScorerConfig) -> tuple[float, tuple]:
    per_layer_acc: dict[int, float] = {}
    value = 0.0
    for pc, b in zip(probs, bundles):
        norms = layer_norms(b, cfg.norm)
        agg = layer_selective_aggregate(norms, cfg.selectivity)
        w = math.sqrt(pc)
        value += w * agg
        for l, v in norms:
            per_layer_acc[l] = per_layer_acc.get(l, 0.0) + w * math.exp(cfg.selectivity * l) * v
    return value, tuple(sorted(per_layer_acc.items()))


def regrad_score(params: ParameterSet, x, cfg: ScorerConfig) -> UncertaintyScore:
    """sum_c sqrt(p_c ||g_c||_2^2): the square root tempers the class
    weights, so low-probability classes still contribute."""
    if cfg.norm != "l2":
        raise ConfigError("regrad is defined for the L2 norm; set norm='l2'")
    bundles, p = per_class_gradients(params, x)
    value, per_layer = _regrad_value(bundles, p.probs, cfg)
    return UncertaintyScore(value, "regrad", per_layer)


def regrad_star_score(params: ParameterSet, x, cfg: ScorerConfig) -> UncertaintyScore:
    """regrad over smoothed gradients with depth weighting; class weights
    come from the clean-input probabilities."""
    if cfg.norm != "l2":
        raise ConfigError("regrad_star is defined for the L2 norm; set norm='l2'")
    bundles, p = smoothed_per_class_gradients(params, x, cfg.sigma, cfg.n_perturb, cfg.seed)
    value, per_layer = _regrad_value(bundles, p.probs, cfg)
    return UncertaintyScore(value, "regrad_star", per_layer)


def perturb_x_score(params: ParameterSet, x, cfg: ScorerConfig) -> UncertaintyScore:
    if cfg.sigma <= 0:
        raise DomainError(f"perturb_x sigma must be positive, got {cfg.sigma}")
    if cfg.n_perturb < 1:
        raise DomainError("perturb_x needs n_perturb >= 1")
    x = np.asarray(x, dtype=np.float64)
    clean = predict_proba(params, x)
    rng = derive_rng(cfg.seed, "perturb_x")
    total = 0.0
    for _ in range(cfg.n_perturb):
        noisy = x + cfg.sigma * rng.standard_normal(x.shape)
        total += kl_divergence(predict_proba(params, noisy), clean)
    return UncertaintyScore(total / cfg.n_perturb, "perturb_x")


def perturb_theta_score(params: ParameterSet, x, cfg: ScorerConfig) -> UncertaintyScore:
    """Perturbed parameters are fresh copies; the originals are never touched."""
    if cfg.sigma <= 0:
        raise DomainError(f"perturb_theta sigma must be positive, got {cfg.sigma}")
    if cfg.n_perturb < 1:
        raise DomainError("perturb_theta needs n_perturb >= 1")
    clean = predict_proba(params, x)
    rng = derive_rng(cfg.seed, "perturb_theta")
    total = 0.0
    for _ in range(cfg.n_perturb):
        noisy = params.copy()
        for layer in noisy.layers:
            layer.weight += cfg.sigma * rng.standard_normal(layer.weight.shape)
            layer.bias += cfg.sigma * rng.standard_normal(layer.bias.shape)
        total += kl_divergence(predict_proba(noisy, x), clean)
    return UncertaintyScore(total / cfg.n_perturb, "perturb_theta")


def mc_aa_score(params: ParameterSet, x, cfg: ScorerConfig) -> UncertaintyScore:
    """Single-step sign-gradient input perturbations with magnitudes drawn
    uniformly from [-a, a]; aggregated as H(mean p) - mean H(p).

    The loss is the negative log-likelihood at the predicted class;
    sign(0) = 0.
    """
    if cfg.fgsm_bound < 0:
        raise DomainError("fgsm_bound must be >= 0")
    if cfg.mc_samples < 1:
        raise DomainError("mc_aa needs mc_samples >= 1")
    x = np.asarray(x, dtype=np.float64)
    leaf = ad.Tensor(x)
    logits, _ = forward_with_leaves(params, leaf)
    logp = ad.log_softmax(logits)
    predicted = int(np.argmax(logp.data[0]))
    loss = ad.scale(ad.sum_all(ad.pick_rows(logp, [predicted])), -1.0)
    (dx,) = ad.backward(loss, [leaf])
    direction = np.sign(dx)
    rng = derive_rng(cfg.seed, "mc_aa")
    probs = []
    for _ in range(cfg.mc_samples):
        eps = rng.uniform(-cfg.fgsm_bound, cfg.fgsm_bound)
        probs.append(predict_proba(params, x + eps * direction).probs)
    return UncertaintyScore(_mutual_information(probs), "mc_aa")


def inserted_dropout_score(model: DropoutModel, x, cfg: ScorerConfig) -> UncertaintyScore:
    if cfg.mc_samples < 2:
        raise DomainError("inserted_dropout needs mc_samples >= 2")
    rng = derive_rng(cfg.seed, "dropout")
    probs = [model.stochastic_proba(x, rng).probs for _ in range(cfg.mc_samples)]
    return UncertaintyScore(_mutual_information(probs), "inserted_dropout")


def _mutual_information(probs: list[np.ndarray]) -> float:
    """H(mean p) - mean H(p); non-negative by concavity of the entropy."""
    mean = np.mean(probs, axis=0)
    value = entropy(mean) - float(np.mean([entropy(p) for p in probs]))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def score_sample(params: ParameterSet, x, cfg: ScorerConfig) -> UncertaintyScore:
    """Route one input to the configured scorer."""
    method = cfg.method
    if method == "entropy":
        return entropy_score(predict_proba(params, x))
    if method == "vterm":
        return vterm_score(predict_proba(params, x))
    if method == "negrad":
        return negrad_score(params, x, cfg)
    if method == "ungrad":
        return ungrad_score(params, x, cfg)
    if method == "gradnorm":
        return gradnorm_score(params, x, cfg)
    if method == "exgrad":
        return exgrad_score(params, x, cfg)
    if method == "regrad":
        return regrad_score(params, x, cfg)
    if method == "regrad_star":
        return regrad_star_score(params, x, cfg)
    if method == "perturb_x":
        return perturb_x_score(params, x, cfg)
    if method == "perturb_theta":
        return perturb_theta_score(params, x, cfg)
    if method == "mc_aa":
        return mc_aa_score(params, x, cfg)
    if method == "inserted_dropout":
        return inserted_dropout_score(insert_dropout(params, cfg.dropout_rate), x, cfg)
    raise ConfigError(f"unknown method {method!r}")


def with_sample_seed(cfg: ScorerConfig, sample_index: int) -> ScorerConfig:
    """Derive a per-sample config so scoring is order-independent."""
    from .rng import derive_key  # noqa: PLC0415

    return replace(cfg, seed=derive_key(cfg.seed, "sample", sample_index)[0])
