# losses.py
"""
Objective stack for bag- and instance-level evidential learning.

    bag:       I-EDL  = I-MSE - lambda1 * log|FIM| + lambda2 * KL(Dir(alpha_hat) || Dir(1))
    instance:  MIREL  = I-EDL on R(x) under weak supervision (strategies s1 / s2 / s3)
    both:      RED    = -(C / alpha0) * log(alpha_gt - 1)
    baseline:  BCE    = cross-entropy on the bag logits (no evidence, no instance path)

All term functions take alpha as a Var (or array / DirichletParams) of shape (C,) or
(K, C) and return one value per row.
"""
import logging
import math
from dataclasses import dataclass
from functools import partial

import numpy as np

import numcore
from numcore import Var
from dirichlet import DirichletParams
from errors import ConfigError, NumericError

logger = logging.getLogger(__name__)

NEGATIVE, POSITIVE = 0, 1

STRATEGY_ALIASES = {
    's1': 's1', 'S1_naive': 's1', 'naive': 's1',
    's2': 's2', 'S2_weighted_loss': 's2', 'weighted_loss': 's2',
    's3': 's3', 'S3_weighted_evidence': 's3', 'weighted_evidence': 's3',
}


@dataclass
class LossConfig:
    lambda1: float = 0.01
    lambda2_warmup: int = 10
    strategy: str = 's3'
    use_red: bool = True
    red_epsilon: float = 1e-8
    freeze_psi_in_instance_loss: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGY_ALIASES:
            raise ConfigError(f"Unknown strategy '{self.strategy}'. Use s1, s2 or s3.")
        self.strategy = STRATEGY_ALIASES[self.strategy]
        if self.lambda1 < 0:
            raise ConfigError("lambda1 must be non-negative")
        if self.lambda2_warmup < 1:
            raise ConfigError("lambda2_warmup must be at least one epoch")
        if self.red_epsilon <= 0:
            raise ConfigError("red_epsilon must be positive")


@dataclass
class InstanceWeights:
    w: np.ndarray
    w_bar: np.ndarray

    @classmethod
    def from_weights(cls, w):
        w = np.asarray(w, dtype=np.float64)
        total = w.sum()
        w_bar = w / total if total > 0 else np.full(w.shape, 1.0 / w.size)
        return cls(w=w, w_bar=w_bar)


def lambda2_at(epoch, warmup_epochs=10):
    """KL weight schedule min(1, t / warmup), resolved per epoch."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return min(1.0, epoch / warmup_epochs)


def one_hot(label, n_classes=2):
    y = np.zeros(n_classes)
    y[int(label)] = 1.0
    return y


def _alpha_var(alpha):
    if isinstance(alpha, Var):
        return alpha
    if isinstance(alpha, DirichletParams):
        return Var(alpha.alpha)
    return Var(alpha)


# --- I-EDL TERMS ---
def iedl_mse_term(alpha, y):
    """Fisher-weighted Bayes risk of the squared error."""
    alpha = _alpha_var(alpha)
    y = np.asarray(y, dtype=np.float64)
    alpha0 = alpha.sum(axis=-1, keepdims=True)
    p = alpha / alpha0
    variance = alpha * (alpha0 - alpha) / (alpha0 * alpha0 * (alpha0 + 1.0))
    return (((y - p) ** 2 + variance) * numcore.trigamma_op(alpha)).sum(axis=-1)


def iedl_fim_term(alpha):
    """log-determinant of the Dirichlet Fisher information."""
    alpha = _alpha_var(alpha)
    alpha0 = alpha.sum(axis=-1, keepdims=True)
    tri = numcore.trigamma_op(alpha)
    inner = 1.0 - (numcore.trigamma_op(alpha0) / tri).sum(axis=-1)
    if not np.all(inner.value > 0):
        raise NumericError("log|FIM| argument is not positive; alpha is corrupted")
    return numcore.log(tri).sum(axis=-1) + numcore.log(inner)


def kl_to_uniform(alpha, y):
    """KL(Dir(alpha_hat) || Dir(1)) with the true-class concentration masked to 1."""
    alpha = _alpha_var(alpha)
    y = np.asarray(y, dtype=np.float64)
    masked = alpha * (1.0 - y) + y
    strength = masked.sum(axis=-1, keepdims=True)
    n_classes = alpha.shape[-1]
    return (numcore.lgamma_op(strength).sum(axis=-1)
            - math.lgamma(n_classes)
            - numcore.lgamma_op(masked).sum(axis=-1)
            + ((masked - 1.0) * (numcore.digamma_op(masked) - numcore.digamma_op(strength))).sum(axis=-1))


def iedl_loss(alpha, y, lambda1, lambda2):
    alpha = _alpha_var(alpha)
    loss = iedl_mse_term(alpha, y)
    if lambda1:
        loss = loss - lambda1 * iedl_fim_term(alpha)
    if lambda2:
        loss = loss + lambda2 * kl_to_uniform(alpha, y)
    return loss


def evidence_mse_surrogate(alpha, y, target_strength=10.0):
    """Squared error between alpha and the concentration 1 + s*y. Convex in alpha."""
    alpha = _alpha_var(alpha)
    target = 1.0 + target_strength * np.asarray(y, dtype=np.float64)
    return ((alpha - target) ** 2).sum(axis=-1)


# --- RED ---
def red_loss(alpha, gt_class, n_classes=None, epsilon=1e-8):
    alpha = _alpha_var(alpha)
    C = alpha.shape[-1]
    if n_classes is not None and n_classes != C:
        raise ValueError(f"alpha has {C} classes but n_classes={n_classes}")
    alpha0 = alpha.sum(axis=-1)
    evidence_gt = (alpha * one_hot(gt_class, C)).sum(axis=-1) - 1.0
    return -(C / alpha0) * numcore.log(numcore.maximum(evidence_gt, epsilon))


# --- NON-EVIDENTIAL BASELINE ---
def bce_loss(logits, label):
    """Softmax cross-entropy on raw logits; for two classes this is BCE on their difference."""
    logits = _alpha_var(logits)
    shift = float(np.max(logits.value))
    y = one_hot(label, logits.shape[-1])
    log_norm = numcore.log(numcore.exp(logits - shift).sum(axis=-1)) + shift
    return log_norm - (logits * y).sum(axis=-1)


# --- WEAKLY SUPERVISED INSTANCE LOSS ---
def instance_weights(alpha_T, positive_class=POSITIVE):
    """w_k = E[p(y=positive)] under Dir(alpha_T[k]); w_bar normalises them over the bag."""
    alpha = alpha_T.alpha if isinstance(alpha_T, DirichletParams) else np.asarray(alpha_T, dtype=np.float64)
    alpha = np.atleast_2d(alpha)
    return InstanceWeights.from_weights(alpha[:, positive_class] / alpha.sum(axis=-1))


def _naive(alpha, weights, loss_fn, y):
    return loss_fn(alpha, y).mean()


def _weighted_loss(alpha, weights, loss_fn, y):
    return (loss_fn(alpha, y) * weights.w_bar).sum()


def _weighted_evidence(alpha, weights, loss_fn, y):
    pooled = ((alpha - 1.0) * weights.w_bar[:, None]).sum(axis=0) + 1.0
    return loss_fn(pooled, y[0])


STRATEGIES = {
    's1': _naive,
    's2': _weighted_loss,
    's3': _weighted_evidence,
}


def mirel_instance_loss(alpha_ins, weights, bag_label, strategy, lambda1=0.0, lambda2=0.0, loss_fn=None):
    """
    Negative bags: every instance is negative, losses averaged.
    Positive bags: s1 averages, s2 weights each loss by w_bar, s3 scores the
    w_bar-weighted evidence as one Dirichlet.
    loss_fn(alpha, y) overrides the per-Dirichlet loss (default: I-EDL with lambda1/lambda2).
    """
    alpha = _alpha_var(alpha_ins)
    if alpha.ndim != 2 or alpha.shape[0] < 1:
        raise ValueError(f"alpha_ins must be (K, C) with K >= 1, got {alpha.shape}")
    if loss_fn is None:
        loss_fn = partial(iedl_loss, lambda1=lambda1, lambda2=lambda2)
    K, C = alpha.shape
    if int(bag_label) == NEGATIVE:
        return loss_fn(alpha, np.tile(one_hot(NEGATIVE, C), (K, 1))).mean()
    combine = STRATEGIES[STRATEGY_ALIASES[strategy]]
    return combine(alpha, weights, loss_fn, np.tile(one_hot(POSITIVE, C), (K, 1)))


# --- COMBINED OBJECTIVE ---
def bag_objective(bag_forward, bag_label, config, epoch):
    lambda2 = lambda2_at(epoch, config.lambda2_warmup)
    y = one_hot(bag_label, bag_forward.bag_alpha.shape[-1])
    loss = iedl_loss(bag_forward.bag_alpha, y, config.lambda1, lambda2)
    if config.use_red:
        loss = loss + red_loss(bag_forward.bag_alpha, bag_label, epsilon=config.red_epsilon)
    return loss


def instance_red(alpha_ins, weights, bag_label, epsilon=1e-8):
    """RED on R: averaged over a negative bag, w_bar-weighted over a positive one."""
    per_instance = red_loss(alpha_ins, bag_label, epsilon=epsilon)
    if int(bag_label) == NEGATIVE:
        return per_instance.mean()
    return (per_instance * weights.w_bar).sum()


def instance_objective(instance_forward, bag_label, config, epoch):
    lambda2 = lambda2_at(epoch, config.lambda2_warmup)
    weights = instance_weights(instance_forward.alpha_T.value)
    loss = mirel_instance_loss(instance_forward.alpha_ins, weights, bag_label, config.strategy,
                               config.lambda1, lambda2)
    if config.use_red:
        loss = loss + instance_red(instance_forward.alpha_ins, weights, bag_label, config.red_epsilon)
    return loss


def total_objective(bag_forward, instance_forward, bag_label, config, epoch):
    """Bag I-EDL (+RED) plus, when an instance forward is given, MIREL (+RED on R)."""
    loss = bag_objective(bag_forward, bag_label, config, epoch)
    if instance_forward is not None:
        loss = loss + instance_objective(instance_forward, bag_label, config, epoch)
    return loss
