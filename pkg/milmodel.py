# milmodel.py
"""
MIL network family: instance encoder f (psi), pooling (mean / max / attention with
scorer t, theta_pool), evidential bag head g (phi) and the residual instance head r (pi).

    S(X) = exp(g(pool(f(X)))) + 1          bag evidence
    T(x) = exp(g(f(x))) + 1                derived instance estimator
    R(x) = exp(T_logits * (1 + tanh(r(f(x))))) + 1   residual instance estimator

Only two classes are supported (negative = 0, positive = 1).
"""
import copy
import logging
from dataclasses import dataclass

import numpy as np

import numcore
from numcore import Var
from dirichlet import DirichletParams, expected_probability
from errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

GROUP_ORDER = ('psi', 'theta_pool', 'phi', 'pi')
POOLING_KINDS = ('mean', 'max', 'attention')
RESIDUAL_MODES = ('proportional', 'additive')
VARIANTS = ('bce', 'edl', 'mirel')


@dataclass
class ModelSpec:
    in_dim: int = 0  # 0 means "take it from the dataset"
    encoder_sizes: tuple = (128, 128)
    pooling: str = 'attention'
    attention_dim: int = 128
    residual_dim: int = 64
    n_classes: int = 2
    residual_mode: str = 'proportional'
    variant: str = 'mirel'
    head_bias_init: float = 0.0  # starting logit of every bag-head class

    def __post_init__(self):
        self.encoder_sizes = tuple(int(s) for s in self.encoder_sizes)
        if self.pooling not in POOLING_KINDS:
            raise ConfigError(f"Unknown pooling '{self.pooling}'. Use one of {POOLING_KINDS}.")
        if self.residual_mode not in RESIDUAL_MODES:
            raise ConfigError(f"Unknown residual mode '{self.residual_mode}'. Use one of {RESIDUAL_MODES}.")
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown model variant '{self.variant}'. Use one of {VARIANTS}.")
        if self.n_classes != 2:
            raise ConfigError("Only binary MIL (n_classes=2) is supported")
        if not self.encoder_sizes or min(self.encoder_sizes) < 1:
            raise ConfigError("encoder_sizes needs at least one positive layer width")

    @property
    def embed_dim(self):
        return self.encoder_sizes[-1]


class MilParams:
    """Parameter groups psi / theta_pool / phi / pi, each an ordered name -> Var mapping."""

    def __init__(self, spec, groups):
        missing = set(GROUP_ORDER) - set(groups)
        if missing:
            raise ValueError(f"Missing parameter groups: {sorted(missing)}")
        self.spec = spec
        self.groups = {name: groups[name] for name in GROUP_ORDER}

    @property
    def psi(self):
        return self.groups['psi']

    @property
    def theta_pool(self):
        return self.groups['theta_pool']

    @property
    def phi(self):
        return self.groups['phi']

    @property
    def pi(self):
        return self.groups['pi']

    def named_parameters(self):
        for group in GROUP_ORDER:
            for name, var in self.groups[group].items():
                yield group, name, var

    def parameters(self, groups=None):
        wanted = GROUP_ORDER if groups is None else groups
        return [var for group in wanted for var in self.groups[group].values()]

    def zero_grad(self):
        for var in self.parameters():
            var.zero_grad()

    def copy(self):
        groups = {g: {n: Var(v.value, requires_grad=True, name=v.name) for n, v in vals.items()}
                  for g, vals in self.groups.items()}
        return MilParams(copy.deepcopy(self.spec), groups)

    def snapshot(self):
        """Read-only copy: no gradients are recorded through it, so it is safe to share across threads."""
        groups = {g: {n: Var(v.value, name=v.name) for n, v in vals.items()}
                  for g, vals in self.groups.items()}
        return MilParams(copy.deepcopy(self.spec), groups)

    def load_values(self, other):
        for (_, _, mine), (_, _, theirs) in zip(self.named_parameters(), other.named_parameters()):
            mine.value[...] = theirs.value


@dataclass
class BagForward:
    embeddings: Var
    attention_weights: Var  # None unless pooling is attention
    bag_logits: Var
    bag_alpha: Var

    @property
    def dirichlet(self):
        return DirichletParams(self.bag_alpha.value)


@dataclass
class InstanceForward:
    t_logits: Var
    residual_scale: Var
    r_logits: Var
    alpha_T: Var
    alpha_ins: Var

    @property
    def dirichlet_T(self):
        return DirichletParams(self.alpha_T.value)

    @property
    def dirichlet_R(self):
        return DirichletParams(self.alpha_ins.value)


# --- INITIALISATION ---
def _uniform(rng, fan_in, shape, gain):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec, rng):
    """
    Kaiming-style uniform fan-in init. Biases start at zero except the bag head, which starts
    at spec.head_bias_init. The residual output layer starts at zero so R == T.
    """
    if spec.in_dim < 1:
        raise ConfigError("ModelSpec.in_dim must be set before initialising parameters")
    M, C = spec.embed_dim, spec.n_classes

    def param(value, name):
        return Var(value, requires_grad=True, name=name)

    psi, fan_in = {}, spec.in_dim
    for i, width in enumerate(spec.encoder_sizes):
        psi[f'W{i}'] = param(_uniform(rng, fan_in, (fan_in, width), 6.0), f'psi.W{i}')
        psi[f'b{i}'] = param(np.zeros(width), f'psi.b{i}')
        fan_in = width
    theta_pool = {
        'V': param(_uniform(rng, M, (M, spec.attention_dim), 3.0), 'theta_pool.V'),
        'w': param(_uniform(rng, spec.attention_dim, (spec.attention_dim, 1), 3.0), 'theta_pool.w'),
    }
    phi = {
        'W': param(_uniform(rng, M, (M, C), 3.0), 'phi.W'),
        'b': param(np.full(C, float(spec.head_bias_init)), 'phi.b'),
    }
    pi = {
        'W1': param(_uniform(rng, M, (M, spec.residual_dim), 6.0), 'pi.W1'),
        'b1': param(np.zeros(spec.residual_dim), 'pi.b1'),
        'W2': param(np.zeros((spec.residual_dim, C)), 'pi.W2'),
        'b2': param(np.zeros(C), 'pi.b2'),
    }
    return MilParams(spec, {'psi': psi, 'theta_pool': theta_pool, 'phi': phi, 'pi': pi})


# --- FORWARD PASS ---
def encode(features, params):
    """f_psi applied row by row: (K, D) -> (K, M). No mixing across instances."""
    X = numcore.lift(features)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeError(f"A bag must be a non-empty (K, D) array, got shape {X.shape}")
    if X.shape[1] != params.spec.in_dim:
        raise ShapeError(f"Instances have {X.shape[1]} features, the encoder expects {params.spec.in_dim}")
    h = X
    for i in range(len(params.spec.encoder_sizes)):
        h = numcore.relu(h @ params.psi[f'W{i}'] + params.psi[f'b{i}'])
    return h


def attention_logits(h, params):
    """t(h) = w^T tanh(V h) per instance, shape (K,)."""
    scores = numcore.tanh(h @ params.theta_pool['V']) @ params.theta_pool['w']
    return numcore.reshape(scores, (h.shape[0],))


def _mean_pool(h, params):
    return h.mean(axis=0), None


def _max_pool(h, params):
    return h.max(axis=0), None


def _attention_pool(h, params):
    weights = numcore.softmax(attention_logits(h, params), axis=0)
    return weights @ h, weights


POOLING = {
    'mean': _mean_pool,
    'max': _max_pool,
    'attention': _attention_pool,
}


def pool(h, kind, params):
    """Permutation-invariant (K, M) -> (M,). Returns (pooled, attention weights or None)."""
    operator = POOLING.get(kind)
    if operator is None:
        raise ValueError(f"Unknown pooling '{kind}'. Use one of {POOLING_KINDS}.")
    if h.shape[0] < 1:
        raise ShapeError("Cannot pool an empty bag")
    return operator(h, params)


def bag_evidence(features, params):
    h = encode(features, params)
    pooled, weights = pool(h, params.spec.pooling, params)
    logits = pooled @ params.phi['W'] + params.phi['b']
    alpha = numcore.exp(logits) + 1.0
    return BagForward(embeddings=h, attention_weights=weights, bag_logits=logits, bag_alpha=alpha)


def instance_forward(features, params, embeddings=None, freeze_encoder=False):
    """
    T and R for every instance of a bag.

    phi enters T read-only: its gradient comes from the bag loss alone. With
    freeze_encoder the embeddings are detached too, so only pi learns from this path.
    """
    h = encode(features, params) if embeddings is None else embeddings
    if freeze_encoder:
        h = h.detach()
    t_logits = h @ params.phi['W'].detach() + params.phi['b'].detach()
    raw = numcore.relu(h @ params.pi['W1'] + params.pi['b1']) @ params.pi['W2'] + params.pi['b2']
    scale = numcore.tanh(raw)
    if params.spec.residual_mode == 'proportional':
        r_logits = t_logits * (1.0 + scale)
    else:
        r_logits = t_logits + scale
    return InstanceForward(
        t_logits=t_logits,
        residual_scale=scale,
        r_logits=r_logits,
        alpha_T=numcore.exp(t_logits) + 1.0,
        alpha_ins=numcore.exp(r_logits) + 1.0,
    )


def _as_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x, x.ndim == 1


def instance_T(x, params):
    """T(x) for one instance (D,) or a batch (N, D)."""
    rows, single = _as_rows(x)
    frozen = params.snapshot()
    alpha = instance_forward(rows, frozen).alpha_T.value
    return DirichletParams(alpha[0] if single else alpha)


def instance_R(x, params):
    """R(x) for one instance (D,) or a batch (N, D)."""
    rows, single = _as_rows(x)
    frozen = params.snapshot()
    alpha = instance_forward(rows, frozen).alpha_ins.value
    return DirichletParams(alpha[0] if single else alpha)


def predict(d):
    """Label = argmax alpha (lowest index on ties) and the expected probabilities."""
    alpha = d.alpha if isinstance(d, DirichletParams) else np.asarray(d, dtype=np.float64)
    probs = expected_probability(alpha)
    labels = np.argmax(alpha, axis=-1)
    if np.ndim(labels) == 0:
        return int(labels), probs
    return labels, probs
