# dirichlet.py
"""
Closed-form uncertainty measures of a Dirichlet prediction, plus the subjective-logic
belief / uncertainty masses.

Every function accepts a DirichletParams or a raw array of concentrations, either one
vector (C,) or a batch (N, C). Single vectors give floats, batches give arrays.
"""
from dataclasses import dataclass, asdict

import numpy as np

from numcore import digamma

_RATIO_FLOOR = 1e-300


@dataclass(frozen=True)
class DirichletParams:
    """Concentration vector alpha (or a batch of them, one per row)."""
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64)
        if alpha.ndim not in (1, 2):
            raise ValueError(f"alpha must be (C,) or (N, C), got shape {alpha.shape}")
        if alpha.shape[-1] < 2:
            raise ValueError("A Dirichlet needs at least two classes")
        if not np.all(alpha > 0):
            raise ValueError("Concentration parameters must be positive")
        object.__setattr__(self, 'alpha', alpha)

    @classmethod
    def from_evidence(cls, evidence):
        evidence = np.asarray(evidence, dtype=np.float64)
        if np.any(evidence < 0):
            raise ValueError("Evidence must be non-negative")
        return cls(evidence + 1.0)

    @property
    def alpha0(self):
        return _out(self.alpha.sum(axis=-1))

    @property
    def n_classes(self):
        return self.alpha.shape[-1]

    def __len__(self):
        return 1 if self.alpha.ndim == 1 else self.alpha.shape[0]

    def __getitem__(self, index):
        if self.alpha.ndim == 1:
            raise TypeError("A single DirichletParams cannot be indexed")
        return DirichletParams(self.alpha[index])


@dataclass(frozen=True)
class BeliefAssignment:
    belief: np.ndarray
    uncertainty_mass: float


@dataclass(frozen=True)
class UncertaintyReport:
    max_prob: float
    predictive_entropy: float
    expected_entropy: float
    mutual_information: float
    max_alpha: float
    alpha0: float

    def to_dict(self):
        return asdict(self)


def as_alpha(d):
    return d.alpha if isinstance(d, DirichletParams) else DirichletParams(d).alpha


def _out(values):
    return float(values) if np.ndim(values) == 0 else values


def expected_probability(d):
    alpha = as_alpha(d)
    return alpha / alpha.sum(axis=-1, keepdims=True)


def predictive_entropy(d):
    """Entropy of the expected categorical, H[E[p]]."""
    p = expected_probability(d)
    return _out(-(p * np.log(np.maximum(p, _RATIO_FLOOR))).sum(axis=-1))


def expected_entropy(d):
    """E[H[p]] under the Dirichlet: the data (aleatoric) part of the total uncertainty."""
    alpha = as_alpha(d)
    alpha0 = alpha.sum(axis=-1, keepdims=True)
    p = alpha / alpha0
    return _out(-(p * (digamma(alpha + 1.0) - digamma(alpha0 + 1.0))).sum(axis=-1))


def mutual_information(d):
    """Total minus expected entropy: the distributional (epistemic) part."""
    return _out(np.asarray(predictive_entropy(d)) - np.asarray(expected_entropy(d)))


def belief_assignment(evidence, n_classes=None):
    evidence = np.asarray(evidence, dtype=np.float64)
    if np.any(evidence < 0):
        raise ValueError("Evidence must be non-negative")
    if n_classes is not None and n_classes != evidence.shape[-1]:
        raise ValueError(f"Evidence has {evidence.shape[-1]} entries but n_classes={n_classes}")
    n_classes = evidence.shape[-1]
    strength = evidence.sum(axis=-1, keepdims=True) + n_classes
    return BeliefAssignment(belief=evidence / strength,
                            uncertainty_mass=_out(np.squeeze(n_classes / strength, axis=-1)))


CONFIDENCE_MEASURES = {
    'max_prob': lambda alpha: expected_probability(alpha).max(axis=-1),
    'max_alpha': lambda alpha: alpha.max(axis=-1),
    'alpha0': lambda alpha: alpha.sum(axis=-1),
    'neg_expected_entropy': lambda alpha: -np.asarray(expected_entropy(alpha)),
    'neg_predictive_entropy': lambda alpha: -np.asarray(predictive_entropy(alpha)),
    'neg_mutual_information': lambda alpha: -np.asarray(mutual_information(alpha)),
}


def confidence_score(d, kind):
    """A confidence value per Dirichlet; larger always means more confident."""
    measure = CONFIDENCE_MEASURES.get(kind)
    if measure is None:
        raise ValueError(f"Unknown confidence measure '{kind}'. Use one of {sorted(CONFIDENCE_MEASURES)}.")
    return _out(measure(as_alpha(d)))


def uncertainty_report(d):
    alpha = as_alpha(d)
    if alpha.ndim != 1:
        raise ValueError("uncertainty_report takes a single Dirichlet")
    return UncertaintyReport(
        max_prob=float(expected_probability(alpha).max()),
        predictive_entropy=predictive_entropy(alpha),
        expected_entropy=expected_entropy(alpha),
        mutual_information=mutual_information(alpha),
        max_alpha=float(alpha.max()),
        alpha0=float(alpha.sum()),
    )
