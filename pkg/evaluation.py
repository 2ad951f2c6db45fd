# evaluation.py
"""
Uncertainty-estimation metrics: accuracy, confidence AUROC (does the score rank
correct predictions above wrong ones), OOD AUROC (does it rank ID above OOD),
histograms of any Dirichlet measure, and the OOD-ratio sweep.
"""
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats

import milmodel
import services
from data import make_ood_mixture
from dirichlet import CONFIDENCE_MEASURES, confidence_score, expected_probability
from errors import ConfigError

logger = logging.getLogger(__name__)

LEVELS = ('bag', 'instance')
ESTIMATORS = ('S', 'T', 'R', 'attention')
DEFAULT_OOD_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class EvalSpec:
    ood_sources: tuple = ()
    conf_measure: str = 'max_alpha'
    ood_measure: str = 'alpha0'
    ood_ratios: tuple = DEFAULT_OOD_RATIOS
    ratio_measure: str = 'neg_expected_entropy'
    histogram_bins: int = 30
    histogram_measures: tuple = ('neg_expected_entropy', 'max_alpha')
    n_ood_bags: int = 0  # 0 means "use the test-set size"

    def __post_init__(self):
        self.ood_sources = tuple(self.ood_sources)
        self.ood_ratios = tuple(float(r) for r in self.ood_ratios)
        self.histogram_measures = tuple(self.histogram_measures)
        for measure in (self.conf_measure, self.ood_measure, self.ratio_measure, *self.histogram_measures):
            if measure not in CONFIDENCE_MEASURES:
                raise ConfigError(f"Unknown measure '{measure}'. Use one of {sorted(CONFIDENCE_MEASURES)}.")
        if any(not 0.0 <= r <= 1.0 for r in self.ood_ratios):
            raise ConfigError("OOD ratios must lie in [0, 1]")
        if self.histogram_bins < 1:
            raise ConfigError("histogram_bins must be at least 1")


@dataclass
class EvalReport:
    level: str
    estimator: str
    accuracy: float = None
    conf_auroc: float = None
    label_auroc: float = None
    ood_auroc: dict = field(default_factory=dict)
    conf_measure: str = None
    ood_measure: str = None
    n_samples: int = 0
    n_ood: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


@dataclass
class Predictions:
    """Everything the metrics need from one pass over a bag set."""
    bag_alpha: np.ndarray
    bag_labels: np.ndarray
    alpha_T: np.ndarray
    instance_labels: np.ndarray
    alpha_R: np.ndarray = None
    attention: np.ndarray = None

    def instance_alpha(self, estimator):
        return self.alpha_R if estimator == 'R' else self.alpha_T


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray


# --- METRICS ---
def auroc(scores, labels):
    """Mann-Whitney U / (n_pos * n_neg) with average ranks, so ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("AUROC scores must be finite")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes in labels")
    ranks = stats.rankdata(scores, method='average')
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confidence_eval(alphas, predictions, truths, measure='max_alpha'):
    correct = np.asarray(predictions) == np.asarray(truths)
    if correct.all() or not correct.any():
        raise ValueError("Confidence AUROC needs at least one correct and one incorrect prediction")
    scores = np.atleast_1d(confidence_score(alphas, measure))
    return auroc(scores, correct)


def ood_eval(id_alphas, ood_alphas, measure='alpha0'):
    id_alphas = np.atleast_2d(np.asarray(getattr(id_alphas, 'alpha', id_alphas), dtype=np.float64))
    ood_alphas = np.atleast_2d(np.asarray(getattr(ood_alphas, 'alpha', ood_alphas), dtype=np.float64))
    if id_alphas.size == 0 or ood_alphas.size == 0:
        raise ValueError("OOD evaluation needs non-empty ID and OOD sets")
    scores = np.concatenate([np.atleast_1d(confidence_score(id_alphas, measure)),
                             np.atleast_1d(confidence_score(ood_alphas, measure))])
    labels = np.concatenate([np.ones(len(id_alphas)), np.zeros(len(ood_alphas))])
    return auroc(scores, labels)


def histogram_export(values, bins, path=None, value_range=None):
    """Uniform bins over [min, max] (or value_range). Writes edge_low,edge_high,count when path is given."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("Cannot build a histogram of no values")
    if bins < 1:
        raise ValueError("bins must be at least 1")
    if value_range is None:
        value_range = (float(values.min()), float(values.max()))
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    if path is not None:
        rows = [{'edge_low': lo, 'edge_high': hi, 'count': int(c)}
                for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
        services.write_csv(path, rows, ('edge_low', 'edge_high', 'count'))
    return Histogram(edges=edges, counts=counts)


def shared_range(*value_sets):
    joined = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in value_sets])
    return float(joined.min()), float(joined.max())


# --- PREDICTION PASSES ---
def collect_predictions(params, dataset):
    """One forward pass per bag on a parameter snapshot."""
    frozen = params.snapshot()
    bag_alpha, alpha_T, alpha_R, attention, labels = [], [], [], [], []
    for bag in dataset.bags:
        forward = milmodel.bag_evidence(bag.instance_features, frozen)
        instances = milmodel.instance_forward(bag.instance_features, frozen, embeddings=forward.embeddings)
        bag_alpha.append(forward.bag_alpha.value)
        alpha_T.append(instances.alpha_T.value)
        alpha_R.append(instances.alpha_ins.value)
        if forward.attention_weights is not None:
            attention.append(forward.attention_weights.value)
        labels.append(bag.instance_labels)
    return Predictions(
        bag_alpha=np.stack(bag_alpha),
        bag_labels=dataset.bag_labels,
        alpha_T=np.concatenate(alpha_T),
        instance_labels=np.concatenate(labels),
        alpha_R=np.concatenate(alpha_R) if frozen.spec.variant == 'mirel' else None,
        attention=np.concatenate(attention) if attention else None,
    )


def instance_estimators(spec):
    """T always, R for the residual variant, the attention proxy when pooling provides one."""
    estimators = ['T']
    if spec.variant == 'mirel':
        estimators.append('R')
    if spec.pooling == 'attention':
        estimators.append('attention')
    return estimators


def _safe(metric, *args, what=''):
    try:
        return metric(*args)
    except ValueError as e:
        logger.warning("Skipping %s: %s", what, e)
        return None


def evaluate_bags(predictions, ood_predictions, spec):
    alpha = predictions.bag_alpha
    labels, _ = milmodel.predict(alpha)
    report = EvalReport(level='bag', estimator='S', conf_measure=spec.conf_measure,
                        ood_measure=spec.ood_measure, n_samples=len(alpha))
    report.accuracy = float(np.mean(labels == predictions.bag_labels))
    report.conf_auroc = _safe(confidence_eval, alpha, labels, predictions.bag_labels, spec.conf_measure,
                              what='bag confidence AUROC')
    report.label_auroc = _safe(auroc, expected_probability(alpha)[:, 1], predictions.bag_labels,
                               what='bag label AUROC')
    for name, ood in ood_predictions.items():
        report.ood_auroc[name] = ood_eval(alpha, ood.bag_alpha, spec.ood_measure)
        report.n_ood[name] = len(ood.bag_alpha)
    return report


def evaluate_instances(predictions, ood_predictions, spec, estimator):
    """Instances are pooled over all test bags. The attention proxy has no class decision: label AUROC only."""
    truth = predictions.instance_labels
    report = EvalReport(level='instance', estimator=estimator, n_samples=len(truth))
    if estimator == 'attention':
        if predictions.attention is None:
            raise ConfigError("The attention estimator needs attention pooling")
        report.label_auroc = _safe(auroc, predictions.attention, truth, what='attention label AUROC')
        return report
    alpha = predictions.instance_alpha(estimator)
    if alpha is None:
        raise ConfigError(f"Estimator '{estimator}' is not available for this model variant")
    labels, probs = milmodel.predict(alpha)
    report.conf_measure, report.ood_measure = spec.conf_measure, spec.ood_measure
    report.accuracy = float(np.mean(labels == truth))
    report.conf_auroc = _safe(confidence_eval, alpha, labels, truth, spec.conf_measure,
                              what=f'instance confidence AUROC ({estimator})')
    report.label_auroc = _safe(auroc, probs[:, 1], truth, what=f'instance label AUROC ({estimator})')
    for name, ood in ood_predictions.items():
        ood_alpha = ood.instance_alpha(estimator)
        report.ood_auroc[name] = ood_eval(alpha, ood_alpha, spec.ood_measure)
        report.n_ood[name] = len(ood_alpha)
    return report


def evaluate(params, test_set, ood_sets, spec):
    """Bag report plus one instance report per available estimator."""
    predictions = collect_predictions(params, test_set)
    ood_predictions = {name: collect_predictions(params, bags) for name, bags in ood_sets.items()}
    reports = [evaluate_bags(predictions, ood_predictions, spec)]
    for estimator in instance_estimators(params.spec):
        reports.append(evaluate_instances(predictions, ood_predictions, spec, estimator))
    return reports, predictions, ood_predictions


# --- OOD RATIO SWEEP ---
@dataclass
class RatioSweep:
    measure: str
    rows: list
    spearman: float

    def to_dict(self):
        return asdict(self)


def ood_ratio_sweep(params, test_set, ood_pool, ratios=DEFAULT_OOD_RATIOS, measure='neg_expected_entropy', seed=0):
    """Mean bag confidence as a growing share of each bag is swapped for OOD instances."""
    rows = []
    for ratio in ratios:
        mixed = make_ood_mixture(test_set, ood_pool, ratio, seed=seed)
        alpha = collect_predictions(params, mixed).bag_alpha
        scores = np.atleast_1d(confidence_score(alpha, measure))
        rows.append({'ratio': float(ratio), 'mean_confidence': float(scores.mean()),
                     'sd_confidence': float(scores.std()), 'n_bags': len(scores)})
    means = [r['mean_confidence'] for r in rows]
    spearman = float('nan')
    if len(rows) > 1 and max(means) > min(means):
        spearman = float(stats.spearmanr([r['ratio'] for r in rows], means)[0])
    logger.info("OOD ratio sweep (%s, %s): spearman %.3f", ood_pool.source, measure, spearman)
    return RatioSweep(measure=measure, rows=rows, spearman=spearman)
