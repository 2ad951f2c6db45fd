# training.py
"""
Optimisation loop: parameter-group routing, AdamW with decoupled decay, plateau lr
decay, early stopping on validation (loss + error), gradient accumulation.

Routing:
    bag loss (I-EDL + RED)        -> psi, theta_pool, phi
    instance loss (MIREL + RED)   -> psi, pi      (pi only when the encoder is frozen)
    bce baseline (bag logits)     -> psi, theta_pool, phi
phi reaches the instance path read-only, see milmodel.instance_forward.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

import milmodel
import utils
from errors import ConfigError, DataError, NumericError
from losses import LossConfig, bce_loss, lambda2_at, total_objective  # noqa: F401  lambda2_at is part of this module's API

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_patience: int = 10
    early_stop_patience: int = 20
    max_epochs: int = 200
    batch_bags: int = 1  # bags run one at a time; a step averages batch_bags * grad_accum_steps of them
    grad_accum_steps: int = 8
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    restore_best: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        for name in ('lr', 'lr_patience', 'early_stop_patience', 'max_epochs', 'batch_bags',
                     'grad_accum_steps', 'adam_eps'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError("train.lr_decay_factor must lie in (0, 1]")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")

    @property
    def bags_per_step(self):
        return self.batch_bags * self.grad_accum_steps


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    stop_epoch: int = None
    best_epoch: int = None
    stopped_early: bool = False

    @property
    def train_loss(self):
        return [r['train_loss'] for r in self.records]

    @property
    def criterion(self):
        return [r['criterion'] for r in self.records]

    @property
    def lr_trace(self):
        return [r['lr'] for r in self.records]

    def summary(self):
        return {'stop_epoch': self.stop_epoch, 'best_epoch': self.best_epoch,
                'stopped_early': self.stopped_early, 'epochs_run': len(self.records)}


# --- OPTIMISER ---
class AdamW:
    """Adam moments with weight decay applied straight to the weights, not to the gradient."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.value -= self.lr * (update + self.weight_decay * p.value)


@dataclass
class PlateauScheduler:
    lr: float
    patience: int = 10
    factor: float = 0.5
    best: float = math.inf
    age: int = 0

    def step(self, criterion):
        """Record one epoch's criterion; returns the lr for the next epoch."""
        if criterion < self.best:
            self.best = criterion
            self.age = 0
            return self.lr
        self.age += 1
        if self.age >= self.patience:
            self.lr *= self.factor
            self.age = 0
            logger.info("Validation criterion flat for %d epochs, lr -> %.3g", self.patience, self.lr)
        return self.lr


def plateau_scheduler(criteria, lr, patience=10, factor=0.5):
    """Replay a criterion history through the plateau rule and return the resulting lr."""
    if not len(criteria):
        raise ValueError("plateau_scheduler needs at least one recorded epoch")
    scheduler = PlateauScheduler(lr=lr, patience=patience, factor=factor)
    for value in criteria:
        scheduler.step(value)
    return scheduler.lr


# --- ROUTING ---
def routing_groups(spec):
    """Parameter groups some loss term reaches under this model spec."""
    active = {'psi', 'phi'}
    if spec.pooling == 'attention':
        active.add('theta_pool')
    if spec.variant == 'mirel':
        active.add('pi')
    return tuple(g for g in milmodel.GROUP_ORDER if g in active)


def objective(spec, bag, instances, bag_label, loss_config, epoch):
    """Loss for one bag under the model's variant. bce scores the bag logits only."""
    if spec.variant == 'bce':
        return bce_loss(bag.bag_logits, bag_label)
    return total_objective(bag, instances, bag_label, loss_config, epoch)


def bag_loss(params, features, bag_label, loss_config, epoch):
    """Full objective for one bag. The instance path shares the bag's embeddings."""
    bag = milmodel.bag_evidence(features, params)
    instances = None
    if params.spec.variant == 'mirel':
        instances = milmodel.instance_forward(features, params, embeddings=bag.embeddings,
                                              freeze_encoder=loss_config.freeze_psi_in_instance_loss)
    return objective(params.spec, bag, instances, bag_label, loss_config, epoch)


def _training_bags(dataset, name):
    bags = dataset.training_bags() if hasattr(dataset, 'training_bags') else list(dataset)
    if not bags:
        raise DataError(f"The {name} set is empty")
    for bag in bags:
        if hasattr(bag, 'instance_labels'):
            raise TypeError("Training accepts label-erased bags only (use BagSample.training_view())")
    return bags


def validate(params, bags, loss_config):
    """
    Mean loss and bag error (1 - accuracy) on a parameter snapshot.
    The loss is always scored at the full KL weight (lambda2 = 1), whatever the epoch.
    """
    frozen = params.snapshot()
    settled_epoch = loss_config.lambda2_warmup
    total, correct = 0.0, 0
    for bag in bags:
        forward = milmodel.bag_evidence(bag.features, frozen)
        instances = None
        if frozen.spec.variant == 'mirel':
            instances = milmodel.instance_forward(bag.features, frozen, embeddings=forward.embeddings)
        total += objective(frozen.spec, forward, instances, bag.bag_label, loss_config, settled_epoch).item()
        label, _ = milmodel.predict(forward.bag_alpha.value)
        correct += int(label == bag.bag_label)
    return total / len(bags), 1.0 - correct / len(bags)


def _apply_step(optimizer, n_bags):
    for p in optimizer.params:
        p.grad /= n_bags
    optimizer.step()
    for p in optimizer.params:
        p.zero_grad()


def train(model, train_set, val_set, config, on_epoch=None):
    """
    Returns (trained parameters, TrainHistory). `model` is not modified.
    Same seed and same bags give bit-identical results.
    """
    train_bags = _training_bags(train_set, 'training')
    val_bags = _training_bags(val_set, 'validation')
    in_dim = train_bags[0].features.shape[1]
    if in_dim != model.spec.in_dim:
        raise DataError(f"Bags have {in_dim} features but the model expects {model.spec.in_dim}")

    params = model.copy()
    params.zero_grad()
    groups = routing_groups(params.spec)
    optimizer = AdamW(params.parameters(groups), config.lr, config.beta1, config.beta2,
                      config.adam_eps, config.weight_decay)
    scheduler = PlateauScheduler(config.lr, config.lr_patience, config.lr_decay_factor)
    rng = np.random.default_rng(utils.substream(config.seed, 'train'))
    history = TrainHistory()
    best_criterion, best_values = math.inf, None
    logger.info("Training %s/%s on %d bags, routing to %s", params.spec.variant, params.spec.pooling,
                len(train_bags), ', '.join(groups))

    for epoch in range(config.max_epochs):
        optimizer.lr = scheduler.lr
        running, pending = 0.0, 0
        for index in rng.permutation(len(train_bags)):
            bag = train_bags[index]
            try:
                loss = bag_loss(params, bag.features, bag.bag_label, config.loss, epoch)
            except NumericError as e:
                raise NumericError(f"{e} (epoch {epoch}, bag {index})", epoch=epoch, bag_index=int(index)) from e
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"Non-finite training loss {value} at epoch {epoch}, bag {index}",
                                   epoch=epoch, bag_index=int(index))
            loss.backward()
            running += value
            pending += 1
            if pending == config.bags_per_step:
                _apply_step(optimizer, pending)
                pending = 0
        if pending:
            _apply_step(optimizer, pending)

        val_loss, val_error = validate(params, val_bags, config.loss)
        criterion = val_loss + val_error
        if not np.isfinite(criterion):
            raise NumericError(f"Non-finite validation loss at epoch {epoch}", epoch=epoch)
        record = {
            'epoch': epoch,
            'train_loss': running / len(train_bags),
            'val_loss': val_loss,
            'val_error': val_error,
            'criterion': criterion,
            'lr': optimizer.lr,
        }
        history.records.append(record)
        logger.info("Epoch %3d | train %.4f | val %.4f | err %.3f | lr %.2e",
                    epoch, record['train_loss'], val_loss, val_error, optimizer.lr)
        if on_epoch is not None:
            on_epoch(record)

        if criterion < best_criterion:
            best_criterion = criterion
            history.best_epoch = epoch
            best_values = params.snapshot()
        scheduler.step(criterion)
        history.stop_epoch = epoch
        if epoch - history.best_epoch >= config.early_stop_patience:
            history.stopped_early = True
            logger.info("Early stop at epoch %d (best epoch %d)", epoch, history.best_epoch)
            break

    if config.restore_best and best_values is not None:
        params.load_values(best_values)
    return params, history
