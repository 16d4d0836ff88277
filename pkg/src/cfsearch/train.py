"""Mini-batch training with Adam and validation-based early stopping.

Rating models minimize the squared error against the observed values; ranking
models minimize the pairwise BPR loss, drawing uniform negatives per positive.
Every epoch the monitored validation metric is recomputed (RMSE for rating,
Recall@k for ranking), the best parameter state is kept, and training stops
once the metric has not improved for `patience` epochs. A non-finite loss or
metric marks the run as failed instead of raising: a search must survive
divergent candidates.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .cfmodel import FusedModel, build_model, make_baseline
from .data import NegativeSampler
from .errors import ConfigError
from .numcore import Rng, adam_step, assign_params, clone_params, sigmoid, softplus

log = logging.getLogger(__name__)

TASKS = ("rating", "ranking")


def rating_loss(scores, targets):
    """Mean squared error and d(loss)/d(scores)."""
    scores = np.asarray(scores, dtype=float)
    targets = np.asarray(targets, dtype=float)
    residual = scores - targets
    loss = float(np.mean(residual**2))
    return loss, 2.0 * residual / len(residual)


def bpr_loss(pos_scores, neg_scores):
    """Mean pairwise logistic loss -log sigmoid(pos - neg), overflow-safe.

    Returns (loss, dpos, dneg). Equal scores give exactly log 2.
    """
    pos_scores = np.asarray(pos_scores, dtype=float)
    neg_scores = np.asarray(neg_scores, dtype=float)
    gap = pos_scores - neg_scores
    loss = float(np.mean(softplus(-gap)))
    slope = sigmoid(-gap) / len(gap)
    return loss, -slope, slope


@dataclass
class TrainSpec:
    """Knobs of one training run; the seed pins init, shuffling and negatives."""

    task: str = "rating"
    max_epochs: int = 200
    batch_size: int = 256
    patience: int = 10
    negatives_per_positive: int = 1
    k: int = 20
    seed: int = 0

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.negatives_per_positive < 1:
            raise ConfigError(
                f"negatives_per_positive must be at least 1, got {self.negatives_per_positive}"
            )
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")

    @property
    def val_metric_name(self):
        return "rmse" if self.task == "rating" else f"recall@{self.k}"

    def to_json(self):
        return {
            "task": self.task,
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "patience": self.patience,
            "negatives_per_positive": self.negatives_per_positive,
            "k": self.k,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc):
        try:
            return cls(**{k: doc[k] for k in cls().to_json()})
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad training spec document: {exc}") from None


@dataclass
class TrainReport:
    """Outcome of one training run. The fitted model and the wall-clock time
    stay in memory only; to_json() is stable across runs with the same seed."""

    config_text: str
    task: str
    seed: int
    val_metric_name: str
    best_val: float
    best_epoch: int
    epochs_run: int
    curve: list = field(default_factory=list)
    failed: bool = False
    seconds: float = 0.0
    model: object = None

    def to_json(self):
        return {
            "config": self.config_text,
            "task": self.task,
            "seed": self.seed,
            "val_metric": self.val_metric_name,
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "curve": [v if math.isfinite(v) else None for v in self.curve],
            "failed": self.failed,
        }


def train_model(config, dataset, space, spec):
    """Train the model a search-space configuration describes."""
    spec.validate()
    space.validate_config(config)
    init_rng, shuffle_rng, neg_rng = Rng(spec.seed).spawn(3)
    model = build_model(config, space, dataset.n_users, dataset.n_items, init_rng)
    return _fit(model, model.lr, dataset, spec, shuffle_rng, neg_rng)


def train_fused(configs, dataset, space, spec, lr=None):
    """Train a joint model that sums the scores of several configurations.

    The learning rate defaults to the first configuration's; components are
    initialized from one stream in order, so the run is seed-deterministic.
    """
    spec.validate()
    if not configs:
        raise ConfigError("fusion needs at least one configuration")
    for config in configs:
        space.validate_config(config)
    init_rng, shuffle_rng, neg_rng = Rng(spec.seed).spawn(3)
    components = [
        build_model(c, space, dataset.n_users, dataset.n_items, init_rng) for c in configs
    ]
    fused = FusedModel(components, lr=lr if lr is not None else space.lr_of(configs[0]))
    return _fit(fused, fused.lr, dataset, spec, shuffle_rng, neg_rng)


def train_baseline(name, d, lr, dataset, spec):
    """Train a named baseline at a given embedding size and learning rate."""
    spec.validate()
    init_rng, shuffle_rng, neg_rng = Rng(spec.seed).spawn(3)
    model = make_baseline(name, d, lr, dataset.n_users, dataset.n_items, init_rng)
    return _fit(model, lr, dataset, spec, shuffle_rng, neg_rng)


def evaluate_model(model, dataset, task, k=20, split="test"):
    """Task-appropriate metrics of a fitted model on one split."""
    if task == "rating":
        return metrics.error_metrics(model, dataset, split)
    return metrics.ranking_metrics(model, dataset, k, split)


def _validation_value(model, dataset, spec, monitor_split):
    if spec.task == "rating":
        preds, targets = metrics.predict_pairs(model, dataset, monitor_split)
        return metrics.rmse(preds, targets)
    return metrics.recall_at_k(model, dataset, spec.k, monitor_split)


def _fit(model, lr, dataset, spec, shuffle_rng, neg_rng):
    start = time.perf_counter()
    train = dataset.train
    if len(train) == 0:
        raise ConfigError("the training split is empty")
    monitor_split = "validation"
    if len(dataset.validation) == 0:
        if spec.task == "ranking":
            raise ConfigError("ranking training needs a non-empty validation split")
        monitor_split = "train"
        log.debug("no validation split; monitoring the training RMSE instead")
    if spec.task == "rating" and dataset.form == "implicit":
        log.warning("rating task on implicit data: every target value is 1.0")
    sampler = NegativeSampler(dataset, neg_rng) if spec.task == "ranking" else None
    metric_name = spec.val_metric_name

    text = model.text()
    best_val = None
    best_epoch = 0
    best_state = None
    curve = []
    failed = False
    epochs_run = 0

    for epoch in range(1, spec.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        for lo in range(0, len(order), spec.batch_size):
            batch = order[lo : lo + spec.batch_size]
            users = train.users[batch]
            items = train.items[batch]
            if spec.task == "rating":
                scores, tape = model.forward_pairs(users, items, dataset)
                loss, dscores = rating_loss(scores, train.values[batch])
                if not math.isfinite(loss):
                    failed = True
                    break
                grads = model.backward(tape, dscores)
            else:
                reps = spec.negatives_per_positive
                pos_users = np.repeat(users, reps)
                pos_items = np.repeat(items, reps)
                neg_items = sampler.sample_many(pos_users)
                pos_scores, pos_tape = model.forward_pairs(pos_users, pos_items, dataset)
                neg_scores, neg_tape = model.forward_pairs(pos_users, neg_items, dataset)
                loss, dpos, dneg = bpr_loss(pos_scores, neg_scores)
                if not math.isfinite(loss):
                    failed = True
                    break
                grads = model.backward(pos_tape, dpos)
                model.backward(neg_tape, dneg, into=grads)
            adam_step(model.params, grads, model.adam, lr)
        if failed:
            break
        epochs_run = epoch
        value = _validation_value(model, dataset, spec, monitor_split)
        if not math.isfinite(value):
            failed = True
            break
        curve.append(value)
        if metrics.is_improvement(value, best_val, metric_name):
            best_val = value
            best_epoch = epoch
            best_state = clone_params(model.params)
        elif epoch - best_epoch >= spec.patience:
            break

    if best_state is not None:
        assign_params(model.params, best_state)
    if failed or best_val is None:
        return TrainReport(
            config_text=text,
            task=spec.task,
            seed=spec.seed,
            val_metric_name=metric_name,
            best_val=metrics.worst_value(metric_name),
            best_epoch=best_epoch,
            epochs_run=epochs_run,
            curve=curve,
            failed=True,
            seconds=time.perf_counter() - start,
            model=model,
        )
    return TrainReport(
        config_text=text,
        task=spec.task,
        seed=spec.seed,
        val_metric_name=metric_name,
        best_val=best_val,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        curve=curve,
        failed=False,
        seconds=time.perf_counter() - start,
        model=model,
    )
