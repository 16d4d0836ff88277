"""Error metrics for rating prediction and full-ranking metrics for top-K.

Ranking is evaluated against the full item catalog: for a held-out pair
(u, j) the candidate set is every item u has no training interaction with
(when scoring the test split, validation items are removed as well), and the
rank of j uses ascending item index to break score ties. A hit at rank p
contributes 1 / log2(p + 1) to NDCG when p <= K.
"""

import math

import numpy as np

from .errors import ConfigError, InternalError


def rmse(predictions, targets):
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape or predictions.size == 0:
        raise InternalError("rmse needs matching non-empty arrays")
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


def mae(predictions, targets):
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape or predictions.size == 0:
        raise InternalError("mae needs matching non-empty arrays")
    return float(np.mean(np.abs(predictions - targets)))


def higher_is_better(metric_name):
    """Orientation of a metric name like 'rmse' or 'recall@20'."""
    base = str(metric_name).lower().split("@")[0]
    if base in ("rmse", "mae"):
        return False
    if base in ("recall", "ndcg"):
        return True
    raise ConfigError(f"unknown metric {metric_name!r}")


def is_improvement(candidate, incumbent, metric_name):
    if incumbent is None:
        return True
    if higher_is_better(metric_name):
        return candidate > incumbent
    return candidate < incumbent


def worst_value(metric_name):
    """Sentinel for a failed evaluation, oriented so anything real beats it."""
    return -math.inf if higher_is_better(metric_name) else math.inf


def predict_pairs(model, dataset, split, batch_size=8192):
    """Model scores and target values over one split's pairs."""
    pairs = dataset.pairs(split)
    if len(pairs) == 0:
        raise InternalError(f"split {split!r} is empty")
    preds = np.empty(len(pairs))
    for start in range(0, len(pairs), batch_size):
        stop = start + batch_size
        scores, _ = model.forward_pairs(
            pairs.users[start:stop], pairs.items[start:stop], dataset, exclude_target=False
        )
        preds[start:stop] = scores
    return preds, pairs.values.copy()


def error_metrics(model, dataset, split="test"):
    preds, targets = predict_pairs(model, dataset, split)
    return {"rmse": rmse(preds, targets), "mae": mae(preds, targets)}


def _target_ranks(model, dataset, split):
    pairs = dataset.pairs(split)
    if len(pairs) == 0:
        raise InternalError(f"split {split!r} is empty")
    n_items = dataset.n_items
    drop_validation = split == "test"
    val = dataset.validation

    by_user = {}
    for idx in range(len(pairs)):
        by_user.setdefault(int(pairs.users[idx]), []).append(idx)

    val_by_user = {}
    if drop_validation and len(val):
        for idx in range(len(val)):
            val_by_user.setdefault(int(val.users[idx]), []).append(int(val.items[idx]))

    cache = model.begin_eval(dataset)
    ranks = np.empty(len(pairs), dtype=np.int64)
    for user in sorted(by_user):
        scores = model.score_all(user, dataset, cache)
        mask = np.ones(n_items, dtype=bool)
        mask[dataset.user_hist[user]] = False
        if drop_validation and user in val_by_user:
            mask[val_by_user[user]] = False
        cand = np.flatnonzero(mask)
        cand_scores = scores[cand]
        for idx in by_user[user]:
            target = int(pairs.items[idx])
            if not mask[target]:
                raise InternalError(
                    f"target item {target} of user {user} is excluded from its own candidates"
                )
            target_score = scores[target]
            greater = int(np.sum(cand_scores > target_score))
            tied_before = int(np.sum((cand_scores == target_score) & (cand < target)))
            ranks[idx] = 1 + greater + tied_before
    return ranks


def ranking_metrics(model, dataset, k=20, split="test"):
    """Recall@k and NDCG@k over one split, full-catalog candidates."""
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    ranks = _target_ranks(model, dataset, split)
    # Left-to-right scalar accumulation: numpy's blocked summation can move
    # the mean by an ulp, and these values are checked against references.
    hits = 0
    gain = 0.0
    for rank in ranks.tolist():
        if rank <= k:
            hits += 1
            gain += 1.0 / math.log2(rank + 1.0)
    n = len(ranks)
    return {f"recall@{k}": hits / n, f"ndcg@{k}": gain / n}


def recall_at_k(model, dataset, k=20, split="test"):
    return ranking_metrics(model, dataset, k, split)[f"recall@{k}"]


def ndcg_at_k(model, dataset, k=20, split="test"):
    return ranking_metrics(model, dataset, k, split)[f"ndcg@{k}"]
