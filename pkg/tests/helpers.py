"""Shared test utilities: toy datasets, loop-based reference scoring, and
finite-difference gradient checks.

The reference implementations here are deliberately written with python
loops and scalar math so they share no code path with the package.
"""

import hashlib
import math

import numpy as np

from cfsearch.cfmodel import CfModel, FusedModel, SearchSpace
from cfsearch.data import InteractionDataset
from cfsearch.numcore import Rng


def tiny_dataset():
    """3 users x 4 items with explicit values and fixed splits.

    Item 3 is rated only by user 2, so scoring the training pair (2, 3) with
    target exclusion leaves item 3 with an empty history.
    """
    train = [
        (0, 0, 5.0),
        (0, 1, 3.0),
        (1, 0, 3.0),
        (1, 1, 4.0),
        (1, 2, 2.0),
        (2, 0, 1.0),
        (2, 3, 5.0),
    ]
    val = [(0, 2, 4.0), (2, 1, 2.0)]
    test = [(0, 3, 1.0), (1, 3, 3.0)]
    return InteractionDataset.from_pairs(3, 4, train, val, test, form="explicit")


def stable_seed(*parts):
    """Deterministic 32-bit seed from string-able parts (hash() is salted)."""
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "big")


# ---------------------------------------------------------------------------
# Loop-based reference model
# ---------------------------------------------------------------------------


def ref_mlp(net, x):
    """Scalar-loop forward pass through an MlpNet."""
    a = [float(v) for v in x]
    for k in range(net.n_layers):
        w = net.weights[k]
        b = net.biases[k]
        z = []
        for i in range(w.shape[0]):
            acc = float(b[i])
            for j in range(w.shape[1]):
                acc += float(w[i, j]) * a[j]
            z.append(acc)
        a = [max(v, 0.0) for v in z] if k < net.n_layers - 1 else z
    return a


def ref_history(dataset, side_name, own, partner, exclude):
    hist = dataset.user_hist[own] if side_name == "user" else dataset.item_hist[own]
    hs = [int(v) for v in hist]
    if exclude and partner in hs:
        hs.remove(partner)
    return hs


def ref_side_embed(model, side_name, own, partner, dataset, exclude):
    side = model.user_side if side_name == "user" else model.item_side
    d = model.d
    if side.enc == "ID":
        return [float(v) for v in side.table[own]]
    hs = ref_history(dataset, side_name, own, partner, exclude)
    if not hs:
        return [0.0] * d
    if side.emb == "MAT":
        return [sum(float(side.table[k, j]) for k in hs) / len(hs) for j in range(d)]
    multi_hot = [1.0 if k in hs else 0.0 for k in range(side.n_other)]
    return ref_mlp(side.net, multi_hot)


def ref_single_score(model, u, i, dataset, exclude=True):
    eu = ref_side_embed(model, "user", u, i, dataset, exclude)
    ei = ref_side_embed(model, "item", i, u, dataset, exclude)
    op = model.stages.interaction
    if op == "MUL":
        vec = [a * b for a, b in zip(eu, ei)]
    elif op == "PLUS":
        vec = [a + b for a, b in zip(eu, ei)]
    elif op == "MINUS":
        vec = [a - b for a, b in zip(eu, ei)]
    elif op == "MIN":
        vec = [a if a <= b else b for a, b in zip(eu, ei)]
    elif op == "MAX":
        vec = [a if a >= b else b for a, b in zip(eu, ei)]
    elif op == "CONCAT":
        vec = eu + ei
    else:
        raise AssertionError(op)
    pred = model.stages.prediction
    if pred == "SUM":
        return sum(vec)
    if pred == "VEC":
        return sum(float(w) * v for w, v in zip(model.head_vec, vec))
    if pred == "MLP":
        return ref_mlp(model.head_net, vec)[0]
    if pred == "NORM":
        return -math.sqrt(sum(v * v for v in vec))
    raise AssertionError(pred)


def ref_score(model, u, i, dataset, exclude=True):
    if isinstance(model, FusedModel):
        return sum(ref_single_score(c, u, i, dataset, exclude) for c in model.components)
    return ref_single_score(model, u, i, dataset, exclude)


# ---------------------------------------------------------------------------
# Ranking oracles
# ---------------------------------------------------------------------------


class ScoreStub:
    """Stands in for a model during metric tests: a fixed score matrix."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    def begin_eval(self, dataset):
        return None

    def score_all(self, user, dataset, cache=None):
        return self.matrix[user]


def oracle_ranking_metrics(matrix, dataset, k, split):
    """Brute-force full-ranking metrics: sort the candidate list per pair."""
    pairs = dataset.pairs(split)
    hits = []
    gains = []
    for idx in range(len(pairs)):
        u = int(pairs.users[idx])
        j = int(pairs.items[idx])
        excluded = set(int(v) for v in dataset.user_hist[u])
        if split == "test":
            val = dataset.validation
            excluded |= {int(val.items[t]) for t in range(len(val)) if int(val.users[t]) == u}
        cand = [c for c in range(dataset.n_items) if c not in excluded]
        ranked = sorted(cand, key=lambda c: (-matrix[u][c], c))
        rank = ranked.index(j) + 1
        hits.append(1.0 if rank <= k else 0.0)
        gains.append(1.0 / math.log2(rank + 1.0) if rank <= k else 0.0)
    return {
        f"recall@{k}": sum(hits) / len(hits),
        f"ndcg@{k}": sum(gains) / len(gains),
    }


def make_random_rank_instance(seed, max_users=50, max_items=80):
    """Random dataset plus an integer-valued score matrix (ties are common)."""
    rng = Rng(seed)
    n_users = int(rng.integers(2, max_users + 1))
    n_items = int(rng.integers(2, max_items + 1))
    budget = min(n_users * n_items, int(rng.integers(n_users + 3, n_users * 3 + 20)))
    flat = rng.sample_without_replacement(n_users * n_items, budget)
    pairs = [(int(f) // n_items, int(f) % n_items) for f in flat]
    cut1 = max(1, int(0.6 * len(pairs)))
    cut2 = max(cut1 + 1, int(0.8 * len(pairs)))
    if cut2 >= len(pairs):
        cut2 = len(pairs) - 1
    ds = InteractionDataset.from_pairs(
        n_users, n_items, pairs[:cut1], pairs[cut1:cut2], pairs[cut2:]
    )
    matrix = rng.integers(0, 5, size=(n_users, n_items)).astype(float)
    return ds, matrix


def make_rank_one_dataset(n=20, seed=3):
    """n x n explicit ratings from an exact rank-one matrix, all pairs in train."""
    rng = Rng(seed)
    left = rng.uniform(0.5, 1.5, size=n)
    right = rng.uniform(0.5, 1.5, size=n)
    train = [(u, i, float(left[u] * right[i])) for u in range(n) for i in range(n)]
    return InteractionDataset.from_pairs(n, n, train, form="explicit")


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def _activation_margin(model, users, items, dataset):
    """Smallest distance to a ReLU kink or a MIN/MAX tie on this batch.

    Finite differences are meaningless within h of such a point, so draws
    whose margin is too small get redrawn instead of tolerated.
    """
    margins = [math.inf]
    single = [model] if not isinstance(model, FusedModel) else model.components
    for comp in single:
        _, (tape_u, tape_i, tape_x, tape_h) = comp.forward_pairs(users, items, dataset)
        for tape in (tape_u, tape_i):
            if tape[0] == "mlp":
                _, _, lens, z1, _ = tape
                live = z1[lens > 0]
                if live.size:
                    margins.append(float(np.abs(live).min()))
        if tape_x[0] == "pick":
            eu, _ = comp.user_side.embed_pairs(users, items, dataset.user_hist)
            ei, _ = comp.item_side.embed_pairs(items, users, dataset.item_hist)
            margins.append(float(np.abs(eu - ei).min()))
        if tape_h[0] == "mlp":
            for z in tape_h[1].zs[:-1]:
                margins.append(float(np.abs(z).min()))
    return min(margins)


def fd_max_rel_err(model, dataset, users, items, h=1e-4, loss_seed=99):
    """Max relative error between analytic and central-difference gradients
    for the loss sum(scores * r) with a fixed random r."""
    r = Rng(loss_seed).normal(size=len(users))
    scores, tape = model.forward_pairs(users, items, dataset)
    grads = model.backward(tape, r)

    def loss():
        return float(model.forward_pairs(users, items, dataset)[0] @ r)

    worst = 0.0
    for name, grad in grads.items():
        p = model.params[name]
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            up = loss()
            p[idx] = orig - h
            down = loss()
            p[idx] = orig
            fd = (up - down) / (2.0 * h)
            an = float(np.asarray(grad)[idx])
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-3)
            worst = max(worst, err)
    return worst


def _fd_batch(stages, dataset):
    """Training pairs at which the model is differentiable.

    MUL with an emptied history yields an all-zero interaction vector; with
    zero-initialized biases an MLP head then sits exactly on the ReLU kink,
    where no parameter draw can help. Those pairs are dropped for that config
    class only; every other config keeps the full batch.
    """
    users, items = dataset.train.users, dataset.train.items
    if stages.interaction != "MUL" or stages.prediction != "MLP":
        return users, items
    keep = []
    for b in range(len(users)):
        u, i = int(users[b]), int(items[b])
        user_empties = stages.user_enc == "H" and len(dataset.user_hist[u]) <= 1
        item_empties = stages.item_enc == "H" and len(dataset.item_hist[i]) <= 1
        if not (user_empties or item_empties):
            keep.append(b)
    assert keep, "FD batch must not be empty"
    return users[keep], items[keep]


def gradcheck_stages(stages, dataset=None, d=4, draws=5, h=1e-4, margin=1e-3):
    """FD-check one stage tuple over several parameter draws; returns the
    worst relative error seen. Draws too close to a kink are redrawn."""
    if dataset is None:
        dataset = tiny_dataset()
    users, items = _fd_batch(stages, dataset)
    worst = 0.0
    for draw in range(draws):
        model = None
        for retry in range(40):
            seed = stable_seed("gradcheck", ",".join(stages.fields()), draw, retry)
            candidate = CfModel(stages, d, 0.001, dataset.n_users, dataset.n_items, Rng(seed))
            if _activation_margin(candidate, users, items, dataset) > margin:
                model = candidate
                break
        assert model is not None, f"no kink-free draw found for {stages}"
        worst = max(worst, fd_max_rel_err(model, dataset, users, items, h=h))
    return worst


def run_full_gradient_suite(d=4, draws=5, h=1e-4):
    """FD-check every compatible stage tuple; returns (worst error, n tuples)."""
    dataset = tiny_dataset()
    space = SearchSpace()
    worst = 0.0
    tuples = space.stage_tuples()
    for stages in tuples:
        worst = max(worst, gradcheck_stages(stages, dataset, d=d, draws=draws, h=h))
    return worst, len(tuples)
