"""The four-stage model family for collaborative filtering.

A model is a stage tuple (input encoding, embedding function per side,
interaction, prediction head) plus an embedding size d and a learning rate.
This module owns the enumerable search space over those choices, the one-hot
encoding of a configuration, the model itself with exact gradients, score
fusion of several models, and the named baselines that live inside the family.

Conventions baked in here:

* an ID input can only feed the MAT embedding (a lookup table); History
  inputs may feed MAT (mean pooling over the history) or MLP (a tower over
  the multi-hot history vector, evaluated sparsely),
* the partner entity is dropped from a history when scoring a training pair,
  so a model never sees the interaction it is asked to predict,
* an empty history embeds to the zero vector, bypassing the tower entirely,
* MIN/MAX resolve elementwise ties in favor of the user side, and CONCAT
  puts the user embedding first.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InternalError
from .numcore import AdamState, MlpNet, glorot_uniform

ENCODING_OPS = ("ID", "H")
EMBEDDING_OPS = ("MAT", "MLP")
INTERACTION_OPS = ("MUL", "MINUS", "MIN", "MAX", "CONCAT")
PLUS_OP = "PLUS"
PREDICTION_OPS = ("SUM", "VEC", "MLP")
NORM_OP = "NORM"

DEFAULT_DIMS = (8, 16, 32, 64)
DEFAULT_LRS = (0.0005, 0.001, 0.005, 0.01)

_TOKEN_ALIASES = {"HISTORY": "H", "HIST": "H", "MULTIPLY": "MUL", "MULT": "MUL", "CAT": "CONCAT"}

_INTERACTION_WORDS = {
    "MUL": "multiply",
    "MINUS": "minus",
    "MIN": "min",
    "MAX": "max",
    "CONCAT": "concat",
    "PLUS": "plus",
}


@dataclass(frozen=True)
class StageChoice:
    """One choice per stage, user side before item side."""

    user_enc: str
    item_enc: str
    user_emb: str
    item_emb: str
    interaction: str
    prediction: str

    def fields(self):
        return (
            self.user_enc,
            self.item_enc,
            self.user_emb,
            self.item_emb,
            self.interaction,
            self.prediction,
        )

    def validate(self, *, interactions=INTERACTION_OPS + (PLUS_OP,), allow_norm=True):
        predictions = PREDICTION_OPS + ((NORM_OP,) if allow_norm else ())
        for value, vocab, what in (
            (self.user_enc, ENCODING_OPS, "user input encoding"),
            (self.item_enc, ENCODING_OPS, "item input encoding"),
            (self.user_emb, EMBEDDING_OPS, "user embedding function"),
            (self.item_emb, EMBEDDING_OPS, "item embedding function"),
            (self.interaction, interactions, "interaction"),
            (self.prediction, predictions, "prediction"),
        ):
            if value not in vocab:
                raise ConfigError(f"{what} {value!r} is not one of {vocab}")
        for side, enc, emb in (
            ("user", self.user_enc, self.user_emb),
            ("item", self.item_enc, self.item_emb),
        ):
            if enc == "ID" and emb != "MAT":
                raise ConfigError(
                    f"invalid stages {','.join(self.fields())}: the ID input encoding "
                    f"requires the MAT embedding function on the same side, but the "
                    f"{side} side pairs ID with {emb}"
                )

    def compatible(self):
        try:
            self.validate()
        except ConfigError:
            return False
        return True


@dataclass(frozen=True)
class ModelConfig:
    """Coordinates of one model inside a SearchSpace."""

    stages: StageChoice
    dim_index: int
    lr_index: int


def format_model_text(stages, d, lr):
    """Serialize a model as 'ENC,ENC,EMB,EMB,INTER,PRED|d=<int>|lr=<float>'."""
    return f"{','.join(stages.fields())}|d={int(d)}|lr={float(lr)}"


def parse_model_text(text):
    """Inverse of format_model_text; returns (StageChoice, d, lr)."""
    parts = [p.strip() for p in str(text).split("|")]
    if len(parts) != 3 or not parts[1].startswith("d=") or not parts[2].startswith("lr="):
        raise ConfigError(
            f"bad model text {text!r}: expected 'ENC,ENC,EMB,EMB,INTER,PRED|d=<int>|lr=<float>'"
        )
    tokens = [t.strip().upper() for t in parts[0].split(",")]
    tokens = [_TOKEN_ALIASES.get(t, t) for t in tokens]
    if len(tokens) != 6:
        raise ConfigError(f"bad model text {text!r}: expected six stage tokens, got {len(tokens)}")
    stages = StageChoice(*tokens)
    stages.validate()
    try:
        d = int(parts[1][2:])
        lr = float(parts[2][3:])
    except ValueError as exc:
        raise ConfigError(f"bad model text {text!r}: {exc}") from None
    if d <= 0 or lr <= 0:
        raise ConfigError(f"bad model text {text!r}: d and lr must be positive")
    return stages, d, lr


def display_stages(stages):
    """Human-facing tuple like '<H,H,MLP,MLP,max,MLP>'."""
    word = _INTERACTION_WORDS[stages.interaction]
    return (
        f"<{stages.user_enc},{stages.item_enc},{stages.user_emb},"
        f"{stages.item_emb},{word},{stages.prediction}>"
    )


class SearchSpace:
    """Enumerable space: valid stage tuples crossed with sizes and learning rates.

    The stage vocabulary is fixed; the embedding sizes and learning rates are
    the tunable axes. PLUS can be switched on as a sixth interaction. The NORM
    prediction head exists for one classic baseline but is deliberately not
    part of the space, so it cannot be encoded or sampled.
    """

    def __init__(self, dims=DEFAULT_DIMS, lrs=DEFAULT_LRS, include_plus=False):
        dims = tuple(int(d) for d in dims)
        lrs = tuple(float(lr) for lr in lrs)
        if not dims or any(d <= 0 for d in dims) or len(set(dims)) != len(dims):
            raise ConfigError(f"embedding sizes must be distinct positive integers, got {dims}")
        if not lrs or any(lr <= 0 for lr in lrs) or len(set(lrs)) != len(lrs):
            raise ConfigError(f"learning rates must be distinct positive floats, got {lrs}")
        self.dims = dims
        self.lrs = lrs
        self.include_plus = bool(include_plus)
        self._tuples = None
        self._configs = None

    @property
    def interaction_ops(self):
        return INTERACTION_OPS + ((PLUS_OP,) if self.include_plus else ())

    def stage_tuples(self):
        """Every compatible stage tuple, in canonical enumeration order."""
        if self._tuples is None:
            out = []
            for ue in ENCODING_OPS:
                for ie in ENCODING_OPS:
                    for uemb in EMBEDDING_OPS:
                        if ue == "ID" and uemb != "MAT":
                            continue
                        for iemb in EMBEDDING_OPS:
                            if ie == "ID" and iemb != "MAT":
                                continue
                            for inter in self.interaction_ops:
                                for pred in PREDICTION_OPS:
                                    out.append(StageChoice(ue, ie, uemb, iemb, inter, pred))
            self._tuples = out
        return list(self._tuples)

    def configs(self):
        """Every configuration, canonical order: stages, then d, then lr."""
        if self._configs is None:
            self._configs = [
                ModelConfig(stages, di, li)
                for stages in self.stage_tuples()
                for di in range(len(self.dims))
                for li in range(len(self.lrs))
            ]
        return list(self._configs)

    @property
    def n_configs(self):
        return len(self.stage_tuples()) * len(self.dims) * len(self.lrs)

    def _blocks(self):
        return (
            ENCODING_OPS,
            ENCODING_OPS,
            EMBEDDING_OPS,
            EMBEDDING_OPS,
            self.interaction_ops,
            PREDICTION_OPS,
            self.dims,
            self.lrs,
        )

    @property
    def encoding_length(self):
        return sum(len(b) for b in self._blocks())

    def encode(self, config):
        """One-hot encoding, one block per stage plus a size and a rate block.

        Encoding does not require the stage tuple to be compatible; only
        membership of every choice in its block. NORM is rejected because it
        is outside the space.
        """
        blocks = self._blocks()
        values = list(config.stages.fields())
        if config.stages.prediction == NORM_OP:
            raise ConfigError("the NORM prediction head is outside the search space")
        if not 0 <= config.dim_index < len(self.dims):
            raise ConfigError(f"dim_index {config.dim_index} out of range for {self.dims}")
        if not 0 <= config.lr_index < len(self.lrs):
            raise ConfigError(f"lr_index {config.lr_index} out of range for {self.lrs}")
        values += [self.dims[config.dim_index], self.lrs[config.lr_index]]
        vec = np.zeros(self.encoding_length)
        offset = 0
        for value, block in zip(values, blocks):
            if value not in block:
                raise ConfigError(f"cannot encode {value!r}: not in {block}")
            vec[offset + block.index(value)] = 1.0
            offset += len(block)
        return vec

    def decode(self, vec):
        """Inverse of encode. Rejects anything that is not exactly one-hot per block."""
        vec = np.asarray(vec, dtype=float)
        if vec.ndim != 1 or vec.shape[0] != self.encoding_length:
            raise ConfigError(
                f"encoding must be a vector of length {self.encoding_length}, got shape {vec.shape}"
            )
        if not np.all((vec == 0.0) | (vec == 1.0)):
            raise ConfigError("encoding entries must be exactly 0 or 1")
        choices = []
        offset = 0
        for block in self._blocks():
            chunk = vec[offset : offset + len(block)]
            hot = np.flatnonzero(chunk)
            if hot.size != 1:
                raise ConfigError(
                    f"block at offset {offset} must have exactly one active entry, got {hot.size}"
                )
            choices.append(int(hot[0]))
            offset += len(block)
        stages = StageChoice(
            ENCODING_OPS[choices[0]],
            ENCODING_OPS[choices[1]],
            EMBEDDING_OPS[choices[2]],
            EMBEDDING_OPS[choices[3]],
            self.interaction_ops[choices[4]],
            PREDICTION_OPS[choices[5]],
        )
        return ModelConfig(stages, choices[6], choices[7])

    def dim_of(self, config):
        return self.dims[config.dim_index]

    def lr_of(self, config):
        return self.lrs[config.lr_index]

    def config_text(self, config):
        return format_model_text(config.stages, self.dim_of(config), self.lr_of(config))

    def parse_config(self, text):
        """Parse a model text form into coordinates of this space."""
        stages, d, lr = parse_model_text(text)
        self.validate_stages(stages)
        if d not in self.dims:
            raise ConfigError(f"embedding size {d} is not among {self.dims}")
        li = [i for i, v in enumerate(self.lrs) if v == lr]
        if not li:
            raise ConfigError(f"learning rate {lr} is not among {self.lrs}")
        return ModelConfig(stages, self.dims.index(d), li[0])

    def validate_stages(self, stages):
        stages.validate(interactions=self.interaction_ops, allow_norm=False)

    def validate_config(self, config):
        self.validate_stages(config.stages)
        if not 0 <= config.dim_index < len(self.dims):
            raise ConfigError(f"dim_index {config.dim_index} out of range for {self.dims}")
        if not 0 <= config.lr_index < len(self.lrs):
            raise ConfigError(f"lr_index {config.lr_index} out of range for {self.lrs}")

    def sort_key(self, config):
        """Canonical order key: enumeration order of configs()."""
        s = config.stages
        return (
            ENCODING_OPS.index(s.user_enc),
            ENCODING_OPS.index(s.item_enc),
            EMBEDDING_OPS.index(s.user_emb),
            EMBEDDING_OPS.index(s.item_emb),
            self.interaction_ops.index(s.interaction),
            PREDICTION_OPS.index(s.prediction),
            config.dim_index,
            config.lr_index,
        )

    def to_json(self):
        return {"dims": list(self.dims), "lrs": list(self.lrs), "include_plus": self.include_plus}

    @classmethod
    def from_json(cls, doc):
        try:
            return cls(tuple(doc["dims"]), tuple(doc["lrs"]), bool(doc.get("include_plus", False)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad search space document: {exc}") from None

    def __repr__(self):
        return f"SearchSpace(dims={self.dims}, lrs={self.lrs}, include_plus={self.include_plus})"

    def describe(self):
        return (
            f"{len(self.stage_tuples())} stage tuples x {len(self.dims)} sizes "
            f"x {len(self.lrs)} rates = {self.n_configs} configurations "
            f"(encoding length {self.encoding_length})"
        )


def _gather_segments(hists, ids, partners):
    """Concatenated history indices for a batch, with the partner id dropped.

    Returns (concat, lens): concat holds the surviving history entries of
    ids[0], then ids[1], ...; lens the per-row segment lengths.
    """
    segs = []
    for b in range(len(ids)):
        h = hists[ids[b]]
        if partners is not None:
            j = partners[b]
            pos = int(np.searchsorted(h, j))
            if pos < len(h) and h[pos] == j:
                h = np.delete(h, pos)
        segs.append(h)
    lens = np.fromiter((len(s) for s in segs), dtype=np.int64, count=len(segs))
    concat = np.concatenate(segs) if segs else np.zeros(0, dtype=np.int64)
    return concat, lens


def _segment_sums(rows, lens, width):
    """Per-segment column sums of stacked rows; empty segments sum to zero."""
    bounds = np.zeros(len(lens) + 1, dtype=np.int64)
    np.cumsum(lens, out=bounds[1:])
    csum = np.zeros((rows.shape[0] + 1, width))
    np.cumsum(rows, axis=0, out=csum[1:])
    return csum[bounds[1:]] - csum[bounds[:-1]]


class _Side:
    """One tower (input encoding + embedding) for the user or the item side.

    ID keeps a table over the side's own entities. A History input is the
    multi-hot vector over the opposite entities; with MAT it becomes a mean
    pooled lookup into a table indexed by those entities, with MLP a two-layer
    tower [n_other, 4d, d] evaluated by gathering the first-layer columns of
    the active entries.
    """

    def __init__(self, role, enc, emb, n_own, n_other, d, rng):
        self.role = role
        self.enc = enc
        self.emb = emb
        self.n_own = n_own
        self.n_other = n_other
        self.d = d
        self.table = None
        self.net = None
        if enc == "ID":
            self.table = glorot_uniform(rng, n_own, d)
        elif emb == "MAT":
            self.table = glorot_uniform(rng, n_other, d)
        else:
            self.net = MlpNet([n_other, 4 * d, d], rng)

    def param_items(self):
        if self.table is not None:
            return [(f"{self.role}.table", self.table)]
        return self.net.param_items(f"{self.role}.net")

    def embed_pairs(self, ids, partners, hists):
        """Embeddings for a batch of own-entity ids; partner ids are excluded
        from histories when given (training-pair mode)."""
        if self.enc == "ID":
            return self.table[ids], ("id", ids)
        concat, lens = _gather_segments(hists, ids, partners)
        if self.emb == "MAT":
            sums = _segment_sums(self.table[concat], lens, self.d)
            emb = sums / np.maximum(lens, 1)[:, None]
            return emb, ("mat", concat, lens)
        w0, b0 = self.net.weights[0], self.net.biases[0]
        z1 = _segment_sums(w0.T[concat], lens, w0.shape[0]) + b0
        a1 = np.maximum(z1, 0.0)
        emb = a1 @ self.net.weights[1].T + self.net.biases[1]
        emb[lens == 0] = 0.0
        return emb, ("mlp", concat, lens, z1, a1)

    def embed_all(self, dataset):
        """Embeddings of every own entity with its full training history."""
        if self.enc == "ID":
            return self.table
        hists = dataset.user_hist if self.role == "user" else dataset.item_hist
        ids = np.arange(self.n_own)
        emb, _ = self.embed_pairs(ids, None, hists)
        return emb

    def backward_pairs(self, tape, demb, grads):
        kind = tape[0]
        if kind == "id":
            ids = tape[1]
            g = np.zeros_like(self.table)
            np.add.at(g, ids, demb)
            _acc(grads, f"{self.role}.table", g)
            return
        if kind == "mat":
            _, concat, lens = tape
            weighted = demb / np.maximum(lens, 1)[:, None]
            owner = np.repeat(np.arange(len(lens)), lens)
            g = np.zeros_like(self.table)
            np.add.at(g, concat, weighted[owner])
            _acc(grads, f"{self.role}.table", g)
            return
        if kind == "mlp":
            _, concat, lens, z1, a1 = tape
            demb = np.where((lens == 0)[:, None], 0.0, demb)
            w1 = self.net.weights[1]
            gw1 = demb.T @ a1
            gb1 = demb.sum(axis=0)
            dz1 = (demb @ w1) * (z1 > 0.0)
            gb0 = dz1.sum(axis=0)
            owner = np.repeat(np.arange(len(lens)), lens)
            gw0t = np.zeros((self.n_other, w1.shape[1]))
            np.add.at(gw0t, concat, dz1[owner])
            prefix = f"{self.role}.net"
            _acc(grads, f"{prefix}.w0", gw0t.T)
            _acc(grads, f"{prefix}.b0", gb0)
            _acc(grads, f"{prefix}.w1", gw1)
            _acc(grads, f"{prefix}.b1", gb1)
            return
        raise InternalError(f"unknown side tape kind {kind!r}")


def _acc(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def _interact(op, emb_u, emb_i):
    if op == "MUL":
        return emb_u * emb_i, ("mul", emb_u, emb_i)
    if op == "PLUS":
        return emb_u + emb_i, ("plus",)
    if op == "MINUS":
        return emb_u - emb_i, ("minus",)
    if op == "MIN":
        user_wins = emb_u <= emb_i
        return np.where(user_wins, emb_u, emb_i), ("pick", user_wins)
    if op == "MAX":
        user_wins = emb_u >= emb_i
        return np.where(user_wins, emb_u, emb_i), ("pick", user_wins)
    if op == "CONCAT":
        return np.concatenate([emb_u, emb_i], axis=-1), ("concat", emb_u.shape[-1])
    raise InternalError(f"unknown interaction {op!r}")


def _interact_backward(tape, dvec):
    kind = tape[0]
    if kind == "mul":
        _, emb_u, emb_i = tape
        return dvec * emb_i, dvec * emb_u
    if kind == "plus":
        return dvec, dvec
    if kind == "minus":
        return dvec, -dvec
    if kind == "pick":
        user_wins = tape[1]
        return np.where(user_wins, dvec, 0.0), np.where(user_wins, 0.0, dvec)
    if kind == "concat":
        d = tape[1]
        return dvec[..., :d], dvec[..., d:]
    raise InternalError(f"unknown interaction tape {kind!r}")


class CfModel:
    """One four-stage model bound to a dataset shape.

    Parameters live in a flat name -> array dict (the arrays are shared with
    the towers, so in-place updates keep everything consistent) together with
    the model's own Adam state. Parameters are drawn from the rng in a fixed
    order (user side, item side, prediction head), so a seed pins the model.
    """

    def __init__(self, stages, d, lr, n_users, n_items, rng):
        stages.validate()
        d = int(d)
        if d <= 0:
            raise ConfigError(f"embedding size must be positive, got {d}")
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if n_users <= 0 or n_items <= 0:
            raise ConfigError(f"need at least one user and one item, got {n_users}x{n_items}")
        self.stages = stages
        self.d = d
        self.lr = float(lr)
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.user_side = _Side("user", stages.user_enc, stages.user_emb, n_users, n_items, d, rng)
        self.item_side = _Side("item", stages.item_enc, stages.item_emb, n_items, n_users, d, rng)
        self.vec_len = 2 * d if stages.interaction == "CONCAT" else d
        self.head_net = None
        self.head_vec = None
        if stages.prediction == "VEC":
            self.head_vec = glorot_uniform(rng, 1, self.vec_len).flatten()
        elif stages.prediction == "MLP":
            self.head_net = MlpNet([self.vec_len, 2 * d, d, 1], rng)
        params = {}
        params.update(self.user_side.param_items())
        params.update(self.item_side.param_items())
        if self.head_vec is not None:
            params["pred.vec"] = self.head_vec
        if self.head_net is not None:
            params.update(self.head_net.param_items("pred.net"))
        self.params = params
        self.adam = AdamState(params)

    def text(self):
        return format_model_text(self.stages, self.d, self.lr)

    def _check_ids(self, users, items):
        if users.shape != items.shape or users.ndim != 1 or users.size == 0:
            raise InternalError(f"need matching 1-d id arrays, got {users.shape} and {items.shape}")
        if users.min() < 0 or users.max() >= self.n_users:
            raise InternalError("user id out of range")
        if items.min() < 0 or items.max() >= self.n_items:
            raise InternalError("item id out of range")

    def forward_pairs(self, users, items, dataset, exclude_target=True):
        """Scores for (user, item) pairs; returns (scores, tape).

        With exclude_target the partner entity is removed from each history,
        which is how training pairs must be scored.
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self._check_ids(users, items)
        emb_u, tape_u = self.user_side.embed_pairs(
            users, items if exclude_target else None, dataset.user_hist
        )
        emb_i, tape_i = self.item_side.embed_pairs(
            items, users if exclude_target else None, dataset.item_hist
        )
        vec, tape_x = _interact(self.stages.interaction, emb_u, emb_i)
        scores, tape_h = self._head_forward(vec)
        return scores, (tape_u, tape_i, tape_x, tape_h)

    def _head_forward(self, vec):
        pred = self.stages.prediction
        if pred == "SUM":
            return vec.sum(axis=-1), ("sum", vec.shape)
        if pred == "VEC":
            return vec @ self.head_vec, ("vec", vec)
        if pred == "MLP":
            out, net_tape = self.head_net.forward(vec)
            return out[..., 0], ("mlp", net_tape)
        if pred == "NORM":
            norms = np.linalg.norm(vec, axis=-1)
            return -norms, ("norm", vec, norms)
        raise InternalError(f"unknown prediction head {pred!r}")

    def _head_backward(self, tape, dscores, grads):
        kind = tape[0]
        if kind == "sum":
            return np.broadcast_to(dscores[..., None], tape[1])
        if kind == "vec":
            vec = tape[1]
            _acc(grads, "pred.vec", dscores @ vec)
            return dscores[..., None] * self.head_vec
        if kind == "mlp":
            dws, dbs, dvec = self.head_net.backward(tape[1], dscores[..., None])
            for k in range(self.head_net.n_layers):
                _acc(grads, f"pred.net.w{k}", dws[k])
                _acc(grads, f"pred.net.b{k}", dbs[k])
            return dvec
        if kind == "norm":
            vec, norms = tape[1], tape[2]
            safe = np.maximum(norms, np.finfo(float).tiny)
            return dscores[..., None] * (-vec / safe[..., None])
        raise InternalError(f"unknown head tape {kind!r}")

    def backward(self, tape, dscores, into=None):
        """Parameter gradients for one forward pass; accumulates into `into`."""
        grads = {} if into is None else into
        tape_u, tape_i, tape_x, tape_h = tape
        dscores = np.asarray(dscores, dtype=float)
        dvec = self._head_backward(tape_h, dscores, grads)
        demb_u, demb_i = _interact_backward(tape_x, dvec)
        self.user_side.backward_pairs(tape_u, demb_u, grads)
        self.item_side.backward_pairs(tape_i, demb_i, grads)
        return grads

    def begin_eval(self, dataset):
        """Precompute full-history embeddings of every user and item once per
        evaluation pass; score_all reuses them across users."""
        return (self.user_side.embed_all(dataset), self.item_side.embed_all(dataset))

    def score_all(self, user, dataset, cache=None):
        """Scores of every item for one user, full histories, no exclusion."""
        if cache is None:
            cache = self.begin_eval(dataset)
        emb_u = np.broadcast_to(cache[0][user], cache[1].shape)
        vec, _ = _interact(self.stages.interaction, emb_u, cache[1])
        scores, _ = self._head_forward(vec)
        return scores


class FusedModel:
    """Sum of the scores of several component models, trained jointly.

    The merged parameter dict prefixes each component's names with m0., m1.,
    ... and shares the arrays, so one Adam state drives all components.
    """

    def __init__(self, components, lr=None):
        if not components:
            raise ConfigError("a fused model needs at least one component")
        first = components[0]
        for comp in components:
            if comp.n_users != first.n_users or comp.n_items != first.n_items:
                raise ConfigError(
                    "fused components must share the dataset shape, got "
                    f"{comp.n_users}x{comp.n_items} vs {first.n_users}x{first.n_items}"
                )
        self.components = list(components)
        self.n_users = first.n_users
        self.n_items = first.n_items
        self.lr = float(lr) if lr is not None else first.lr
        params = {}
        for idx, comp in enumerate(self.components):
            for name, arr in comp.params.items():
                params[f"m{idx}.{name}"] = arr
        self.params = params
        self.adam = AdamState(params)

    def text(self):
        return " + ".join(comp.text() for comp in self.components)

    def forward_pairs(self, users, items, dataset, exclude_target=True):
        total = None
        tapes = []
        for comp in self.components:
            scores, tape = comp.forward_pairs(users, items, dataset, exclude_target)
            total = scores if total is None else total + scores
            tapes.append(tape)
        return total, tapes

    def backward(self, tapes, dscores, into=None):
        grads = {} if into is None else into
        for idx, (comp, tape) in enumerate(zip(self.components, tapes)):
            comp_grads = comp.backward(tape, dscores)
            for name, g in comp_grads.items():
                _acc(grads, f"m{idx}.{name}", g)
        return grads

    def begin_eval(self, dataset):
        return [comp.begin_eval(dataset) for comp in self.components]

    def score_all(self, user, dataset, cache=None):
        if cache is None:
            cache = self.begin_eval(dataset)
        total = None
        for comp, comp_cache in zip(self.components, cache):
            scores = comp.score_all(user, dataset, comp_cache)
            total = scores if total is None else total + scores
        return total


def build_model(config, space, n_users, n_items, rng):
    """Instantiate the model a search-space configuration describes."""
    space.validate_config(config)
    return CfModel(config.stages, space.dim_of(config), space.lr_of(config), n_users, n_items, rng)


_S = StageChoice

_SINGLE_BASELINES = {
    "MF": _S("ID", "ID", "MAT", "MAT", "MUL", "SUM"),
    "GMF": _S("ID", "ID", "MAT", "MAT", "MUL", "VEC"),
    "MLP": _S("ID", "ID", "MAT", "MAT", "CONCAT", "MLP"),
    "FISM": _S("H", "ID", "MAT", "MAT", "MUL", "SUM"),
    "DMF": _S("H", "H", "MLP", "MLP", "MUL", "SUM"),
    "JNCF-DOT": _S("H", "H", "MLP", "MLP", "MUL", "MLP"),
    "JNCF-CAT": _S("H", "H", "MLP", "MLP", "CONCAT", "MLP"),
    "CMF": _S("ID", "ID", "MAT", "MAT", "MINUS", "NORM"),
}

_FUSED_BASELINES = {
    "NEUMF": (_SINGLE_BASELINES["GMF"], _SINGLE_BASELINES["MLP"]),
    "SVD++": (_SINGLE_BASELINES["MF"], _SINGLE_BASELINES["FISM"]),
    "DELF": (
        _S("ID", "ID", "MAT", "MAT", "CONCAT", "MLP"),
        _S("ID", "H", "MAT", "MAT", "CONCAT", "MLP"),
        _S("H", "ID", "MAT", "MAT", "CONCAT", "MLP"),
        _S("H", "H", "MAT", "MAT", "CONCAT", "MLP"),
    ),
}

BASELINE_NAMES = (
    "MF",
    "GMF",
    "MLP",
    "NeuMF",
    "SVD++",
    "FISM",
    "DMF",
    "JNCF-Dot",
    "JNCF-Cat",
    "DELF",
    "CMF",
)


def baseline_stages(name):
    """Stage tuple(s) of a named baseline: a StageChoice, or a tuple of them
    for the fused ones."""
    key = str(name).upper()
    if key in _SINGLE_BASELINES:
        return _SINGLE_BASELINES[key]
    if key in _FUSED_BASELINES:
        return _FUSED_BASELINES[key]
    raise ConfigError(f"unknown baseline {name!r}; known: {', '.join(BASELINE_NAMES)}")


def make_baseline(name, d, lr, n_users, n_items, rng):
    """Build a named baseline model at a given embedding size and rate."""
    stages = baseline_stages(name)
    if isinstance(stages, StageChoice):
        return CfModel(stages, d, lr, n_users, n_items, rng)
    parts = [CfModel(s, d, lr, n_users, n_items, rng) for s in stages]
    return FusedModel(parts, lr=lr)


def space_to_json_str(space):
    return json.dumps(space.to_json(), sort_keys=True, separators=(",", ":"))
