"""Performance predictor: a small MLP over config encodings, trained pairwise.

The predictor never regresses metric values. It learns, from pairs of
evaluated configs, which of the two did better, so only the ORDER of its
outputs carries meaning. Higher output always means predicted-better,
whatever the underlying metric's orientation; the orientation is applied
once, when pairs are built.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .metrics import higher_is_better, worst_value
from .numcore import AdamState, MlpNet, Rng, adam_step, derive_seed
from .train import bpr_loss

log = logging.getLogger(__name__)

PREDICTOR_HIDDEN = (8, 4)
PREDICTOR_LR = 0.001
FIT_STEPS = 200
PAIRS_PER_RECORD = 10


def _json_value(x):
    return None if not math.isfinite(x) else float(x)


@dataclass(frozen=True)
class EvalRecord:
    """One evaluated candidate: the config, how it scored, what it cost.

    `value` is the validation metric; a failed training run carries the
    metric's worst-possible sentinel (+/-inf) so comparisons still orient
    correctly. JSON stores non-finite values as null and relies on `failed`
    plus the metric name to restore the sentinel.
    """

    config_text: str
    encoding: tuple
    value: float
    test_metrics: dict = field(default_factory=dict)
    seconds: float = 0.0
    failed: bool = False

    def to_json(self):
        return {
            "config": self.config_text,
            "failed": self.failed,
            "seconds": round(float(self.seconds), 3),
            "test": {k: _json_value(v) for k, v in sorted(self.test_metrics.items())},
            "value": _json_value(self.value),
        }

    @classmethod
    def from_json(cls, doc, space, metric_name):
        config = space.parse_config(doc["config"])
        encoding = tuple(int(v) for v in space.encode(config))
        raw = doc.get("value")
        value = worst_value(metric_name) if raw is None else float(raw)
        test = {
            k: (worst_value(k) if v is None else float(v))
            for k, v in doc.get("test", {}).items()
        }
        return cls(
            config_text=doc["config"],
            encoding=encoding,
            value=value,
            test_metrics=test,
            seconds=float(doc.get("seconds", 0.0)),
            failed=bool(doc.get("failed", False)),
        )


def _pair_indices(n, m, rng):
    """Draw m distinct unordered pairs (i, j), i < j, from n records."""
    counts = np.arange(n - 1, 0, -1)  # pairs starting at i: n-1-i
    cum = np.cumsum(counts)
    flat = rng.sample_without_replacement(int(cum[-1]), m)
    first = np.searchsorted(cum, flat, side="right")
    offset = np.where(first > 0, cum[first - 1], 0)
    second = flat - offset + first + 1
    return first, second


class SurrogatePredictor:
    """MLP over one-hot config encodings, fit with the pairwise BPR objective.

    Fit calls warm-start from the current weights; each call builds a fresh
    random pair set from the full history and runs a fixed number of
    full-batch Adam steps. The internal randomness is derived from the
    construction seed and the fit counter, so a predictor restored from
    state_dict() continues exactly where the original left off.
    """

    def __init__(
        self,
        encoding_length,
        metric_name,
        seed=0,
        hidden=PREDICTOR_HIDDEN,
        lr=PREDICTOR_LR,
        steps_per_fit=FIT_STEPS,
        pairs_per_record=PAIRS_PER_RECORD,
    ):
        self.encoding_length = int(encoding_length)
        self.metric_name = str(metric_name)
        self.higher_better = higher_is_better(metric_name)
        self.hidden = tuple(int(h) for h in hidden)
        self.lr = float(lr)
        self.steps_per_fit = int(steps_per_fit)
        self.pairs_per_record = int(pairs_per_record)
        self.seed = int(seed)
        self.net = MlpNet([self.encoding_length, *self.hidden, 1], Rng(self.seed))
        self.params = dict(self.net.param_items("net"))
        self.adam = AdamState(self.params)
        self.fits_run = 0
        self.last_fit = None

    # -- scoring ---------------------------------------------------------

    def _as_batch(self, encodings):
        x = np.asarray(encodings, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.encoding_length:
            raise ConfigError(
                f"encoding length {x.shape[-1] if x.ndim else 0} does not match "
                f"the predictor input size {self.encoding_length}"
            )
        return x

    def predict(self, encoding):
        """Score one encoding. Only comparisons between scores are meaningful."""
        out, _ = self.net.forward(self._as_batch(encoding))
        return float(out[0, 0])

    def predict_many(self, encodings):
        out, _ = self.net.forward(self._as_batch(encodings))
        return out[:, 0]

    def rank_candidates(self, encodings):
        """Indices of `encodings` ordered predicted-best first.

        Ties fall back to canonical config order, which for one-hot blocks is
        descending lexicographic order of the encoding itself.
        """
        if len(encodings) == 0:
            raise ConfigError("no candidates to rank")
        scores = self.predict_many(encodings)
        return sorted(
            range(len(encodings)),
            key=lambda i: (-scores[i], tuple(-float(v) for v in encodings[i])),
        )

    # -- training --------------------------------------------------------

    def _build_pairs(self, records, budget, rng):
        """Oriented (better, worse) encoding batches from random record pairs."""
        n = len(records)
        total = n * (n - 1) // 2
        m = min(int(budget), total)
        first, second = _pair_indices(n, m, rng)
        values = np.array([r.value for r in records])
        pos_rows, neg_rows = [], []
        for i, j in zip(first, second):
            a, b = values[i], values[j]
            if a == b:
                continue  # no order to learn
            better_is_i = (a > b) if self.higher_better else (a < b)
            pos, neg = (i, j) if better_is_i else (j, i)
            pos_rows.append(records[pos].encoding)
            neg_rows.append(records[neg].encoding)
        if not pos_rows:
            return None, None
        return np.asarray(pos_rows, dtype=float), np.asarray(neg_rows, dtype=float)

    def _pair_loss(self, x_pos, x_neg):
        s_pos, _ = self.net.forward(x_pos)
        s_neg, _ = self.net.forward(x_neg)
        loss, _, _ = bpr_loss(s_pos[:, 0], s_neg[:, 0])
        return loss

    def fit(self, records, pair_budget=None):
        """Update the predictor on the evaluated history; returns self.

        Builds min(budget, all-pairs) random record pairs, orients each by the
        metric (failure sentinels always lose), and runs `steps_per_fit` Adam
        steps on the pairwise loss. Fewer than two distinct metric values make
        a no-op, since there is no order to learn from.
        """
        distinct = {r.value for r in records}
        if len(records) < 2 or len(distinct) < 2:
            log.warning(
                "predictor fit skipped: need at least 2 records with distinct "
                "metric values, have %d record(s) with %d distinct value(s)",
                len(records),
                len(distinct),
            )
            return self
        budget = self.pairs_per_record * len(records) if pair_budget is None else pair_budget
        rng = Rng(derive_seed(self.seed, "predictor-fit", self.fits_run))
        x_pos, x_neg = self._build_pairs(records, budget, rng)
        self.fits_run += 1
        if x_pos is None:
            log.warning("predictor fit skipped: no orderable pairs were drawn")
            return self
        loss_before = self._pair_loss(x_pos, x_neg)
        for _ in range(self.steps_per_fit):
            s_pos, tape_pos = self.net.forward(x_pos)
            s_neg, tape_neg = self.net.forward(x_neg)
            _, dpos, dneg = bpr_loss(s_pos[:, 0], s_neg[:, 0])
            dw_p, db_p, _ = self.net.backward(tape_pos, dpos[:, None])
            dw_n, db_n, _ = self.net.backward(tape_neg, dneg[:, None])
            grads = {}
            for k in range(self.net.n_layers):
                grads[f"net.w{k}"] = dw_p[k] + dw_n[k]
                grads[f"net.b{k}"] = db_p[k] + db_n[k]
            adam_step(self.params, grads, self.adam, self.lr)
        loss_after = self._pair_loss(x_pos, x_neg)
        if loss_after > loss_before + 1e-6:
            log.warning(
                "pairwise loss rose over a fit run (%.6f -> %.6f); "
                "this should not happen and suggests a gradient bug",
                loss_before,
                loss_after,
            )
        self.last_fit = {
            "pairs": int(x_pos.shape[0]),
            "loss_before": float(loss_before),
            "loss_after": float(loss_after),
        }
        return self

    # -- persistence -----------------------------------------------------

    def state_dict(self):
        """Everything needed to continue fitting from this exact state."""
        return {
            "kind": "cfsearch-predictor",
            "version": 1,
            "encoding_length": self.encoding_length,
            "metric": self.metric_name,
            "seed": self.seed,
            "hidden": list(self.hidden),
            "lr": self.lr,
            "steps_per_fit": self.steps_per_fit,
            "pairs_per_record": self.pairs_per_record,
            "fits_run": self.fits_run,
            "params": {name: p.tolist() for name, p in sorted(self.params.items())},
            "adam": {
                "step": self.adam.step,
                "m": {name: a.tolist() for name, a in sorted(self.adam.m.items())},
                "v": {name: a.tolist() for name, a in sorted(self.adam.v.items())},
            },
        }

    @classmethod
    def from_state(cls, doc):
        if doc.get("kind") != "cfsearch-predictor" or doc.get("version") != 1:
            raise ConfigError("not a recognizable predictor state document")
        p = cls(
            encoding_length=doc["encoding_length"],
            metric_name=doc["metric"],
            seed=doc["seed"],
            hidden=doc["hidden"],
            lr=doc["lr"],
            steps_per_fit=doc["steps_per_fit"],
            pairs_per_record=doc["pairs_per_record"],
        )
        p.fits_run = int(doc["fits_run"])
        for name, values in doc["params"].items():
            if name not in p.params:
                raise ConfigError(f"unknown parameter {name!r} in predictor state")
            arr = np.asarray(values, dtype=float)
            if arr.shape != p.params[name].shape:
                raise ConfigError(f"parameter {name!r} has wrong shape in predictor state")
            p.params[name][...] = arr
        p.adam.step = int(doc["adam"]["step"])
        for name, values in doc["adam"]["m"].items():
            p.adam.m[name][...] = np.asarray(values, dtype=float)
        for name, values in doc["adam"]["v"].items():
            p.adam.v[name][...] = np.asarray(values, dtype=float)
        return p


class ConstantPredictor:
    """Predictor stand-in whose output never varies: ranking reduces to the
    canonical tie-break, and fitting does nothing. Lets the search loop run
    its predictor path while behaving exactly like unguided sampling."""

    def __init__(self, value=0.0):
        self.value = float(value)
        self.fits_run = 0
        self.last_fit = None

    def predict(self, encoding):
        return self.value

    def predict_many(self, encodings):
        return np.full(len(encodings), self.value)

    def rank_candidates(self, encodings):
        if len(encodings) == 0:
            raise ConfigError("no candidates to rank")
        scores = self.predict_many(encodings)
        return sorted(
            range(len(encodings)),
            key=lambda i: (-scores[i], tuple(-float(v) for v in encodings[i])),
        )

    def fit(self, records, pair_budget=None):
        self.fits_run += 1
        return self

    def state_dict(self):
        return {"kind": "cfsearch-constant-predictor", "version": 1, "value": self.value}

    @classmethod
    def from_state(cls, doc):
        if doc.get("kind") != "cfsearch-constant-predictor" or doc.get("version") != 1:
            raise ConfigError("not a recognizable predictor state document")
        return cls(doc["value"])
