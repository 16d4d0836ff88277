"""Model search: guided random sampling over the config space.

The loop follows one recipe regardless of strategy: draw a batch of
never-evaluated configs, pick the ones worth training, train and score them,
learn from the outcome, repeat until a stop rule fires. Strategies differ
only in how the batch is drawn (uniformly or from a learned controller) and
whether a predictor screens the batch down to the top candidates.

Every run is reconstructible: per-round randomness derives from the master
seed and the round index, per-candidate training seeds derive from the config
text, and the on-disk history plus a strategy-state sidecar let an
interrupted run resume exactly where it stopped.
"""

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cfmodel import SearchSpace
from .errors import ConfigError, HistoryError
from .metrics import higher_is_better, is_improvement
from .numcore import AdamState, Rng, adam_step, derive_seed
from .predictor import EvalRecord, SurrogatePredictor
from .train import TrainSpec, evaluate_model, train_fused, train_model

log = logging.getLogger(__name__)

STRATEGIES = ("rand", "rand+predictor", "reinforce", "reinforce+predictor")

HISTORY_KIND = "cfsearch-search-history"
STATE_KIND = "cfsearch-strategy-state"
HISTORY_NAME = "history.jsonl"
STATE_NAME = "strategy_state.json"

CONTROLLER_LR = 0.01


def _dumps(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class SearchSpec:
    """Everything that determines a search run besides the dataset and space."""

    strategy: str = "rand+predictor"
    k1: int = 10
    k2: int = 10
    max_evals: int = 100
    threshold: float = None
    patience: int = 100
    seed: int = 0
    train: TrainSpec = field(default_factory=TrainSpec)

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}"
            )
        if self.k1 < 1:
            raise ConfigError("k1 must be at least 1")
        if self.k2 < 0:
            raise ConfigError("k2 must not be negative")
        if self.max_evals < self.k1:
            raise ConfigError("the evaluation cap must be at least k1")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.threshold is not None and not math.isfinite(self.threshold):
            raise ConfigError("the stop threshold must be finite when given")
        self.train.validate()

    @property
    def uses_predictor(self):
        return self.strategy in ("rand+predictor", "reinforce+predictor")

    @property
    def uses_controller(self):
        return self.strategy in ("reinforce", "reinforce+predictor")

    def to_json(self):
        return {
            "strategy": self.strategy,
            "k1": self.k1,
            "k2": self.k2,
            "max_evals": self.max_evals,
            "threshold": self.threshold,
            "patience": self.patience,
            "seed": self.seed,
            "train": self.train.to_json(),
        }

    @classmethod
    def from_json(cls, doc):
        try:
            return cls(
                strategy=doc["strategy"],
                k1=int(doc["k1"]),
                k2=int(doc["k2"]),
                max_evals=int(doc["max_evals"]),
                threshold=None if doc["threshold"] is None else float(doc["threshold"]),
                patience=int(doc["patience"]),
                seed=int(doc["seed"]),
                train=TrainSpec.from_json(doc["train"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad search spec document: {exc}") from None


class SearchHistory:
    """Append-only record of every evaluated config, with the running best."""

    def __init__(self, metric_name):
        self.metric_name = metric_name
        self.records = []
        self.seen = set()
        self.best = None
        self.evals_since_improvement = 0

    def __len__(self):
        return len(self.records)

    def contains(self, encoding):
        return tuple(encoding) in self.seen

    def append(self, record):
        key = tuple(record.encoding)
        if key in self.seen:
            raise HistoryError(f"config {record.config_text!r} was already evaluated")
        self.records.append(record)
        self.seen.add(key)
        if self.best is None or is_improvement(record.value, self.best.value, self.metric_name):
            self.best = record
            self.evals_since_improvement = 0
        else:
            self.evals_since_improvement += 1

    def top(self, k):
        """The k best records, ties broken by canonical config order."""
        sign = -1.0 if higher_is_better(self.metric_name) else 1.0
        ranked = sorted(
            self.records,
            key=lambda r: (sign * r.value, tuple(-v for v in r.encoding)),
        )
        return ranked[:k]


def best_so_far_curve(records, metric_name):
    """Best validation value after each evaluation, oriented by the metric."""
    out = []
    best = None
    for rec in records:
        if best is None or is_improvement(rec.value, best, metric_name):
            best = rec.value
        out.append(best)
    return out


def stop_check(history, spec):
    """(stop, reason): cap, or patience exhausted after beating the threshold."""
    if len(history) >= spec.max_evals:
        return True, "cap"
    if spec.threshold is not None and history.best is not None:
        best = history.best.value
        beaten = (
            best >= spec.threshold
            if higher_is_better(history.metric_name)
            else best <= spec.threshold
        )
        if beaten and history.evals_since_improvement >= spec.patience:
            return True, "patience"
    return False, None


class ReinforceController:
    """Per-block categorical logits updated by policy gradient.

    Each of the 8 encoding blocks gets its own logit vector; sampling draws
    every block independently and rejects incompatible stage tuples. Updates
    push probability toward configs whose reward beat the running mean.
    """

    def __init__(self, space, seed=0, lr=CONTROLLER_LR):
        self.space = space
        self.seed = int(seed)
        self.lr = float(lr)
        self.block_sizes = [len(b) for b in space._blocks()]
        self.logits = {
            f"block{i}": np.zeros(size) for i, size in enumerate(self.block_sizes)
        }
        self.adam = AdamState(self.logits)
        self.reward_sum = 0.0
        self.reward_count = 0

    @property
    def baseline(self):
        return self.reward_sum / self.reward_count if self.reward_count else 0.0

    def _probs(self, name):
        z = self.logits[name]
        e = np.exp(z - z.max())
        return e / e.sum()

    def sample(self, rng, max_attempts=1000):
        """Draw one compatible config; incompatible tuples are redrawn."""
        for _ in range(max_attempts):
            choices = [
                rng.categorical(self._probs(f"block{i}"))
                for i in range(len(self.block_sizes))
            ]
            vec = np.zeros(self.space.encoding_length)
            offset = 0
            for size, choice in zip(self.block_sizes, choices):
                vec[offset + choice] = 1.0
                offset += size
            config = self.space.decode(vec)
            if config.stages.compatible():
                return config
        raise ConfigError(
            f"controller failed to draw a compatible config in {max_attempts} attempts"
        )

    def update(self, configs, rewards):
        """One Adam step on the summed policy gradient; returns the baseline used."""
        if len(configs) != len(rewards):
            raise ConfigError("configs and rewards must pair up")
        if not configs:
            return self.baseline
        for r in rewards:
            self.reward_sum += float(r)
            self.reward_count += 1
        baseline = self.baseline
        grads = {name: np.zeros_like(z) for name, z in self.logits.items()}
        for config, reward in zip(configs, rewards):
            advantage = float(reward) - baseline
            key = self.space.sort_key(config)
            for i, choice in enumerate(key):
                name = f"block{i}"
                onehot = np.zeros(self.block_sizes[i])
                onehot[choice] = 1.0
                # ascent on advantage * log-prob, so the minimizer sees the negation
                grads[name] -= advantage * (onehot - self._probs(name))
        adam_step(self.logits, grads, self.adam, self.lr)
        return baseline

    def state_dict(self):
        return {
            "kind": "cfsearch-controller",
            "version": 1,
            "seed": self.seed,
            "lr": self.lr,
            "logits": {name: z.tolist() for name, z in sorted(self.logits.items())},
            "adam": {
                "step": self.adam.step,
                "m": {k: a.tolist() for k, a in sorted(self.adam.m.items())},
                "v": {k: a.tolist() for k, a in sorted(self.adam.v.items())},
            },
            "reward_sum": self.reward_sum,
            "reward_count": self.reward_count,
        }

    @classmethod
    def from_state(cls, doc, space):
        if doc.get("kind") != "cfsearch-controller" or doc.get("version") != 1:
            raise ConfigError("not a recognizable controller state document")
        ctrl = cls(space, seed=doc["seed"], lr=doc["lr"])
        for name, values in doc["logits"].items():
            if name not in ctrl.logits:
                raise ConfigError(f"unknown logit block {name!r} in controller state")
            ctrl.logits[name][...] = np.asarray(values, dtype=float)
        ctrl.adam.step = int(doc["adam"]["step"])
        for name, values in doc["adam"]["m"].items():
            ctrl.adam.m[name][...] = np.asarray(values, dtype=float)
        for name, values in doc["adam"]["v"].items():
            ctrl.adam.v[name][...] = np.asarray(values, dtype=float)
        ctrl.reward_sum = float(doc["reward_sum"])
        ctrl.reward_count = int(doc["reward_count"])
        return ctrl


def reinforce_sample(ctrl, rng):
    return ctrl.sample(rng)


def reinforce_update(ctrl, configs, rewards):
    return ctrl.update(configs, rewards)


# -- evaluators ------------------------------------------------------------

_WORKER = {}


def _worker_init(space_doc, dataset, train_doc, master_seed):
    _WORKER["space"] = SearchSpace.from_json(space_doc)
    _WORKER["dataset"] = dataset
    _WORKER["train"] = TrainSpec.from_json(train_doc)
    _WORKER["seed"] = master_seed


def _worker_evaluate(config_text):
    ev = TrainingEvaluator(
        _WORKER["space"], _WORKER["dataset"], _WORKER["train"], _WORKER["seed"]
    )
    return ev.evaluate(_WORKER["space"].parse_config(config_text))


class TrainingEvaluator:
    """Evaluates a candidate by actually training it.

    Each candidate trains under a seed derived from the master seed and its
    own text form, so the measurement for a config never depends on what was
    evaluated before it.
    """

    def __init__(self, space, dataset, train_spec, master_seed, workers=1):
        self.space = space
        self.dataset = dataset
        self.train_spec = train_spec
        self.master_seed = int(master_seed)
        self.workers = max(1, int(workers))
        self._pool = None

    def evaluate(self, config):
        text = self.space.config_text(config)
        spec = replace(self.train_spec, seed=derive_seed(self.master_seed, "train", text))
        report = train_model(config, self.dataset, self.space, spec)
        if report.failed:
            test = {}
        else:
            test = evaluate_model(
                report.model, self.dataset, spec.task, k=spec.k, split="test"
            )
        return EvalRecord(
            config_text=text,
            encoding=tuple(int(v) for v in self.space.encode(config)),
            value=report.best_val,
            test_metrics=test,
            seconds=report.seconds,
            failed=report.failed,
        )

    def evaluate_many(self, configs):
        if self.workers == 1 or len(configs) <= 1:
            return [self.evaluate(c) for c in configs]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(
                max_workers=self.workers,
                initializer=_worker_init,
                initargs=(
                    self.space.to_json(),
                    self.dataset,
                    self.train_spec.to_json(),
                    self.master_seed,
                ),
            )
        texts = [self.space.config_text(c) for c in configs]
        return list(self._pool.map(_worker_evaluate, texts))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


class CachedEvaluator:
    """Evaluates by lookup in a previous run's history file.

    Used for strategy comparisons: the expensive trainings happen once, then
    every strategy replays against the same measurements.
    """

    def __init__(self, records, space=None):
        self.space = space
        self.by_text = {}
        for rec in records:
            self.by_text.setdefault(rec.config_text, rec)

    @classmethod
    def from_file(cls, path, space=None):
        header, records = load_history(path, space)
        if space is None:
            space = SearchSpace.from_json(header["space"])
        return cls(records, space)

    def evaluate(self, config_or_text):
        if isinstance(config_or_text, str):
            text = config_or_text
        else:
            if self.space is None:
                raise ConfigError("this cache needs a space to look up config objects")
            text = self.space.config_text(config_or_text)
        rec = self.by_text.get(text)
        if rec is None:
            raise HistoryError(
                f"config {text!r} is not in the evaluation cache; the cache must "
                "cover every config the search can reach (an exhaustive run does)"
            )
        return rec

    def evaluate_many(self, configs):
        return [self.evaluate(c) for c in configs]

    def close(self):
        pass


# -- history persistence ----------------------------------------------------


def history_header(space, spec):
    return {
        "kind": HISTORY_KIND,
        "version": 1,
        "metric": spec.train.val_metric_name,
        "space": space.to_json(),
        "spec": spec.to_json(),
    }


def load_history(path, space=None):
    """Read a history file back into (header, records).

    Any unparseable line is refused outright: silently dropping records would
    desynchronize resumed runs from their strategy state.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise HistoryError(f"cannot read history {path}: {exc}") from None
    if not lines:
        raise HistoryError(f"history {path} is empty")
    docs = []
    for lineno, line in enumerate(lines, start=1):
        try:
            docs.append(json.loads(line))
        except json.JSONDecodeError:
            raise HistoryError(
                f"history {path} line {lineno} is not valid JSON; if a run was "
                "interrupted mid-write, delete the partial trailing line and retry"
            ) from None
    header = docs[0]
    if not isinstance(header, dict) or header.get("kind") != HISTORY_KIND:
        raise HistoryError(f"{path} does not start with a search history header")
    if header.get("version") != 1:
        raise HistoryError(f"history version {header.get('version')!r} is not supported")
    if space is None:
        space = SearchSpace.from_json(header["space"])
    metric = header["metric"]
    records = []
    for lineno, doc in enumerate(docs[1:], start=2):
        try:
            records.append(EvalRecord.from_json(doc, space, metric))
        except (ConfigError, KeyError, TypeError) as exc:
            raise HistoryError(
                f"history {path} line {lineno} is not a valid record: {exc}"
            ) from None
    return header, records


def _write_state(out_dir, round_index, n_evals, predictor, controller):
    doc = {
        "kind": STATE_KIND,
        "version": 1,
        "round": round_index,
        "evaluations": n_evals,
        "predictor": None if predictor is None else predictor.state_dict(),
        "controller": None if controller is None else controller.state_dict(),
    }
    path = os.path.join(out_dir, STATE_NAME)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(_dumps(doc) + "\n")
    os.replace(tmp, path)


def _load_state(out_dir):
    path = os.path.join(out_dir, STATE_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError:
        raise HistoryError(
            f"cannot resume: {path} is missing; restart the search, or pass the "
            "old history as an evaluation cache to reuse its measurements"
        ) from None
    except json.JSONDecodeError:
        raise HistoryError(f"cannot resume: {path} is not valid JSON") from None
    if doc.get("kind") != STATE_KIND or doc.get("version") != 1:
        raise HistoryError(f"{path} is not a recognizable strategy state file")
    return doc


# -- the search loop ---------------------------------------------------------


@dataclass
class SearchResult:
    history: SearchHistory
    best_config: object
    best_record: object
    fused: object
    stop_reason: str
    exhausted: bool
    rounds: int


def _sample_round(space, history, all_configs, encodings, controller, rng, want):
    """Draw `want` distinct never-evaluated configs for this round."""
    unevaluated = [
        i for i, enc in enumerate(encodings) if tuple(enc) not in history.seen
    ]
    want = min(want, len(unevaluated))
    if want == 0:
        return []
    if controller is None:
        picks = rng.sample_without_replacement(len(unevaluated), want)
        return [all_configs[unevaluated[int(i)]] for i in picks]
    batch, batch_keys = [], set()
    attempts_left = 200 * want
    while len(batch) < want and attempts_left > 0:
        attempts_left -= 1
        try:
            config = controller.sample(rng)
        except ConfigError:
            break  # distribution saturated on incompatible tuples; fill uniformly
        key = tuple(int(v) for v in space.encode(config))
        if key in history.seen or key in batch_keys:
            continue
        batch.append(config)
        batch_keys.add(key)
    if len(batch) < want:
        # the controller's distribution has collapsed onto evaluated configs;
        # fill the remainder uniformly so the round keeps its size
        log.info("controller sampling stalled; filling %d slot(s) uniformly",
                 want - len(batch))
        pool = [
            i for i in unevaluated
            if tuple(encodings[i]) not in batch_keys
        ]
        picks = rng.sample_without_replacement(len(pool), want - len(batch))
        batch.extend(all_configs[pool[int(i)]] for i in picks)
    return batch


def run_search(
    space,
    dataset,
    spec,
    predictor=None,
    evaluator=None,
    out_dir=None,
    resume=False,
    workers=1,
    fuse_top2=False,
):
    """Run the search loop to completion; see the module docstring.

    `predictor` is only consulted for the *+predictor strategies; passing one
    for other strategies is ignored. `evaluator` defaults to actual training;
    a CachedEvaluator replays a previous exhaustive run instead. With
    `out_dir`, the history and strategy state go to disk after every round,
    and `resume=True` picks up such a directory where it left off.
    """
    spec.validate()
    metric = spec.train.val_metric_name
    header = history_header(space, spec)

    all_configs = space.configs()
    encodings = [tuple(int(v) for v in space.encode(c)) for c in all_configs]

    history = SearchHistory(metric)
    controller = (
        ReinforceController(space, seed=derive_seed(spec.seed, "controller"))
        if spec.uses_controller
        else None
    )
    if spec.uses_predictor and predictor is None:
        predictor = SurrogatePredictor(
            space.encoding_length, metric, seed=derive_seed(spec.seed, "predictor")
        )
    if not spec.uses_predictor and predictor is not None:
        log.warning("strategy %r does not use a predictor; ignoring the one given",
                    spec.strategy)
        predictor = None
    if evaluator is None:
        evaluator = TrainingEvaluator(space, dataset, spec.train, spec.seed, workers)

    history_path = os.path.join(out_dir, HISTORY_NAME) if out_dir else None
    round_index = 0

    if resume:
        if history_path is None:
            raise ConfigError("resume needs an output directory to resume from")
        old_header, old_records = load_history(history_path, space)
        if old_header != header:
            raise HistoryError(
                f"{history_path} records a different search (space, spec, or "
                "metric changed); refusing to mix runs"
            )
        state = _load_state(out_dir)
        round_index = int(state["round"])
        consistent = int(state["evaluations"])
        if len(old_records) < consistent:
            raise HistoryError(
                f"{history_path} has {len(old_records)} record(s) but the strategy "
                f"state expects at least {consistent}; the files do not belong together"
            )
        if len(old_records) > consistent:
            # records written after the last consistent state snapshot belong to
            # a round that will be replayed in full, so drop them
            log.info(
                "discarding %d record(s) written after the last consistent state",
                len(old_records) - consistent,
            )
            old_records = old_records[:consistent]
            with open(history_path, "w", encoding="utf-8") as fh:
                fh.write(_dumps(header) + "\n")
                for rec in old_records:
                    fh.write(_dumps(rec.to_json()) + "\n")
        for rec in old_records:
            history.append(rec)
        if spec.uses_predictor and state["predictor"] is not None:
            predictor = type(predictor).from_state(state["predictor"])
        if controller is not None and state["controller"] is not None:
            controller = ReinforceController.from_state(state["controller"], space)
        log.info("resumed at round %d with %d evaluation(s)", round_index, len(history))
    elif history_path is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(history_path, "w", encoding="utf-8") as fh:
            fh.write(_dumps(header) + "\n")
        _write_state(out_dir, 0, 0, predictor, controller)

    stop, reason = stop_check(history, spec)
    exhausted = False
    while not stop:
        if len(history) >= len(all_configs):
            exhausted = True
            reason = "exhausted"
            break
        rng = Rng(derive_seed(spec.seed, "round", round_index))
        want = spec.k1 + spec.k2 if spec.uses_predictor else spec.k1
        batch = _sample_round(
            space, history, all_configs, encodings, controller, rng, want
        )
        if not batch:
            exhausted = True
            reason = "exhausted"
            break
        capacity = spec.max_evals - len(history)
        n_train = min(spec.k1, len(batch), capacity)
        if spec.uses_predictor:
            batch_encodings = [tuple(int(v) for v in space.encode(c)) for c in batch]
            order = predictor.rank_candidates(batch_encodings)
            chosen = [batch[i] for i in order[:n_train]]
        else:
            chosen = sorted(batch, key=space.sort_key)[:n_train]

        records = evaluator.evaluate_many(chosen)

        appended = []
        for rec in records:
            history.append(rec)
            appended.append(rec)
            stop, reason = stop_check(history, spec)
            if stop:
                dropped = len(records) - len(appended)
                if dropped:
                    log.info(
                        "stop rule fired mid-round; %d trained candidate(s) not recorded",
                        dropped,
                    )
                break

        if spec.uses_predictor:
            predictor.fit(history.records)
        if controller is not None:
            sign = 1.0 if higher_is_better(metric) else -1.0
            usable = [
                (space.parse_config(r.config_text), sign * r.value)
                for r in appended
                if not r.failed
            ]
            if usable:
                controller.update([c for c, _ in usable], [r for _, r in usable])

        round_index += 1
        if history_path is not None:
            with open(history_path, "a", encoding="utf-8") as fh:
                for rec in appended:
                    fh.write(_dumps(rec.to_json()) + "\n")
            _write_state(out_dir, round_index, len(history), predictor, controller)

    evaluator.close()

    best = history.best
    best_config = None
    if best is not None and not best.failed:
        best_config = space.parse_config(best.config_text)
    fused = None
    if fuse_top2:
        candidates = [r for r in history.top(len(history)) if not r.failed][:2]
        if len(candidates) < 2:
            log.warning("fusion skipped: fewer than two successful evaluations")
        else:
            configs = [space.parse_config(r.config_text) for r in candidates]
            fuse_spec = replace(spec.train, seed=derive_seed(spec.seed, "fuse"))
            fused = train_fused(
                configs, dataset, space, fuse_spec, lr=space.lr_of(configs[0])
            )
    return SearchResult(
        history=history,
        best_config=best_config,
        best_record=best,
        fused=fused,
        stop_reason=reason,
        exhausted=exhausted,
        rounds=round_index,
    )
