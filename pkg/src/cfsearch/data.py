"""Interaction data: ingest, activity filtering, splitting, negatives, snapshots.

The on-disk input is a delimited file of (user, item[, value[, time]]) rows.
After filtering and splitting, everything downstream works on integer indices;
per-entity training histories are precomputed as sorted index arrays because
the models pool over them constantly.
"""

import csv
import json
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import IngestError, SamplingError, SplitError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawInteraction:
    user: str
    item: str
    value: float | None = None
    time: int | None = None


@dataclass(frozen=True)
class FileFormat:
    """Column layout of a delimited interaction file."""

    delimiter: str = "\t"
    user_col: int = 0
    item_col: int = 1
    value_col: int | None = 2
    time_col: int | None = 3
    skip_header: int = 0


class Split(NamedTuple):
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.users)


def read_interactions(path, fmt=FileFormat()):
    """Parse a delimited file into RawInteraction records.

    Malformed lines are counted and reported through logging; a file that
    yields no usable record at all is an error.
    """
    records = []
    malformed = 0
    first_bad = None
    try:
        with open(path, newline="") as handle:
            reader = csv.reader(handle, delimiter=fmt.delimiter)
            for lineno, row in enumerate(reader, start=1):
                if lineno <= fmt.skip_header:
                    continue
                if not row or all(not cell.strip() for cell in row):
                    continue
                try:
                    user = row[fmt.user_col].strip()
                    item = row[fmt.item_col].strip()
                    if not user or not item:
                        raise ValueError("empty user or item field")
                    value = None
                    if fmt.value_col is not None:
                        value = float(row[fmt.value_col])
                    time = None
                    if fmt.time_col is not None:
                        time = int(float(row[fmt.time_col]))
                except (IndexError, ValueError):
                    malformed += 1
                    if first_bad is None:
                        first_bad = lineno
                    continue
                records.append(RawInteraction(user, item, value, time))
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from None
    if malformed:
        log.warning(
            "%s: skipped %d malformed line(s), first at line %d", path, malformed, first_bad
        )
    if not records:
        raise IngestError(f"{path} contains no usable interactions")
    return records


def filter_min_count(records, min_count):
    """Drop users and items with fewer than min_count records, repeatedly,
    until every surviving entity meets the threshold."""
    if min_count <= 1:
        return list(records)
    current = list(records)
    while True:
        user_counts = {}
        item_counts = {}
        for r in current:
            user_counts[r.user] = user_counts.get(r.user, 0) + 1
            item_counts[r.item] = item_counts.get(r.item, 0) + 1
        kept = [
            r
            for r in current
            if user_counts[r.user] >= min_count and item_counts[r.item] >= min_count
        ]
        if len(kept) == len(current):
            return kept
        current = kept


def dedupe(records):
    """Drop repeated (user, item) pairs, keeping the first occurrence."""
    seen = set()
    out = []
    for r in records:
        key = (r.user, r.item)
        if key in seen:
            continue
        seen.add(key)
        out.append(r)
    dropped = len(records) - len(out)
    if dropped:
        log.warning("dropped %d duplicate (user, item) record(s), keeping the first", dropped)
    return out


class InteractionDataset:
    """Indexed interactions with train/validation/test splits.

    Histories come from the training split only: user_hist[u] is the sorted
    array of item indices u interacted with in training (user_hist_vals the
    matching values), and item_hist/item_hist_vals mirror that for items.
    """

    def __init__(self, user_ids, item_ids, splits, form):
        if form not in ("explicit", "implicit"):
            raise SplitError(f"form must be 'explicit' or 'implicit', got {form!r}")
        self.user_ids = tuple(str(u) for u in user_ids)
        self.item_ids = tuple(str(i) for i in item_ids)
        if len(set(self.user_ids)) != len(self.user_ids):
            raise SplitError("duplicate user ids")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise SplitError("duplicate item ids")
        self.form = form
        cleaned = {}
        for name in ("train", "validation", "test"):
            users, items, values = splits.get(name, ((), (), ()))
            users = np.asarray(users, dtype=np.int64)
            items = np.asarray(items, dtype=np.int64)
            values = np.asarray(values, dtype=float)
            if not (len(users) == len(items) == len(values)):
                raise SplitError(f"{name}: users, items and values must align")
            if len(users) and (
                users.min() < 0
                or users.max() >= len(self.user_ids)
                or items.min() < 0
                or items.max() >= len(self.item_ids)
            ):
                raise SplitError(f"{name}: index out of range")
            cleaned[name] = Split(users, items, values)
        self._splits = cleaned
        self.user_hist, self.user_hist_vals = self._histories(
            cleaned["train"].users, cleaned["train"].items, cleaned["train"].values, self.n_users
        )
        self.item_hist, self.item_hist_vals = self._histories(
            cleaned["train"].items, cleaned["train"].users, cleaned["train"].values, self.n_items
        )

    @staticmethod
    def _histories(owners, members, values, n_own):
        order = np.lexsort((members, owners))
        owners = owners[order]
        members = members[order]
        values = values[order]
        bounds = np.searchsorted(owners, np.arange(n_own + 1))
        hist = [members[bounds[k] : bounds[k + 1]] for k in range(n_own)]
        vals = [values[bounds[k] : bounds[k + 1]] for k in range(n_own)]
        return hist, vals

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    def pairs(self, split):
        if split not in self._splits:
            raise SplitError(f"unknown split {split!r}")
        return self._splits[split]

    @property
    def train(self):
        return self._splits["train"]

    @property
    def validation(self):
        return self._splits["validation"]

    @property
    def test(self):
        return self._splits["test"]

    def in_train(self, user, item):
        hist = self.user_hist[user]
        pos = int(np.searchsorted(hist, item))
        return pos < len(hist) and hist[pos] == item

    def to_implicit(self):
        """Copy with every value replaced by 1.0; a no-op on implicit data."""
        if self.form == "implicit":
            log.warning("dataset is already implicit; conversion is a no-op")
            return self
        splits = {
            name: (s.users.copy(), s.items.copy(), np.ones(len(s)))
            for name, s in self._splits.items()
        }
        return InteractionDataset(self.user_ids, self.item_ids, splits, "implicit")

    def stats(self):
        total = sum(len(s) for s in self._splits.values())
        return {
            "users": self.n_users,
            "items": self.n_items,
            "train": len(self.train),
            "validation": len(self.validation),
            "test": len(self.test),
            "interactions": total,
            "density": total / float(self.n_users * self.n_items),
            "form": self.form,
        }

    @classmethod
    def from_pairs(cls, n_users, n_items, train, validation=(), test=(), form="implicit"):
        """Small-scale constructor for code that already has index triples;
        pairs may be (u, i) or (u, i, value)."""

        def unpack(rows):
            users, items, values = [], [], []
            for row in rows:
                u, i = row[0], row[1]
                v = row[2] if len(row) > 2 else 1.0
                users.append(u)
                items.append(i)
                values.append(v)
            return users, items, values

        splits = {
            "train": unpack(train),
            "validation": unpack(validation),
            "test": unpack(test),
        }
        user_ids = [f"u{k}" for k in range(n_users)]
        item_ids = [f"i{k}" for k in range(n_items)]
        return cls(user_ids, item_ids, splits, form)

    def save(self, path):
        doc = {
            "kind": "cfsearch-dataset",
            "version": 1,
            "form": self.form,
            "users": list(self.user_ids),
            "items": list(self.item_ids),
            "splits": {
                name: {
                    "users": s.users.tolist(),
                    "items": s.items.tolist(),
                    "values": s.values.tolist(),
                }
                for name, s in self._splits.items()
            },
        }
        with open(path, "w") as handle:
            json.dump(doc, handle, sort_keys=True, separators=(",", ":"))
            handle.write("\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path) as handle:
                doc = json.load(handle)
        except OSError as exc:
            raise IngestError(f"cannot read snapshot {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise IngestError(f"snapshot {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict) or doc.get("kind") != "cfsearch-dataset":
            raise IngestError(f"snapshot {path} is not a dataset snapshot")
        if doc.get("version") != 1:
            raise IngestError(f"snapshot {path} has unsupported version {doc.get('version')!r}")
        try:
            splits = {
                name: (part["users"], part["items"], part["values"])
                for name, part in doc["splits"].items()
            }
            return cls(doc["users"], doc["items"], splits, doc["form"])
        except (KeyError, TypeError) as exc:
            raise IngestError(f"snapshot {path} is malformed: {exc}") from None


def split_records(records, ratios, rng):
    """Shuffle records and cut them into train/validation/test by ratio.

    Duplicate (user, item) pairs are dropped first (keeping the first seen).
    Counts come from cumulative rounding so they add up exactly; a ratio that
    leaves any split empty is an error.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError(f"need three positive ratio parts, got {ratios!r}")
    records = dedupe(records)
    n = len(records)
    if n < 3:
        raise SplitError(f"cannot split {n} record(s) three ways")
    has_values = all(r.value is not None for r in records)
    form = "explicit" if has_values else "implicit"
    user_ids = sorted({r.user for r in records})
    item_ids = sorted({r.item for r in records})
    user_index = {u: k for k, u in enumerate(user_ids)}
    item_index = {i: k for k, i in enumerate(item_ids)}

    perm = rng.permutation(n)
    fractions = np.cumsum(ratios) / float(sum(ratios))
    cut1 = int(round(n * fractions[0]))
    cut2 = int(round(n * fractions[1]))
    chunks = {
        "train": perm[:cut1],
        "validation": perm[cut1:cut2],
        "test": perm[cut2:],
    }
    empty = [name for name, idx in chunks.items() if len(idx) == 0]
    if empty:
        raise SplitError(
            f"ratio {tuple(ratios)} leaves empty split(s) {empty} for {n} records"
        )
    splits = {}
    for name, idx in chunks.items():
        rows = [records[k] for k in sorted(idx.tolist())]
        splits[name] = (
            [user_index[r.user] for r in rows],
            [item_index[r.item] for r in rows],
            [r.value if r.value is not None else 1.0 for r in rows],
        )
    return InteractionDataset(user_ids, item_ids, splits, form)


class NegativeSampler:
    """Uniform draws over the items a user has no training interaction with."""

    def __init__(self, dataset, rng):
        self.dataset = dataset
        self.rng = rng

    def sample(self, user):
        hist = self.dataset.user_hist[user]
        n_items = self.dataset.n_items
        if len(hist) >= n_items:
            raise SamplingError(
                f"user {user} has interacted with all {n_items} items; no negative exists"
            )
        while True:
            j = int(self.rng.integers(0, n_items))
            pos = int(np.searchsorted(hist, j))
            if pos >= len(hist) or hist[pos] != j:
                return j

    def sample_many(self, users):
        return np.fromiter((self.sample(u) for u in users), dtype=np.int64, count=len(users))
