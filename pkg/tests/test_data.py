"""Ingest, filtering, splitting, histories, negatives, snapshots."""

import json
import logging

import numpy as np
import pytest

from cfsearch.data import (
    FileFormat,
    InteractionDataset,
    NegativeSampler,
    RawInteraction,
    dedupe,
    filter_min_count,
    read_interactions,
    split_records,
)
from cfsearch.errors import IngestError, SamplingError, SplitError
from cfsearch.numcore import Rng


def rec(u, i, v=None):
    return RawInteraction(str(u), str(i), v)


class TestIngest:
    def test_reads_tab_separated_ratings(self, tmp_path):
        path = tmp_path / "ratings.tsv"
        path.write_text("196\t242\t3\t881250949\n186\t302\t3\t891717742\n")
        records = read_interactions(path)
        assert records == [
            RawInteraction("196", "242", 3.0, 881250949),
            RawInteraction("186", "302", 3.0, 891717742),
        ]

    def test_malformed_lines_are_counted_not_fatal(self, tmp_path, caplog):
        path = tmp_path / "ratings.tsv"
        path.write_text("1\t2\t3\t4\nbroken\n5\t6\tnot_a_number\t8\n7\t8\t9\t10\n")
        with caplog.at_level(logging.WARNING):
            records = read_interactions(path)
        assert len(records) == 2
        assert "2 malformed line(s)" in caplog.text
        assert "line 2" in caplog.text

    def test_all_malformed_is_an_error(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("nope\nstill nope\n")
        with pytest.raises(IngestError, match="no usable interactions"):
            read_interactions(path)

    def test_missing_file_is_an_error(self, tmp_path):
        with pytest.raises(IngestError, match="cannot read"):
            read_interactions(tmp_path / "absent.tsv")

    def test_header_skip_and_custom_columns(self, tmp_path):
        path = tmp_path / "ratings.csv"
        path.write_text("item,user,score\nB,alice,4.5\nC,bob,2\n")
        fmt = FileFormat(
            delimiter=",", user_col=1, item_col=0, value_col=2, time_col=None, skip_header=1
        )
        records = read_interactions(path, fmt)
        assert records == [
            RawInteraction("alice", "B", 4.5, None),
            RawInteraction("bob", "C", 2.0, None),
        ]

    def test_implicit_layout_without_values(self, tmp_path):
        path = tmp_path / "clicks.tsv"
        path.write_text("u1\ti1\nu2\ti2\n")
        fmt = FileFormat(value_col=None, time_col=None)
        records = read_interactions(path, fmt)
        assert all(r.value is None for r in records)

    def test_blank_lines_are_ignored(self, tmp_path):
        path = tmp_path / "ratings.tsv"
        path.write_text("1\t2\t3\t4\n\n\n5\t6\t7\t8\n")
        assert len(read_interactions(path)) == 2


class TestFilter:
    def test_cascading_removal_reaches_a_fixpoint(self):
        records = [
            rec("u1", "i1"),
            rec("u1", "i2"),
            rec("u2", "i1"),
            rec("u2", "i2"),
            rec("u3", "i2"),
            rec("u3", "i3"),
        ]
        kept = filter_min_count(records, 2)
        # i3 has one record; dropping it pushes u3 below 2, whose removal
        # keeps i2 at exactly 2.
        assert {(r.user, r.item) for r in kept} == {
            ("u1", "i1"),
            ("u1", "i2"),
            ("u2", "i1"),
            ("u2", "i2"),
        }

    def test_thresholds_of_zero_and_one_change_nothing(self):
        records = [rec("a", "x"), rec("b", "y")]
        assert filter_min_count(records, 0) == records
        assert filter_min_count(records, 1) == records

    def test_can_empty_the_dataset(self):
        records = [rec("a", "x"), rec("b", "y")]
        assert filter_min_count(records, 2) == []

    def test_every_survivor_meets_the_threshold(self):
        rng = Rng(7)
        records = [
            rec(f"u{int(rng.integers(0, 12))}", f"i{int(rng.integers(0, 15))}")
            for _ in range(120)
        ]
        records = dedupe(records)
        kept = filter_min_count(records, 3)
        users = {}
        items = {}
        for r in kept:
            users[r.user] = users.get(r.user, 0) + 1
            items[r.item] = items.get(r.item, 0) + 1
        assert all(c >= 3 for c in users.values())
        assert all(c >= 3 for c in items.values())


class TestDedupe:
    def test_keeps_first_occurrence(self):
        records = [rec("u", "i", 5.0), rec("u", "j", 1.0), rec("u", "i", 2.0)]
        kept = dedupe(records)
        assert kept == [rec("u", "i", 5.0), rec("u", "j", 1.0)]


class TestSplit:
    def make_records(self, n):
        return [rec(f"u{k % 5}", f"i{k}", float(k % 4) + 1) for k in range(n)]

    def test_exact_counts_for_8_2_2(self):
        ds = split_records(self.make_records(12), (8, 2, 2), Rng(0))
        assert len(ds.train) == 8
        assert len(ds.validation) == 2
        assert len(ds.test) == 2

    def test_partition_is_disjoint_and_complete(self):
        records = self.make_records(37)
        ds = split_records(records, (8, 2, 2), Rng(5))
        seen = set()
        for name in ("train", "validation", "test"):
            part = ds.pairs(name)
            for t in range(len(part)):
                key = (int(part.users[t]), int(part.items[t]))
                assert key not in seen
                seen.add(key)
        assert len(seen) == 37

    def test_zero_ratio_rejected(self):
        with pytest.raises(SplitError, match="positive"):
            split_records(self.make_records(10), (1, 0, 0), Rng(0))

    def test_empty_split_rejected(self):
        with pytest.raises(SplitError):
            split_records(self.make_records(2), (8, 2, 2), Rng(0))

    def test_same_seed_same_split(self):
        records = self.make_records(25)
        a = split_records(records, (8, 2, 2), Rng(3))
        b = split_records(records, (8, 2, 2), Rng(3))
        for name in ("train", "validation", "test"):
            np.testing.assert_array_equal(a.pairs(name).users, b.pairs(name).users)
            np.testing.assert_array_equal(a.pairs(name).items, b.pairs(name).items)

    def test_duplicates_collapse_before_splitting(self):
        records = self.make_records(12) + [rec("u0", "i0", 9.0)]
        ds = split_records(records, (8, 2, 2), Rng(0))
        assert sum(len(ds.pairs(n)) for n in ("train", "validation", "test")) == 12

    def test_form_detection(self):
        explicit = split_records(self.make_records(12), (8, 2, 2), Rng(0))
        assert explicit.form == "explicit"
        clicks = [RawInteraction(f"u{k % 4}", f"i{k}") for k in range(12)]
        implicit = split_records(clicks, (8, 2, 2), Rng(0))
        assert implicit.form == "implicit"
        assert np.all(implicit.train.values == 1.0)


class TestDataset:
    def test_histories_are_sorted_train_only(self):
        ds = InteractionDataset.from_pairs(
            3,
            4,
            train=[(0, 3, 5.0), (0, 1, 3.0), (1, 2, 4.0)],
            validation=[(0, 2, 2.0)],
            test=[(1, 0, 1.0)],
            form="explicit",
        )
        assert ds.user_hist[0].tolist() == [1, 3]
        assert ds.user_hist_vals[0].tolist() == [3.0, 5.0]
        assert ds.user_hist[1].tolist() == [2]
        assert ds.user_hist[2].tolist() == []
        assert ds.item_hist[3].tolist() == [0]
        assert ds.item_hist[0].tolist() == []

    def test_in_train(self):
        ds = InteractionDataset.from_pairs(2, 2, train=[(0, 1)])
        assert ds.in_train(0, 1)
        assert not ds.in_train(0, 0)
        assert not ds.in_train(1, 1)

    def test_to_implicit_replaces_values(self, caplog):
        ds = InteractionDataset.from_pairs(
            2, 2, train=[(0, 0, 4.0), (1, 1, 2.0)], form="explicit"
        )
        imp = ds.to_implicit()
        assert imp.form == "implicit"
        assert np.all(imp.train.values == 1.0)
        assert np.all(ds.train.values == np.array([4.0, 2.0]))
        with caplog.at_level(logging.WARNING):
            again = imp.to_implicit()
        assert again is imp
        assert "already implicit" in caplog.text

    def test_stats_density(self):
        ds = InteractionDataset.from_pairs(4, 5, train=[(0, 0), (1, 1), (2, 2)])
        stats = ds.stats()
        assert stats["users"] == 4
        assert stats["items"] == 5
        assert stats["interactions"] == 3
        assert stats["density"] == pytest.approx(3 / 20)

    def test_out_of_range_indices_rejected(self):
        with pytest.raises(SplitError, match="out of range"):
            InteractionDataset.from_pairs(2, 2, train=[(0, 5)])

    def test_misaligned_split_rejected(self):
        with pytest.raises(SplitError, match="align"):
            InteractionDataset(["u0"], ["i0"], {"train": ([0], [0], [1.0, 2.0])}, "implicit")


class TestSnapshot:
    def test_roundtrip_preserves_everything(self, tmp_path):
        records = [rec(f"u{k % 5}", f"i{k % 7}", float(k % 5) + 0.5) for k in range(30)]
        ds = split_records(dedupe(records), (8, 2, 2), Rng(1))
        path = tmp_path / "snap.json"
        ds.save(path)
        back = InteractionDataset.load(path)
        assert back.user_ids == ds.user_ids
        assert back.item_ids == ds.item_ids
        assert back.form == ds.form
        for name in ("train", "validation", "test"):
            np.testing.assert_array_equal(back.pairs(name).users, ds.pairs(name).users)
            np.testing.assert_array_equal(back.pairs(name).items, ds.pairs(name).items)
            np.testing.assert_array_equal(back.pairs(name).values, ds.pairs(name).values)
        assert [h.tolist() for h in back.user_hist] == [h.tolist() for h in ds.user_hist]

    def test_serialization_is_deterministic(self, tmp_path):
        ds = InteractionDataset.from_pairs(3, 3, train=[(0, 0), (1, 1), (2, 2)])
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        ds.save(a)
        ds.save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_load_rejects_garbage(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text("{not json")
        with pytest.raises(IngestError, match="not valid JSON"):
            InteractionDataset.load(path)
        path.write_text(json.dumps({"kind": "something-else"}))
        with pytest.raises(IngestError, match="not a dataset snapshot"):
            InteractionDataset.load(path)
        path.write_text(json.dumps({"kind": "cfsearch-dataset", "version": 99}))
        with pytest.raises(IngestError, match="unsupported version"):
            InteractionDataset.load(path)
        with pytest.raises(IngestError, match="cannot read"):
            InteractionDataset.load(tmp_path / "absent.json")


class TestNegativeSampler:
    def test_never_returns_a_training_item(self):
        ds = InteractionDataset.from_pairs(2, 6, train=[(0, 0), (0, 2), (0, 4), (1, 1)])
        sampler = NegativeSampler(ds, Rng(0))
        for _ in range(200):
            assert sampler.sample(0) in (1, 3, 5)

    def test_deterministic_given_seed(self):
        ds = InteractionDataset.from_pairs(1, 50, train=[(0, k) for k in range(0, 50, 2)])
        a = NegativeSampler(ds, Rng(9)).sample_many(np.zeros(20, dtype=np.int64))
        b = NegativeSampler(ds, Rng(9)).sample_many(np.zeros(20, dtype=np.int64))
        np.testing.assert_array_equal(a, b)

    def test_saturated_user_is_an_error(self):
        ds = InteractionDataset.from_pairs(1, 3, train=[(0, 0), (0, 1), (0, 2)])
        with pytest.raises(SamplingError, match="no negative exists"):
            NegativeSampler(ds, Rng(0)).sample(0)
