"""Manifest IO, split handling, and stratified sampling."""

from fractions import Fraction

import numpy as np
import pytest

from mildnet.dataset import (
    ManifestError,
    TripletRecord,
    largest_remainder_counts,
    load_manifest,
    sample_triplets,
    save_manifest,
    split_records,
)
from mildnet.ops import ParameterError


def make_record(i, in_class=False, q_source="catalog", split=None):
    return TripletRecord(
        q_path=f"q{i}.ppm",
        p_path=f"p{i}.ppm",
        n_path=f"n{i}.ppm",
        category_key=f"cat{i % 3}",
        q_source=q_source,
        in_class=in_class,
        split=split,
    )


class TestTripletRecord:
    def test_paths_must_differ(self):
        with pytest.raises(ParameterError):
            TripletRecord("a.ppm", "a.ppm", "b.ppm", "cat")

    def test_q_source_and_split_validated(self):
        with pytest.raises(ParameterError):
            TripletRecord("a", "b", "c", "cat", q_source="web")
        with pytest.raises(ParameterError):
            TripletRecord("a", "b", "c", "cat", split="test")

    def test_category_required(self):
        with pytest.raises(ParameterError):
            TripletRecord("a", "b", "c", "")


class TestManifestIO:
    def test_roundtrip(self, tmp_path):
        records = [
            make_record(0, in_class=True, split="train"),
            make_record(1, q_source="wild"),
            make_record(2, split="val"),
        ]
        path = tmp_path / "m.jsonl"
        save_manifest(records, path)
        assert load_manifest(path) == records

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "m.jsonl"
        save_manifest([make_record(0)], path)
        path.write_text(path.read_text() + "\n\n")
        assert len(load_manifest(path)) == 1

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        save_manifest([make_record(0), make_record(1)], path)
        lines = path.read_text().splitlines()
        lines[1] = "{broken"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match=":2:"):
            load_manifest(path)

    def test_missing_field_names_line_and_field(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"q": "a", "p": "b", "n": "c"}\n')
        with pytest.raises(ManifestError, match="category_key"):
            load_manifest(path)

    def test_bad_value_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"q": "a", "p": "b", "n": "c", "category_key": "k", "q_source": "web"}\n')
        with pytest.raises(ManifestError, match=":1:"):
            load_manifest(path)

    def test_query_in_both_splits_rejected(self, tmp_path):
        a = make_record(0, split="train")
        b = TripletRecord(a.q_path, "p9.ppm", "n9.ppm", "cat", split="val")
        path = tmp_path / "m.jsonl"
        save_manifest([a, b], path)
        with pytest.raises(ManifestError, match="both train and val"):
            load_manifest(path)

    def test_split_records_untagged_default_to_train(self):
        records = [make_record(0), make_record(1, split="train"), make_record(2, split="val")]
        assert len(split_records(records, "train")) == 2
        assert len(split_records(records, "val")) == 1
        with pytest.raises(ParameterError):
            split_records(records, "test")


def oracle_counts(total, num, den_pairs):
    """Exact largest-remainder apportionment using rational arithmetic."""
    exact = [Fraction(total) * Fraction(a, b) for a, b in den_pairs]
    floors = [int(e) for e in exact]
    rem = [e - f for e, f in zip(exact, floors)]
    leftover = total - sum(floors)
    order = sorted(range(len(exact)), key=lambda i: (-rem[i], i))
    for i in order[:leftover]:
        floors[i] += 1
    return floors


class TestLargestRemainder:
    def test_thirty_seventy_sweep_matches_exact_oracle(self):
        for total in range(0, 501):
            got = largest_remainder_counts(total, [0.3, 0.7])
            want = oracle_counts(total, 2, [(3, 10), (7, 10)])
            assert got == want, total
            assert sum(got) == total

    def test_required_sizes(self):
        assert largest_remainder_counts(10, [0.3, 0.7]) == [3, 7]
        assert largest_remainder_counts(100, [0.3, 0.7]) == [30, 70]
        assert largest_remainder_counts(1000, [0.3, 0.7]) == [300, 700]

    def test_remainder_tie_goes_to_earlier_stratum(self):
        # exact shares 1.0 / 0.5 / 0.5: the single leftover goes to stratum 1
        assert largest_remainder_counts(2, [0.5, 0.25, 0.25]) == [1, 1, 0]

    def test_three_way_sweep_matches_exact_oracle(self):
        pairs = [(1, 2), (1, 4), (1, 4)]
        for total in range(0, 200):
            got = largest_remainder_counts(total, [0.5, 0.25, 0.25])
            assert got == oracle_counts(total, 3, pairs), total

    def test_validation(self):
        with pytest.raises(ParameterError):
            largest_remainder_counts(-1, [1.0])
        with pytest.raises(ParameterError):
            largest_remainder_counts(5, [])
        with pytest.raises(ParameterError):
            largest_remainder_counts(5, [0.5, 0.6])
        with pytest.raises(ParameterError):
            largest_remainder_counts(5, [-0.5, 1.5])


class TestSampleTriplets:
    @pytest.mark.parametrize("n", [10, 100, 1000])
    def test_in_class_strata_exact(self, n):
        pool = [make_record(i, in_class=(i % 2 == 0)) for i in range(2000)]
        rng = np.random.default_rng(n)
        out = sample_triplets(pool, n, {True: 0.3, False: 0.7}, rng)
        got_in = sum(1 for r in out if r.in_class)
        assert len(out) == n
        assert got_in == {10: 3, 100: 30, 1000: 300}[n]

    def test_no_duplicates_within_sample(self):
        pool = [make_record(i, in_class=(i < 120)) for i in range(400)]
        out = sample_triplets(pool, 200, {True: 0.3, False: 0.7}, np.random.default_rng(0))
        assert len({r.q_path for r in out}) == 200

    def test_q_source_stratification(self):
        pool = [make_record(i, q_source="wild" if i % 3 == 0 else "catalog") for i in range(300)]
        out = sample_triplets(
            pool, 50, {"catalog": 0.7, "wild": 0.3}, np.random.default_rng(1), field="q_source"
        )
        assert sum(1 for r in out if r.q_source == "wild") == 15

    def test_deterministic_per_seed(self):
        pool = [make_record(i, in_class=(i % 2 == 0)) for i in range(100)]
        a = sample_triplets(pool, 20, {True: 0.3, False: 0.7}, np.random.default_rng(5))
        b = sample_triplets(pool, 20, {True: 0.3, False: 0.7}, np.random.default_rng(5))
        assert a == b

    def test_underfilled_stratum_names_itself(self):
        pool = [make_record(i, in_class=False) for i in range(50)]
        with pytest.raises(ParameterError, match="in_class=True"):
            sample_triplets(pool, 10, {True: 0.3, False: 0.7}, np.random.default_rng(2))
