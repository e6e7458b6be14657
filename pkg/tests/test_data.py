import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbrec.data import (
    ConfigError,
    Dataset,
    EmptyDatasetError,
    Interaction,
    ParseError,
    Sequence,
    SyntheticManifest,
    SyntheticSpec,
    ValidationError,
    Vocab,
    build_sequences,
    cloze_mask,
    gen_synthetic,
    leave_one_out,
    load_interactions,
    next_item_split,
    stack_sequences,
    write_header,
)


def write_dataset(tmp_path, lines, num_users=10, num_items=10, num_behaviors=3,
                  names=""):
    path = tmp_path / "data.tsv"
    path.write_text("".join(line + "\n" for line in lines))
    fields = {"num_users": num_users, "num_items": num_items,
              "num_behaviors": num_behaviors}
    if names:
        fields["behavior_names"] = names
    write_header(path, fields)
    return path


class TestVocab:
    def test_reserved_ids_outside_both_ranges(self):
        v = Vocab.for_sizes(10, 4)
        assert v.pad_token == 10
        assert v.mask_token == 11
        assert v.pad_token >= v.num_items and v.pad_token >= v.num_behaviors
        assert v.mask_token != v.pad_token

    def test_reserved_ids_behavior_heavy(self):
        v = Vocab.for_sizes(3, 7)
        assert v.pad_token == 7 and v.mask_token == 8

    def test_row_remap(self):
        v = Vocab.for_sizes(5, 2)
        rows = v.item_rows(np.array([0, 4, v.pad_token, v.mask_token]))
        assert rows.tolist() == [0, 4, 5, 6]
        rows = v.behavior_rows(np.array([1, v.pad_token, v.mask_token]))
        assert rows.tolist() == [1, 2, 3]

    def test_invalid_sizes(self):
        with pytest.raises(ConfigError):
            Vocab.for_sizes(0, 2)


class TestLoading:
    def test_two_line_example(self, tmp_path):
        path = write_dataset(tmp_path, ["0\t5\t1\t10", "0\t7\t0\t11"])
        ds = Dataset.load(path)
        assert list(ds.users) == [0]
        assert [i.item_id for i in ds.users[0]] == [5, 7]
        assert [i.behavior_id for i in ds.users[0]] == [1, 0]

    def test_timestamp_sorting_across_lines(self, tmp_path):
        path = write_dataset(tmp_path, ["3\t1\t0\t50", "3\t2\t0\t10", "3\t4\t1\t30"])
        ds = Dataset.load(path)
        assert [i.item_id for i in ds.users[3]] == [2, 4, 1]

    def test_equal_timestamps_keep_file_order(self, tmp_path):
        path = write_dataset(tmp_path, ["0\t8\t0\t5", "0\t2\t0\t5", "0\t6\t0\t5"])
        ds = Dataset.load(path)
        assert [i.item_id for i in ds.users[0]] == [8, 2, 6]

    def test_item_out_of_range(self, tmp_path):
        path = write_dataset(tmp_path, ["0\t99\t0\t1"], num_items=10)
        with pytest.raises(ValidationError):
            Dataset.load(path)

    def test_behavior_out_of_range(self, tmp_path):
        path = write_dataset(tmp_path, ["0\t1\t3\t1"], num_behaviors=3)
        with pytest.raises(ValidationError):
            Dataset.load(path)

    def test_user_out_of_range(self, tmp_path):
        path = write_dataset(tmp_path, ["12\t1\t0\t1"], num_users=10)
        with pytest.raises(ValidationError):
            Dataset.load(path)

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = write_dataset(tmp_path, ["0\t1\t0\t1", "0\t1\t0"])
        with pytest.raises(ParseError, match=":2:"):
            Dataset.load(path)

    def test_non_integer_field(self, tmp_path):
        path = write_dataset(tmp_path, ["0\tx\t0\t1"])
        with pytest.raises(ParseError):
            Dataset.load(path)

    def test_empty_file(self, tmp_path):
        path = write_dataset(tmp_path, [])
        with pytest.raises(EmptyDatasetError):
            Dataset.load(path)

    def test_min_interactions_filter(self, tmp_path):
        path = write_dataset(tmp_path,
                             ["0\t1\t0\t1", "0\t2\t0\t2", "1\t3\t0\t1"])
        ds = Dataset.load(path, min_interactions=2)
        assert list(ds.users) == [0]
        with pytest.raises(EmptyDatasetError):
            Dataset.load(path, min_interactions=5)

    def test_behavior_names(self, tmp_path):
        path = write_dataset(tmp_path, ["0\t1\t0\t1"], names="click,fav,cart")
        ds = Dataset.load(path)
        assert ds.behavior_names == ["click", "fav", "cart"]
        assert ds.behavior_label(1) == "fav"
        assert ds.behavior_label(9) == "b9"

    def test_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "data.tsv"
        path.write_text("0\t1\t0\t1\n\n0\t2\t1\t2\n")
        write_header(path, {"num_users": 2, "num_items": 5, "num_behaviors": 2})
        ds = Dataset.load(path)
        assert len(ds.users[0]) == 2


class TestBuildSequences:
    def vocab(self):
        return Vocab.for_sizes(10, 3)

    def users(self, n, user=0):
        return {user: [Interaction(user, i % 10, i % 3, i) for i in range(n)]}

    def test_left_padding(self):
        v = self.vocab()
        seqs = build_sequences(self.users(3), L=5, vocab=v)
        s = seqs[0]
        assert s.items.tolist()[:2] == [v.pad_token, v.pad_token]
        assert s.behaviors.tolist()[:2] == [v.pad_token, v.pad_token]
        assert s.items.tolist()[2:] == [0, 1, 2]
        assert s.behaviors.tolist()[2:] == [0, 1, 2]
        assert s.length_real == 3
        assert s.real_positions().tolist() == [2, 3, 4]

    def test_truncation_keeps_most_recent(self):
        seqs = build_sequences(self.users(60), L=50, vocab=self.vocab())
        s = seqs[0]
        assert s.length_real == 50
        assert s.items.tolist() == [i % 10 for i in range(10, 60)]

    def test_pairing_preserved(self):
        v = self.vocab()
        users = {1: [Interaction(1, 4, 2, 0), Interaction(1, 7, 1, 1)]}
        s = build_sequences(users, L=4, vocab=v)[0]
        real = s.real_positions()
        assert s.items[real].tolist() == [4, 7]
        assert s.behaviors[real].tolist() == [2, 1]

    def test_nonpositive_L(self):
        with pytest.raises(ConfigError):
            build_sequences(self.users(2), L=0, vocab=self.vocab())

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(1, 30), L=st.integers(1, 20))
    def test_round_trip_property(self, n, L):
        v = self.vocab()
        users = self.users(n)
        s = build_sequences(users, L, v)[0]
        kept = users[0][-L:]
        real = s.real_positions()
        assert s.length_real == min(n, L)
        assert s.items[real].tolist() == [i.item_id for i in kept]
        assert s.behaviors[real].tolist() == [i.behavior_id for i in kept]
        pad = np.setdiff1d(np.arange(L), real)
        assert (s.items[pad] == v.pad_token).all()

    def test_stack_sequences(self):
        v = self.vocab()
        seqs = build_sequences({0: self.users(3)[0], 5: self.users(4, 5)[5]},
                               L=6, vocab=v)
        items, behaviors, lengths, users = stack_sequences(seqs)
        assert items.shape == (2, 6) and behaviors.shape == (2, 6)
        assert lengths.tolist() == [3, 4]
        assert users.tolist() == [0, 5]


class TestClozeMask:
    def make(self, n=10, L=12, fill=8):
        v = Vocab.for_sizes(20, 3)
        seqs = []
        for u in range(n):
            items = np.full(L, v.pad_token, dtype=np.int64)
            behaviors = np.full(L, v.pad_token, dtype=np.int64)
            items[L - fill:] = np.arange(fill) % 20
            behaviors[L - fill:] = np.arange(fill) % 3
            seqs.append(Sequence(items, behaviors, fill, user_id=u))
        return v, seqs

    def test_rho_one_masks_everything(self):
        v, seqs = self.make()
        batch = cloze_mask(seqs, rho=1.0, sigma=0.0, rng=np.random.default_rng(0),
                           vocab=v)
        for seq, pos in zip(batch.sequences, batch.masked_positions):
            assert len(pos) == seq.length_real
            assert (seq.items[pos] == v.mask_token).all()

    def test_rho_zero_forces_exactly_one(self):
        v, seqs = self.make()
        batch = cloze_mask(seqs, rho=0.0, sigma=0.0, rng=np.random.default_rng(1),
                           vocab=v)
        for pos in batch.masked_positions:
            assert len(pos) == 1

    def test_sigma_extremes(self):
        v, seqs = self.make()
        batch = cloze_mask(seqs, rho=0.5, sigma=1.0, rng=np.random.default_rng(2),
                           vocab=v)
        for seq, pos in zip(batch.sequences, batch.masked_positions):
            assert (seq.behaviors[pos] == v.mask_token).all()
        batch = cloze_mask(seqs, rho=0.5, sigma=0.0, rng=np.random.default_rng(2),
                          vocab=v)
        for seq, pos in zip(batch.sequences, batch.masked_positions):
            assert (seq.behaviors[pos] != v.mask_token).all()

    def test_masked_positions_are_real(self):
        v, seqs = self.make()
        batch = cloze_mask(seqs, rho=0.3, sigma=0.5, rng=np.random.default_rng(3),
                           vocab=v)
        for orig, seq, pos, tgt in zip(seqs, batch.sequences,
                                       batch.masked_positions, batch.target_items):
            assert (pos >= len(seq) - orig.length_real).all()
            assert (tgt == orig.items[pos]).all()
            untouched = np.setdiff1d(np.arange(len(seq)), pos)
            assert (seq.items[untouched] == orig.items[untouched]).all()

    def test_originals_not_mutated(self):
        v, seqs = self.make()
        before = [s.items.copy() for s in seqs]
        cloze_mask(seqs, rho=1.0, sigma=1.0, rng=np.random.default_rng(4), vocab=v)
        for s, b in zip(seqs, before):
            assert (s.items == b).all()

    def test_same_seed_bit_identical(self):
        v, seqs = self.make()
        a = cloze_mask(seqs, 0.4, 0.5, np.random.default_rng(9), v)
        b = cloze_mask(seqs, 0.4, 0.5, np.random.default_rng(9), v)
        for sa, sb in zip(a.sequences, b.sequences):
            assert (sa.items == sb.items).all()
            assert (sa.behaviors == sb.behaviors).all()
        for pa, pb in zip(a.masked_positions, b.masked_positions):
            assert (pa == pb).all()

    def test_masked_fraction_statistics(self):
        rho = 0.3
        v, seqs = self.make(n=200, L=50, fill=50)
        batch = cloze_mask(seqs, rho, 0.0, np.random.default_rng(5), v)
        total = sum(len(p) for p in batch.masked_positions)
        n = 200 * 50
        se = (rho * (1 - rho) * n) ** 0.5
        assert abs(total - rho * n) < 4 * se

    def test_flat_alignment(self):
        v, seqs = self.make(n=3)
        batch = cloze_mask(seqs, 0.5, 0.5, np.random.default_rng(6), v)
        idx, pos, tgt = batch.flat()
        assert len(idx) == len(pos) == len(tgt)
        for i, p, t in zip(idx, pos, tgt):
            assert batch.sequences[i].items[p] == v.mask_token
            assert seqs[i].items[p] == t

    def test_invalid_probabilities(self):
        v, seqs = self.make()
        with pytest.raises(ConfigError):
            cloze_mask(seqs, -0.1, 0.5, np.random.default_rng(0), v)
        with pytest.raises(ConfigError):
            cloze_mask(seqs, 0.5, 1.5, np.random.default_rng(0), v)
        with pytest.raises(EmptyDatasetError):
            cloze_mask([], 0.5, 0.5, np.random.default_rng(0), v)


class TestNextItemSplit:
    def test_structure(self):
        v = Vocab.for_sizes(10, 3)
        items = np.array([v.pad_token, v.pad_token, 3, 8, 2], dtype=np.int64)
        behaviors = np.array([v.pad_token, v.pad_token, 0, 1, 2], dtype=np.int64)
        seq = Sequence(items, behaviors, 3, user_id=4)
        splits = next_item_split([seq], v)
        assert len(splits) == 1
        prefix, target_item, target_behavior = splits[0]
        assert target_item == 2 and target_behavior == 2
        assert prefix.items.tolist() == [v.pad_token, v.pad_token, 3, 8,
                                         v.mask_token]
        assert prefix.behaviors.tolist() == [v.pad_token, v.pad_token, 0, 1,
                                             v.mask_token]
        assert prefix.length_real == 3
        assert prefix.user_id == 4

    def test_full_sequence_shifts_left(self):
        v = Vocab.for_sizes(10, 2)
        seq = Sequence(np.array([1, 2, 3, 4], dtype=np.int64),
                       np.array([0, 1, 0, 1], dtype=np.int64), 4)
        prefix, target_item, _ = next_item_split([seq], v)[0]
        assert target_item == 4
        assert prefix.items.tolist() == [v.pad_token, 1, 2, 3, v.mask_token][1:]
        assert prefix.items.tolist() == [1, 2, 3, v.mask_token]

    def test_short_sequences_skipped_with_warning(self, caplog):
        v = Vocab.for_sizes(10, 2)
        single = Sequence(np.array([v.pad_token, 5], dtype=np.int64),
                          np.array([v.pad_token, 0], dtype=np.int64), 1)
        ok = Sequence(np.array([1, 2], dtype=np.int64),
                      np.array([0, 1], dtype=np.int64), 2)
        with caplog.at_level(logging.WARNING):
            splits = next_item_split([single, ok], v)
        assert len(splits) == 1
        assert "skipped 1" in caplog.text

    def test_cardinality(self, tiny_data):
        ds = tiny_data["dataset"]
        v = ds.vocab
        seqs = build_sequences(ds.users, 12, v)
        splits = next_item_split(seqs, v)
        eligible = sum(1 for s in seqs if s.length_real >= 2)
        assert len(splits) == eligible


class TestLeaveOneOut:
    def test_split(self):
        users = {0: [Interaction(0, 1, 0, 0), Interaction(0, 2, 1, 1)],
                 1: [Interaction(1, 3, 0, 0)]}
        train, test = leave_one_out(users)
        assert list(train) == [0]
        assert [i.item_id for i in train[0]] == [1]
        assert test[0].item_id == 2
        assert 1 not in test


class TestSynthetic:
    def test_deterministic_bytes(self, tmp_path):
        spec = SyntheticSpec(num_users=20, num_items=60, num_behaviors=3,
                             archetypes=2, cluster_size=4,
                             behavior_frequencies=(0.5, 0.3, 0.2),
                             seq_len_range=(4, 8), seed=11)
        p1, m1 = gen_synthetic(spec, tmp_path / "a.tsv")
        p2, m2 = gen_synthetic(spec, tmp_path / "b.tsv")
        assert p1.read_bytes() == p2.read_bytes()
        assert m1.read_bytes() == m2.read_bytes()

    def test_cluster_purity(self, tiny_data):
        ds = tiny_data["dataset"]
        manifest = tiny_data["manifest"]
        total = 0
        for user, inters in ds.users.items():
            for it in inters:
                assert it.item_id in manifest.cluster_of(user, it.behavior_id)
                total += 1
        assert total > 0

    def test_clusters_disjoint(self, tiny_data):
        manifest = tiny_data["manifest"]
        seen: set[int] = set()
        for items in manifest.clusters.values():
            s = set(items.tolist())
            assert not (s & seen)
            seen |= s

    def test_behavior_frequencies(self, tmp_path):
        freqs = (0.7, 0.1, 0.1, 0.1)
        spec = SyntheticSpec(num_users=4000, num_items=200, num_behaviors=4,
                             archetypes=5, cluster_size=10,
                             behavior_frequencies=freqs,
                             seq_len_range=(20, 30), seed=3)
        path, _ = gen_synthetic(spec, tmp_path / "freq.tsv")
        ds = Dataset.load(path)
        counts = np.zeros(4)
        for it in ds.interactions():
            counts[it.behavior_id] += 1
        assert counts.sum() > 1e5
        observed = counts / counts.sum()
        assert np.abs(observed - np.asarray(freqs)).max() < 0.01

    def test_infeasible_allocation(self, tmp_path):
        spec = SyntheticSpec(num_users=5, num_items=10, num_behaviors=4,
                             archetypes=5, cluster_size=10,
                             behavior_frequencies=(0.25,) * 4)
        with pytest.raises(ConfigError):
            gen_synthetic(spec, tmp_path / "x.tsv")

    def test_frequencies_must_sum_to_one(self, tmp_path):
        spec = SyntheticSpec(num_users=5, num_items=100, num_behaviors=2,
                             archetypes=1, cluster_size=3,
                             behavior_frequencies=(0.5, 0.4))
        with pytest.raises(ConfigError):
            gen_synthetic(spec, tmp_path / "x.tsv")

    def test_manifest_round_trip(self, tiny_data):
        manifest = tiny_data["manifest"]
        spec = tiny_data["spec"]
        assert int(manifest.params["num_items"]) == spec.num_items
        assert len(manifest.archetype) == spec.num_users
        assert all(0 <= a < spec.archetypes for a in manifest.archetype.values())
        assert len(manifest.clusters) == spec.archetypes * spec.num_behaviors

    def test_loadable_and_in_range(self, tiny_data):
        ds = tiny_data["dataset"]
        spec = tiny_data["spec"]
        for it in ds.interactions():
            assert 0 <= it.item_id < spec.num_items
            assert 0 <= it.behavior_id < spec.num_behaviors
