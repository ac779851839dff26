import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckml.dataio import (DataError, GenConfig, InteractionRecord,
                         ItemRelationRecord, assemble_dataset,
                         build_behavior_graphs, build_relation_graphs,
                         dataset_hash, generate_synthetic, leave_one_out_split,
                         load_dataset, load_interactions,
                         sample_training_triples, synthesize_records, time_buckets,
                         write_interactions, write_manifest, write_relations)


def rec(u, i, k, t=0):
    return InteractionRecord(u, i, k, t)


class TestLoadInteractions:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("")
        assert load_interactions(p, 1, 1, 1) == []

    def test_single_record(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("0\t0\t0\t100\n")
        assert load_interactions(p, 1, 1, 1) == [rec(0, 0, 0, 100)]

    def test_comments_ignored(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("# header\n0\t0\t0\t1\n")
        assert len(load_interactions(p, 1, 1, 1)) == 1

    def test_user_out_of_range_names_line(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("5\t0\t0\t0\n")
        with pytest.raises(DataError, match="user id out of range at line 1"):
            load_interactions(p, 3, 1, 1)

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("0\t0\t0\t7\nnot-a-record\n")
        with pytest.raises(DataError, match="line 2"):
            load_interactions(p, 1, 1, 1)

    def test_order_preserved(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("0\t1\t0\t5\n0\t0\t0\t3\n")
        out = load_interactions(p, 1, 2, 1)
        assert [r.item_id for r in out] == [1, 0]


class TestBuildBehaviorGraphs:
    def test_empty_records(self):
        graphs = build_behavior_graphs([], 2, 2, 2)
        assert len(graphs) == 2
        assert all(g.edge_count == 0 for g in graphs)

    def test_duplicate_edges_collapse(self):
        graphs = build_behavior_graphs([rec(0, 1, 0, 5), rec(0, 1, 0, 9)], 1, 2, 1)
        assert graphs[0].edge_count == 1
        assert graphs[0].user_degrees()[0] == 1
        assert graphs[0].edge_ts[0] == 9  # latest timestamp retained

    def test_hand_enumerated_adjacency(self):
        # independent brute-force oracle: count degrees from the raw pairs
        records = [rec(0, 0, 0), rec(1, 0, 0), rec(0, 1, 1)]
        graphs = build_behavior_graphs(records, 2, 2, 2)
        assert graphs[0].edge_count == 2
        assert graphs[0].item_degrees()[0] == 2
        assert graphs[1].edge_count == 1

    @given(st.sets(st.tuples(st.integers(0, 4), st.integers(0, 5)), max_size=20))
    @settings(max_examples=30, deadline=None)
    def test_adjacencies_are_exact_transposes(self, pairs):
        records = [rec(u, i, 0) for u, i in pairs]
        g = build_behavior_graphs(records, 5, 6, 1)[0]
        assert (g.user_adj.matrix.T != g.item_adj.matrix).nnz == 0
        assert g.edge_count == g.user_degrees().sum() == g.item_degrees().sum()


class TestBuildRelationGraphs:
    def test_symmetrized(self):
        g = build_relation_graphs([ItemRelationRecord(0, 1, 0)], 2, 1)[0]
        assert {(0, 1), (1, 0)} == {tuple(e) for e in g.edges}

    def test_empty(self):
        graphs = build_relation_graphs([], 3, 2)
        assert all(g.edges.shape[0] == 0 for g in graphs)

    def test_mirrored_pair_dedups(self):
        recs = [ItemRelationRecord(0, 1, 0), ItemRelationRecord(1, 0, 0)]
        g = build_relation_graphs(recs, 2, 1)[0]
        assert len(g.undirected_edges()) == 1
        np.testing.assert_array_equal(g.degrees, [1, 1])

    def test_self_loop_rejected(self):
        with pytest.raises(DataError, match="self-loop"):
            build_relation_graphs([ItemRelationRecord(2, 2, 0)], 3, 1)


class TestLeaveOneOutSplit:
    def test_max_timestamp_wins(self):
        records = [rec(0, 3, 1, 1), rec(0, 4, 1, 2)]
        train, test = leave_one_out_split(records, 1)
        assert test == {0: 4}
        assert train == [records[0]]

    def test_single_interaction_user_keeps_no_target_edge(self):
        records = [rec(0, 2, 1, 7), rec(0, 5, 0, 1)]
        train, test = leave_one_out_split(records, 1)
        assert test == {0: 2}
        assert all(r.behavior_id != 1 for r in train)

    def test_tie_breaks_by_greater_item(self):
        records = [rec(0, 2, 0, 5), rec(0, 7, 0, 5)]
        _, test = leave_one_out_split(records, 0)
        assert test == {0: 7}

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 5),
                              st.integers(0, 9)), max_size=30))
    @settings(max_examples=40, deadline=None)
    def test_reinsertion_restores_edge_set(self, raw):
        records = [rec(u, i, 0, t) for u, i, t in raw]
        train, test = leave_one_out_split(records, 0)
        original = {(r.user_id, r.item_id) for r in records}
        rebuilt = {(r.user_id, r.item_id) for r in train}
        rebuilt |= {(u, i) for u, i in test.items()}
        assert rebuilt == original


class TestEvalNegatives:
    def _dataset(self, n_items, records, seed=3):
        return assemble_dataset(records, [], 1, n_items, 1, 0, 0, seed)

    def test_forced_pool_of_99(self):
        # user touched items 0 (train) and 1 (held out): the other 99 remain
        records = [rec(0, 0, 0, 1), rec(0, 1, 0, 2)]
        ds = self._dataset(101, records)
        negs = ds.eval_negatives[0]
        assert len(negs) == 99
        assert set(negs.tolist()) == set(range(101)) - {0, 1}

    def test_same_seed_identical(self):
        records = [rec(0, 0, 0, 1), rec(0, 1, 0, 2)]
        a = self._dataset(150, records, seed=5)
        b = self._dataset(150, records, seed=5)
        np.testing.assert_array_equal(a.eval_negatives[0], b.eval_negatives[0])

    def test_different_seeds_differ_and_both_exclude_history(self):
        records = [rec(0, j, 0, j) for j in range(6)]
        a = self._dataset(1000, records, seed=1)
        b = self._dataset(1000, records, seed=2)
        assert not np.array_equal(a.eval_negatives[0], b.eval_negatives[0])
        for ds in (a, b):
            banned = set(range(6))  # brute-force membership check
            negs = ds.eval_negatives[0]
            assert len(set(negs.tolist())) == 99
            assert not banned & set(negs.tolist())

    def test_insufficient_pool(self):
        records = [rec(0, 0, 0, 1), rec(0, 1, 0, 2)]
        with pytest.raises(DataError, match="insufficient candidate pool"):
            self._dataset(100, records)


class TestTrainingTriples:
    def test_forced_negative(self):
        g = build_behavior_graphs([rec(0, 0, 0)], 1, 2, 1)[0]
        triples = sample_training_triples(g, 20, seed=0)
        assert all(q == 1 for _, _, q in triples)

    def test_positives_are_edges(self):
        records = [rec(u, i, 0) for u in range(3) for i in (u, u + 1)]
        g = build_behavior_graphs(records, 3, 5, 1)[0]
        edges = {tuple(e) for e in g.edges}
        for u, p, q in sample_training_triples(g, 200, seed=1):
            assert (u, p) in edges
            assert (u, q) not in edges

    def test_edge_frequency_uniform(self):
        # chi-square-style check against brute-force edge enumeration
        records = [rec(u, i, 0) for u in range(4) for i in range(5)]
        g = build_behavior_graphs(records, 4, 30, 1)[0]
        n = 100_000
        triples = sample_training_triples(g, n, seed=9)
        counts = {}
        for u, p, _ in triples:
            counts[(u, p)] = counts.get((u, p), 0) + 1
        expected = n / g.edge_count
        sigma = np.sqrt(n * (1 / g.edge_count) * (1 - 1 / g.edge_count))
        for e in map(tuple, g.edges):
            assert abs(counts.get(e, 0) - expected) < 3 * sigma

    def test_saturated_user_skipped_with_warning(self):
        g = build_behavior_graphs([rec(0, 0, 0), rec(0, 1, 0)], 1, 2, 1)[0]
        with pytest.warns(UserWarning, match="every item"):
            triples = sample_training_triples(g, 10, seed=0)
        assert triples == []

    def test_empty_graph_rejected(self):
        g = build_behavior_graphs([], 1, 2, 1)[0]
        with pytest.raises(DataError):
            sample_training_triples(g, 1, seed=0)


class TestSynthetic:
    def test_zero_correlation_specific_only_pools_disjoint(self):
        cfg = GenConfig(num_users=20, num_items=120, num_behaviors=2,
                        relation_count=1, shared_prototypes=0,
                        specific_prototypes=2, interactions_per_user=6,
                        correlation=0.0)
        records, _, gt = synthesize_records(cfg, seed=0)
        protos = np.array(gt["item_prototypes"])
        by_behavior = {0: set(), 1: set()}
        for r in records:
            by_behavior[r.behavior_id].add(int(protos[r.item_id]))
        assert not (by_behavior[0] & by_behavior[1])

    def test_same_seed_same_hash(self):
        cfg = GenConfig(num_users=12, num_items=130, interactions_per_user=5)
        a = generate_synthetic(cfg, seed=4)
        b = generate_synthetic(cfg, seed=4)
        assert dataset_hash(a) == dataset_hash(b)
        c = generate_synthetic(cfg, seed=5)
        assert dataset_hash(a) != dataset_hash(c)

    def test_correlation_raises_cross_behavior_jaccard(self):
        def mean_jaccard(corr, seed=11):
            cfg = GenConfig(num_users=40, num_items=120, num_behaviors=2,
                            relation_count=1, shared_prototypes=2,
                            specific_prototypes=0, interactions_per_user=8,
                            correlation=corr)
            records, _, _ = synthesize_records(cfg, seed=seed)
            sets = {}
            for r in records:
                sets.setdefault((r.user_id, r.behavior_id), set()).add(r.item_id)
            vals = []
            for u in range(cfg.num_users):
                a = sets.get((u, 0), set())
                b = sets.get((u, 1), set())
                if a or b:
                    vals.append(len(a & b) / len(a | b))
            return float(np.mean(vals))

        assert mean_jaccard(1.0) > mean_jaccard(0.0)

    def test_infeasible_config_rejected(self):
        cfg = GenConfig(num_users=2, num_items=10, interactions_per_user=50)
        with pytest.raises(DataError, match="infeasible"):
            synthesize_records(cfg, seed=0)


class TestRoundTrip:
    def test_files_reproduce_dataset_hash(self, tmp_path):
        cfg = GenConfig(num_users=15, num_items=140, interactions_per_user=6)
        records, rel_records, gt = synthesize_records(cfg, seed=2)
        ds = assemble_dataset(records, rel_records, 15, 140, 2, 2, 1, 2,
                              ground_truth=gt)
        write_interactions(tmp_path / "i.tsv", records)
        write_relations(tmp_path / "r.tsv", rel_records)
        import json
        (tmp_path / "gt.json").write_text(json.dumps(gt))
        write_manifest(tmp_path / "manifest.txt", num_users=15, num_items=140,
                       num_behaviors=2, relation_count=2, target_behavior=1,
                       seed=2, interactions="i.tsv", relations="r.tsv",
                       ground_truth="gt.json")
        loaded = load_dataset(tmp_path / "manifest.txt")
        assert dataset_hash(loaded) == dataset_hash(ds)
        for g1, g2 in zip(loaded.behavior_graphs, ds.behavior_graphs):
            np.testing.assert_array_equal(g1.edges, g2.edges)

    def test_missing_manifest_keys(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("users=3\n")
        with pytest.raises(DataError, match="missing keys"):
            load_dataset(tmp_path / "manifest.txt")


class TestTimeBuckets:
    def test_quantile_assignment(self):
        records = [rec(0, 0, 0, 10), rec(1, 1, 0, 20), rec(2, 2, 0, 30),
                   rec(3, 3, 0, 40)]
        g = build_behavior_graphs(records, 4, 4, 1)[0]
        ub, ib = time_buckets(g, 2)
        np.testing.assert_array_equal(ub, [0, 0, 1, 1])
        np.testing.assert_array_equal(ib, [0, 0, 1, 1])

    def test_inactive_nodes_bucket_zero(self):
        g = build_behavior_graphs([rec(0, 0, 0, 5)], 3, 3, 1)[0]
        ub, _ = time_buckets(g, 4)
        assert ub[1] == ub[2] == 0
