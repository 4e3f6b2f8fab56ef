import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeleak.errors import ParameterError
from edgeleak.gcn import Blackbox, CountingBlackbox, GcnModel, init_model
from edgeleak.graph import SparseGraph, generate_er, normalize
from edgeleak.linkteller import (
    ATTACKERS,
    WORST_DISTANCE,
    correlation_distances,
    influence_matrix,
    influence_table,
    linkteller_attack,
    lsa2_attack,
    prediction_count,
    random_attack,
    rank_pairs,
    run_attacker,
)
from edgeleak.metrics import PairGroundTruth, attack_metrics


def served(n=12, k=0.3, d=4, c=3, hidden=(6,), seed=0):
    g = generate_er(n, k, seed)
    model = init_model(d, c, hidden, seed=seed + 100)
    x = np.random.default_rng(seed).standard_normal((n, d))
    return g, Blackbox(model, g), x


class TestPredictionCount:
    @pytest.mark.parametrize(
        "k_hat,pairs,expected",
        [(0.0, 45, (0, False)), (0.1, 45, (4, False)), (0.5, 10, (5, False)), (1.0, 10, (10, False)), (3.0, 10, (10, True))],
    )
    def test_values(self, k_hat, pairs, expected):
        assert prediction_count(k_hat, pairs) == expected

    def test_negative_rejected(self):
        with pytest.raises(ParameterError):
            prediction_count(-0.1, 10)

    def test_rank_ties_by_index(self):
        assert list(rank_pairs(np.array([1.0, 3.0, 1.0, 3.0]))) == [1, 3, 0, 2]


class TestInfluenceMatrix:
    def test_zero_feature_row(self):
        g, bb, x = served()
        x[4] = 0.0
        assert np.all(influence_matrix(bb, np.arange(12), x, 4) == 0.0)

    def test_exactly_two_queries(self):
        g, bb, x = served()
        influence_matrix(bb, np.arange(12), x, 3)
        assert bb.num_queries == 2

    def test_probe_must_be_queried(self):
        g, bb, x = served()
        with pytest.raises(ParameterError):
            influence_matrix(bb, [0, 1], x[:2], 5)

    def test_delta_positive(self):
        g, bb, x = served()
        with pytest.raises(ParameterError):
            influence_matrix(bb, np.arange(12), x, 0, delta=0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_one_layer_non_adjacent_exact_zero(self, seed):
        g, bb, x = served(n=15, k=0.2, hidden=(), seed=seed)
        adjacency = g.adjacency().toarray()
        for v in range(15):
            infl = influence_matrix(bb, np.arange(15), x, v)
            far = (adjacency[v] == 0) & (np.arange(15) != v)
            assert np.all(infl[far] == 0.0)

    @pytest.mark.parametrize("kind", ["FirstOrderGCN", "AugNormAdj", "AugRWalk", "BingGeNormAdj"])
    def test_one_layer_adjacent_closed_form(self, kind):
        g = generate_er(10, 0.4, 3)
        w = np.random.default_rng(1).standard_normal((4, 3))
        bb = Blackbox(GcnModel([w], kind), g)
        x = np.random.default_rng(2).standard_normal((10, 4))
        a_hat = normalize(g, kind).toarray()
        for u, v in g.edges[:8]:
            infl = influence_matrix(bb, np.arange(10), x, int(v))
            assert np.allclose(infl[u], a_hat[u, v] * x[v] @ w, rtol=1e-6, atol=1e-9)


class TestLinkTeller:
    def test_two_triangles_exact(self, two_triangles):
        model = init_model(3, 2, (), seed=4)
        x = np.random.default_rng(0).standard_normal((6, 3))
        report = linkteller_attack(Blackbox(model, two_triangles), range(6), x, k_hat=6 / 15)
        assert report.predicted_edges == two_triangles.edge_set()
        m = attack_metrics(report, PairGroundTruth.from_graph(two_triangles, range(6)))
        assert (m["precision"], m["recall"]) == (1.0, 1.0)

    def test_k_hat_zero(self):
        g, bb, x = served()
        report = linkteller_attack(bb, range(12), x, 0.0)
        assert report.m == 0 and not report.predicted.any()

    def test_clamped_warning(self):
        g, bb, x = served()
        report = linkteller_attack(bb, range(12), x, 2.0)
        assert report.m == 66 and report.predicted.all()
        assert any("k_hat_clamped" in w for w in report.warnings)

    def test_query_count(self):
        g, bb, x = served()
        counter = CountingBlackbox(bb)
        linkteller_attack(counter, range(12), x, 0.2)
        assert counter.num_queries == 24

    def test_score_is_max_of_directions(self):
        g, bb, x = served()
        table = influence_table(bb, range(12), x)
        report = linkteller_attack(bb, range(12), x, 0.2)
        for (u, v), s in zip(report.pairs, report.scores):
            assert s == max(table.value(u, v), table.value(v, u))
        assert report.notes["pair_score"] == "max(i_uv, i_vu)"

    def test_influence_table_shape(self):
        g, bb, x = served()
        table = influence_table(bb, [3, 1, 7], x[[3, 1, 7]])
        assert list(table.nodes) == [1, 3, 7]
        assert np.all(table.values >= 0) and np.all(np.isfinite(table.values))
        with pytest.raises(KeyError):
            table.value(3, 3)

    def test_larger_query_set(self):
        g, bb, x = served(n=12)
        targets = [2, 5, 9]
        report = linkteller_attack(bb, targets, x, 0.5, query_nodes=np.arange(12))
        assert list(report.nodes) == targets
        assert bb.num_queries == 6

    def test_relabeling_equivariance(self):
        g, bb, x = served(n=10, seed=3)
        nodes = np.arange(10)
        perm = np.random.default_rng(0).permutation(10)
        a = linkteller_attack(bb, nodes, x, 0.3)
        b = linkteller_attack(bb, nodes[perm], x[perm], 0.3)
        assert a.predicted_edges == b.predicted_edges
        assert np.array_equal(a.scores, b.scores)

    def test_k_hat_monotone(self):
        g, bb, x = served(n=14, seed=2)
        truth = PairGroundTruth.from_graph(g, range(14))
        prev_edges, prev_recall = set(), 0.0
        for k_hat in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.0]:
            report = linkteller_attack(bb, range(14), x, k_hat)
            recall = attack_metrics(report, truth)["recall"]
            assert prev_edges <= report.predicted_edges
            assert recall >= prev_recall
            prev_edges, prev_recall = report.predicted_edges, recall

    def test_needs_two_targets(self):
        g, bb, x = served()
        with pytest.raises(ParameterError):
            linkteller_attack(bb, [1], x[[1]], 0.1)


class TestLsa2:
    def test_identical_rows_rank_first(self):
        x = np.random.default_rng(0).standard_normal((6, 5))
        x[4] = x[1]
        report = lsa2_attack(None, range(6), x, 1 / 15, variant="attr")
        assert report.predicted_edges == {(1, 4)}

    def test_attr_one_hot_ties(self):
        report = lsa2_attack(None, range(5), np.eye(5), 0.3, variant="attr")
        assert len(set(report.scores)) == 1
        assert list(np.flatnonzero(report.predicted)) == [0, 1, 2]

    def test_post_constant_model_falls_to_tie_order(self):
        model = GcnModel([np.zeros((3, 2))])
        g = generate_er(6, 0.5, 1)
        x = np.random.default_rng(0).standard_normal((6, 3))
        report = lsa2_attack(Blackbox(model, g), range(6), x, 0.2, variant="post")
        assert np.all(report.scores == -WORST_DISTANCE)
        assert list(np.flatnonzero(report.predicted)) == [0, 1, 2]
        assert report.notes["undefined_pairs"] == 15

    def test_query_counts(self):
        g, bb, x = served()
        post = CountingBlackbox(bb)
        lsa2_attack(post, range(12), x, 0.2, variant="post")
        assert post.num_queries == 1
        attr = CountingBlackbox(bb)
        lsa2_attack(attr, range(12), x, 0.2, variant="attr")
        assert attr.num_queries == 0

    def test_unknown_variant(self):
        with pytest.raises(ParameterError):
            lsa2_attack(None, range(3), np.eye(3), 0.1, variant="logits")

    def test_correlation_matches_definition(self):
        rows = np.random.default_rng(5).standard_normal((5, 7))
        dist, undefined = correlation_distances(rows)
        assert not undefined.any()
        k = 0
        for i in range(5):
            for j in range(i + 1, 5):
                expected = 1 - np.corrcoef(rows[i], rows[j])[0, 1]
                assert abs(dist[k] - expected) < 1e-11
                k += 1


class TestRandomAttack:
    def test_k_hat_one(self, two_triangles):
        report = random_attack(range(6), 1.0, seed=0)
        m = attack_metrics(report, PairGroundTruth.from_graph(two_triangles, range(6)))
        assert m["recall"] == 1.0
        assert m["precision"] == pytest.approx(6 / 15)

    def test_k_hat_zero(self):
        assert not random_attack(range(6), 0.0, seed=0).predicted.any()

    def test_mean_recall_half(self):
        g = generate_er(30, 0.1, 2)
        truth = PairGroundTruth.from_graph(g, range(30))
        trials = 1000
        recalls = [attack_metrics(random_attack(range(30), 0.5, seed=s), truth)["recall"] for s in range(trials)]
        sigma = np.sqrt(0.25 / (truth.num_edges * trials))
        assert abs(np.mean(recalls) - 0.5) <= 3 * sigma

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            random_attack(range(4), 1.5, seed=0)

    def test_dispatch_clamps(self):
        report = run_attacker("random", None, range(4), None, 2.0, seed=1)
        assert report.predicted.all()
        assert report.warnings


class TestReport:
    def test_json_schema(self, tmp_path):
        g, bb, x = served()
        report = run_attacker("linkteller", bb, range(12), x, 0.2, stratum="unconstrained", seed=3)
        report.save_json(tmp_path / "r.json")
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["schema"] == "edgeleak.attack_report/1"
        assert doc["attacker"] == "linkteller"
        assert doc["config"] == {"k_hat": 0.2, "m": report.m, "delta": 1e-4, "stratum": "unconstrained", "seed": 3}
        assert len(doc["predicted_edges"]) == report.m
        assert len(doc["pair_scores"]) == 66

    def test_pair_csv(self, tmp_path):
        g, bb, x = served()
        report = run_attacker("lsa2-attr", bb, range(12), x, 0.2)
        report.save_pair_csv(tmp_path / "p.csv", PairGroundTruth.from_graph(g, range(12)))
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "u,v,score,predicted,is_edge"
        assert len(lines) == 67

    def test_unknown_attacker(self):
        with pytest.raises(ParameterError):
            run_attacker("oracle", None, range(3), np.eye(3), 0.1)

    def test_attacker_names(self):
        assert ATTACKERS == ("linkteller", "lsa2-post", "lsa2-attr", "random")


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(0, 10_000), st.floats(0, 1))
def test_thresholding_size(n, seed, k_hat):
    x = np.random.default_rng(seed).standard_normal((n, 3))
    report = lsa2_attack(None, range(n), x, k_hat, variant="attr")
    pairs = n * (n - 1) // 2
    assert report.predicted.sum() == report.m == min(pairs, round(k_hat * pairs))
