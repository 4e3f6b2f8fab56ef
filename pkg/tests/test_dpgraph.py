import json
import math

import numpy as np
import pytest

from edgeleak.dpgraph import (
    CELL_CAP_ENV,
    EDGERAND,
    LAPGRAPH,
    DpBudget,
    dp_train_and_infer,
    edgerand,
    edgerand_eps_from_s,
    edgerand_expected_density,
    edgerand_s_from_eps,
    lapgraph,
    load_perturbed,
    perturb,
    precision_bound,
    save_perturbed,
)
from edgeleak.errors import ParameterError, ResourceError
from edgeleak.gcn import TrainConfig, train
from edgeleak.graph import SparseGraph, generate_er, make_sbm_dataset, normalize


def within_binomial(count, trials, p, z=3.0):
    return abs(count - trials * p) <= z * math.sqrt(trials * p * (1 - p))


class TestEdgeRandCalibration:
    def test_s_at_one(self):
        assert abs(edgerand_s_from_eps(1.0) - 0.5379) <= 1e-4

    def test_s_at_ln3(self):
        assert edgerand_s_from_eps(math.log(3)) == pytest.approx(0.5, abs=1e-15)

    def test_s_vanishes(self):
        assert edgerand_s_from_eps(20.0) < 1e-8
        assert edgerand_s_from_eps(1e6) == 0.0

    def test_inverse(self):
        for eps in [0.1, 1.0, 4.0]:
            assert edgerand_eps_from_s(edgerand_s_from_eps(eps)) == pytest.approx(eps)

    def test_nonpositive_eps(self):
        with pytest.raises(ParameterError):
            edgerand_s_from_eps(0.0)
        with pytest.raises(ParameterError):
            DpBudget(-1.0)

    def test_unknown_mechanism(self):
        with pytest.raises(ParameterError):
            DpBudget(1.0, "Gaussian")


class TestEdgeRand:
    def test_huge_eps_is_identity(self):
        g = generate_er(60, 0.1, 1)
        assert edgerand(g, 50.0, seed=3).graph == g

    def test_empty_graph_density(self):
        s = 0.8
        out = edgerand(SparseGraph.empty(100), math.log(2 / s - 1), seed=0, s=s).graph
        assert within_binomial(out.m, 4950, s / 2)

    def test_sparse_graph_density(self):
        s = 0.8
        g = generate_er(100, 0.05, 4)
        out = edgerand(g, math.log(2 / s - 1), seed=1, s=s).graph
        expected = edgerand_expected_density(g.density, s)
        # every cell is Bernoulli with variance (s/2)(1 - s/2), edge or not
        sigma = math.sqrt(4950 * (s / 2) * (1 - s / 2))
        assert abs(out.m - 4950 * expected) <= 3 * sigma
        assert abs(expected - 0.41) < 0.01

    def test_output_well_formed(self):
        g = generate_er(30, 0.2, 0)
        pg = edgerand(g, 1.0, seed=2)
        assert pg.graph.n == 30
        assert np.all(pg.graph.edges[:, 0] < pg.graph.edges[:, 1])
        assert pg.params == {"s": edgerand_s_from_eps(1.0)}

    def test_deterministic(self):
        g = generate_er(30, 0.2, 0)
        assert edgerand(g, 2.0, 7).graph == edgerand(g, 2.0, 7).graph
        assert edgerand(g, 2.0, 7).token == edgerand(g, 2.0, 7).token

    def test_s_below_minimum(self):
        with pytest.raises(ParameterError):
            edgerand(SparseGraph.empty(4), 1.0, 0, s=0.1)

    def test_resource_cap(self):
        g = SparseGraph.empty(50)
        # eps=0.1 gives s ~ 0.95, so the output would be ~47% dense
        with pytest.raises(ResourceError):
            edgerand(g, 0.1, 0, max_cells=1000)
        assert edgerand(g, 1.0, 0, max_cells=1000).graph.n == 50
        assert edgerand(g, 0.1, 0, max_cells=2000).graph.n == 50

    def test_resource_cap_env(self, monkeypatch):
        monkeypatch.setenv(CELL_CAP_ENV, "100")
        with pytest.raises(ResourceError):
            edgerand(SparseGraph.empty(20), 0.1, 0)


@pytest.fixture(scope="module")
def four_node_samples():
    g = SparseGraph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    masks = np.array([edgerand(g, 1.0, seed).graph.cell_mask() for seed in range(100_000)])
    return g, masks


def test_cell_flip_rate(four_node_samples):
    g, masks = four_node_samples
    s = edgerand_s_from_eps(1.0)
    flips = masks != g.cell_mask()
    for cell in range(6):
        assert within_binomial(int(flips[:, cell].sum()), len(flips), s / 2)


def test_four_node_density_matches_expectation(four_node_samples):
    g, masks = four_node_samples
    s = edgerand_s_from_eps(1.0)
    total = masks.size
    assert within_binomial(int(masks.sum()), total, edgerand_expected_density(g.density, s))


class TestLapGraph:
    def test_edge_count_equals_t(self):
        g = generate_er(40, 0.1, 2)
        for seed in range(20):
            pg = lapgraph(g, 2.0, seed)
            t = int(min(max(np.rint(pg.params["noisy_count"]), 0), g.num_cells))
            assert pg.graph.m == pg.params["T"] == t

    def test_budget_split(self):
        pg = lapgraph(SparseGraph.empty(5), 3.0, 0)
        assert pg.params["eps1"] == pytest.approx(0.03)
        assert pg.params["eps1"] + pg.params["eps2"] == pytest.approx(3.0)
        pg = lapgraph(SparseGraph.empty(5), 3.0, 0, count_fraction=0.5)
        assert pg.params["eps1"] == pytest.approx(1.5)

    def test_empty_graph_large_eps(self):
        # at eps=100 the count noise is Lap(1): T >= 3 iff the draw is >= 2.5
        g = SparseGraph.empty(10)
        ts = np.array([lapgraph(g, 100.0, seed).params["T"] for seed in range(2000)])
        assert within_binomial(int(np.sum(ts >= 3)), 2000, 0.5 * math.exp(-2.5))
        for seed in range(20):
            pg = lapgraph(g, 100.0, seed)
            assert pg.graph.m == pg.params["T"]

    def test_embedded_k5_large_eps(self):
        k5 = SparseGraph.from_edges(8, [(i, j) for i in range(5) for j in range(i + 1, 5)])
        for seed in range(20):
            pg = lapgraph(k5, 100.0, seed)
            t = pg.params["T"]
            out = pg.graph.edge_set()
            # cell noise has scale ~0.01, so the true cells always rank first
            if t <= 10:
                assert out <= k5.edge_set()
            else:
                assert out >= k5.edge_set()
            exact = lapgraph(k5, 100.0, seed, count_fraction=0.5).graph
            assert exact == k5

    def test_count_quantile(self):
        g = SparseGraph.from_cell_mask(100, np.arange(4950) < 2000)
        far = sum(abs(lapgraph(g, 1.0, seed).graph.m - 2000) > 500 for seed in range(2000))
        assert within_binomial(far, 2000, math.exp(-5))

    def test_clamped_to_cells(self):
        pg = lapgraph(SparseGraph.complete(3), 0.01, seed=1)
        assert 0 <= pg.params["T"] <= 3

    def test_bad_count_fraction(self):
        with pytest.raises(ParameterError):
            lapgraph(SparseGraph.empty(3), 1.0, 0, count_fraction=1.0)

    def test_deterministic(self):
        g = generate_er(30, 0.2, 0)
        assert lapgraph(g, 1.0, 3).graph == lapgraph(g, 1.0, 3).graph


class TestPrecisionBound:
    def test_ln2(self):
        assert abs(precision_bound(math.log(2), 0.01) - 0.02) <= 1e-10

    def test_eps_zero(self):
        assert precision_bound(0.0, 0.037) == 0.037

    def test_clamped(self):
        assert precision_bound(10.0, 0.01) == 1.0
        assert precision_bound(1e4, 0.01) == 1.0

    def test_negative(self):
        with pytest.raises(ParameterError):
            precision_bound(-1.0, 0.1)


@pytest.fixture(scope="module")
def tiny():
    return make_sbm_dataset([4, 4], 0.8, 0.1, seed=2)


class TestPipeline:
    def test_negligible_noise_matches_plain_training(self, tiny):
        cfg = TrainConfig(epochs=30, seed=1)
        s = edgerand_s_from_eps(20.0)
        assert s * tiny.graph.num_cells < 0.1
        pipe = dp_train_and_infer(tiny, DpBudget(20.0, EDGERAND), cfg, seed=5)
        assert pipe.train_graph.graph == tiny.graph
        plain = train(tiny, normalize(tiny.graph, cfg.norm_kind), cfg)
        assert all(np.array_equal(a, b) for a, b in zip(pipe.model.weights, plain.weights))

    def test_transductive_shares_graph(self, tiny):
        pipe = dp_train_and_infer(tiny, DpBudget(1.0, LAPGRAPH), TrainConfig(epochs=5), seed=3)
        assert pipe.transductive
        assert pipe.infer_graph is pipe.train_graph
        assert pipe.blackbox.provenance == pipe.train_graph.token

    def test_repeated_inference_same_provenance(self, tiny):
        pipe = dp_train_and_infer(tiny, DpBudget(1.0, EDGERAND), TrainConfig(epochs=5), seed=3)
        x = tiny.features
        first = pipe.blackbox.query(range(8), x)
        token = pipe.blackbox.provenance
        assert np.array_equal(first, pipe.blackbox.query(range(8), x))
        assert pipe.blackbox.provenance == token == pipe.infer_graph.token

    def test_inductive_perturbs_separately(self, tiny):
        other = make_sbm_dataset([4, 4], 0.8, 0.1, seed=9)
        pipe = dp_train_and_infer(tiny, DpBudget(1.0, EDGERAND), TrainConfig(epochs=5), seed=3, infer_dataset=other)
        assert not pipe.transductive
        assert pipe.infer_graph is not pipe.train_graph
        assert pipe.infer_graph.seed != pipe.train_graph.seed
        assert pipe.blackbox.provenance == pipe.infer_graph.token

    def test_resource_error_propagates(self, tiny):
        with pytest.raises(ResourceError):
            dp_train_and_infer(tiny, DpBudget(0.1), TrainConfig(epochs=1), seed=0, max_cells=5)


class TestFiles:
    def test_round_trip(self, tmp_path):
        pg = perturb(generate_er(20, 0.2, 1), DpBudget(2.0, LAPGRAPH), seed=4)
        sidecar = save_perturbed(pg, tmp_path / "g.txt")
        prov = json.loads(sidecar.read_text())
        assert prov["mechanism"] == LAPGRAPH and prov["T"] == pg.graph.m
        back = load_perturbed(tmp_path / "g.txt")
        assert back.graph == pg.graph
        assert back.token == pg.token

    def test_perturb_dispatch(self):
        g = generate_er(20, 0.2, 1)
        assert perturb(g, DpBudget(2.0, EDGERAND), 1).mechanism == EDGERAND
        assert perturb(g, DpBudget(2.0, LAPGRAPH), 1).mechanism == LAPGRAPH
