import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backdoorlab import graphdata as gd


def small_graph():
    return gd.Graph(
        features=np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]),
        labels=np.array([0, 1, 1]),
        edges=np.array([[0, 1], [1, 2]]),
        n_classes=2,
    )


def random_graph(rng, n=12, d=3, c=3, p=0.3):
    feats = rng.standard_normal((n, d))
    labels = rng.integers(0, c, size=n)
    iu, ju = np.triu_indices(n, k=1)
    on = rng.uniform(size=len(iu)) < p
    edges = np.stack([iu[on], ju[on]], axis=1)
    return gd.Graph(features=feats, labels=labels, edges=edges, n_classes=c)


class TestGraphType:
    def test_canonical_edge_storage(self):
        g = gd.Graph(
            features=np.zeros((3, 1)),
            labels=np.zeros(3),
            edges=np.array([[2, 1], [1, 2], [0, 2]]),
            n_classes=1,
        )
        assert np.array_equal(g.edges, [[0, 2], [1, 2]])

    def test_rejects_self_loop(self):
        with pytest.raises(gd.GraphFormatError):
            gd.Graph(np.zeros((2, 1)), np.zeros(2), np.array([[1, 1]]), 1)

    def test_rejects_bad_endpoint(self):
        with pytest.raises(gd.GraphFormatError, match="out of range"):
            gd.Graph(np.zeros((2, 1)), np.zeros(2), np.array([[0, 5]]), 1)

    def test_rejects_nonfinite_feature(self):
        with pytest.raises(gd.GraphFormatError):
            gd.Graph(np.array([[np.nan]]), np.zeros(1), np.zeros((0, 2)), 1)

    def test_rejects_label_out_of_range(self):
        with pytest.raises(gd.GraphFormatError):
            gd.Graph(np.zeros((2, 1)), np.array([0, 2]), np.zeros((0, 2)), 2)

    def test_arrays_frozen(self):
        g = small_graph()
        with pytest.raises(ValueError):
            g.features[0, 0] = 9.0


class TestFileIO:
    def test_minimal_instance(self, tmp_path):
        np_path, ep_path = tmp_path / "nodes.txt", tmp_path / "edges.txt"
        np_path.write_text("2 2 2\n0 0 1.5 0.0\n1 1 0.25 -3.0\n")
        ep_path.write_text("0 1\n")
        g = gd.load_graph(np_path, ep_path)
        assert g.n == 2 and g.d == 2 and g.n_classes == 2
        assert np.array_equal(g.edges, [[0, 1]])
        assert g.features[0, 0] == 1.5

    def test_edge_endpoint_out_of_range(self, tmp_path):
        np_path, ep_path = tmp_path / "nodes.txt", tmp_path / "edges.txt"
        np_path.write_text("2 1 1\n0 0 1.0\n1 0 2.0\n")
        ep_path.write_text("0 9\n")
        with pytest.raises(gd.GraphFormatError, match="endpoint 9 out of range"):
            gd.load_graph(np_path, ep_path)

    def test_error_names_offending_line(self, tmp_path):
        np_path, ep_path = tmp_path / "nodes.txt", tmp_path / "edges.txt"
        np_path.write_text("3 1 1\n0 0 1.0\n1 0 2.0\n2 0 3.0\n")
        ep_path.write_text("0 1\n0 7\n")
        with pytest.raises(gd.GraphFormatError, match=r":2:"):
            gd.load_graph(np_path, ep_path)

    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        g = random_graph(rng)
        gd.save_graph(g, tmp_path / "n.txt", tmp_path / "e.txt")
        assert gd.load_graph(tmp_path / "n.txt", tmp_path / "e.txt") == g

    def test_empty_edge_graph_round_trip(self, tmp_path):
        g = gd.Graph(np.ones((2, 1)), np.zeros(2), np.zeros((0, 2)), 1)
        gd.save_graph(g, tmp_path / "n.txt", tmp_path / "e.txt")
        assert (tmp_path / "e.txt").read_text() == ""
        assert gd.load_graph(tmp_path / "n.txt", tmp_path / "e.txt") == g

    def test_nine_significant_digit_features_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        g = random_graph(rng)
        quantized = np.array(
            [[float(f"{v:.9g}") for v in row] for row in g.features]
        )
        gq = gd.Graph(quantized, g.labels, g.edges, g.n_classes)
        gd.save_graph(gq, tmp_path / "n.txt", tmp_path / "e.txt")
        assert gd.load_graph(tmp_path / "n.txt", tmp_path / "e.txt") == gq

    def test_split_round_trip(self, tmp_path):
        split = gd.SplitMask(np.array([0, 1, 2]), np.array([3]), np.array([4, 5]))
        gd.save_split(split, tmp_path / "s.txt")
        loaded = gd.load_split(tmp_path / "s.txt")
        assert np.array_equal(loaded.train_labeled, split.train_labeled)
        assert np.array_equal(loaded.test_target, split.test_target)
        assert np.array_equal(loaded.test_clean, split.test_clean)


def default_spec(**kw):
    base = dict(
        n=1000,
        n_classes=2,
        d=4,
        h=0.9,
        class_means=np.array([[0.5, 0.5, 0.0, 0.0], [-0.5, 0.0, 0.5, 0.0]]),
        noise_scale=0.2,
        feature_bound=1.0,
        avg_degree=6.0,
        seed=7,
    )
    base.update(kw)
    return gd.SyntheticSpec(**base)


class TestSynthetic:
    def test_homophily_near_target(self):
        g = gd.generate_synthetic(default_spec())
        assert 0.85 <= gd.edge_homophily(g) <= 0.95

    def test_zero_noise_features_equal_class_mean(self):
        spec = default_spec(noise_scale=0.0)
        g = gd.generate_synthetic(spec)
        assert np.array_equal(g.features, spec.class_means[g.labels])

    def test_feature_bound_clamps(self):
        spec = default_spec(noise_scale=5.0, feature_bound=1.0)
        g = gd.generate_synthetic(spec)
        assert np.max(np.abs(g.features)) <= 1.0

    def test_expected_degree(self):
        g = gd.generate_synthetic(default_spec())
        assert abs(g.degrees().mean() - 6.0) < 0.5

    def test_single_class_low_h_rejected(self):
        spec = default_spec(n_classes=1, h=0.5, class_means=np.zeros((1, 4)))
        with pytest.raises(ValueError):
            gd.generate_synthetic(spec)

    def test_deterministic_under_seed(self):
        assert gd.generate_synthetic(default_spec()) == gd.generate_synthetic(default_spec())

    @settings(max_examples=10, deadline=None)
    @given(h=st.floats(min_value=0.05, max_value=0.95), seed=st.integers(0, 10_000))
    def test_measured_homophily_within_tolerance(self, h, seed):
        g = gd.generate_synthetic(default_spec(h=h, seed=seed, n_classes=3,
                                               class_means=np.zeros((3, 4))))
        assert abs(gd.edge_homophily(g) - h) < 0.05


class TestHomophily:
    def test_all_same_label(self):
        g = gd.Graph(np.zeros((3, 1)), np.zeros(3), np.array([[0, 1], [1, 2]]), 1)
        assert gd.edge_homophily(g) == 1.0

    def test_all_cross_label(self):
        g = gd.Graph(np.zeros((2, 1)), np.array([0, 1]), np.array([[0, 1]]), 2)
        assert gd.edge_homophily(g) == 0.0

    def test_two_of_three_same(self):
        g = gd.Graph(
            np.zeros((4, 1)), np.array([0, 0, 0, 1]),
            np.array([[0, 1], [1, 2], [2, 3]]), 2,
        )
        assert gd.edge_homophily(g) == pytest.approx(2.0 / 3.0)

    def test_unlabeled_endpoint_rejected(self):
        g = gd.Graph(np.zeros((2, 1)), np.array([0, -1]), np.array([[0, 1]]), 1)
        with pytest.raises(ValueError):
            gd.edge_homophily(g)

    def test_empty_edges_rejected(self):
        g = gd.Graph(np.zeros((2, 1)), np.zeros(2), np.zeros((0, 2)), 1)
        with pytest.raises(ValueError):
            gd.edge_homophily(g)


class TestSplit:
    def test_half_mask_counts(self):
        g = gd.Graph(np.zeros((100, 1)), np.zeros(100), np.zeros((0, 2)), 1)
        split = gd.inductive_split(g, 0.5, seed=1)
        assert len(split.train_labeled) == 50
        assert len(split.test_target) == 25
        assert len(split.test_clean) == 25

    def test_partition_covers_all_nodes(self):
        g = gd.Graph(np.zeros((37, 1)), np.zeros(37), np.zeros((0, 2)), 1)
        split = gd.inductive_split(g, 0.4, seed=9)
        union = set(split.train_labeled) | set(split.test_target) | set(split.test_clean)
        assert union == set(range(37))

    def test_same_seed_same_split(self):
        g = gd.Graph(np.zeros((60, 1)), np.zeros(60), np.zeros((0, 2)), 1)
        a = gd.inductive_split(g, 0.5, seed=7)
        b = gd.inductive_split(g, 0.5, seed=7)
        assert np.array_equal(a.train_labeled, b.train_labeled)
        assert np.array_equal(a.test_target, b.test_target)
        assert np.array_equal(a.test_clean, b.test_clean)

    def test_empty_partition_rejected(self):
        g = gd.Graph(np.zeros((3, 1)), np.zeros(3), np.zeros((0, 2)), 1)
        with pytest.raises(ValueError):
            gd.inductive_split(g, 0.1, seed=0)

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(8, 200),
        frac=st.floats(0.1, 0.9),
        seed=st.integers(0, 1000),
    )
    def test_disjoint_and_deterministic(self, n, frac, seed):
        g = gd.Graph(np.zeros((n, 1)), np.zeros(n), np.zeros((0, 2)), 1)
        try:
            a = gd.inductive_split(g, frac, seed)
        except ValueError:
            return
        b = gd.inductive_split(g, frac, seed)
        assert np.array_equal(a.train_labeled, b.train_labeled)
        assert not (set(a.train_labeled) & set(a.test_target))
        assert not (set(a.test_target) & set(a.test_clean))


class TestNormalizedAdjacency:
    def dense_oracle(self, graph, self_loops):
        a = np.zeros((graph.n, graph.n))
        for u, v in graph.edges:
            a[u, v] = a[v, u] = 1.0
        if self_loops:
            a = a + np.eye(graph.n)
        deg = a.sum(axis=1)
        with np.errstate(divide="ignore"):
            dinv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
        return a * dinv[:, None] * dinv[None, :]

    def test_two_nodes_one_edge_self_loops(self):
        g = gd.Graph(np.zeros((2, 1)), np.zeros(2), np.array([[0, 1]]), 1)
        op = gd.normalized_adjacency(g, add_self_loops=True)
        assert np.allclose(op.to_dense(), [[0.5, 0.5], [0.5, 0.5]])

    def test_isolated_node_with_self_loops(self):
        g = gd.Graph(np.zeros((2, 1)), np.zeros(2), np.zeros((0, 2)), 1)
        op = gd.normalized_adjacency(g, add_self_loops=True)
        assert op.to_dense()[1, 1] == 1.0

    def test_isolated_node_without_self_loops_empty_row(self):
        g = gd.Graph(np.zeros((3, 1)), np.zeros(3), np.array([[0, 1]]), 1)
        op = gd.normalized_adjacency(g, add_self_loops=False)
        assert np.all(op.to_dense()[2] == 0.0)

    def test_degree_one_and_two_without_self_loops(self):
        g = gd.Graph(np.zeros((3, 1)), np.zeros(3), np.array([[0, 1], [1, 2]]), 1)
        op = gd.normalized_adjacency(g, add_self_loops=False)
        assert op.to_dense()[0, 1] == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 500), loops=st.booleans())
    def test_matches_dense_oracle(self, seed, loops):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, n=int(rng.integers(2, 40)))
        op = gd.normalized_adjacency(g, add_self_loops=loops)
        assert np.allclose(op.to_dense(), self.dense_oracle(g, loops), atol=1e-12)

    def test_apply_matches_dense(self):
        rng = np.random.default_rng(4)
        g = random_graph(rng, n=20)
        op = gd.normalized_adjacency(g, add_self_loops=True)
        x = rng.standard_normal((20, 5))
        assert np.allclose(op.apply(x), self.dense_oracle(g, True) @ x, atol=1e-10)


class TestTriggerGeneration:
    def test_full_density_triangle(self):
        t = gd.erdos_renyi_trigger(s=3, p=1.0, seed=0, d=2)
        assert t.internal_edges().shape[0] == 3

    def test_zero_density(self):
        t = gd.erdos_renyi_trigger(s=3, p=0.0, seed=0, d=2)
        assert t.internal_edges().shape[0] == 0

    def test_default_size_is_three(self):
        t = gd.erdos_renyi_trigger(p=0.5, seed=1, d=2)
        assert t.s == 3

    def test_attach_index_convention(self):
        assert gd.erdos_renyi_trigger(p=0.5, seed=1, d=2).attach_index == 0

    def test_feature_source_used(self):
        g = small_graph()
        sampler = gd.class_feature_sampler(g, cls=1)
        t = gd.erdos_renyi_trigger(s=2, p=1.0, feature_source=sampler, seed=5)
        pool = g.features[g.labels == 1]
        for row in t.trig_features:
            assert any(np.array_equal(row, p) for p in pool)

    def test_trigger_validation(self):
        with pytest.raises(ValueError):
            gd.Trigger(np.zeros((2, 2)), np.array([[0.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(ValueError):
            gd.Trigger(np.zeros((2, 2)), np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestInducedSubgraph:
    def test_relabeling_and_edges(self):
        g = small_graph()
        sub, new_to_old = gd.induced_subgraph(g, [1, 2])
        assert sub.n == 2
        assert np.array_equal(new_to_old, [1, 2])
        assert np.array_equal(sub.edges, [[0, 1]])
        assert np.array_equal(sub.features[0], g.features[1])
