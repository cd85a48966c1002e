import numpy as np
import pytest

from dagssl import dataio, dplp
from dagssl.graph import build_knn_graph
from reference import brute_force_path, brute_force_successor, reference_propagate


def random_instance(seed, m=None, d=4):
    rng = np.random.default_rng(seed)
    m = m if m is not None else int(rng.integers(20, 80))
    features = rng.normal(size=(m, d))
    densities = rng.uniform(0.0, 1.0, size=m)
    return rng, features, densities


class TestNextHigherDensity:
    def test_global_maximum_has_none(self):
        _, features, densities = random_instance(0)
        top = int(np.argmax(densities))
        assert dplp.next_higher_density(top, features, densities) is None

    def test_collinear_chain(self):
        features = np.array([[0.0], [1.0], [2.0]])
        densities = np.array([0.1, 0.2, 0.3])
        assert dplp.next_higher_density(0, features, densities) == 1
        assert dplp.next_higher_density(1, features, densities) == 2

    def test_equidistant_tie_smaller_index(self):
        features = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        densities = np.array([0.0, 1.0, 1.0])
        assert dplp.next_higher_density(0, features, densities) == 1

    def test_exact_density_tie_not_a_candidate(self):
        features = np.array([[0.0], [0.5], [3.0]])
        densities = np.array([0.4, 0.4, 0.9])
        # node 1 shares node 0's density exactly: only node 2 qualifies
        assert dplp.next_higher_density(0, features, densities) == 2

    def test_matches_brute_force(self):
        for seed in range(20):
            _, features, densities = random_instance(seed)
            for v in range(0, features.shape[0], 5):
                got = dplp.next_higher_density(v, features, densities)
                ref = brute_force_successor(v, features, densities)
                assert got == ref


class TestBuildPath:
    def test_origin_at_global_max(self):
        _, features, densities = random_instance(1)
        top = int(np.argmax(densities))
        path = dplp.build_path(top, features, densities, sigma=10.0, l_max=64)
        assert path.nodes.tolist() == [top] and path.length == 1

    def test_full_chain_when_gaps_small(self):
        features = np.arange(6, dtype=np.float64)[:, None]
        densities = np.linspace(0.1, 0.6, 6)
        path = dplp.build_path(0, features, densities, sigma=1.5, l_max=64)
        assert path.nodes.tolist() == [0, 1, 2, 3, 4, 5]

    def test_truncates_at_large_gap(self):
        # gaps: 1, 1, 5, 1 -> path stops after the third node
        features = np.array([0.0, 1.0, 2.0, 7.0, 8.0])[:, None]
        densities = np.linspace(0.1, 0.5, 5)
        path = dplp.build_path(0, features, densities, sigma=1.5, l_max=64)
        assert path.nodes.tolist() == [0, 1, 2]

    def test_l_max_cap(self):
        features = np.arange(10, dtype=np.float64)[:, None]
        densities = np.linspace(0.0, 1.0, 10)
        path = dplp.build_path(0, features, densities, sigma=2.0, l_max=4)
        assert path.length == 4

    def test_invariants_and_brute_force_equality(self):
        for seed in range(30):
            rng, features, densities = random_instance(seed + 100)
            sigma = float(rng.uniform(0.5, 3.0))
            for u in range(0, features.shape[0], 7):
                path = dplp.build_path(u, features, densities, sigma, 20)
                ref = brute_force_path(u, features, densities, sigma, 20)
                assert path.nodes.tolist() == ref
                rho = densities[path.nodes]
                assert np.all(np.diff(rho) > 0)
                gaps = np.linalg.norm(
                    np.diff(features[path.nodes], axis=0), axis=1)
                assert np.all(gaps <= sigma)
                assert path.length <= 20
                assert len(set(path.nodes.tolist())) == path.length

    def test_bad_params(self):
        _, features, densities = random_instance(2)
        with pytest.raises(ValueError):
            dplp.build_path(0, features, densities, sigma=0.0, l_max=5)
        with pytest.raises(ValueError):
            dplp.build_path(0, features, densities, sigma=1.0, l_max=0)


class TestSuccessorTable:
    def test_matches_single_node_op(self):
        for seed in range(10):
            _, features, densities = random_instance(seed + 300)
            succ, dist = dplp.successor_table(features, densities)
            for v in range(features.shape[0]):
                ref = dplp.next_higher_density(v, features, densities)
                if ref is None:
                    assert succ[v] == -1 and np.isinf(dist[v])
                else:
                    assert succ[v] == ref
                    expected = np.linalg.norm(features[ref] - features[v])
                    assert dist[v] == pytest.approx(expected, abs=1e-12)


class TestLabelBank:
    def test_ground_truth_is_immutable(self):
        bank = dplp.LabelBank.from_ground_truth(
            5, np.array([1, 3]), np.array([-1, 2, -1, 0, -1]))
        with pytest.raises(ValueError, match="ground truth"):
            bank.set_pseudo(1, 0)
        with pytest.raises(ValueError, match="ground-truth"):
            bank.clear_pseudo(np.array([3]))

    def test_round_trip_through_label_array(self):
        bank = dplp.LabelBank.from_ground_truth(
            4, np.array([0]), np.array([2, -1, -1, -1]))
        bank.set_pseudo(2, 1)
        arr = bank.to_label_array()
        assert arr.tolist() == [2, -1, 1, -1]


class TestPropagate:
    def test_all_labelled_unchanged(self):
        _, features, densities = random_instance(3, m=25)
        labels = np.arange(25) % 3
        labelled = np.arange(25)
        bank = dplp.LabelBank.from_ground_truth(25, labelled, labels)
        out = dplp.propagate(features, densities, bank, labelled,
                             np.array([], dtype=np.int64), 1.0, 16)
        assert np.array_equal(out.kinds, bank.kinds)
        assert np.array_equal(out.labels, bank.labels)

    def test_single_peak_labels_everything(self):
        # one labelled node at the unique density maximum, tight cluster:
        # every ascent ends there, so every node inherits its label
        rng = np.random.default_rng(4)
        features = rng.normal(size=(40, 3)) * 0.1
        g = build_knn_graph(features, 8)
        top = int(np.argmax(g.densities))
        labels = np.full(40, -1, dtype=np.int64)
        labels[top] = 2
        labelled = np.array([top])
        unlabelled = np.setdiff1d(np.arange(40), labelled)
        bank = dplp.LabelBank.from_ground_truth(40, labelled, labels)
        out = dplp.propagate(features, g.densities, bank, labelled, unlabelled,
                             sigma=10.0, l_max=64)
        assert np.all(out.labels == 2)
        assert np.all(out.kinds[unlabelled] == dplp.PSEUDO)

    def test_two_blobs_peak_labelled(self):
        feats, labels = dataio.gen_blobs(2, 20, 4, separation=30.0, spread=1.0, seed=5)
        f64 = feats.astype(np.float64)
        g = build_knn_graph(f64, 6)
        labelled = np.array([
            int(np.flatnonzero(labels == c)[np.argmax(g.densities[labels == c])])
            for c in range(2)
        ])
        unlabelled = np.setdiff1d(np.arange(40), labelled)
        bank = dplp.LabelBank.from_ground_truth(40, labelled, labels)
        out = dplp.propagate(f64, g.densities, bank, labelled, unlabelled,
                             sigma=12.0, l_max=64)
        assert np.array_equal(out.labels, labels)

    def test_inconsistent_partition_rejected(self):
        _, features, densities = random_instance(6, m=10)
        labels = np.zeros(10, dtype=np.int64)
        bank = dplp.LabelBank.from_ground_truth(10, np.array([0]), labels)
        with pytest.raises(ValueError, match="partition"):
            dplp.propagate(features, densities, bank, np.array([0]),
                           np.array([1, 2]), 1.0, 8)
        with pytest.raises(ValueError, match="overlap"):
            dplp.propagate(features, densities, bank, np.array([0]),
                           np.arange(10), 1.0, 8)

    @pytest.mark.parametrize("policy", dplp.LABEL_SOURCE_POLICIES)
    def test_matches_reference_implementation(self, policy):
        for seed in range(25):
            rng, features, densities = random_instance(seed + 500)
            m = features.shape[0]
            n_lab = int(rng.integers(2, max(3, m // 4)))
            labelled = np.sort(rng.choice(m, size=n_lab, replace=False))
            unlabelled = np.setdiff1d(np.arange(m), labelled)
            gt = rng.integers(0, 3, size=m)
            labels = np.where(np.isin(np.arange(m), labelled), gt, -1)
            sigma = float(rng.uniform(0.5, 2.5))
            bank = dplp.LabelBank.from_ground_truth(m, labelled, labels)
            out = dplp.propagate(features, densities, bank, labelled,
                                 unlabelled, sigma, 32, policy)
            ref_kinds, ref_labels = reference_propagate(
                features, densities, {int(i): int(gt[i]) for i in labelled},
                labelled.tolist(), unlabelled.tolist(), sigma, 32, policy)
            assert np.array_equal(out.kinds, ref_kinds)
            assert np.array_equal(out.labels, ref_labels)

    def test_determinism(self):
        _, features, densities = random_instance(7, m=60)
        labelled = np.array([0, 1, 2])
        unlabelled = np.arange(3, 60)
        labels = np.where(np.arange(60) < 3, np.arange(60) % 2, -1)
        bank = dplp.LabelBank.from_ground_truth(60, labelled, labels)
        a = dplp.propagate(features, densities, bank, labelled, unlabelled, 1.0, 16)
        b = dplp.propagate(features, densities, bank, labelled, unlabelled, 1.0, 16)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.kinds, b.kinds)

    def test_pseudo_labels_trace_to_ground_truth(self):
        for seed in range(5):
            rng, features, densities = random_instance(seed + 900, m=50)
            labelled = np.sort(rng.choice(50, size=5, replace=False))
            unlabelled = np.setdiff1d(np.arange(50), labelled)
            gt = rng.integers(0, 4, size=50)
            labels = np.where(np.isin(np.arange(50), labelled), gt, -1)
            bank = dplp.LabelBank.from_ground_truth(50, labelled, labels)
            out = dplp.propagate(features, densities, bank, labelled,
                                 unlabelled, 1.5, 16)
            gt_classes = set(gt[labelled].tolist())
            for i in np.flatnonzero(out.kinds == dplp.PSEUDO):
                assert int(out.labels[i]) in gt_classes
            assert np.array_equal(out.kinds[labelled],
                                  np.full(5, dplp.GROUND_TRUTH))
            assert np.array_equal(out.labels[labelled], gt[labelled])


class TestHistogram:
    def test_lengths_bounded(self):
        _, features, densities = random_instance(8, m=70)
        hist = dplp.path_length_histogram(features, densities, 1.0, 12)
        assert sum(hist.values()) == 70
        assert all(1 <= length <= 12 for length in hist)

    def test_export_format(self, tmp_path):
        path = tmp_path / "h.txt"
        dplp.save_histogram({3: 10, 1: 5, 7: 2}, path)
        assert path.read_text() == "1,5\n3,10\n7,2\n"
