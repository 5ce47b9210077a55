"""Classifier heads: losses, probabilities, thresholds, imbalance.

Marginalization and hierarchical-softmax probabilities are checked
against brute-force oracles (explicit descendant sums and root-to-leaf
path products); every loss gradient is checked against central finite
differences.
"""

import math

import numpy as np
import pytest

from hierembed.heads import (
    ClassifierConfig,
    HeadError,
    HierarchyIndex,
    ImbalancePolicy,
    LinearClassifier,
    _sigmoid,
    hab_loss,
    head_width,
    hs_loss,
    hs_predict,
    hs_probabilities,
    mc_loss,
    mc_probabilities,
    mplc_loss,
    mplc_predict,
    plc_loss,
    predict_levels,
    predict_sets,
    select_thresholds,
    train_linear_classifier,
)
from hierembed.hierarchy import Hierarchy, Node, generate_synthetic_tree


@pytest.fixture(scope="module")
def tree():
    return generate_synthetic_tree(3, 2)  # 1 + 2 + 4 nodes


@pytest.fixture(scope="module")
def index(tree):
    return HierarchyIndex(tree)


@pytest.fixture(scope="module")
def tree423():
    return generate_synthetic_tree(4, 2)


def leaf_tau(index, leaf_id):
    """Per-level positions of the path ending at leaf_id."""
    h = index.h
    path = [leaf_id]
    while h.parent(path[0]) is not None:
        path.insert(0, h.parent(path[0]))
    return np.array([[index.pos_in_level[nid] for nid in path]])


class TestHabLoss:
    def test_zero_logit_true_label(self):
        loss, _ = hab_loss(np.zeros(4), np.array([1, 1, 1, 1]))
        assert loss == pytest.approx(math.log(2))

    def test_large_logit_true_label(self):
        loss, _ = hab_loss(np.full(3, 50.0), np.ones(3))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(HeadError):
            hab_loss(np.zeros(3), np.zeros(4))

    def test_gradient_fd(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(6)
        y = (rng.random(6) < 0.5).astype(float)
        _, g = hab_loss(x, y)
        fd = _fd(lambda z: hab_loss(z, y)[0], x)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)


def _fd(f, x, h=1e-5):
    out = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


class TestPlcLoss:
    def test_uniform_logits(self, index):
        # levels of size 1, 2, 4: losses ln1 + ln2 + ln4
        x = np.zeros(index.n_total)
        tau = np.array([[0, 0, 0]])
        loss, _ = plc_loss(x, tau, index)
        assert loss == pytest.approx(math.log(2) + math.log(4))

    def test_confident_correct(self, index):
        x = np.zeros(index.n_total)
        tau = np.array([[0, 1, 2]])
        for i, off in enumerate(index.level_offsets):
            x[off + tau[0, i]] = 60.0
        loss, _ = plc_loss(x, tau, index)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_label_out_of_range(self, index):
        with pytest.raises(HeadError):
            plc_loss(np.zeros(index.n_total), np.array([[0, 5, 0]]), index)

    def test_gradient_fd(self, index):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(index.n_total)
        tau = np.array([[0, 1, 3]])
        _, g = plc_loss(x, tau, index)
        fd = _fd(lambda z: plc_loss(z, tau, index)[0], x)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)

    def test_gradient_is_softmax_minus_onehot(self, index):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(index.n_total)
        tau = np.array([[0, 0, 1]])
        _, g = plc_loss(x, tau, index)
        off, size = index.level_offsets[2], index.level_sizes[2]
        seg = x[off : off + size]
        sm = np.exp(seg) / np.exp(seg).sum()
        sm[1] -= 1
        np.testing.assert_allclose(g[off : off + size], sm, rtol=1e-12)


class TestMarginalization:
    def test_parent_sums(self, index):
        # leaves ordered r.0.0, r.0.1, r.1.0, r.1.1; parents r.0, r.1
        logits = np.log(np.array([0.2, 0.3, 0.4, 0.1]))
        probs = mc_probabilities(logits, index)
        np.testing.assert_allclose(probs[1], [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(probs[0], [1.0], atol=1e-12)

    def test_single_parent_of_all(self):
        nodes = [Node("p", 1, "p"), Node("a", 2, "a"), Node("b", 2, "b")]
        h = Hierarchy(nodes, [("p", "a"), ("p", "b")])
        idx = HierarchyIndex(h)
        probs = mc_probabilities(np.array([3.0, -1.0]), idx)
        np.testing.assert_allclose(probs[0], [1.0], atol=1e-12)

    def test_uniform_two_two(self, index):
        probs = mc_probabilities(np.zeros(4), index)
        np.testing.assert_allclose(probs[1], [0.5, 0.5], atol=1e-12)

    def test_brute_force_oracle(self, tree423):
        # level-i probability equals the sum of its leaf descendants' probs
        idx = HierarchyIndex(tree423)
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((5, idx.level_sizes[-1]))
        probs = mc_probabilities(logits, idx)
        p_leaf = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        for i, members in enumerate(idx.levels):
            for j, nid in enumerate(members):
                leaves = tree423.leaf_descendants(nid)
                cols = [idx.pos_in_level[l] for l in leaves]
                np.testing.assert_allclose(
                    probs[i][:, j], p_leaf[:, cols].sum(axis=1), atol=1e-12
                )

    def test_normalization(self, tree423):
        idx = HierarchyIndex(tree423)
        rng = np.random.default_rng(4)
        probs = mc_probabilities(rng.standard_normal((7, idx.level_sizes[-1])), idx)
        for p in probs:
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_single_level_reduces_to_softmax_ce(self):
        nodes = [Node("a", 1, "a"), Node("b", 1, "b"), Node("c", 1, "c")]
        h = Hierarchy(nodes, [])
        idx = HierarchyIndex(h)
        x = np.array([0.5, -1.0, 2.0])
        tau = np.array([[2]])
        loss, grad = mc_loss(x, tau, idx)
        expected = -x[2] + np.log(np.exp(x).sum())
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_consistent_path_confident(self, index):
        x = np.full(4, -30.0)
        x[0] = 30.0  # all mass on leaf r.0.0
        tau = leaf_tau(index, "r.0.0")
        loss, _ = mc_loss(x, tau, index)
        assert loss == pytest.approx(0.0, abs=1e-9)

    def test_gradient_fd(self, tree423):
        idx = HierarchyIndex(tree423)
        rng = np.random.default_rng(5)
        x = rng.standard_normal(idx.level_sizes[-1])
        tau = leaf_tau(idx, tree423.level_members(4)[3])
        _, g = mc_loss(x, tau, idx)
        fd = _fd(lambda z: mc_loss(z, tau, idx)[0], x)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)


class TestMaskedPerLevel:
    def test_full_mask_equals_plc(self, index):
        # when every node at each level shares one parent the mask is the level
        nodes = [Node("p", 1, "p"), Node("a", 2, "a"), Node("b", 2, "b")]
        h = Hierarchy(nodes, [("p", "a"), ("p", "b")])
        idx = HierarchyIndex(h)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, idx.n_total))
        tau = np.array([[0, 1]] * 4)
        l1, g1 = mplc_loss(x, tau, idx)
        l2, g2 = plc_loss(x, tau, idx)
        assert l1 == pytest.approx(l2, abs=1e-12)
        np.testing.assert_allclose(g1, g2, atol=1e-12)

    def test_singleton_mask_zero_loss(self):
        nodes = [Node("p", 1, "p"), Node("c", 2, "c")]
        h = Hierarchy(nodes, [("p", "c")])
        idx = HierarchyIndex(h)
        rng = np.random.default_rng(7)
        x = rng.standard_normal(idx.n_total)
        loss, grad = mplc_loss(x, np.array([[0, 0]]), idx)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_two_children_equal_logits(self, index):
        x = np.zeros(index.n_total)
        tau = leaf_tau(index, "r.0.1")
        loss, _ = mplc_loss(x, tau, index)
        # level1 has 1 node (ln 1), level2 two children (ln 2), level3 two children (ln 2)
        assert loss == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_inconsistent_target_rejected(self, index):
        # r.1.0 is not a child of r.0
        tau = np.array([[0, 0, index.pos_in_level["r.1.0"]]])
        with pytest.raises(HeadError):
            mplc_loss(np.zeros(index.n_total), tau, index)

    def test_gradient_fd(self, tree423):
        idx = HierarchyIndex(tree423)
        rng = np.random.default_rng(8)
        x = rng.standard_normal(idx.n_total)
        tau = leaf_tau(idx, tree423.level_members(4)[5])
        _, g = mplc_loss(x, tau, idx)
        fd = _fd(lambda z: mplc_loss(z, tau, idx)[0], x)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)

    def test_predict_follows_parent(self, index):
        x = np.zeros(index.n_total)
        # strong level-2 signal for r.1; level-3 favors r.0.0 overall but the
        # mask forces a child of r.1
        x[index.level_offsets[1] + index.pos_in_level["r.1"]] = 10.0
        x[index.level_offsets[2] + index.pos_in_level["r.0.0"]] = 10.0
        x[index.level_offsets[2] + index.pos_in_level["r.1.1"]] = 5.0
        pred = mplc_predict(x, index)
        assert list(pred) == ["r", "r.1", "r.1.1"]

    def test_predict_tie_lowest_index(self, index):
        pred = mplc_predict(np.zeros(index.n_total), index)
        assert list(pred) == ["r", "r.0", "r.0.0"]


class TestHierarchicalSoftmax:
    def test_all_zero_logits_binary_tree(self, index):
        _, joint = hs_probabilities(np.zeros(index.group_width), index)
        np.testing.assert_allclose(joint, 0.25, atol=1e-12)

    def test_single_child_chain(self):
        h = generate_synthetic_tree(3, 1)
        idx = HierarchyIndex(h)
        conds, joint = hs_probabilities(np.array([7.0, -2.0, 3.0]), idx)
        for c in conds:
            np.testing.assert_allclose(c, 1.0, atol=1e-12)
        np.testing.assert_allclose(joint, 1.0, atol=1e-12)

    def test_joint_sums_to_one(self, tree423):
        idx = HierarchyIndex(tree423)
        rng = np.random.default_rng(9)
        _, joint = hs_probabilities(rng.standard_normal((6, idx.group_width)), idx)
        np.testing.assert_allclose(joint.sum(axis=1), 1.0, atol=1e-9)

    def test_brute_force_path_products(self, tree423):
        idx = HierarchyIndex(tree423)
        rng = np.random.default_rng(10)
        x = rng.standard_normal(idx.group_width)
        conds, joint = hs_probabilities(x, idx)
        h = tree423
        for pos, leaf in enumerate(idx.levels[-1]):
            prob = 1.0
            nid = leaf
            while nid is not None:
                gi, gp = idx.group_of[nid]
                prob *= conds[gi][gp]
                nid = h.parent(nid)
            assert joint[pos] == pytest.approx(prob, abs=1e-12)

    def test_certain_path_zero_loss(self, index):
        x = np.zeros(index.group_width)
        tau = leaf_tau(index, "r.1.0")
        for i in range(index.level_count):
            nid = ["r", "r.1", "r.1.0"][i]
            gi, gp = index.group_of[nid]
            x[index.groups[gi].offset + gp] = 60.0
        loss, _ = hs_loss(x, tau, index)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_loss_is_neg_log_joint(self, tree423):
        idx = HierarchyIndex(tree423)
        rng = np.random.default_rng(11)
        x = rng.standard_normal(idx.group_width)
        leaf = tree423.level_members(4)[2]
        tau = leaf_tau(idx, leaf)
        loss, _ = hs_loss(x, tau, idx)
        _, joint = hs_probabilities(x, idx)
        assert loss == pytest.approx(-math.log(joint[idx.pos_in_level[leaf]]), abs=1e-10)

    def test_gradient_only_on_path_groups(self, index):
        rng = np.random.default_rng(12)
        x = rng.standard_normal(index.group_width)
        tau = leaf_tau(index, "r.0.1")
        _, g = hs_loss(x, tau, index)
        gi_off_path, _ = index.group_of["r.1.0"]  # group of r.1's children
        off = index.groups[gi_off_path].offset
        size = len(index.groups[gi_off_path].member_ids)
        np.testing.assert_allclose(g[off : off + size], 0.0, atol=1e-15)

    def test_inconsistent_path_rejected(self, index):
        tau = np.array(
            [[0, index.pos_in_level["r.0"], index.pos_in_level["r.1.0"]]]
        )
        with pytest.raises(HeadError):
            hs_loss(np.zeros(index.group_width), tau, index)

    def test_gradient_fd(self, tree423):
        idx = HierarchyIndex(tree423)
        rng = np.random.default_rng(13)
        x = rng.standard_normal(idx.group_width)
        tau = leaf_tau(idx, tree423.level_members(4)[7])
        _, g = hs_loss(x, tau, idx)
        fd = _fd(lambda z: hs_loss(z, tau, idx)[0], x)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)


class TestArgmaxShiftInvariance:
    def test_segment_constant_shift(self, index):
        rng = np.random.default_rng(14)
        x = rng.standard_normal(index.n_total)
        base = mplc_predict(x, index)
        shifted = x.copy()
        off, size = index.level_offsets[1], index.level_sizes[1]
        shifted[off : off + size] += 7.3
        assert list(mplc_predict(shifted, index)) == list(base)

    def test_hs_group_shift(self, index):
        rng = np.random.default_rng(15)
        x = rng.standard_normal(index.group_width)
        base = hs_predict(x, index)
        g = index.groups[1]
        shifted = x.copy()
        shifted[g.offset : g.offset + len(g.member_ids)] += 4.2
        assert list(hs_predict(shifted, index)) == list(base)


class TestThresholds:
    def test_perfect_separation(self):
        scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3]])
        targets = np.array([[1, 0], [1, 0], [1, 0]], dtype=bool)
        t = select_thresholds(scores, targets, "ofadb")
        pred = scores >= t[0]
        assert np.array_equal(pred, targets)

    def test_pcdb_shape(self):
        rng = np.random.default_rng(16)
        scores = rng.random((20, 5))
        targets = rng.random((20, 5)) < 0.3
        t = select_thresholds(scores, targets, "pcdb")
        assert t.shape == (5,)

    def test_empty_rejected(self):
        with pytest.raises(HeadError):
            select_thresholds(np.zeros((0, 3)), np.zeros((0, 3), bool), "ofadb")

    def test_ofadb_maximizes_micro_f1(self):
        from hierembed.metrics import micro_f1

        rng = np.random.default_rng(17)
        scores = rng.random((30, 4))
        targets = rng.random((30, 4)) < 0.4
        t = select_thresholds(scores, targets, "ofadb")[0]
        best = micro_f1(scores >= t, targets)
        for cand in np.unique(scores):
            assert micro_f1(scores >= cand, targets) <= best + 1e-12


class TestImbalance:
    def test_uniform_equals_baseline(self):
        labels = ["a", "b", "c", "a", "b", "c"]
        policy = ImbalancePolicy.from_labels("class-weights", labels)
        np.testing.assert_allclose(policy.sample_weights(labels), 1.0)
        policy_r = ImbalancePolicy.from_labels("resample", labels)
        np.testing.assert_allclose(policy_r.resample_probabilities(labels), 1 / 6)

    def test_ninety_ten_ratio(self):
        labels = ["big"] * 90 + ["small"] * 10
        policy = ImbalancePolicy.from_labels("class-weights", labels)
        w = policy.sample_weights(["big", "small"])
        assert w[1] / w[0] == pytest.approx(9.0)

    def test_resample_expectation_fifty_fifty(self):
        labels = ["big"] * 90 + ["small"] * 10
        policy = ImbalancePolicy.from_labels("resample", labels)
        p = policy.resample_probabilities(labels)
        assert p[:90].sum() == pytest.approx(0.5)
        assert p[90:].sum() == pytest.approx(0.5)

    def test_zero_frequency_label(self):
        with pytest.raises(HeadError):
            ImbalancePolicy.from_labels("class-weights", ["a", "a"], label_universe=["a", "b"])
        policy = ImbalancePolicy.from_labels("class-weights", ["a", "a"])
        with pytest.raises(HeadError):
            policy.sample_weights(["b"])


class TestWidths:
    def test_widths(self, index):
        assert head_width("hab", index) == 7
        assert head_width("plc", index) == 7
        assert head_width("mplc", index) == 7
        assert head_width("mc", index) == 4
        assert head_width("hs", index) == 7  # groups partition all nodes

    def test_unknown(self, index):
        with pytest.raises(HeadError):
            head_width("svm", index)


class TestThresholdModeComparison:
    def test_ofadb_beats_pcdb_on_tiny_validation(self):
        # per-class boundaries overfit when labels have ~1 validation sample;
        # the shared boundary generalizes (measured: 0.938 vs 0.720 joint m-F1)
        from hierembed import joint
        from hierembed.cli import classifier_metrics
        from hierembed.synth import gaussian_cluster_features

        h = generate_synthetic_tree(2, 8)
        features = gaussian_cluster_features(h, 6, 8, seed=5, noise=1.2)
        labels = np.array(
            [list(reversed(h.ancestors(l))) + [l] for l in features.leaf_labels],
            dtype=object,
        )
        rng = np.random.default_rng(0)
        order = rng.permutation(len(labels))
        va, tr, te = order[:8], order[8:40], order[40:]
        policy = ImbalancePolicy.from_labels("none", [str(labels[i][-1]) for i in tr])
        scores = {}
        for mode in ("ofadb", "pcdb"):
            cfg = ClassifierConfig(head="hab", lr=0.05, epochs=25, batch_size=16,
                                   seed=1, threshold_mode=mode)
            clf, _ = train_linear_classifier(
                features.features[tr], labels[tr],
                features.features[va], labels[va], h, policy, cfg,
            )
            scores[mode] = classifier_metrics(clf, features.features[te], labels[te])[0]["m-F1"]
        assert scores["ofadb"] > scores["pcdb"]


class TestMoreShiftInvariance:
    def test_plc_level_argmax(self, index):
        rng = np.random.default_rng(20)
        x = rng.standard_normal(index.n_total)
        off, size = index.level_offsets[2], index.level_sizes[2]
        base = np.argmax(x[off : off + size])
        shifted = x.copy()
        shifted[off : off + size] += 11.0
        assert np.argmax(shifted[off : off + size]) == base

    def test_mc_marginals_shift(self, index):
        rng = np.random.default_rng(21)
        x = rng.standard_normal(index.level_sizes[-1])
        base = [np.argmax(p) for p in mc_probabilities(x, index)]
        shifted = [np.argmax(p) for p in mc_probabilities(x + 3.3, index)]
        assert base == shifted
