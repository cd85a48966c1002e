import dataclasses

import numpy as np
import pytest

from dagssl import dataio, dplp, model, trainer
from dagssl.trainer import TrainConfig


def small_dataset(seed=0, n_c=3, per_class=40, dim=6, separation=6.0):
    feats, labels = dataio.gen_blobs(n_c, per_class, dim, separation, 1.0, seed=seed)
    lab, unlab = dataio.make_split(labels, dataio.SplitSpec(5, seed=seed + 1, class_count=n_c))
    masked = np.where(np.isin(np.arange(labels.shape[0]), lab), labels, -1)
    return feats, labels, masked, lab, unlab


def small_config(**overrides):
    base = dict(k_global=12, k_sub=4, h=1, epochs=2, warmup_epochs=2,
                batch_size=32, embed_dim=6, lam=0.2, lr=0.1, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


class TestConfig:
    def test_text_round_trip(self):
        config = small_config(lr_milestones=(3, 7), iters_per_epoch=None,
                              mixup_enabled=True)
        text = trainer.config_to_text(config)
        assert trainer.config_from_text(text) == config

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown field"):
            trainer.config_from_text("bogus = 3\n")

    def test_comments_and_blanks_ignored(self):
        config = trainer.config_from_text("# comment\n\nepochs = 4  # inline\n")
        assert config.epochs == 4

    def test_validation(self):
        with pytest.raises(ValueError):
            small_config(h=3, k_sub=20, k_global=10).validate()
        with pytest.raises(ValueError):
            small_config(sigma_policy="quantile", sigma_value=1.5).validate()
        with pytest.raises(ValueError):
            small_config(lr_milestones=(5, 2)).validate()

    def test_lr_schedule_steps_at_milestones(self):
        config = small_config(lr=1.0, lr_milestones=(2, 4), lr_decay=0.1)
        rates = [trainer.lr_at(config, e) for e in range(6)]
        assert rates == [1.0, 1.0, 0.1, 0.1, pytest.approx(0.01), pytest.approx(0.01)]


class TestWarmup:
    def test_zero_epochs_returns_fresh_init(self):
        feats, labels, masked, lab, _ = small_dataset()
        config = small_config(warmup_epochs=0)
        params = trainer.warmup(feats, masked, lab, config)
        fresh = model.init_model_params(
            6, config.embed_dim, 3, config.backbone_depth,
            np.random.default_rng([config.seed, 0]))
        for a, b in zip(params.backbone_weights, fresh.backbone_weights):
            assert np.array_equal(a, b)
        assert np.array_equal(params.classifier_weight, fresh.classifier_weight)

    def test_separable_blobs_reach_full_training_accuracy(self):
        feats, labels = dataio.gen_blobs(2, 50, 6, separation=12.0, spread=1.0, seed=3)
        lab, _ = dataio.make_split(labels, dataio.SplitSpec(10, seed=4, class_count=2))
        config = small_config(warmup_epochs=40, lr=0.3)
        params = trainer.warmup(feats, labels, lab, config)
        probs = model.classifier_forward(
            model.backbone_forward(feats[lab].astype(np.float64), params), params)
        assert np.array_equal(probs.argmax(axis=1), labels[lab])

    def test_deterministic(self):
        feats, labels, masked, lab, _ = small_dataset()
        a = trainer.warmup(feats, masked, lab, small_config())
        b = trainer.warmup(feats, masked, lab, small_config())
        for w1, w2 in zip(a.backbone_weights, b.backbone_weights):
            assert np.array_equal(w1, w2)
        assert np.array_equal(a.classifier_weight, b.classifier_weight)

    def test_empty_labelled_set_rejected(self):
        feats, labels, masked, lab, _ = small_dataset()
        with pytest.raises(ValueError, match="labelled"):
            trainer.warmup(feats, masked, np.array([], dtype=np.int64), small_config())

    def test_supervised_loss_decreases_on_separable_data(self):
        # lam=0, no mixup, tiny lr: the first 10 full-batch steps must not
        # increase the loss on linearly separable blobs
        feats, labels = dataio.gen_blobs(2, 20, 4, separation=14.0, spread=1.0, seed=8)
        lab = np.arange(40)
        config = small_config(warmup_epochs=0, lam=0.0, momentum=0.0, lr=0.01,
                              embed_dim=4, batch_size=40)
        params = trainer.warmup(feats, labels, lab, config)
        dummy = trainer.dna.DnaParams([np.zeros((0, 0))], [np.zeros(0)])
        velocity = model.GradientSet.zeros(params, dummy)
        losses = []
        x = feats.astype(np.float64)
        for _ in range(11):
            emb = model.backbone_forward(x, params)
            probs = model.classifier_forward(emb, params)
            losses.append(model.supervised_loss(probs, labels))
            caches = [model.pipeline_forward(x[r], params, None, None, None)[1]
                      for r in range(40)]
            grad_probs = model.loss_grad_probs(probs, labels, np.ones(40), 0.0)
            grads = model.model_backward(caches, probs, grad_probs, params, dummy)
            trainer._sgd_step(params, dummy, velocity, grads, config.lr, 0.0)
        assert losses[-1] < losses[0]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


class TestInitBanks:
    def test_identity_backbone_bank_equals_input(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(20, 5))
        params = model.init_model_params(5, 5, 2, depth=0, rng=rng)
        lbank = dplp.LabelBank.from_ground_truth(20, np.array([0]),
                                                 np.zeros(20, dtype=np.int64))
        bank, out_lbank = trainer.init_banks(params, feats, lbank)
        assert np.allclose(bank.matrix, feats)
        assert out_lbank is lbank

    def test_bank_tracks_parameter_changes(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(10, 4))
        params = model.init_model_params(4, 4, 2, depth=1, rng=rng)
        lbank = dplp.LabelBank.from_ground_truth(10, np.array([0]),
                                                 np.zeros(10, dtype=np.int64))
        bank1, _ = trainer.init_banks(params, feats, lbank)
        params.backbone_weights[0] += 0.5
        bank2, _ = trainer.init_banks(params, feats, lbank)
        assert not np.allclose(bank1.matrix, bank2.matrix)

    def test_row_count(self):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(100, 3))
        params = model.init_model_params(3, 3, 2, depth=1, rng=rng)
        lbank = dplp.LabelBank.from_ground_truth(100, np.array([0]),
                                                 np.zeros(100, dtype=np.int64))
        bank, _ = trainer.init_banks(params, feats, lbank)
        assert bank.size == 100


class TestTrain:
    def test_zero_epochs_returns_warmup_model(self):
        feats, labels, masked, lab, unlab = small_dataset()
        config = small_config(epochs=0)
        result = trainer.train(feats, masked, lab, unlab, config)
        expected = trainer.warmup(feats, masked, lab, config)
        for a, b in zip(result.mparams.backbone_weights, expected.backbone_weights):
            assert np.array_equal(a, b)
        assert len(result.log.records) == 0

    def test_epoch_count_and_log_structure(self):
        feats, labels, masked, lab, unlab = small_dataset()
        result = trainer.train(feats, masked, lab, unlab, small_config(epochs=2),
                               true_labels=labels)
        assert len(result.log.records) == 2
        for record in result.log.records:
            assert {"epoch", "lr", "sigma", "loss_total", "pseudo_count",
                    "pseudo_accuracy", "test_error"} <= set(record)

    def test_ground_truth_entries_never_change(self):
        feats, labels, masked, lab, unlab = small_dataset(seed=2)
        result = trainer.train(feats, masked, lab, unlab, small_config(epochs=3))
        assert np.array_equal(result.label_bank.labels[lab], labels[lab])
        assert np.all(result.label_bank.kinds[lab] == dplp.GROUND_TRUTH)

    def test_bit_identical_reruns(self):
        feats, labels, masked, lab, unlab = small_dataset(seed=3)
        config = small_config(epochs=2)
        r1 = trainer.train(feats, masked, lab, unlab, config)
        r2 = trainer.train(feats, masked, lab, unlab, config)
        for a, b in zip(r1.mparams.backbone_weights, r2.mparams.backbone_weights):
            assert np.array_equal(a, b)
        assert np.array_equal(r1.mparams.classifier_weight, r2.mparams.classifier_weight)
        for a, b in zip(r1.dparams.weights, r2.dparams.weights):
            assert np.array_equal(a, b)
        assert r1.log.lines() == r2.log.lines()

    def test_j_zero_iterations_keeps_parameters(self):
        feats, labels, masked, lab, unlab = small_dataset(seed=4)
        config = small_config(epochs=1, iters_per_epoch=0)
        result = trainer.train(feats, masked, lab, unlab, config)
        expected = trainer.warmup(feats, masked, lab, config)
        assert np.array_equal(result.mparams.classifier_weight,
                              expected.classifier_weight)

    def test_mixup_path_runs(self):
        feats, labels, masked, lab, unlab = small_dataset(seed=5)
        config = small_config(epochs=1, mixup_enabled=True, mixup_alpha=1.0)
        result = trainer.train(feats, masked, lab, unlab, config)
        assert len(result.log.records) == 1

    def test_h_zero_with_dplp_off_trains_plain_classifier(self):
        feats, labels, masked, lab, unlab = small_dataset(seed=6)
        config = small_config(epochs=2, h=0, dplp_enabled=False)
        result = trainer.train(feats, masked, lab, unlab, config)
        assert all(r["pseudo_count"] == 0 for r in result.log.records)

    def test_k_global_too_large_rejected(self):
        feats, labels, masked, lab, unlab = small_dataset()
        with pytest.raises(ValueError, match="k_global"):
            trainer.train(feats, masked, lab, unlab, small_config(k_global=500))


class TestEvaluate:
    def test_empty_test_set_rejected(self):
        feats, labels, masked, lab, unlab = small_dataset(seed=7)
        config = small_config(epochs=1)
        result = trainer.train(feats, masked, lab, unlab, config)
        with pytest.raises(ValueError, match="empty"):
            trainer.evaluate(result.mparams, result.dparams, result.bank,
                             result.graph, np.empty((0, 6)), np.empty(0), config)

    def test_labelled_training_points_classified_correctly(self):
        feats, labels, masked, lab, unlab = small_dataset(seed=8, separation=10.0)
        config = small_config(epochs=3, warmup_epochs=20, lr=0.2)
        result = trainer.train(feats, masked, lab, unlab, config)
        metrics = trainer.evaluate(result.mparams, result.dparams, result.bank,
                                   result.graph, feats[lab], labels[lab], config)
        assert metrics["error_rate"] == pytest.approx(0.0)

    def test_argmax_tie_breaks_to_smaller_class(self):
        rng = np.random.default_rng(9)
        mparams = model.ModelParams([], [], np.zeros((3, 4)), np.zeros(3))
        dparams = trainer.dna.DnaParams([np.eye(4)], [np.zeros(4)])
        from dagssl.banks import FeatureBank
        from dagssl.graph import build_knn_graph

        mat = rng.normal(size=(10, 4))
        bank = FeatureBank(mat)
        graph = build_knn_graph(mat, 3)
        config = small_config(h=0, embed_dim=4)
        # zero classifier: all probabilities tie, argmax must pick class 0
        metrics = trainer.evaluate(mparams, dparams, bank, graph,
                                   rng.normal(size=(5, 4)),
                                   np.zeros(5, dtype=np.int64), config)
        assert metrics["error_rate"] == pytest.approx(0.0)

    def test_counts_consistent(self):
        feats, labels, masked, lab, unlab = small_dataset(seed=10)
        config = small_config(epochs=1)
        result = trainer.train(feats, masked, lab, unlab, config)
        metrics = trainer.evaluate(result.mparams, result.dparams, result.bank,
                                   result.graph, feats, labels, config)
        assert metrics["n"] == feats.shape[0]
        assert 0.0 <= metrics["error_rate"] <= 1.0
        assert metrics["n_correct"] == round((1 - metrics["error_rate"]) * metrics["n"])


class TestSigmaResolution:
    def test_absolute_policy_passthrough(self):
        config = small_config(sigma_policy="absolute", sigma_value=2.5)
        assert trainer.resolve_sigma(np.random.default_rng(0).normal(size=(10, 2)),
                                     config) == 2.5

    def test_quantile_policy(self):
        rng = np.random.default_rng(1)
        mat = rng.normal(size=(50, 3))
        config = small_config(sigma_policy="quantile", sigma_value=0.9)
        sigma = trainer.resolve_sigma(mat, config)
        from dagssl.dplp import nn_distances

        assert sigma == pytest.approx(float(np.quantile(nn_distances(mat), 0.9)))
