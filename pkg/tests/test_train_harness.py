#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
test_train_harness.py - Unit tests for synthetic data, training, gradient checks and attention statistics
"""

import math
import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add project root to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.accounting import count_params
from src.attention import init_beta
from src.config_manager import ConfigManager
from src.kw_model import ModelManifest, build_model, loss_and_gradients
from src.scheduler import TemperatureSchedule
from src.train_harness import (
    SGD,
    OptimizerConfig,
    TrainingDivergedError,
    collect_attention_stats,
    evaluate,
    gen_synthetic,
    gradcheck,
    randomize_attention,
    train,
)

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
FIXTURE = os.path.join(ROOT, "tests", "fixtures", "toy_config.json")


def load(path):
    config = ConfigManager(path)
    return config, ModelManifest.from_config(config.settings)


def dataset_for(config, **overrides):
    data = dict(config.settings["data"])
    data.update(overrides)
    return gen_synthetic(data["seed"], data["classes"], data["samples_per_class"], data["image_size"], data["channels"], data["noise_std"])


def run_training(config, manifest, epochs=None, optimizer=None, seed=0):
    train_cfg = config.settings["train"]
    graph = build_model(manifest, seed=seed, dtype=train_cfg["dtype"])
    dataset = dataset_for(config)
    steps_per_epoch = math.ceil(len(dataset) / train_cfg["batch_size"])
    history = train(
        graph,
        dataset,
        optimizer or OptimizerConfig(**train_cfg["optimizer"]),
        TemperatureSchedule.from_epochs(train_cfg["warmup_epochs"], steps_per_epoch),
        epochs if epochs is not None else train_cfg["epochs"],
        batch_size=train_cfg["batch_size"],
        seed=seed,
        lr_schedule=train_cfg["lr_schedule"],
    )
    return graph, history


class TestSyntheticData(unittest.TestCase):

    def test_shapes_and_labels(self):
        """Test dataset shapes and class-grouped labels."""
        dataset = gen_synthetic(0, classes=4, samples_per_class=5, image_size=6, channels=2)
        self.assertEqual(len(dataset), 20)
        self.assertEqual(dataset.images.shape, (20, 2, 6, 6))
        self.assertEqual(dataset.images.dtype, np.float32)
        assert_array_equal(dataset.labels, np.repeat(np.arange(4), 5))

    def test_deterministic_per_seed(self):
        """Test equal seeds give equal data and different seeds differ."""
        a = gen_synthetic(3, 3, 2, 4, 1)
        b = gen_synthetic(3, 3, 2, 4, 1)
        c = gen_synthetic(4, 3, 2, 4, 1)
        assert_array_equal(a.images, b.images)
        self.assertFalse(np.array_equal(a.images, c.images))

    def test_zero_noise_repeats_templates(self):
        """Test samples of one class coincide without noise."""
        dataset = gen_synthetic(1, 3, 4, 5, 2, noise_std=0.0)
        for cls in range(3):
            items = dataset.images[dataset.labels == cls]
            for item in items[1:]:
                assert_array_equal(item, items[0])

    def test_invalid_arguments(self):
        """Test degenerate datasets are rejected."""
        with self.assertRaises(ValueError):
            gen_synthetic(0, 1, 4, 4, 1)
        with self.assertRaises(ValueError):
            gen_synthetic(0, 3, 0, 4, 1)

    def test_batches_cover_dataset(self):
        """Test batching visits every item once."""
        dataset = gen_synthetic(0, 3, 3, 4, 1)
        seen = np.concatenate([labels for _, labels in dataset.batches(4, np.random.default_rng(0))])
        self.assertEqual(sorted(seen.tolist()), sorted(dataset.labels.tolist()))


class TestTraining(unittest.TestCase):

    def setUp(self):
        """Set up the fixture configuration."""
        self.config, self.manifest = load(FIXTURE)

    def test_zero_learning_rate_keeps_parameters(self):
        """Test lr = 0 leaves every parameter unchanged while versions advance."""
        graph = build_model(self.manifest, seed=0)
        before = {name: array.copy() for name, array in graph.parameters()}
        dataset = dataset_for(self.config)
        train(graph, dataset, OptimizerConfig(lr=0.0), TemperatureSchedule(2), epochs=2, batch_size=4)
        for name, array in graph.parameters():
            assert_array_equal(array, before[name], err_msg=name)
        self.assertEqual(graph.warehouses["toy"].version, 6)

    def test_training_is_deterministic(self):
        """Test equal seeds reproduce parameters and metrics."""
        first, history_a = run_training(self.config, self.manifest)
        second, history_b = run_training(self.config, self.manifest)
        self.assertEqual([m.as_dict() for m in history_a], [m.as_dict() for m in history_b])
        for (name, a), (_, b) in zip(first.parameters(), second.parameters()):
            assert_array_equal(a, b, err_msg=name)

    def test_metrics_follow_schedules(self):
        """Test tau decays to zero after the warmup and steps are counted."""
        _, history = run_training(self.config, self.manifest, epochs=3)
        self.assertEqual([m.step for m in history], [3, 6, 9])
        self.assertEqual(history[-1].tau, 0.0)
        self.assertGreater(history[0].tau, 0.0)
        self.assertTrue(all(math.isfinite(m.loss) for m in history))

    def test_divergence_is_reported(self):
        """Test a non-finite loss raises TrainingDivergedError."""
        graph = build_model(self.manifest, seed=0)
        graph.classifier_weight[...] = np.inf
        with np.errstate(all="ignore"):
            with self.assertRaises(TrainingDivergedError) as ctx:
                train(graph, dataset_for(self.config), OptimizerConfig(), TemperatureSchedule(1), epochs=1, batch_size=4)
        self.assertEqual(ctx.exception.step, 0)

    def test_weight_decay_targets(self):
        """Test decay applies to cells, kernels and weights only."""
        self.assertTrue(SGD.decays("warehouse/toy/cells"))
        self.assertTrue(SGD.decays("attention/block1/w2"))
        self.assertTrue(SGD.decays("classifier/weight"))
        self.assertFalse(SGD.decays("attention/block1/b2"))
        self.assertFalse(SGD.decays("layer/block1/bn_gamma"))


class TestToyAcceptance(unittest.TestCase):
    """Thirty-epoch runs of the shipped toy configurations"""

    def test_full_and_half_budget(self):
        """Test b = 1 reaches 90% and b = 1/2 reaches 85% train accuracy with fewer cell parameters."""
        full_config, full_manifest = load(os.path.join(ROOT, "Config", "settings.json"))
        half_config, half_manifest = load(os.path.join(ROOT, "Config", "toy_half.json"))

        full_graph, full_history = run_training(full_config, full_manifest)
        self.assertEqual(len(full_history), 30)
        self.assertGreaterEqual(full_history[-1].accuracy, 0.9)
        # class-sorted dataset, evaluated after training at the final temperature
        _, eval_accuracy = evaluate(full_graph, dataset_for(full_config), full_history[-1].tau, full_config.settings["train"]["batch_size"])
        self.assertGreaterEqual(eval_accuracy, 0.9)

        half_graph, half_history = run_training(half_config, half_manifest)
        self.assertGreaterEqual(half_history[-1].accuracy, 0.85)
        self.assertLess(count_params(half_graph).warehouse_cells, count_params(full_graph).warehouse_cells)


class TestGradientCheck(unittest.TestCase):

    def test_linear_model_is_exact(self):
        """Test a model linear in each parameter gives near-zero error under a dyadic linear loss."""
        settings = {
            "model": {
                "input": {"channels": 2, "height": 4, "width": 4},
                "num_classes": 2,
                "layers": [{"id": "conv", "k": 3, "c": 2, "f": 4, "pad": 1, "bn": False, "relu": False}],
            }
        }
        manifest = ModelManifest.from_config(ConfigManager.from_dict(settings).settings)
        graph = build_model(manifest, seed=0, dtype="float64")
        weights = np.array([[0.5, -0.25], [0.125, 1.0], [-0.5, 0.75]])

        def linear_loss(logits, labels):
            return float(np.sum(logits * weights)), weights.copy()

        images = np.random.default_rng(0).integers(-4, 5, size=(3, 2, 4, 4)) / 8.0
        result = gradcheck(graph, (images, np.zeros(3, dtype=np.int64)), eps=2.0 ** -10, num_coords=16, loss_fn=linear_loss)
        self.assertLess(result.max_rel_error, 1e-8)
        self.assertEqual(set(result.per_parameter), {"layer/conv/kernel", "classifier/weight", "classifier/bias"})
        self.assertEqual(result.coords_checked, 16 + 8 + 2)

    def test_warehouse_model(self):
        """Test the full toy warehouse network at three temperatures."""
        config, manifest = load(FIXTURE)
        check = config.settings["gradcheck"]
        graph = build_model(manifest, seed=0, dtype="float64")
        randomize_attention(graph, check["attention_std"], seed=check["seed"])
        dataset = dataset_for(config)
        batch = (dataset.images[[0, 5]], dataset.labels[[0, 5]])
        for tau in (0.25, 0.5, 0.75):
            with self.subTest(tau=tau):
                result = gradcheck(graph, batch, eps=1e-5, tau=tau, num_coords=16, seed=check["seed"])
                self.assertLess(result.max_rel_error, 1e-4, f"worst parameter {result.worst_parameter}")
                self.assertIn("warehouse/toy/cells", result.per_parameter)

    def test_full_temperature_silences_attention(self):
        """Test tau = 1 gives exactly zero attention gradients, analytic and numeric."""
        config, manifest = load(FIXTURE)
        graph = build_model(manifest, seed=0, dtype="float64")
        randomize_attention(graph, 0.05, seed=0)
        dataset = dataset_for(config)
        images, labels = dataset.images[[0, 5]].astype(np.float64), dataset.labels[[0, 5]]

        _, grads, _ = loss_and_gradients(graph, images, labels, 1.0)
        attention_names = [name for name in grads if name.startswith("attention/")]
        self.assertEqual(len(attention_names), 8)
        for name in attention_names:
            assert_array_equal(grads[name], np.zeros_like(grads[name]), err_msg=name)

        result = gradcheck(graph, (images, labels), tau=1.0, num_coords=8)
        for name in attention_names:
            self.assertEqual(result.per_parameter[name], 0.0, name)

    def test_single_precision_graph_is_checked_in_double(self):
        """Test a float32 model is left untouched by the check."""
        config, manifest = load(FIXTURE)
        graph = build_model(manifest, seed=0)
        randomize_attention(graph, 0.05, seed=0)
        before = graph.warehouses["toy"].cells.copy()
        dataset = dataset_for(config)
        result = gradcheck(graph, (dataset.images[:2], dataset.labels[:2]), num_coords=4)
        self.assertLess(result.max_rel_error, 1e-4)
        assert_array_equal(graph.warehouses["toy"].cells, before)
        self.assertEqual(graph.dtype, np.float32)


class TestAttentionStatistics(unittest.TestCase):

    def test_full_temperature_reproduces_beta(self):
        """Test mean attention at tau = 1 is the group's beta matrix."""
        config, manifest = load(FIXTURE)
        graph = build_model(manifest, seed=0, dtype="float64")
        randomize_attention(graph, 0.05, seed=0)
        stats = collect_attention_stats(graph, dataset_for(config), tau=1.0, batch_size=4)
        plan = graph.plans["toy"]
        betas = init_beta(plan)
        expected = np.vstack([betas[layer_id].matrix for layer_id in plan.layer_ids])
        self.assertEqual(stats["toy"].shape, (27, 10))
        assert_allclose(stats["toy"], expected, rtol=0, atol=1e-12)

    def test_zero_temperature_rows_have_unit_l1_norm(self):
        """Test CAF mean rows stay inside the unit l1 ball."""
        config, manifest = load(FIXTURE)
        graph = build_model(manifest, seed=0, dtype="float64")
        randomize_attention(graph, 0.05, seed=0)
        stats = collect_attention_stats(graph, dataset_for(config), tau=0.0)
        self.assertTrue((np.abs(stats["toy"]).sum(axis=1) <= 1.0 + 1e-9).all())


if __name__ == '__main__':
    unittest.main()
