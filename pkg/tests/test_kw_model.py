#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
test_kw_model.py - Unit tests for manifests, model construction and forward/backward passes
"""

import copy
import json
import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add project root to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.assembler import StaleWarehouseError, assemble
from src.kw_model import (
    ManifestError,
    ModelManifest,
    build_model,
    cross_entropy_loss,
    forward_with_cache,
    loss_and_gradients,
    model_backward,
    model_forward,
    plan_manifest,
)
from src.tensor_core import ShapeError
from src.train_harness import randomize_attention
from src.utils.helpers import topology_hash

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))


def load_settings(*parts):
    with open(os.path.join(ROOT, *parts), "r", encoding="utf-8") as f:
        return json.load(f)


def plain_twin(settings):
    """Same network with every conv bound to a plain kernel."""
    twin = copy.deepcopy(settings)
    for layer in twin["model"]["layers"]:
        layer["binding"] = "plain"
        layer.pop("group", None)
    twin["warehouse"] = {}
    return twin


def single_layer_config(binding, **extra):
    layer = {"id": "dyn", "k": 3, "c": 3, "f": 8, "pad": 1, "binding": binding}
    layer.update(extra)
    return {
        "model": {"input": {"channels": 3, "height": 8, "width": 8}, "num_classes": 4, "layers": [layer]},
        "warehouse": {"defaults": {"b": "4", "scale_divisors": [1, 1, 1]}},
    }


class TestFullTemperatureEquivalence(unittest.TestCase):
    """At tau = 1 a warehouse network equals a plain network built from beta-assembled kernels"""

    def _check(self, settings):
        manifest = ModelManifest.from_config(settings)
        kw_graph = build_model(manifest, seed=0, dtype="float64")
        plain = build_model(ModelManifest.from_config(plain_twin(settings)), seed=1, dtype="float64")

        kw_params = kw_graph.parameter_dict()
        for name, array in plain.parameters():
            if name in kw_params:
                array[...] = kw_params[name]
        for state in kw_graph.layers:
            if state.plan is not None:
                kernel = assemble(kw_graph.warehouses[state.spec.group], state.beta.matrix, state.plan, state.layer_id).kernel
                plain.layer(state.layer_id).kernel[...] = kernel

        x = np.random.default_rng(3).standard_normal((4, 3, 16, 16))
        assert_array_equal(model_forward(kw_graph, x, 1.0), model_forward(plain, x, 1.0))

    def test_full_budget(self):
        """Test equivalence with one cell per mixture."""
        self._check(load_settings("Config", "settings.json"))

    def test_half_budget_with_zero_cell(self):
        """Test equivalence when half of the mixtures start on the zero cell."""
        self._check(load_settings("Config", "toy_half.json"))


class TestDynamicConvolutionDegeneracy(unittest.TestCase):
    """A one-cell-per-kernel warehouse behaves as a vanilla dynamic convolution"""

    def setUp(self):
        """Build matching warehouse and dyconv models with shared weights."""
        self.kw_graph = build_model(ModelManifest.from_config(single_layer_config("warehouse", group="g")), seed=0, dtype="float64")
        self.dy_graph = build_model(ModelManifest.from_config(single_layer_config("dyconv", n=4)), seed=0, dtype="float64")
        randomize_attention(self.kw_graph, 0.5, seed=1)

        plan = self.kw_graph.plans["g"]
        self.assertEqual((plan.m_t, plan.n, plan.q), (1, 4, 4))

        kw_params = self.kw_graph.parameter_dict()
        dy_params = self.dy_graph.parameter_dict()
        dy_params["layer/dyn/kernels"][...] = kw_params["warehouse/g/cells"].reshape(dy_params["layer/dyn/kernels"].shape)
        for name, array in dy_params.items():
            if name in kw_params:
                array[...] = kw_params[name]
        self.x = np.random.default_rng(8).standard_normal((100, 3, 8, 8))
        self.labels = np.arange(100) % 4

    def test_outputs_agree(self):
        """Test logits agree over 100 inputs."""
        for tau in (0.0, 0.5):
            with self.subTest(tau=tau):
                assert_allclose(model_forward(self.kw_graph, self.x, tau), model_forward(self.dy_graph, self.x, tau), rtol=0, atol=1e-6)

    def test_outputs_agree_in_single_precision(self):
        """Test logits agree within 1e-6 when both models run in float32."""
        kw32 = self.kw_graph.astype("float32")
        dy32 = self.dy_graph.astype("float32")
        x32 = self.x.astype(np.float32)
        for tau in (0.0, 0.5):
            with self.subTest(tau=tau):
                kw_logits = model_forward(kw32, x32, tau)
                self.assertEqual(kw_logits.dtype, np.float32)
                assert_allclose(kw_logits, model_forward(dy32, x32, tau), rtol=0, atol=1e-6)

    def test_gradients_agree(self):
        """Test cell gradients equal the dyconv kernel gradients."""
        _, kw_grads, _ = loss_and_gradients(self.kw_graph, self.x, self.labels, 0.3)
        _, dy_grads, _ = loss_and_gradients(self.dy_graph, self.x, self.labels, 0.3)
        assert_allclose(kw_grads["warehouse/g/cells"], dy_grads["layer/dyn/kernels"].reshape(4, -1), rtol=1e-9, atol=1e-12)
        for key in ("w1", "b1", "w2", "b2"):
            assert_allclose(kw_grads[f"attention/dyn/{key}"], dy_grads[f"attention/dyn/{key}"], rtol=1e-9, atol=1e-12)


class TestModelGraph(unittest.TestCase):

    def setUp(self):
        """Set up the toy fixture model."""
        self.settings = load_settings("tests", "fixtures", "toy_config.json")
        self.manifest = ModelManifest.from_config(self.settings)
        self.graph = build_model(self.manifest, seed=0, dtype="float64")
        self.x = np.random.default_rng(2).standard_normal((3, 3, 8, 8))

    def test_plan_of_fixture(self):
        """Test the fixture group sizes."""
        plan = plan_manifest(self.manifest)["toy"]
        self.assertEqual(plan.layer_ids, ("block1", "block2"))
        self.assertEqual((plan.m_t, plan.n, plan.q), (27, 9, 10))
        self.assertEqual(self.graph.warehouses["toy"].param_count, 9 * 64)

    def test_parameter_order(self):
        """Test parameters are listed warehouses first and classifier last."""
        names = [name for name, _ in self.graph.parameters()]
        self.assertEqual(names[0], "warehouse/toy/cells")
        self.assertEqual(names[1:5], ["attention/block1/w1", "attention/block1/b1", "attention/block1/w2", "attention/block1/b2"])
        self.assertIn("layer/conv1/kernel", names)
        self.assertNotIn("layer/block1/kernel", names)
        self.assertEqual(names[-2:], ["classifier/weight", "classifier/bias"])

    def test_seeded_build_is_deterministic(self):
        """Test equal seeds give equal parameters."""
        other = build_model(self.manifest, seed=0, dtype="float64")
        for (name, a), (_, b) in zip(self.graph.parameters(), other.parameters()):
            assert_allclose(a, b, rtol=0, atol=0, err_msg=name)

    def test_logit_shape_and_input_validation(self):
        """Test logits shape and rejection of a wrong input shape."""
        self.assertEqual(model_forward(self.graph, self.x, 0.5).shape, (3, 3))
        with self.assertRaises(ShapeError):
            model_forward(self.graph, np.zeros((1, 3, 9, 9)), 0.5)

    def test_kernels_are_per_sample(self):
        """Test trained attention produces a different kernel per input."""
        randomize_attention(self.graph, 0.5, seed=0)
        _, cache = forward_with_cache(self.graph, self.x, 0.0)
        kernels = cache.entries["block1"]["kernels"]
        self.assertEqual(kernels.shape, (3, 8, 8, 3, 3))
        self.assertFalse(np.allclose(kernels[0], kernels[1]))
        self.assertEqual(cache.alphas()["block2"].shape, (3, 18, 10))

    def test_stale_warehouse_in_backward(self):
        """Test backward refuses a warehouse updated after the forward pass."""
        logits, cache = forward_with_cache(self.graph, self.x, 0.5)
        _, grad_logits = cross_entropy_loss(logits, np.array([0, 1, 2]))
        self.graph.warehouses["toy"].bump_version()
        with self.assertRaises(StaleWarehouseError):
            model_backward(self.graph, cache, grad_logits)

    def test_astype_copies(self):
        """Test a dtype cast leaves the original untouched."""
        single = self.graph.astype("float32")
        self.assertEqual(single.dtype, np.float32)
        self.assertEqual(single.warehouses["toy"].dtype, np.float32)
        self.assertEqual(self.graph.dtype, np.float64)

    def test_topology_hash_tracks_structure(self):
        """Test the hash is stable and changes with the budget."""
        same = ModelManifest.from_config(copy.deepcopy(self.settings))
        self.assertEqual(topology_hash(self.manifest.structure()), topology_hash(same.structure()))
        changed = copy.deepcopy(self.settings)
        changed["warehouse"]["defaults"]["b"] = "2/3"
        other = ModelManifest.from_config(changed)
        self.assertNotEqual(topology_hash(self.manifest.structure()), topology_hash(other.structure()))


class TestManifestValidation(unittest.TestCase):

    def setUp(self):
        """Set up a valid base config."""
        self.base = load_settings("tests", "fixtures", "toy_config.json")

    def _expect_error(self, mutate):
        config = copy.deepcopy(self.base)
        mutate(config)
        with self.assertRaises(ManifestError):
            ModelManifest.from_config(config)

    def test_empty_layer_list(self):
        """Test an empty layer list is rejected."""
        self._expect_error(lambda c: c["model"].update(layers=[]))

    def test_channel_mismatch(self):
        """Test a declared input channel count must match its source."""
        self._expect_error(lambda c: c["model"]["layers"][1].update(c=4))

    def test_dangling_input(self):
        """Test inputs must name earlier tensors."""
        self._expect_error(lambda c: c["model"]["layers"][1].update(input="missing"))

    def test_residual_shape_mismatch(self):
        """Test residual sources must match the output shape."""
        self._expect_error(lambda c: c["model"]["layers"][2].update(add="conv1"))

    def test_duplicate_id(self):
        """Test layer ids are unique."""
        self._expect_error(lambda c: c["model"]["layers"][2].update(id="block1"))

    def test_warehouse_binding_needs_group(self):
        """Test a warehouse-bound layer names its group."""
        self._expect_error(lambda c: c["model"]["layers"][1].pop("group"))

    def test_unknown_binding(self):
        """Test bindings are validated."""
        self._expect_error(lambda c: c["model"]["layers"][0].update(binding="lazy"))

    def test_override_for_unknown_group(self):
        """Test group overrides must name a group with layers."""
        self._expect_error(lambda c: c["warehouse"].update(groups={"ghost": {"b": "1"}}))

    def test_invalid_budget(self):
        """Test an unparseable budget is reported as a manifest error."""
        self._expect_error(lambda c: c["warehouse"]["defaults"].update(b="half"))

    def test_input_too_small(self):
        """Test a kernel larger than its input is rejected."""
        self._expect_error(lambda c: c["model"]["layers"][0].update(k=11, pad=0))

    def test_valid_residual(self):
        """Test a matching residual connection is accepted."""
        config = copy.deepcopy(self.base)
        config["model"]["layers"][1]["add"] = "conv1"
        manifest = ModelManifest.from_config(config)
        self.assertEqual(manifest.layer("block1").add, "conv1")
        self.assertEqual(manifest.head, "block2")
        self.assertEqual(manifest.head_channels, 16)


if __name__ == '__main__':
    unittest.main()
