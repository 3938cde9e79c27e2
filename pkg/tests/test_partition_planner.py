#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
test_partition_planner.py - Unit tests for the partition planner module
"""

import os
import random
import sys
import unittest
from fractions import Fraction

# Add project root to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.accounting import verify_budget
from src.partition_planner import (
    BudgetError,
    CellShape,
    KernelSpec,
    PlanError,
    StageAssignmentError,
    compute_cdd,
    nearest_valid_budget,
    plan_partition,
    reassign_stages,
    tile_cells,
)
from src.presets import resnet18_group, resnet18_model


def resnet18_stage_specs():
    """Non-stem ResNet18 convs grouped by the reassigned stage policy."""
    layers = [layer for layer in resnet18_model()["layers"] if layer.get("type", "conv") == "conv" and layer["id"] != "conv1"]
    specs = [KernelSpec(layer["id"], layer["k"], layer["c"], layer["f"], layer["stride"], layer["pad"]) for layer in layers]
    grouping = {spec.layer_id: resnet18_group(spec.layer_id) for spec in specs}
    return {group.group_id: group.specs for group in reassign_stages(specs, grouping)}


class TestCommonDivisors(unittest.TestCase):

    def test_gcd_per_dimension(self):
        """Test the cell takes the gcd of every kernel dimension."""
        specs = [KernelSpec("a", 3, 64, 64), KernelSpec("b", 3, 64, 128), KernelSpec("c", 1, 64, 128)]
        self.assertEqual(compute_cdd(specs), CellShape(1, 64, 64))

    def test_scale_divisors_shrink_the_cell(self):
        """Test [spatial, c, f] divisors are applied to the gcds."""
        specs = [KernelSpec("a", 3, 16, 32)]
        self.assertEqual(compute_cdd(specs, [3, 2, 4]), CellShape(1, 8, 8))

    def test_non_dividing_divisor_is_rejected(self):
        """Test a divisor that does not divide its gcd raises PlanError."""
        with self.assertRaises(PlanError):
            compute_cdd([KernelSpec("a", 3, 16, 16)], [2, 1, 1])

    def test_empty_group_is_rejected(self):
        """Test an empty group raises PlanError."""
        with self.assertRaises(PlanError):
            compute_cdd([])

    def test_invalid_kernel_spec(self):
        """Test non-positive kernel dimensions are rejected."""
        with self.assertRaises(PlanError):
            KernelSpec("bad", 0, 3, 3)


class TestPlanPartition(unittest.TestCase):

    def setUp(self):
        """Set up ResNet18 stage groups."""
        self.stages = resnet18_stage_specs()

    def _plan(self, group_id, b, half=False):
        divisors = [3, 1, 1] if group_id == "stage4" else [1, 1, 1]
        if half:
            divisors = [divisors[0], 2, 2]
        return plan_partition(self.stages[group_id], b, divisors, group_id=group_id)

    def test_resnet18_cell_counts(self):
        """Test per-stage total cell counts m_t of the reassigned ResNet18 groups."""
        expected = {"stage1": 56, "stage2": 47, "stage3": 47, "stage4": 27}
        self.assertEqual(list(self.stages), list(expected))
        for group_id, m_t in expected.items():
            with self.subTest(group=group_id):
                plan = self._plan(group_id, "1")
                self.assertEqual(plan.m_t, m_t)
                self.assertEqual(plan.n, m_t)
                self.assertFalse(plan.zero_cell_enabled)
                self.assertEqual(plan.q, plan.n)

    def test_resnet18_warehouse_sizes_per_budget(self):
        """Test n for every budget, with halved c/f cells below 1x."""
        table = {
            "1/4": (True, {"stage1": 56, "stage2": 47, "stage3": 47, "stage4": 27}),
            "1/2": (True, {"stage1": 112, "stage2": 94, "stage3": 94, "stage4": 54}),
            "4": (False, {"stage1": 224, "stage2": 188, "stage3": 188, "stage4": 108}),
        }
        for b, (half, sizes) in table.items():
            for group_id, n in sizes.items():
                with self.subTest(b=b, group=group_id):
                    plan = self._plan(group_id, b, half=half)
                    self.assertEqual(plan.n, n)
                    self.assertEqual(plan.zero_cell_enabled, Fraction(b) < 1)
                    self.assertEqual(plan.q, n + 1 if Fraction(b) < 1 else n)

    def test_stage1_members_and_offsets(self):
        """Test the first stage absorbs the next stage's first conv and downsample."""
        plan = self._plan("stage1", "1")
        self.assertEqual(plan.layer_ids[-2:], ("layer2.0.conv1", "layer2.0.downsample"))
        self.assertEqual(plan.m_for("layer1.0.conv1"), 9)
        self.assertEqual(plan.m_for("layer2.0.conv1"), 18)
        self.assertEqual(plan.m_for("layer2.0.downsample"), 2)
        self.assertEqual(plan.mixture_offset("layer2.0.conv1"), 36)
        self.assertEqual(plan.mixture_offset("layer2.0.downsample"), 54)

    def test_budget_identity_property(self):
        """Test n == b * m_t, q == n + [b < 1] and the accounting budget check over random groups and budgets."""
        rng = random.Random(1234)
        checked = 0
        while checked < 500:
            count = rng.randint(1, 4)
            base_c = rng.choice([1, 2, 4, 8])
            group = [
                KernelSpec(f"l{i}", rng.choice([1, 3, 5]), base_c * rng.randint(1, 4), base_c * rng.randint(1, 4))
                for i in range(count)
            ]
            m_t = sum(spec.volume for spec in group) // compute_cdd(group).volume
            b = Fraction(rng.randint(1, 4 * m_t), m_t)
            plan = plan_partition(group, b)
            self.assertEqual(plan.m_t, m_t)
            self.assertEqual(plan.n, b * m_t)
            self.assertEqual(plan.q, plan.n + (1 if b < 1 else 0))
            self.assertEqual(sum(plan.per_layer_m.values()), plan.m_t)
            self.assertEqual(verify_budget(plan, b), b)
            self.assertEqual(verify_budget(plan), plan.b)
            checked += 1

    def test_fractional_cell_count_suggests_nearest_budget(self):
        """Test b * m_t not integral raises BudgetError with the nearest valid b."""
        with self.assertRaises(BudgetError) as ctx:
            self._plan("stage2", "1/2")
        self.assertEqual(ctx.exception.suggested_b, Fraction(23, 47))
        self.assertEqual(ctx.exception.group_id, "stage2")
        self.assertIn("23/47", str(ctx.exception))

    def test_nearest_valid_budget_tie_prefers_smaller(self):
        """Test exact ties resolve to the smaller budget."""
        self.assertEqual(nearest_valid_budget(Fraction(1, 2), 3), Fraction(1, 3))
        self.assertEqual(nearest_valid_budget(Fraction(1, 100), 7), Fraction(1, 7))

    def test_non_positive_budget(self):
        """Test b <= 0 is rejected."""
        with self.assertRaises(PlanError):
            plan_partition([KernelSpec("a", 3, 4, 4)], "0")

    def test_duplicate_layer_in_group(self):
        """Test a layer listed twice in a group is rejected."""
        spec = KernelSpec("a", 3, 4, 4)
        with self.assertRaises(PlanError):
            plan_partition([spec, spec], "1")

    def test_as_dict(self):
        """Test the plan serializes budgets as exact rationals."""
        plan = plan_partition([KernelSpec("a", 3, 4, 4), KernelSpec("b", 3, 4, 8)], "2/3", [3, 1, 1])
        payload = plan.as_dict()
        self.assertEqual(payload["b"], "2/3")
        self.assertEqual(payload["m_t"], 27)
        self.assertEqual(payload["n"], 18)
        self.assertTrue(payload["zero_cell"])
        self.assertEqual([layer["m"] for layer in payload["layers"]], [9, 18])


class TestReassignStages(unittest.TestCase):

    def setUp(self):
        """Set up a small layer list."""
        self.layers = [KernelSpec("stem", 3, 3, 8), KernelSpec("a", 3, 8, 8), KernelSpec("b", 3, 8, 16), KernelSpec("c", 3, 16, 16)]

    def test_groups_follow_first_appearance(self):
        """Test groups are ordered by first member and keep layer order."""
        groups = reassign_stages(self.layers, [("c", "g1"), ("a", "g2"), ("b", "g1")], excluded=["stem"])
        self.assertEqual([g.group_id for g in groups], ["g2", "g1"])
        self.assertEqual(groups[1].layer_ids, ("b", "c"))

    def test_unassigned_layer(self):
        """Test a layer with no group raises StageAssignmentError naming it."""
        with self.assertRaises(StageAssignmentError) as ctx:
            reassign_stages(self.layers, {"a": "g", "b": "g"}, excluded=["stem"])
        self.assertEqual(ctx.exception.layer_id, "c")

    def test_double_assignment(self):
        """Test assigning a layer twice is rejected."""
        with self.assertRaises(StageAssignmentError) as ctx:
            reassign_stages(self.layers, [("a", "g"), ("a", "h"), ("b", "g"), ("c", "g")], excluded=["stem"])
        self.assertIn("assigned more than once", str(ctx.exception))

    def test_excluded_layer_cannot_be_grouped(self):
        """Test an excluded layer named in the grouping is rejected as excluded, not as a duplicate."""
        with self.assertRaises(StageAssignmentError) as ctx:
            reassign_stages(self.layers, {"stem": "g", "a": "g", "b": "g", "c": "g"}, excluded=["stem"])
        self.assertEqual(ctx.exception.layer_id, "stem")
        self.assertIn("excluded", str(ctx.exception))
        self.assertNotIn("more than once", str(ctx.exception))

    def test_unknown_layer(self):
        """Test grouping an unknown layer is rejected."""
        with self.assertRaises(StageAssignmentError):
            reassign_stages(self.layers, {"zzz": "g"})


class TestTiling(unittest.TestCase):

    def test_tiling_order_is_f_c_row_col(self):
        """Test blocks are enumerated f outermost, then c, then rows, then columns."""
        blocks = tile_cells(KernelSpec("a", 2, 4, 4), CellShape(1, 2, 2))
        self.assertEqual(len(blocks), 16)
        self.assertEqual([b.index for b in blocks], list(range(16)))
        coords = [(b.f_start, b.c_start, b.row, b.col) for b in blocks[:6]]
        self.assertEqual(coords, [(0, 0, 0, 0), (0, 0, 0, 1), (0, 0, 1, 0), (0, 0, 1, 1), (0, 2, 0, 0), (0, 2, 0, 1)])
        self.assertEqual((blocks[8].f_start, blocks[8].c_start), (2, 0))

    def test_blocks_cover_kernel_once(self):
        """Test the blocks partition the kernel."""
        spec = KernelSpec("a", 3, 4, 6)
        cell = CellShape(1, 2, 3)
        seen = set()
        for block in tile_cells(spec, cell):
            fs, cs, rs, ks = block.slices()
            for f in range(fs.start, fs.stop):
                for c in range(cs.start, cs.stop):
                    for r in range(rs.start, rs.stop):
                        for k in range(ks.start, ks.stop):
                            self.assertNotIn((f, c, r, k), seen)
                            seen.add((f, c, r, k))
        self.assertEqual(len(seen), spec.volume)

    def test_non_dividing_cell(self):
        """Test tiling with a cell that does not divide the kernel raises PlanError."""
        with self.assertRaises(PlanError):
            tile_cells(KernelSpec("a", 3, 4, 4), CellShape(2, 4, 4))


if __name__ == '__main__':
    unittest.main()
