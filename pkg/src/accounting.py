"""
Parameter accounting and budget verification.
"""
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Union

from src.attention import attention_param_count
from src.kw_model import ModelGraph, ModelManifest, plan_manifest
from src.partition_planner import PartitionPlan, PlanError
from src.utils.helpers import format_rational, parse_rational

logger = logging.getLogger(__name__)


class BudgetViolationError(PlanError):
    """Raised when a plan's n / m_t differs from its configured budget."""


@dataclass(frozen=True)
class ParamBreakdown:
    warehouse_cells: int
    attention_modules: int
    plain_layers: int
    classifier: int

    @property
    def total(self) -> int:
        return self.warehouse_cells + self.attention_modules + self.plain_layers + self.classifier

    def as_dict(self) -> Dict[str, int]:
        return {
            "warehouse_cells": self.warehouse_cells,
            "attention_modules": self.attention_modules,
            "plain_layers": self.plain_layers,
            "classifier": self.classifier,
            "total": self.total,
        }


def format_millions(count: int) -> str:
    """Render a parameter count as millions with two decimals, e.g. "11.93M"."""
    return f"{count / 1e6:.2f}M"


def _count_manifest(manifest: ModelManifest) -> ParamBreakdown:
    plans = plan_manifest(manifest)
    warehouse_cells = sum(plan.cell_params for plan in plans.values())
    attention = 0
    plain = 0
    for layer in manifest.conv_layers():
        if layer.bn:
            plain += 2 * layer.f
        kernel_volume = layer.kernel_spec.volume
        if layer.binding == "plain":
            plain += kernel_volume
        elif layer.binding == "warehouse":
            plan = plans[layer.group]
            attention += attention_param_count(layer.c, plan.m_for(layer.layer_id), plan.q, manifest.reduction, manifest.hidden_floor)
        else:
            plain += layer.n * kernel_volume
            attention += attention_param_count(layer.c, 1, layer.n, manifest.reduction, manifest.hidden_floor)
    classifier = manifest.head_channels * manifest.num_classes + manifest.num_classes
    return ParamBreakdown(warehouse_cells, attention, plain, classifier)


def _count_graph(graph: ModelGraph) -> ParamBreakdown:
    counts = {"warehouse": 0, "attention": 0, "layer": 0, "classifier": 0}
    for name, array in graph.parameters():
        counts[name.split("/")[0]] += array.size
    return ParamBreakdown(counts["warehouse"], counts["attention"], counts["layer"], counts["classifier"])


def count_params(source: Union[ModelGraph, ModelManifest]) -> ParamBreakdown:
    """
    Exact parameter counts.

    Args:
        source: A built ModelGraph (counts its arrays) or a ModelManifest
            (pure arithmetic over the plans); both give the same numbers

    Returns:
        ParamBreakdown; the zero cell contributes nothing
    """
    if isinstance(source, ModelGraph):
        breakdown = _count_graph(source)
    elif isinstance(source, ModelManifest):
        breakdown = _count_manifest(source)
    else:
        raise TypeError(f"count_params expects a ModelGraph or ModelManifest, got {type(source).__name__}")
    logger.debug(f"Parameter breakdown: {breakdown.as_dict()}")
    return breakdown


def verify_budget(plan: PartitionPlan, expected: Optional[Union[Fraction, str, int]] = None) -> Fraction:
    """
    Check n / m_t against the configured budget.

    Args:
        plan: Partition plan
        expected: Budget to compare with; the plan's own b when None

    Returns:
        The exact rational n / m_t

    Raises:
        BudgetViolationError: On mismatch
    """
    actual = Fraction(plan.n, plan.m_t)
    target = plan.b if expected is None else parse_rational(expected)
    if actual != target:
        raise BudgetViolationError(
            f"Group '{plan.group_id}': n/m_t = {plan.n}/{plan.m_t} = {format_rational(actual)} differs from b = {format_rational(target)}",
            group_id=plan.group_id,
        )
    return actual
