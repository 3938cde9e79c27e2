"""
Kernel cell warehouse.
Stores the n learnable cells of one sharing group and the implicit zero cell.
"""
import logging
from enum import Enum
from typing import Any, List, Union

import numpy as np

from src.partition_planner import CellShape, PartitionPlan
from src.tensor_core import resolve_dtype

logger = logging.getLogger(__name__)


class InitScheme(str, Enum):
    KAIMING_NORMAL = "kaiming_normal"
    ZERO = "zero"


class Warehouse:
    """
    The learnable cells e_1..e_n of a group, stored as an (n, cell volume) array.
    Each row is laid out as a small (f_e, c_e, k_e, k_e) kernel. When the zero
    cell is enabled it is addressed as index n+1 and never stored.
    """

    def __init__(self, group_id: str, cell_shape: CellShape, cells: np.ndarray, zero_cell_enabled: bool):
        if cells.ndim != 2 or cells.shape[1] != cell_shape.volume:
            raise ValueError(f"Warehouse '{group_id}': cells shape {cells.shape} does not match cell volume {cell_shape.volume}")
        self.group_id = group_id
        self.cell_shape = cell_shape
        self.cells = cells
        self.zero_cell_enabled = zero_cell_enabled
        self.version = 0

    @property
    def n(self) -> int:
        return self.cells.shape[0]

    @property
    def q(self) -> int:
        return self.n + 1 if self.zero_cell_enabled else self.n

    @property
    def param_count(self) -> int:
        # the zero cell is not a parameter
        return self.n * self.cell_shape.volume

    @property
    def dtype(self) -> np.dtype:
        return self.cells.dtype

    def cell_view(self, j: int) -> np.ndarray:
        """
        Read-only view of cell j (1-based); j = n+1 is the zero cell when enabled.

        Raises:
            IndexError: If j is out of range
        """
        if 1 <= j <= self.n:
            view = self.cells[j - 1].view()
            view.flags.writeable = False
            return view
        if j == self.n + 1 and self.zero_cell_enabled:
            zero = np.zeros(self.cell_shape.volume, dtype=self.cells.dtype)
            zero.flags.writeable = False
            return zero
        raise IndexError(f"Cell index {j} out of range for warehouse '{self.group_id}' with n={self.n} (zero cell {'on' if self.zero_cell_enabled else 'off'})")

    def as_blocks(self) -> np.ndarray:
        """View of the cells as an (n, f_e, c_e, k_e, k_e) stack."""
        return self.cells.reshape((self.n,) + self.cell_shape.array_shape)

    def bump_version(self) -> int:
        self.version += 1
        return self.version

    def astype(self, dtype: Any) -> "Warehouse":
        copy = Warehouse(self.group_id, self.cell_shape, self.cells.astype(resolve_dtype(dtype)), self.zero_cell_enabled)
        copy.version = self.version
        return copy

    def __repr__(self) -> str:
        return f"Warehouse(group_id={self.group_id!r}, n={self.n}, cell={self.cell_shape}, zero_cell={self.zero_cell_enabled})"


def cell_fan_ins(plan: PartitionPlan) -> List[int]:
    """
    Fan-in of the layer that one-to-one assignment maps to each cell.
    Cell j serves group-wide mixture j; cells beyond m_t take the largest fan-in.
    """
    owners: List[int] = []
    for spec in plan.specs:
        owners.extend([spec.fan_in] * plan.per_layer_m[spec.layer_id])
    largest = max(spec.fan_in for spec in plan.specs)
    return [owners[j] if j < len(owners) else largest for j in range(plan.n)]


def construct_warehouse(
    plan: PartitionPlan,
    init: Union[InitScheme, str] = InitScheme.KAIMING_NORMAL,
    seed: Union[int, np.random.Generator, None] = 0,
    dtype: Any = np.float32,
) -> Warehouse:
    """
    Allocate and initialize the warehouse of a plan.

    Args:
        plan: Partition plan of the group
        init: "kaiming_normal" draws N(0, 2 / fan_in) per cell, "zero" fills zeros
        seed: Integer seed or an existing numpy Generator
        dtype: Scalar type of the cells

    Returns:
        Warehouse with plan.n cells
    """
    scheme = InitScheme(init)
    dtype = resolve_dtype(dtype)
    volume = plan.cell_shape.volume

    if scheme is InitScheme.ZERO:
        cells = np.zeros((plan.n, volume), dtype=dtype)
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        std = np.sqrt(2.0 / np.asarray(cell_fan_ins(plan), dtype=np.float64))
        cells = (rng.standard_normal((plan.n, volume)) * std[:, None]).astype(dtype)

    logger.debug(f"Constructed warehouse '{plan.group_id}': {plan.n} cells of {plan.cell_shape} ({scheme.value})")
    return Warehouse(plan.group_id, plan.cell_shape, cells, plan.zero_cell_enabled)
