"""
Partition planner.
Groups convolutional layers into warehouse-sharing stages, derives the common
cell shape of each group and sizes its warehouse from the budget b = n / m_t.
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from src.utils.helpers import format_rational, parse_rational

logger = logging.getLogger(__name__)

# f-blocks outermost, then c-blocks, then spatial rows, then spatial columns
TILING_ORDER = ("f", "c", "row", "col")


class PlanError(ValueError):
    """Raised when a sharing group cannot be partitioned as configured."""

    def __init__(self, message: str, layer_id: Optional[str] = None, group_id: Optional[str] = None):
        super().__init__(message)
        self.layer_id = layer_id
        self.group_id = group_id


class BudgetError(PlanError):
    """Raised when b * m_t is not an integer."""

    def __init__(self, message: str, suggested_b: Fraction, group_id: Optional[str] = None):
        super().__init__(message, group_id=group_id)
        self.suggested_b = suggested_b


class StageAssignmentError(PlanError):
    """Raised when a layer is unmapped, mapped twice, or both excluded and mapped."""


@dataclass(frozen=True)
class KernelSpec:
    """Static-kernel dimensions of one convolutional layer."""

    layer_id: str
    k: int
    c: int
    f: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        for name in ("k", "c", "f", "stride"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise PlanError(f"Layer '{self.layer_id}': {name} must be a positive integer, got {value!r}", layer_id=self.layer_id)
        if not isinstance(self.pad, int) or self.pad < 0:
            raise PlanError(f"Layer '{self.layer_id}': pad must be a non-negative integer, got {self.pad!r}", layer_id=self.layer_id)

    @property
    def volume(self) -> int:
        return self.k * self.k * self.c * self.f

    @property
    def kernel_shape(self) -> Tuple[int, int, int, int]:
        return (self.f, self.c, self.k, self.k)

    @property
    def fan_in(self) -> int:
        return self.k * self.k * self.c

    def __str__(self) -> str:
        return f"{self.k}x{self.k}x{self.c}x{self.f}"


@dataclass(frozen=True)
class CellShape:
    k_e: int
    c_e: int
    f_e: int

    @property
    def volume(self) -> int:
        return self.k_e * self.k_e * self.c_e * self.f_e

    @property
    def array_shape(self) -> Tuple[int, int, int, int]:
        """Layout of one cell when viewed as a small kernel (f_e, c_e, k_e, k_e)."""
        return (self.f_e, self.c_e, self.k_e, self.k_e)

    def divides(self, spec: KernelSpec) -> bool:
        return spec.k % self.k_e == 0 and spec.c % self.c_e == 0 and spec.f % self.f_e == 0

    def cells_in(self, spec: KernelSpec) -> int:
        """Number of cells m that tile the layer's kernel."""
        if not self.divides(spec):
            raise PlanError(f"Cell {self} does not divide kernel {spec} of layer '{spec.layer_id}'", layer_id=spec.layer_id)
        return spec.volume // self.volume

    def __str__(self) -> str:
        return f"{self.k_e}x{self.k_e}x{self.c_e}x{self.f_e}"


@dataclass(frozen=True)
class ScaleDivisors:
    """Per-dimension divisors applied to the greatest common divisors."""

    spatial: int = 1
    c: int = 1
    f: int = 1

    def __post_init__(self):
        for name in ("spatial", "c", "f"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise PlanError(f"Scale divisor '{name}' must be a positive integer, got {value!r}")

    @classmethod
    def from_sequence(cls, values: Union[Sequence[int], "ScaleDivisors", None]) -> "ScaleDivisors":
        """Build from a [spatial, c, f] list."""
        if values is None:
            return cls()
        if isinstance(values, ScaleDivisors):
            return values
        values = list(values)
        if len(values) != 3:
            raise PlanError(f"scale_divisors must list [spatial, c, f], got {values}")
        return cls(*values)

    def as_list(self) -> List[int]:
        return [self.spatial, self.c, self.f]


@dataclass(frozen=True)
class TileBlock:
    """Coordinates of one cell-sized block inside a (f, c, k, k) kernel."""

    index: int
    f_start: int
    c_start: int
    row: int
    col: int
    shape: CellShape

    def slices(self) -> Tuple[slice, slice, slice, slice]:
        s = self.shape
        return (
            slice(self.f_start, self.f_start + s.f_e),
            slice(self.c_start, self.c_start + s.c_e),
            slice(self.row, self.row + s.k_e),
            slice(self.col, self.col + s.k_e),
        )


@dataclass(frozen=True)
class StageGroup:
    group_id: str
    specs: Tuple[KernelSpec, ...]

    @property
    def layer_ids(self) -> Tuple[str, ...]:
        return tuple(spec.layer_id for spec in self.specs)


@dataclass(frozen=True)
class PartitionPlan:
    """A warehouse-sharing group with its cell shape and sizing."""

    group_id: str
    specs: Tuple[KernelSpec, ...]
    cell_shape: CellShape
    per_layer_m: Dict[str, int]
    m_t: int
    b: Fraction
    n: int
    zero_cell_enabled: bool
    scale_divisors: ScaleDivisors = field(default_factory=ScaleDivisors)
    tiling_order: Tuple[str, ...] = TILING_ORDER

    @property
    def layer_ids(self) -> Tuple[str, ...]:
        return tuple(spec.layer_id for spec in self.specs)

    @property
    def q(self) -> int:
        """Attention width: real cells plus the zero cell when present."""
        return self.n + 1 if self.zero_cell_enabled else self.n

    @property
    def cell_params(self) -> int:
        return self.n * self.cell_shape.volume

    def spec_for(self, layer_id: str) -> KernelSpec:
        for spec in self.specs:
            if spec.layer_id == layer_id:
                return spec
        raise KeyError(f"Layer '{layer_id}' is not a member of group '{self.group_id}'")

    def m_for(self, layer_id: str) -> int:
        self.spec_for(layer_id)
        return self.per_layer_m[layer_id]

    def mixture_offset(self, layer_id: str) -> int:
        """Group-wide index of the layer's first linear mixture."""
        offset = 0
        for spec in self.specs:
            if spec.layer_id == layer_id:
                return offset
            offset += self.per_layer_m[spec.layer_id]
        raise KeyError(f"Layer '{layer_id}' is not a member of group '{self.group_id}'")

    def as_dict(self) -> Dict[str, object]:
        return {
            "group_id": self.group_id,
            "cell_shape": [self.cell_shape.k_e, self.cell_shape.k_e, self.cell_shape.c_e, self.cell_shape.f_e],
            "layers": [
                {"layer_id": spec.layer_id, "kernel": [spec.k, spec.k, spec.c, spec.f], "m": self.per_layer_m[spec.layer_id]}
                for spec in self.specs
            ],
            "m_t": self.m_t,
            "b": format_rational(self.b),
            "n": self.n,
            "zero_cell": self.zero_cell_enabled,
            "scale_divisors": self.scale_divisors.as_list(),
            "tiling_order": list(self.tiling_order),
        }


def compute_cdd(specs: Sequence[KernelSpec], scale_divisors: Union[ScaleDivisors, Sequence[int], None] = None) -> CellShape:
    """
    Compute the common kernel dimension divisors of a group.

    Args:
        specs: Non-empty list of layer kernels
        scale_divisors: Optional per-dimension divisors [spatial, c, f]

    Returns:
        CellShape dividing every kernel in the group

    Raises:
        PlanError: If specs is empty or a divisor does not divide its gcd
    """
    if not specs:
        raise PlanError("Cannot compute common divisors of an empty layer group")
    divisors = ScaleDivisors.from_sequence(scale_divisors)

    gcd_k = reduce(math.gcd, (spec.k for spec in specs))
    gcd_c = reduce(math.gcd, (spec.c for spec in specs))
    gcd_f = reduce(math.gcd, (spec.f for spec in specs))

    for name, gcd_value, divisor in (("spatial", gcd_k, divisors.spatial), ("c", gcd_c, divisors.c), ("f", gcd_f, divisors.f)):
        if gcd_value % divisor != 0:
            raise PlanError(
                f"Scale divisor {divisor} on '{name}' does not divide the common divisor {gcd_value} "
                f"of layers {[spec.layer_id for spec in specs]}"
            )

    cell = CellShape(k_e=gcd_k // divisors.spatial, c_e=gcd_c // divisors.c, f_e=gcd_f // divisors.f)
    logger.debug(f"Common divisors for {len(specs)} layers: {cell}")
    return cell


def nearest_valid_budget(b: Fraction, m_t: int) -> Fraction:
    """Closest budget j / m_t (j >= 1) to b; ties resolve towards the smaller budget."""
    j = max(1, round(b * m_t))
    candidates = {max(1, j - 1), j, j + 1}
    return min((Fraction(c, m_t) for c in candidates), key=lambda cand: (abs(cand - b), cand))


def plan_partition(
    group: Sequence[KernelSpec],
    b: Union[Fraction, str, int],
    scale_divisors: Union[ScaleDivisors, Sequence[int], None] = None,
    group_id: str = "group1",
) -> PartitionPlan:
    """
    Build the partition plan for one sharing group.

    Args:
        group: Member layers in order
        b: Budget n / m_t as an exact rational
        scale_divisors: Optional [spatial, c, f] divisors for the cell shape
        group_id: Name of the group

    Returns:
        PartitionPlan

    Raises:
        PlanError: For an empty group or non-positive budget
        BudgetError: If b * m_t is not an integer
    """
    if not group:
        raise PlanError(f"Group '{group_id}' has no layers", group_id=group_id)
    budget = parse_rational(b)
    if budget <= 0:
        raise PlanError(f"Group '{group_id}': budget b must be positive, got {format_rational(budget)}", group_id=group_id)

    seen = set()
    for spec in group:
        if spec.layer_id in seen:
            raise PlanError(f"Group '{group_id}': layer '{spec.layer_id}' listed twice", layer_id=spec.layer_id, group_id=group_id)
        seen.add(spec.layer_id)

    divisors = ScaleDivisors.from_sequence(scale_divisors)
    cell = compute_cdd(group, divisors)
    per_layer_m = {spec.layer_id: cell.cells_in(spec) for spec in group}
    m_t = sum(per_layer_m.values())

    n_exact = budget * m_t
    if n_exact.denominator != 1:
        suggested = nearest_valid_budget(budget, m_t)
        raise BudgetError(
            f"Group '{group_id}' (layers {', '.join(spec.layer_id for spec in group)}): "
            f"b={format_rational(budget)} gives n = {format_rational(n_exact)} cells for m_t={m_t}; "
            f"nearest valid b is {format_rational(suggested)}",
            suggested_b=suggested,
            group_id=group_id,
        )

    plan = PartitionPlan(
        group_id=group_id,
        specs=tuple(group),
        cell_shape=cell,
        per_layer_m=per_layer_m,
        m_t=m_t,
        b=budget,
        n=int(n_exact),
        zero_cell_enabled=budget < 1,
        scale_divisors=divisors,
    )
    logger.debug(f"Planned group '{group_id}': cell {cell}, m_t={m_t}, n={plan.n}, b={format_rational(budget)}")
    return plan


def reassign_stages(
    layers: Sequence[KernelSpec],
    grouping: Union[Mapping[str, str], Iterable[Tuple[str, str]]],
    excluded: Iterable[str] = (),
) -> List[StageGroup]:
    """
    Split an ordered layer list into sharing groups by an explicit map.

    Args:
        layers: All convolutional layers in network order
        grouping: Map (or sequence of pairs) layer_id -> group_id
        excluded: Layer ids that belong to no warehouse (for example the stem conv)

    Returns:
        Groups ordered by the first appearance of their layers, members in layer order

    Raises:
        StageAssignmentError: If a layer is unmapped, mapped twice, both excluded and mapped, or unknown
    """
    pairs = list(grouping.items()) if isinstance(grouping, Mapping) else list(grouping)
    excluded_ids = set(excluded)
    known = {spec.layer_id for spec in layers}

    assignment: Dict[str, str] = {}
    for layer_id, group_id in pairs:
        if layer_id not in known:
            raise StageAssignmentError(f"Grouping names unknown layer '{layer_id}'", layer_id=layer_id)
        if layer_id in excluded_ids:
            raise StageAssignmentError(f"Layer '{layer_id}' is excluded but also assigned to group '{group_id}'", layer_id=layer_id)
        if layer_id in assignment:
            raise StageAssignmentError(f"Layer '{layer_id}' is assigned more than once", layer_id=layer_id)
        assignment[layer_id] = group_id

    ordered: Dict[str, List[KernelSpec]] = {}
    for spec in layers:
        if spec.layer_id in excluded_ids:
            continue
        if spec.layer_id not in assignment:
            raise StageAssignmentError(f"Layer '{spec.layer_id}' is not assigned to any group", layer_id=spec.layer_id)
        ordered.setdefault(assignment[spec.layer_id], []).append(spec)

    groups = [StageGroup(group_id=group_id, specs=tuple(specs)) for group_id, specs in ordered.items()]
    logger.debug(f"Reassigned {len(layers)} layers into {len(groups)} groups ({len(excluded_ids)} excluded)")
    return groups


def tile_cells(spec: KernelSpec, cell: CellShape) -> List[TileBlock]:
    """
    Enumerate the cell-sized blocks of a kernel in tiling order.

    Raises:
        PlanError: If the cell does not divide the kernel
    """
    if not cell.divides(spec):
        raise PlanError(f"Cell {cell} does not divide kernel {spec} of layer '{spec.layer_id}'", layer_id=spec.layer_id)
    blocks = []
    index = 0
    for f_start in range(0, spec.f, cell.f_e):
        for c_start in range(0, spec.c, cell.c_e):
            for row in range(0, spec.k, cell.k_e):
                for col in range(0, spec.k, cell.k_e):
                    blocks.append(TileBlock(index, f_start, c_start, row, col, cell))
                    index += 1
    return blocks
