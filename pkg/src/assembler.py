"""
Kernel assembly.
Mixes warehouse cells with attention weights and tiles the mixtures back into
full convolution kernels, with exact adjoints. Also hosts the vanilla dynamic
convolution mixture, which is the same linear primitive over full kernels.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src.partition_planner import CellShape, KernelSpec, PartitionPlan
from src.tensor_core import ShapeError
from src.warehouse import Warehouse

logger = logging.getLogger(__name__)


class StaleWarehouseError(RuntimeError):
    """Raised when cells changed between the attention pass and their use."""


@dataclass(frozen=True)
class AssembledKernel:
    layer_id: str
    kernel: np.ndarray
    alpha: np.ndarray
    warehouse_version: int


def _grid(spec: KernelSpec, cell: CellShape) -> Tuple[int, int, int]:
    if not cell.divides(spec):
        raise ShapeError(f"Cell {cell} does not divide kernel {spec} of layer '{spec.layer_id}'")
    return spec.f // cell.f_e, spec.c // cell.c_e, spec.k // cell.k_e


def kernel_to_blocks(kernel: np.ndarray, spec: KernelSpec, cell: CellShape) -> np.ndarray:
    """
    Cut a (..., f, c, k, k) kernel into its m blocks in tiling order.

    Returns:
        Array (..., m, cell volume); each row laid out as (f_e, c_e, k_e, k_e)
    """
    fb, cb, r = _grid(spec, cell)
    lead = kernel.shape[:-4]
    if kernel.shape[-4:] != spec.kernel_shape:
        raise ShapeError(f"Kernel shape {kernel.shape} does not match layer '{spec.layer_id}' shape {spec.kernel_shape}")
    split = kernel.reshape(lead + (fb, cell.f_e, cb, cell.c_e, r, cell.k_e, r, cell.k_e))
    base = len(lead)
    order = tuple(range(base)) + tuple(base + a for a in (0, 2, 4, 6, 1, 3, 5, 7))
    return split.transpose(order).reshape(lead + (fb * cb * r * r, cell.volume))


def blocks_to_kernel(blocks: np.ndarray, spec: KernelSpec, cell: CellShape) -> np.ndarray:
    """Inverse of kernel_to_blocks: place m cell-sized blocks into a (..., f, c, k, k) kernel."""
    fb, cb, r = _grid(spec, cell)
    lead = blocks.shape[:-2]
    if blocks.shape[-2:] != (fb * cb * r * r, cell.volume):
        raise ShapeError(f"Blocks shape {blocks.shape} does not tile layer '{spec.layer_id}' with cell {cell}")
    split = blocks.reshape(lead + (fb, cb, r, r, cell.f_e, cell.c_e, cell.k_e, cell.k_e))
    base = len(lead)
    order = tuple(range(base)) + tuple(base + a for a in (0, 4, 1, 5, 2, 6, 3, 7))
    return np.ascontiguousarray(split.transpose(order)).reshape(lead + spec.kernel_shape)


def mix_cells(alpha: np.ndarray, stack: np.ndarray) -> np.ndarray:
    """Linear mixtures alpha (rows, n) @ stack (n, volume)."""
    if alpha.shape[-1] != stack.shape[0]:
        raise ShapeError(f"Attention width {alpha.shape[-1]} does not match {stack.shape[0]} stacked cells")
    return alpha @ stack


def _check_alpha(alpha: np.ndarray, warehouse: Warehouse, plan: PartitionPlan, layer_id: str) -> int:
    m = plan.m_for(layer_id)
    if alpha.shape[-2:] != (m, warehouse.q):
        raise ShapeError(f"Layer '{layer_id}': alpha shape {alpha.shape} does not match (m={m}, q={warehouse.q})")
    if warehouse.cell_shape != plan.cell_shape or warehouse.n != plan.n:
        raise ShapeError(f"Warehouse '{warehouse.group_id}' does not belong to plan '{plan.group_id}'")
    return m


def assemble(warehouse: Warehouse, alpha: np.ndarray, plan: PartitionPlan, layer_id: str, expected_version: Optional[int] = None) -> AssembledKernel:
    """
    Build one layer's kernel from cells and an (m, q) attention matrix.

    Args:
        warehouse: Group warehouse
        alpha: Attention matrix of the layer; the zero-cell column contributes nothing
        plan: Partition plan of the group
        layer_id: Layer to assemble
        expected_version: Warehouse version the attentions were computed against

    Returns:
        AssembledKernel with a (f, c, k, k) kernel

    Raises:
        ShapeError: If alpha does not match the layer
        StaleWarehouseError: If the warehouse changed since expected_version
    """
    _check_alpha(alpha, warehouse, plan, layer_id)
    if expected_version is not None and expected_version != warehouse.version:
        raise StaleWarehouseError(f"Warehouse '{warehouse.group_id}' is at version {warehouse.version}, attentions were computed at {expected_version}")
    mixtures = mix_cells(alpha[:, :warehouse.n], warehouse.cells)
    kernel = blocks_to_kernel(mixtures, plan.spec_for(layer_id), plan.cell_shape)
    return AssembledKernel(layer_id, kernel, alpha, warehouse.version)


def assemble_backward(grad_kernel: np.ndarray, warehouse: Warehouse, alpha: np.ndarray, plan: PartitionPlan, layer_id: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Adjoint of assemble.

    Returns:
        Tuple of (grad_cells (n, volume), grad_alpha (m, q)); the zero-cell column of grad_alpha is 0
    """
    m = _check_alpha(alpha, warehouse, plan, layer_id)
    grad_blocks = kernel_to_blocks(grad_kernel, plan.spec_for(layer_id), plan.cell_shape)
    n = warehouse.n
    grad_cells = alpha[:, :n].T @ grad_blocks
    grad_alpha = np.zeros((m, warehouse.q), dtype=grad_kernel.dtype)
    grad_alpha[:, :n] = grad_blocks @ warehouse.cells.T
    return grad_cells, grad_alpha


def assemble_batch(warehouse: Warehouse, alpha: np.ndarray, plan: PartitionPlan, layer_id: str) -> np.ndarray:
    """
    Assemble one kernel per batch element.

    Args:
        alpha: Per-element attentions (N, m, q)

    Returns:
        Kernels (N, f, c, k, k)
    """
    _check_alpha(alpha, warehouse, plan, layer_id)
    spec = plan.spec_for(layer_id)
    n = warehouse.n
    kernels = np.empty((alpha.shape[0],) + spec.kernel_shape, dtype=warehouse.dtype)
    for i in range(alpha.shape[0]):
        kernels[i] = blocks_to_kernel(mix_cells(alpha[i][:, :n], warehouse.cells), spec, plan.cell_shape)
    return kernels


def assemble_batch_backward(grad_kernels: np.ndarray, warehouse: Warehouse, alpha: np.ndarray, plan: PartitionPlan, layer_id: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Adjoint of assemble_batch. Cell gradients are summed over the batch in element order.

    Returns:
        Tuple of (grad_cells (n, volume), grad_alpha (N, m, q))
    """
    _check_alpha(alpha, warehouse, plan, layer_id)
    grad_cells = np.zeros_like(warehouse.cells)
    grad_alpha = np.zeros(alpha.shape, dtype=grad_kernels.dtype)
    for i in range(alpha.shape[0]):
        cells_i, grad_alpha[i] = assemble_backward(grad_kernels[i], warehouse, alpha[i], plan, layer_id)
        grad_cells += cells_i
    return grad_cells, grad_alpha


def dyconv_assemble(kernels: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """
    Vanilla dynamic convolution: W = sum_j alpha_j W_j.

    Args:
        kernels: Stack of n kernels (n, f, c, k, k)
        alpha: Weights, shape (n,) or (1, n)

    Returns:
        Kernel (f, c, k, k)
    """
    alpha = np.asarray(alpha)
    weights = alpha.reshape(1, -1)
    if kernels.ndim != 5 or weights.shape[1] != kernels.shape[0]:
        raise ShapeError(f"Cannot mix kernels of shape {kernels.shape} with attention of shape {alpha.shape}")
    return mix_cells(weights, kernels.reshape(kernels.shape[0], -1)).reshape(kernels.shape[1:])


def dyconv_assemble_backward(grad_kernel: np.ndarray, kernels: np.ndarray, alpha: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Adjoint of dyconv_assemble.

    Returns:
        Tuple of (grad_kernels (n, f, c, k, k), grad_alpha with the shape of alpha)
    """
    alpha = np.asarray(alpha)
    if grad_kernel.shape != kernels.shape[1:]:
        raise ShapeError(f"grad_kernel shape {grad_kernel.shape} does not match kernel shape {kernels.shape[1:]}")
    flat_grad = grad_kernel.reshape(1, -1)
    stack = kernels.reshape(kernels.shape[0], -1)
    grad_kernels = (alpha.reshape(1, -1).T @ flat_grad).reshape(kernels.shape)
    grad_alpha = (flat_grad @ stack.T).reshape(alpha.shape)
    return grad_kernels, grad_alpha
