"""
Per-layer attention for warehouse-backed convolutions.
GAP -> FC -> ReLU -> FC produces m sets of q logits, normalized set by set by
the contrasting-driven attention function mixed with the beta assignment
under a decaying temperature.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from src.partition_planner import PartitionPlan, PlanError
from src.scheduler import TemperatureSchedule, temperature
from src.tensor_core import (
    ShapeError,
    fc_backward,
    fc_forward,
    global_avg_pool,
    global_avg_pool_backward,
    relu,
    relu_backward,
    resolve_dtype,
    softmax,
)

logger = logging.getLogger(__name__)

__all__ = [
    "AttentionFunction",
    "AttentionParams",
    "BetaAssignment",
    "BetaStrategy",
    "InfeasibleStrategyError",
    "TemperatureSchedule",
    "attention_backward",
    "attention_forward",
    "attention_forward_train",
    "caf",
    "caf_backward",
    "hidden_width",
    "init_attention_params",
    "init_beta",
    "temperature",
]


class InfeasibleStrategyError(PlanError):
    """Raised when a beta strategy cannot be realized for a plan's n and m_t."""


class AttentionFunction(str, Enum):
    CAF = "caf"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    RELU_NORM = "relu_norm"


class Fc2Init(str, Enum):
    BETA = "beta"
    ZERO = "zero"
    NORMAL = "normal"


@dataclass(frozen=True)
class BetaStrategy:
    """Cell-to-mixture initialization strategy."""

    kind: str = "one_to_one"
    k: int = 1

    KINDS = ("one_to_one", "all_to_one", "k_to_one", "one_to_many")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"Unknown beta strategy '{self.kind}'. Expected one of {list(self.KINDS)}")
        if not isinstance(self.k, int) or self.k < 1:
            raise ValueError(f"Beta strategy '{self.kind}' needs a positive integer parameter, got {self.k!r}")

    @classmethod
    def parse(cls, text: Union[str, "BetaStrategy"]) -> "BetaStrategy":
        """Parse "one_to_one", "all_to_one", "k_to_one:K" or "one_to_many:R"."""
        if isinstance(text, BetaStrategy):
            return text
        kind, _, arg = str(text).strip().partition(":")
        if kind in ("k_to_one", "one_to_many"):
            if not arg:
                raise ValueError(f"Beta strategy '{kind}' needs a parameter, for example '{kind}:2'")
            try:
                return cls(kind, int(arg))
            except ValueError as e:
                raise ValueError(f"Invalid beta strategy '{text}': {e}") from e
        if arg:
            raise ValueError(f"Beta strategy '{kind}' takes no parameter, got '{text}'")
        return cls(kind)

    def __str__(self) -> str:
        if self.kind in ("k_to_one", "one_to_many"):
            return f"{self.kind}:{self.k}"
        return self.kind


@dataclass(frozen=True)
class BetaAssignment:
    layer_id: str
    matrix: np.ndarray
    strategy: BetaStrategy

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def q(self) -> int:
        return self.matrix.shape[1]


class AttentionParams:
    """Weights of one layer's attention module: w1 (hidden, c), b1, w2 (m*q, hidden), b2."""

    def __init__(self, layer_id: str, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray, m: int, q: int):
        if w2.shape != (m * q, w1.shape[0]) or b2.shape != (m * q,) or b1.shape != (w1.shape[0],):
            raise ShapeError(f"Attention '{layer_id}': inconsistent shapes w1 {w1.shape}, b1 {b1.shape}, w2 {w2.shape}, b2 {b2.shape} for m={m}, q={q}")
        self.layer_id = layer_id
        self.w1 = w1
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2
        self.m = m
        self.q = q

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def param_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def astype(self, dtype: Any) -> "AttentionParams":
        dtype = resolve_dtype(dtype)
        return AttentionParams(self.layer_id, self.w1.astype(dtype), self.b1.astype(dtype), self.w2.astype(dtype), self.b2.astype(dtype), self.m, self.q)


def hidden_width(c: int, reduction: int = 16, floor: int = 8) -> int:
    """Hidden width of the attention bottleneck: max(ceil(c / reduction), floor)."""
    return max(math.ceil(c / reduction), floor)


def attention_param_count(c: int, m: int, q: int, reduction: int = 16, floor: int = 8) -> int:
    """Weights plus biases of both FC layers."""
    hidden = hidden_width(c, reduction, floor)
    return c * hidden + hidden + hidden * m * q + m * q


def init_beta(plan: PartitionPlan, strategy: Union[BetaStrategy, str] = "one_to_one") -> Dict[str, BetaAssignment]:
    """
    Build the binary beta matrices of every layer in a group.

    Args:
        plan: Partition plan of the group
        strategy: one_to_one (default), all_to_one, k_to_one:K or one_to_many:R

    Returns:
        Map layer_id -> BetaAssignment with m rows and q columns

    Raises:
        InfeasibleStrategyError: If the strategy needs more cells than the warehouse has
    """
    strategy = BetaStrategy.parse(strategy)
    n, m_t, q = plan.n, plan.m_t, plan.q
    group = np.zeros((m_t, q), dtype=np.float64)

    if strategy.kind == "one_to_one":
        for g in range(m_t):
            # mixtures past n fall onto the zero cell, which exists whenever n < m_t
            group[g, g if g < n else n] = 1.0
    elif strategy.kind == "all_to_one":
        group[:, :n] = 1.0
    elif strategy.kind == "k_to_one":
        if strategy.k * m_t > n:
            raise InfeasibleStrategyError(
                f"Group '{plan.group_id}': {strategy} needs {strategy.k * m_t} cells but the warehouse has n={n}",
                group_id=plan.group_id,
            )
        for g in range(m_t):
            group[g, g * strategy.k:(g + 1) * strategy.k] = 1.0
    else:
        needed = -(-m_t // strategy.k)
        if needed > n:
            raise InfeasibleStrategyError(
                f"Group '{plan.group_id}': {strategy} needs {needed} cells but the warehouse has n={n}",
                group_id=plan.group_id,
            )
        for g in range(m_t):
            group[g, g // strategy.k] = 1.0

    assignments = {}
    for spec in plan.specs:
        offset = plan.mixture_offset(spec.layer_id)
        m = plan.per_layer_m[spec.layer_id]
        matrix = group[offset:offset + m].copy()
        matrix.flags.writeable = False
        assignments[spec.layer_id] = BetaAssignment(spec.layer_id, matrix, strategy)
    logger.debug(f"Initialized beta for group '{plan.group_id}' with {strategy}")
    return assignments


def init_attention_params(
    layer_id: str,
    c: int,
    m: int,
    q: int,
    beta: Optional[BetaAssignment] = None,
    reduction: int = 16,
    floor: int = 8,
    fc2_init: Union[Fc2Init, str] = Fc2Init.BETA,
    rng: Optional[np.random.Generator] = None,
    dtype: Any = np.float32,
) -> AttentionParams:
    """
    Initialize one attention module.
    w1 ~ N(0, 2 / c) and b1 = 0. w2 = 0 with b2 set to the flattened beta rows
    ("beta"), to zero ("zero"), or w2 and b2 drawn from N(0, 0.01^2) ("normal").
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    dtype = resolve_dtype(dtype)
    policy = Fc2Init(fc2_init)
    hidden = hidden_width(c, reduction, floor)

    w1 = (rng.standard_normal((hidden, c)) * math.sqrt(2.0 / c)).astype(dtype)
    b1 = np.zeros(hidden, dtype=dtype)
    w2 = np.zeros((m * q, hidden), dtype=dtype)
    b2 = np.zeros(m * q, dtype=dtype)

    if policy is Fc2Init.BETA:
        if beta is None or beta.matrix.shape != (m, q):
            raise ShapeError(f"Attention '{layer_id}': fc2_init 'beta' needs a beta matrix of shape {(m, q)}")
        b2 = beta.matrix.reshape(-1).astype(dtype)
    elif policy is Fc2Init.NORMAL:
        w2 = (rng.standard_normal((m * q, hidden)) * 0.01).astype(dtype)
        b2 = (rng.standard_normal(m * q) * 0.01).astype(dtype)

    return AttentionParams(layer_id, w1, b1, w2, b2, m, q)


def _normalize(z: np.ndarray, function: AttentionFunction) -> np.ndarray:
    if function is AttentionFunction.SOFTMAX:
        return softmax(z, axis=-1)
    if function is AttentionFunction.SIGMOID:
        return 1.0 / (1.0 + np.exp(-z))
    total = np.abs(z).sum(axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1)
    numerator = z if function is AttentionFunction.CAF else np.maximum(z, 0)
    return np.where(total > 0, numerator / safe, 0).astype(z.dtype, copy=False)


def _normalize_backward(grad_g: np.ndarray, z: np.ndarray, function: AttentionFunction) -> np.ndarray:
    if function is AttentionFunction.SOFTMAX:
        s = softmax(z, axis=-1)
        return s * (grad_g - (grad_g * s).sum(axis=-1, keepdims=True))
    if function is AttentionFunction.SIGMOID:
        s = 1.0 / (1.0 + np.exp(-z))
        return grad_g * s * (1 - s)

    total = np.abs(z).sum(axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1)
    if function is AttentionFunction.CAF:
        g = z / safe
        direct = grad_g / safe
    else:
        g = np.maximum(z, 0) / safe
        direct = np.where(z > 0, grad_g, 0) / safe
    # d(sum|z|)/dz = sign(z), subgradient 0 at z = 0
    coupling = np.sign(z) * (grad_g * g).sum(axis=-1, keepdims=True) / safe
    return np.where(total > 0, direct - coupling, 0).astype(z.dtype, copy=False)


def attention_activation(z: np.ndarray, tau: float, beta: np.ndarray, function: Union[AttentionFunction, str] = AttentionFunction.CAF) -> np.ndarray:
    """alpha = tau * beta + (1 - tau) * g(z), applied along the last axis."""
    function = AttentionFunction(function)
    g = _normalize(z, function)
    return (tau * beta + (1.0 - tau) * g).astype(z.dtype, copy=False)


def attention_activation_backward(grad_alpha: np.ndarray, z: np.ndarray, tau: float, function: Union[AttentionFunction, str] = AttentionFunction.CAF) -> np.ndarray:
    function = AttentionFunction(function)
    return ((1.0 - tau) * _normalize_backward(grad_alpha, z, function)).astype(z.dtype, copy=False)


def _as_float(values: Any) -> np.ndarray:
    array = np.asarray(values)
    return array if array.dtype.kind == "f" else array.astype(np.float64)


def caf(z: np.ndarray, tau: float, beta_row: np.ndarray) -> np.ndarray:
    """
    Contrasting-driven attention function.

    Args:
        z: Logits, normalized along the last axis
        tau: Temperature in [0, 1]
        beta_row: Binary initialization row(s) broadcastable to z

    Returns:
        tau * beta + (1 - tau) * z / sum|z|, with the second term 0 when sum|z| = 0
    """
    z = _as_float(z)
    return attention_activation(z, tau, np.asarray(beta_row, dtype=z.dtype), AttentionFunction.CAF)


def caf_backward(grad_alpha: np.ndarray, z: np.ndarray, tau: float) -> np.ndarray:
    """Exact adjoint of caf with respect to the logits."""
    z = _as_float(z)
    return attention_activation_backward(np.asarray(grad_alpha, dtype=z.dtype), z, tau, AttentionFunction.CAF)


def _check_input(x: np.ndarray, params: AttentionParams, beta: BetaAssignment) -> None:
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ShapeError(f"Attention '{params.layer_id}': input shape {x.shape} does not match {params.channels} channels")
    if beta.matrix.shape != (params.m, params.q):
        raise ShapeError(f"Attention '{params.layer_id}': beta shape {beta.matrix.shape} does not match {(params.m, params.q)}")


def attention_forward_train(
    x: np.ndarray,
    params: AttentionParams,
    tau: float,
    beta: BetaAssignment,
    function: Union[AttentionFunction, str] = AttentionFunction.CAF,
) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Attention forward pass keeping intermediates for attention_backward.

    Returns:
        Tuple of (alpha with shape (N, m, q), cache)
    """
    _check_input(x, params, beta)
    pooled = global_avg_pool(x)
    pre = fc_forward(pooled, params.w1, params.b1)
    hidden = relu(pre)
    logits = fc_forward(hidden, params.w2, params.b2).reshape(x.shape[0], params.m, params.q)
    alpha = attention_activation(logits, tau, beta.matrix.astype(x.dtype), function)
    cache = {"input_shape": x.shape, "pooled": pooled, "pre": pre, "hidden": hidden, "logits": logits}
    return alpha, cache


def attention_forward(
    x: np.ndarray,
    params: AttentionParams,
    tau: float,
    beta: BetaAssignment,
    function: Union[AttentionFunction, str] = AttentionFunction.CAF,
) -> np.ndarray:
    """
    Per-element attention matrices of a layer.

    Args:
        x: Layer input (N, C, H, W)
        params: Attention weights of the layer
        tau: Temperature
        beta: Beta assignment of the layer
        function: Normalization applied to each set of q logits

    Returns:
        alpha with shape (N, m, q)

    Raises:
        ShapeError: If the input channels or beta shape do not match
    """
    alpha, _ = attention_forward_train(x, params, tau, beta, function)
    return alpha


def attention_backward(
    grad_alpha: np.ndarray,
    cache: Dict[str, Any],
    params: AttentionParams,
    tau: float,
    function: Union[AttentionFunction, str] = AttentionFunction.CAF,
) -> Dict[str, np.ndarray]:
    """
    Adjoint of attention_forward_train.

    Returns:
        Gradients keyed "w1", "b1", "w2", "b2" and "x"
    """
    n = grad_alpha.shape[0]
    grad_logits = attention_activation_backward(grad_alpha, cache["logits"], tau, function).reshape(n, params.m * params.q)
    grad_hidden, grad_w2, grad_b2 = fc_backward(grad_logits, cache["hidden"], params.w2)
    grad_pre = relu_backward(grad_hidden, cache["pre"])
    grad_pooled, grad_w1, grad_b1 = fc_backward(grad_pre, cache["pooled"], params.w1)
    grad_x = global_avg_pool_backward(grad_pooled, cache["input_shape"])
    return {"w1": grad_w1, "b1": grad_b1, "w2": grad_w2, "b2": grad_b2, "x": grad_x}
