"""
Desk-scale training harness.
Synthetic data, SGD with momentum, the epoch loop, finite-difference
gradient checks and attention statistics.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.kw_model import ModelGraph, LossFn, cross_entropy_loss, forward_with_cache, loss_and_gradients
from src.scheduler import TemperatureSchedule, build_lr_schedule, temperature
from src.tensor_core import resolve_dtype
from src.utils.logging_utils import format_duration, log_epoch_metrics

logger = logging.getLogger(__name__)

# parameter name suffixes that receive weight decay
DECAYED_SUFFIXES = ("/cells", "/kernel", "/kernels", "/weight", "/w1", "/w2")


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite."""

    def __init__(self, step: int, parameter: str, max_grad: float):
        super().__init__(f"Training diverged at step {step}: loss is not finite (largest gradient {max_grad:.3e} in '{parameter}')")
        self.step = step
        self.parameter = parameter
        self.max_grad = max_grad


@dataclass(frozen=True)
class SyntheticDataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, indices: np.ndarray) -> "SyntheticDataset":
        return SyntheticDataset(self.images[indices], self.labels[indices], self.classes)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Yield (images, labels) batches, shuffled when an rng is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            picked = order[start:start + batch_size]
            yield self.images[picked], self.labels[picked]


def gen_synthetic(
    seed: int,
    classes: int,
    samples_per_class: int,
    image_size: int,
    channels: int,
    noise_std: float = 0.3,
    dtype: Any = "float32",
) -> SyntheticDataset:
    """
    Labeled images built from smooth class templates plus Gaussian noise.
    Each class and channel sums two low-frequency 2-D sinusoids with random
    frequencies, phases and amplitudes.

    Args:
        seed: Seed for templates and noise
        classes: Number of classes (>= 2)
        samples_per_class: Items per class
        image_size: Square image side
        channels: Channels per image
        noise_std: Standard deviation of the additive noise

    Returns:
        SyntheticDataset with labels grouped by class
    """
    if classes < 2:
        raise ValueError(f"Synthetic data needs at least 2 classes, got {classes}")
    if samples_per_class < 1 or image_size < 1 or channels < 1:
        raise ValueError(f"Invalid synthetic data shape: {samples_per_class} samples, {image_size}px, {channels} channels")
    rng = np.random.default_rng(seed)
    grid = np.arange(image_size) / image_size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")

    templates = np.zeros((classes, channels, image_size, image_size))
    for cls in range(classes):
        for ch in range(channels):
            for _ in range(2):
                fy, fx = rng.integers(0, 4, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                amplitude = rng.uniform(0.5, 1.5)
                templates[cls, ch] += amplitude * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)

    labels = np.repeat(np.arange(classes), samples_per_class)
    noise = rng.standard_normal((labels.shape[0], channels, image_size, image_size))
    images = templates[labels] + noise_std * noise
    logger.debug(f"Generated synthetic dataset: {labels.shape[0]} items, {classes} classes, {channels}x{image_size}x{image_size}")
    return SyntheticDataset(images.astype(resolve_dtype(dtype)), labels, classes)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4


class SGD:
    """
    SGD with momentum. Weight decay touches warehouse cells, conv kernels and
    FC weights only; biases and BatchNorm parameters are not decayed.
    """

    def __init__(self, graph: ModelGraph, config: OptimizerConfig):
        self.graph = graph
        self.config = config
        self.velocity = {name: np.zeros_like(array) for name, array in graph.parameters()}

    @staticmethod
    def decays(name: str) -> bool:
        return name.endswith(DECAYED_SUFFIXES)

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        cfg = self.config
        for name, param in self.graph.parameters():
            grad = grads[name]
            if cfg.weight_decay and self.decays(name):
                grad = grad + cfg.weight_decay * param
            velocity = self.velocity[name]
            velocity *= cfg.momentum
            velocity += grad
            param -= lr * velocity
        for warehouse in self.graph.warehouses.values():
            warehouse.bump_version()


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    tau: float
    lr: float
    step: int

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _check_finite(loss: float, grads: Dict[str, np.ndarray], step: int) -> None:
    if math.isfinite(loss):
        return
    worst_name, worst = "", 0.0
    for name, grad in grads.items():
        finite = grad[np.isfinite(grad)]
        if not np.all(np.isfinite(grad)):
            worst_name, worst = name, float("inf")
            break
        value = float(np.max(np.abs(finite))) if finite.size else 0.0
        if value > worst:
            worst_name, worst = name, value
    raise TrainingDivergedError(step, worst_name, worst)


def train(
    graph: ModelGraph,
    dataset: SyntheticDataset,
    optimizer_config: OptimizerConfig,
    schedule: TemperatureSchedule,
    epochs: int,
    batch_size: int = 32,
    seed: int = 0,
    lr_schedule: str = "cosine",
    start_step: int = 0,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> List[EpochMetrics]:
    """
    Train a graph in place.

    Args:
        graph: Model to train
        dataset: Training data
        optimizer_config: lr, momentum and weight decay
        schedule: Temperature warmup in optimizer steps
        epochs: Number of passes over the data
        batch_size: Items per step
        seed: Seed of the shuffling order
        lr_schedule: "cosine" or "constant"
        start_step: Step counter of the first batch
        on_epoch: Callback invoked with each epoch's metrics

    Returns:
        Per-epoch metrics; loss and accuracy are averaged over the epoch's batches

    Raises:
        TrainingDivergedError: If the loss becomes NaN or infinite
    """
    rng = np.random.default_rng(seed)
    optimizer = SGD(graph, optimizer_config)
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    lr_sched = build_lr_schedule(lr_schedule, optimizer_config.lr, epochs * steps_per_epoch)

    history: List[EpochMetrics] = []
    step = start_step
    started = time.time()
    for epoch in range(1, epochs + 1):
        loss_sum, correct, seen = 0.0, 0, 0
        tau = temperature(step, schedule)
        lr = lr_sched.lr(step - start_step)
        for images, labels in dataset.batches(batch_size, rng):
            tau = temperature(step, schedule)
            lr = lr_sched.lr(step - start_step)
            loss, grads, logits = loss_and_gradients(graph, images, labels, tau)
            _check_finite(loss, grads, step)
            optimizer.step(grads, lr)
            loss_sum += loss * labels.shape[0]
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            seen += labels.shape[0]
            step += 1
        metrics = EpochMetrics(epoch=epoch, loss=loss_sum / seen, accuracy=correct / seen, tau=tau, lr=lr, step=step)
        history.append(metrics)
        log_epoch_metrics(logger, metrics.as_dict())
        if on_epoch is not None:
            on_epoch(metrics)
    logger.info(f"Training finished: {epochs} epochs, {step - start_step} steps in {format_duration(time.time() - started)}")
    return history


def evaluate(graph: ModelGraph, dataset: SyntheticDataset, tau: float, batch_size: int = 32, seed: int = 0) -> Tuple[float, float]:
    """
    Loss and accuracy over a dataset.

    Items are visited in a fixed-seed permutation so that every batch mixes
    classes as in training; BatchNorm normalizes with batch statistics.

    Returns:
        Tuple of (mean loss, accuracy)
    """
    loss_sum, correct = 0.0, 0
    for images, labels in dataset.batches(batch_size, np.random.default_rng(seed)):
        logits, _ = forward_with_cache(graph, images, tau)
        loss, _ = cross_entropy_loss(logits, labels)
        loss_sum += loss * labels.shape[0]
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    return loss_sum / len(dataset), correct / len(dataset)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_parameter: str
    per_parameter: Dict[str, float] = field(default_factory=dict)
    coords_checked: int = 0


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray, scale: float) -> np.ndarray:
    floor = max(1e-3 * scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def randomize_attention(graph: ModelGraph, std: float, seed: int = 0) -> None:
    """
    Give every attention fc2 layer random weights in place, for gradient checks.
    w2 ~ N(0, std^2) and each b2 entry is +-(0.5 + U(0, 0.5)) with a random
    sign, which keeps the fc2 logits clear of the kink of |z| at zero as long
    as std is small.
    """
    if std <= 0:
        return
    rng = np.random.default_rng(seed)
    for state in graph.layers:
        params = state.attention
        if params is None:
            continue
        params.w2[...] = std * rng.standard_normal(params.w2.shape)
        magnitude = 0.5 + 0.5 * rng.random(params.b2.shape)
        params.b2[...] = np.where(rng.random(params.b2.shape) < 0.5, -magnitude, magnitude)


def gradcheck(
    graph: ModelGraph,
    batch: Tuple[np.ndarray, np.ndarray],
    eps: float = 1e-5,
    tau: float = 0.5,
    num_coords: int = 64,
    seed: int = 0,
    loss_fn: Optional[LossFn] = None,
) -> GradCheckResult:
    """
    Compare analytic gradients with central finite differences.

    Runs on a float64 copy when the graph is single precision. For every
    parameter array up to num_coords coordinates are drawn with a fixed seed;
    the relative error of a coordinate is |a - n| / max(|a|, |n|, 1e-3 * max|a|).

    Args:
        graph: Model to check
        batch: (images, labels)
        eps: Finite-difference step
        tau: Temperature during the check
        num_coords: Coordinates sampled per parameter array
        seed: Seed of the coordinate sample
        loss_fn: Optional (logits, labels) -> (loss, grad_logits)

    Returns:
        GradCheckResult with the largest error over all checked coordinates
    """
    work = graph if graph.dtype == np.float64 else graph.astype(np.float64)
    images, labels = batch
    images = np.asarray(images, dtype=np.float64)
    loss_fn = loss_fn or cross_entropy_loss

    def loss_at() -> float:
        logits, _ = forward_with_cache(work, images, tau)
        return loss_fn(logits, labels)[0]

    _, grads, _ = loss_and_gradients(work, images, labels, tau, loss_fn)
    rng = np.random.default_rng(seed)
    result = GradCheckResult(max_rel_error=0.0, worst_parameter="")

    for name, param in work.parameters():
        analytic_full = grads[name]
        flat = param.reshape(-1)
        count = min(num_coords, flat.size)
        coords = np.sort(rng.choice(flat.size, size=count, replace=False))
        numeric = np.empty(count)
        for idx, coord in enumerate(coords):
            original = flat[coord]
            flat[coord] = original + eps
            plus = loss_at()
            flat[coord] = original - eps
            minus = loss_at()
            flat[coord] = original
            numeric[idx] = (plus - minus) / (2 * eps)
        analytic = analytic_full.reshape(-1)[coords]
        scale = float(np.max(np.abs(analytic_full))) if analytic_full.size else 0.0
        errors = _relative_errors(analytic, numeric, scale)
        worst = float(errors.max()) if errors.size else 0.0
        result.per_parameter[name] = worst
        result.coords_checked += count
        if worst > result.max_rel_error or not result.worst_parameter:
            result.max_rel_error, result.worst_parameter = worst, name
        logger.debug(f"gradcheck {name}: {count} coords, max rel err {worst:.3e}")
    return result


def collect_attention_stats(
    graph: ModelGraph,
    dataset: SyntheticDataset,
    tau: float,
    batch_size: int = 32,
    seed: int = 0,
) -> Dict[str, np.ndarray]:
    """
    Mean attention per warehouse over a dataset, batched in a fixed-seed
    permutation like evaluate.

    Returns:
        Map group_id -> (m_t, q) matrix; rows follow the group-wide mixture order
    """
    sums = {group_id: np.zeros((plan.m_t, plan.q)) for group_id, plan in graph.plans.items()}
    for images, _ in dataset.batches(batch_size, np.random.default_rng(seed)):
        _, cache = forward_with_cache(graph, images, tau)
        alphas = cache.alphas()
        for group_id, plan in graph.plans.items():
            for layer_id in plan.layer_ids:
                offset = plan.mixture_offset(layer_id)
                m = plan.per_layer_m[layer_id]
                layer_alpha = alphas[layer_id].astype(np.float64)
                for item in range(layer_alpha.shape[0]):
                    sums[group_id][offset:offset + m] += layer_alpha[item]
    return {group_id: total / len(dataset) for group_id, total in sums.items()}
