"""
Step-indexed schedules for training.
Holds the attention temperature warmup and the cosine learning-rate decay.
"""
import logging
import math
from dataclasses import dataclass

logger = logging.getLogger(__name__)

LR_SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class TemperatureSchedule:
    """
    Linear temperature decay from 1 to 0 over warmup_steps.
    A warmup of 0 steps keeps the temperature at 0 from the first step,
    which disables the attention initialization.
    """

    warmup_steps: int

    def __post_init__(self):
        if not isinstance(self.warmup_steps, int) or self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be a non-negative integer, got {self.warmup_steps!r}")

    @classmethod
    def from_epochs(cls, warmup_epochs: float, steps_per_epoch: int) -> "TemperatureSchedule":
        """Convert an epoch-denominated warmup into optimizer steps."""
        if warmup_epochs < 0 or steps_per_epoch < 1:
            raise ValueError(f"Invalid warmup: {warmup_epochs} epochs at {steps_per_epoch} steps per epoch")
        return cls(warmup_steps=int(round(warmup_epochs * steps_per_epoch)))

    def tau(self, step: int) -> float:
        return temperature(step, self)


def temperature(step: int, schedule: TemperatureSchedule) -> float:
    """
    Temperature at an optimizer step.

    Args:
        step: Non-negative step index
        schedule: Warmup schedule

    Returns:
        max(0, 1 - step / warmup_steps)
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if schedule.warmup_steps == 0 or step >= schedule.warmup_steps:
        return 0.0
    return 1.0 - step / schedule.warmup_steps


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine annealing of the learning rate from base_lr to 0 over total_steps."""

    base_lr: float
    total_steps: int

    def lr(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.base_lr
        progress = min(step, self.total_steps) / self.total_steps
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class ConstantSchedule:
    base_lr: float

    def lr(self, step: int) -> float:
        return self.base_lr


def build_lr_schedule(kind: str, base_lr: float, total_steps: int):
    """
    Create a learning-rate schedule by name.

    Args:
        kind: "cosine" or "constant"
        base_lr: Initial learning rate
        total_steps: Number of optimizer steps in the run

    Raises:
        ValueError: For an unknown schedule name
    """
    if kind == "cosine":
        return CosineSchedule(base_lr=base_lr, total_steps=total_steps)
    if kind == "constant":
        return ConstantSchedule(base_lr=base_lr)
    raise ValueError(f"Unknown learning-rate schedule '{kind}'. Expected one of {list(LR_SCHEDULES)}")
