"""
Logging utilities for Kernel Warehouse.
Contains helper functions for consistent logging across modules.
"""
import logging
import os
from logging.handlers import TimedRotatingFileHandler
from typing import Any, Dict, List, Optional

LOG_FILE_NAME = "kernel_warehouse.log"

logger = logging.getLogger(__name__)


def log_configuration_loaded(logger: logging.Logger, config_path: str, sections: List[str]) -> None:
    """
    Log configuration loading results.

    Args:
        logger: Logger instance to use
        config_path: Path to configuration file
        sections: List of configuration sections loaded
    """
    logger.info(f"Configuration loaded from {config_path}: {len(sections)} sections ({', '.join(sections)})")


def log_plan_summary(logger: logging.Logger, group_id: str, cell_shape: str, m_t: int, n: int, budget: str) -> None:
    """
    Log the sizing of one warehouse group.

    Args:
        logger: Logger instance to use
        group_id: Warehouse group name
        cell_shape: Cell shape as k_e x k_e x c_e x f_e
        m_t: Total cells across the group's layers
        n: Warehouse cell count
        budget: Budget b as a rational string
    """
    logger.info(f"Group '{group_id}': cell {cell_shape}, m_t={m_t}, n={n}, b={budget}")
    if n < m_t:
        logger.debug(f"Group '{group_id}' uses the zero cell for {m_t - n} mixtures")


def log_budget_check(logger: logging.Logger, group_id: str, ratio: str, ok: bool) -> None:
    if ok:
        logger.debug(f"Budget verified for '{group_id}': n/m_t = {ratio}")
    else:
        logger.error(f"Budget mismatch for '{group_id}': n/m_t = {ratio}")


def log_epoch_metrics(logger: logging.Logger, metrics: Dict[str, Any]) -> None:
    """
    Log one epoch of training.

    Args:
        logger: Logger instance to use
        metrics: Record with epoch, loss, accuracy, tau and lr
    """
    logger.info(
        f"Epoch {metrics.get('epoch')}: loss={metrics.get('loss', 0.0):.4f} "
        f"acc={metrics.get('accuracy', 0.0):.4f} tau={metrics.get('tau', 0.0):.3f} lr={metrics.get('lr', 0.0):.5f}"
    )


def log_gradcheck_result(logger: logging.Logger, max_error: float, threshold: float, worst_parameter: str, coords: int) -> None:
    """
    Log the outcome of a gradient check.

    Args:
        logger: Logger instance to use
        max_error: Largest relative error found
        threshold: Acceptance threshold
        worst_parameter: Parameter holding the largest error
        coords: Number of coordinates checked
    """
    message = f"Gradient check over {coords} coordinates: max relative error {max_error:.3e} in '{worst_parameter}' (threshold {threshold:.1e})"
    if max_error <= threshold:
        logger.info(message)
    else:
        logger.error(message)


def log_checkpoint_event(logger: logging.Logger, event: str, path: str, details: Optional[str] = None) -> None:
    """
    Log checkpoint events.

    Args:
        logger: Logger instance to use
        event: Event type (saved, loaded, rejected)
        path: Checkpoint path
        details: Optional additional details
    """
    message = f"Checkpoint {event}: {path}"
    if details:
        message += f" ({details})"
    logger.info(message)


def log_attention_dump(logger: logging.Logger, group_id: str, rows: int, columns: int, file_path: str) -> None:
    logger.info(f"Wrote attention statistics for '{group_id}' ({rows}x{columns}) to {file_path}")


def format_param_count(count: int) -> str:
    """
    Format a parameter count with thousands separators and millions.

    Args:
        count: Number of parameters

    Returns:
        Formatted string (e.g., "11,928,355 (11.93M)")
    """
    return f"{count:,} ({count / 1e6:.2f}M)"


def format_duration(seconds: float) -> str:
    """
    Format duration in human-readable format.

    Args:
        seconds: Duration in seconds

    Returns:
        Formatted string (e.g., "2m 30s", "1h 5m")
    """
    if seconds < 60:
        return f"{seconds:.1f}s"

    minutes = int(seconds // 60)
    remaining_seconds = int(seconds % 60)

    if minutes < 60:
        return f"{minutes}m {remaining_seconds}s"

    hours = int(minutes // 60)
    remaining_minutes = int(minutes % 60)

    return f"{hours}h {remaining_minutes}m"


def setup_logging(log_level: str = "INFO", log_dir: Optional[str] = "logs") -> logging.Logger:
    """
    Configure console and file logging.

    Calling it again replaces the handlers it installed earlier.

    Args:
        log_level: Minimum logging level (e.g., "INFO", "DEBUG")
        log_dir: Directory to store log files; None disables the file handler

    Returns:
        The configured root logger instance.
    """
    level_name = (log_level or "INFO").upper()
    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, level_name, logging.INFO))

    for handler in list(root_logger.handlers):
        if getattr(handler, "_kernel_warehouse", False):
            root_logger.removeHandler(handler)
            handler.close()

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter('%(levelname)s: %(message)s'))
    console_handler._kernel_warehouse = True
    root_logger.addHandler(console_handler)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        # daily rotation, one week kept
        file_handler = TimedRotatingFileHandler(os.path.join(log_dir, LOG_FILE_NAME), when='midnight', interval=1, backupCount=7)
        file_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
        file_handler._kernel_warehouse = True
        root_logger.addHandler(file_handler)

    logger.debug(f"Logging configured to level {level_name}. Log files in {log_dir}")
    return root_logger
