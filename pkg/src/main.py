"""
Main entry point for Kernel Warehouse.
Command-line surface: plan, train, gradcheck and attn-dump.
"""
import argparse
import json
import logging
import math
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from src import __version__
from src.accounting import ParamBreakdown, count_params, format_millions, verify_budget
from src.config_manager import ConfigError, ConfigManager
from src.kw_model import ManifestError, ModelManifest, build_model, plan_manifest
from src.partition_planner import BudgetError, PartitionPlan, PlanError
from src.scheduler import TemperatureSchedule, temperature
from src.storage_manager import CheckpointError, StorageManager, TopologyMismatchError
from src.train_harness import (
    EpochMetrics,
    OptimizerConfig,
    SyntheticDataset,
    TrainingDivergedError,
    collect_attention_stats,
    evaluate,
    gen_synthetic,
    gradcheck,
    randomize_attention,
    train,
)
from src.utils.helpers import format_rational, topology_hash
from src.utils.logging_utils import format_param_count, log_budget_check, log_gradcheck_result, log_plan_summary, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_PLAN = 3
EXIT_TOPOLOGY = 4
EXIT_GRADCHECK = 5
EXIT_DIVERGED = 6

DEFAULT_CHECKPOINT = os.path.join("checkpoints", "model.kwck")


def load_run(args: argparse.Namespace) -> Tuple[ConfigManager, ModelManifest]:
    """Load a configuration, apply its logging section and parse its model manifest."""
    config = ConfigManager(args.config)
    level, log_dir = resolve_logging(args, config)
    setup_logging(log_level=level, log_dir=log_dir)
    manifest = ModelManifest.from_config(config.settings)
    return config, manifest


def build_dataset(config: ConfigManager) -> SyntheticDataset:
    data = config.settings["data"]
    return gen_synthetic(
        seed=data["seed"],
        classes=data["classes"],
        samples_per_class=data["samples_per_class"],
        image_size=data["image_size"],
        channels=data["channels"],
        noise_std=data["noise_std"],
        dtype=config.get_config_value("train.dtype", "float32"),
    )


def build_schedule(config: ConfigManager, dataset_size: int) -> TemperatureSchedule:
    batch_size = config.get_config_value("train.batch_size", 32)
    steps_per_epoch = max(1, math.ceil(dataset_size / batch_size))
    return TemperatureSchedule.from_epochs(config.get_config_value("train.warmup_epochs", 5), steps_per_epoch)


def plan_report(manifest: ModelManifest, plans: Dict[str, PartitionPlan], breakdown: ParamBreakdown) -> List[str]:
    """Human-readable plan lines."""
    lines = [f"Model: {len(manifest.conv_layers())} conv layers, {len(plans)} warehouses, {manifest.num_classes} classes"]
    for plan in plans.values():
        cell = plan.cell_shape
        lines.append(
            f"Warehouse '{plan.group_id}': cell {cell.k_e}x{cell.k_e}x{cell.c_e}x{cell.f_e}, "
            f"b={format_rational(plan.b)}, m_t={plan.m_t}, n={plan.n}, zero cell={'yes' if plan.zero_cell_enabled else 'no'}"
        )
        for spec in plan.specs:
            lines.append(f"  {spec.layer_id:<24} {str(spec):<16} m={plan.m_for(spec.layer_id)}")
    lines.append("Parameters:")
    for key, value in breakdown.as_dict().items():
        lines.append(f"  {key:<18} {format_param_count(value)}")
    return lines


def cmd_plan(args: argparse.Namespace) -> int:
    _, manifest = load_run(args)
    plans = plan_manifest(manifest)
    for plan in plans.values():
        cell = plan.cell_shape
        log_plan_summary(logger, plan.group_id, f"{cell.k_e}x{cell.k_e}x{cell.c_e}x{cell.f_e}", plan.m_t, plan.n, format_rational(plan.b))
        ratio = verify_budget(plan)
        log_budget_check(logger, plan.group_id, format_rational(ratio), True)
    breakdown = count_params(manifest)

    payload = {
        "groups": [plan.as_dict() for plan in plans.values()],
        "params": breakdown.as_dict(),
        "params_millions": format_millions(breakdown.total),
        "topology_hash": f"{topology_hash(manifest.structure()):016x}",
    }
    for line in plan_report(manifest, plans, breakdown):
        print(line)
    print("PLAN_JSON: " + json.dumps(payload, sort_keys=True, separators=(",", ":")))
    if args.json_out:
        StorageManager().write_plan_json(args.json_out, payload)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config, manifest = load_run(args)
    train_cfg = config.settings["train"]
    seed = train_cfg["seed"] if args.seed is None else args.seed
    epochs = train_cfg["epochs"] if args.epochs is None else args.epochs
    if epochs < 0:
        raise ConfigError(f"--epochs must be non-negative, got {epochs}")

    dataset = build_dataset(config)
    graph = build_model(manifest, seed=seed, dtype=train_cfg["dtype"])
    hash_value = topology_hash(manifest.structure())
    storage = StorageManager()

    start_step = 0
    if args.resume:
        start_step = storage.load_checkpoint(args.resume, graph, hash_value)
        logger.info(f"Resuming from step {start_step}")

    def report(metrics: EpochMetrics) -> None:
        print(f"epoch={metrics.epoch} loss={metrics.loss:.6f} acc={metrics.accuracy:.4f} tau={metrics.tau:.4f} lr={metrics.lr:.6f}")
        if args.metrics_out:
            storage.append_metrics(args.metrics_out, [metrics.as_dict()])

    history = train(
        graph,
        dataset,
        OptimizerConfig(**train_cfg["optimizer"]),
        build_schedule(config, len(dataset)),
        epochs,
        batch_size=train_cfg["batch_size"],
        seed=seed,
        lr_schedule=train_cfg["lr_schedule"],
        start_step=start_step,
        on_epoch=report,
    )
    final_step = history[-1].step if history else start_step
    storage.save_checkpoint(graph, args.out, final_step, hash_value)

    tau = temperature(final_step, build_schedule(config, len(dataset)))
    loss, accuracy = evaluate(graph, dataset, tau, train_cfg["batch_size"], seed=seed)
    print(f"final step={final_step} loss={loss:.6f} acc={accuracy:.4f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config, manifest = load_run(args)
    check = dict(config.settings["gradcheck"])
    for key in ("eps", "tau", "threshold"):
        if getattr(args, key) is not None:
            check[key] = getattr(args, key)
    if check["eps"] <= 0:
        raise ConfigError(f"--eps must be positive, got {check['eps']}")

    graph = build_model(manifest, seed=config.get_config_value("train.seed", 0), dtype="float64")
    randomize_attention(graph, check["attention_std"], seed=check["seed"])
    dataset = build_dataset(config)
    rng = np.random.default_rng(check["seed"])
    picked = dataset.subset(rng.choice(len(dataset), size=min(check["batch_size"], len(dataset)), replace=False))

    result = gradcheck(
        graph,
        (picked.images, picked.labels),
        eps=check["eps"],
        tau=check["tau"],
        num_coords=check["num_coords"],
        seed=check["seed"],
    )
    log_gradcheck_result(logger, result.max_rel_error, check["threshold"], result.worst_parameter, result.coords_checked)
    print(f"max_rel_error={result.max_rel_error:.6e} worst={result.worst_parameter} coords={result.coords_checked}")
    if result.max_rel_error > check["threshold"]:
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_attn_dump(args: argparse.Namespace) -> int:
    config, manifest = load_run(args)
    graph = build_model(manifest, seed=0, dtype=config.get_config_value("train.dtype", "float32"))
    storage = StorageManager()
    step = storage.load_checkpoint(args.checkpoint, graph, topology_hash(manifest.structure()))

    dataset = build_dataset(config)
    tau = args.tau if args.tau is not None else temperature(step, build_schedule(config, len(dataset)))
    if not graph.plans:
        logger.warning("Model has no warehouses; nothing to dump")
        return EXIT_OK

    stats = collect_attention_stats(graph, dataset, tau, config.get_config_value("train.batch_size", 32))
    for group_id, plan in graph.plans.items():
        path = storage.write_attention_csv(args.out, plan, stats[group_id])
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernel-warehouse",
        description="Kernel Warehouse - parameter-efficient dynamic convolution on numpy",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  kernel-warehouse plan Config/resnet18_kw.json          # Warehouse sizes and parameter counts
  kernel-warehouse train Config/settings.json --epochs 5 # Train the toy network
  kernel-warehouse gradcheck Config/settings.json        # Compare analytic and numeric gradients
  kernel-warehouse attn-dump checkpoints/model.kwck --config Config/settings.json --out attn
        """
    )
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    parser.add_argument("--log-dir", default=None, help="Directory for log files (default: logging.log_dir)")
    parser.add_argument("--version", action="version", version=f"Kernel Warehouse v{__version__}")

    sub = parser.add_subparsers(dest="command", required=True)

    plan = sub.add_parser("plan", help="Plan warehouses and count parameters")
    plan.add_argument("config", help="Path to the JSON configuration")
    plan.add_argument("--json-out", default=None, help="Also write the machine-readable plan to this file")
    plan.set_defaults(handler=cmd_plan)

    train_cmd = sub.add_parser("train", help="Train on the synthetic dataset")
    train_cmd.add_argument("config", help="Path to the JSON configuration")
    train_cmd.add_argument("--seed", type=int, default=None, help="Override train.seed")
    train_cmd.add_argument("--epochs", type=int, default=None, help="Override train.epochs")
    train_cmd.add_argument("--out", default=DEFAULT_CHECKPOINT, help=f"Checkpoint path (default: {DEFAULT_CHECKPOINT})")
    train_cmd.add_argument("--metrics-out", default=None, help="Append per-epoch metrics as JSON lines")
    train_cmd.add_argument("--resume", default=None, help="Checkpoint to continue from")
    train_cmd.set_defaults(handler=cmd_train)

    check = sub.add_parser("gradcheck", help="Finite-difference gradient check in float64")
    check.add_argument("config", help="Path to the JSON configuration")
    check.add_argument("--eps", type=float, default=None, help="Override gradcheck.eps")
    check.add_argument("--tau", type=float, default=None, help="Override gradcheck.tau")
    check.add_argument("--threshold", type=float, default=None, help="Override gradcheck.threshold")
    check.set_defaults(handler=cmd_gradcheck)

    dump = sub.add_parser("attn-dump", help="Write mean attention per warehouse as CSV")
    dump.add_argument("checkpoint", help="Checkpoint written by train")
    dump.add_argument("--config", required=True, help="Configuration the checkpoint was trained with")
    dump.add_argument("--out", required=True, help="Output directory")
    dump.add_argument("--tau", type=float, default=None, help="Temperature (default: schedule value at the stored step)")
    dump.set_defaults(handler=cmd_attn_dump)
    return parser


def resolve_logging(args: argparse.Namespace, config: Optional[ConfigManager] = None) -> Tuple[str, str]:
    """Logging level and directory: command-line flags, then environment, then the config file."""
    level = os.getenv("KW_LOG_LEVEL") or (config.get_config_value("logging.level", "INFO") if config else "INFO")
    if args.debug:
        level = "DEBUG"
    log_dir = args.log_dir or os.getenv("KW_LOG_DIR") or (config.get_config_value("logging.log_dir", "logs") if config else "logs")
    return level, log_dir


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for the script.

    Returns:
        Process exit code
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    load_dotenv()
    level, log_dir = resolve_logging(args)
    setup_logging(log_level=level, log_dir=log_dir)

    try:
        logger.debug(f"Running command '{args.command}'")
        return args.handler(args)
    except TopologyMismatchError as e:
        logger.critical(f"Checkpoint does not match the configured model: {e}")
        return EXIT_TOPOLOGY
    except BudgetError as e:
        logger.critical(f"Infeasible budget: {e} (nearest valid b: {format_rational(e.suggested_b)})")
        return EXIT_PLAN
    except PlanError as e:
        where = f" in layer '{e.layer_id}'" if e.layer_id else ""
        logger.critical(f"Planning failed{where}: {e}")
        return EXIT_PLAN
    except (ConfigError, ManifestError, CheckpointError) as e:
        logger.critical(f"Configuration error: {e}")
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        logger.critical(str(e))
        return EXIT_DIVERGED
    except KeyboardInterrupt:
        logger.info("Process interrupted by user.")
        return EXIT_UNEXPECTED
    except Exception as e:
        logger.critical(f"An unexpected critical error occurred: {e}", exc_info=True)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
