"""
Storage Manager module for checkpoints, metrics and attention exports.
"""
import csv
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence

import numpy as np

from src.kw_model import ModelGraph
from src.partition_planner import PartitionPlan
from src.utils.logging_utils import log_attention_dump, log_checkpoint_event

logger = logging.getLogger(__name__)

MAGIC = b"KWCK"
FORMAT_VERSION = 1
# magic, version u16, topology hash u64, scalar width u8, step u64, blob count u32
_HEADER = struct.Struct("<4sHQBQI")
_BLOB_COUNT = struct.Struct("<Q")
_SCALAR_TYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files."""


class TopologyMismatchError(CheckpointError):
    """Raised when a checkpoint was written for a different model topology."""


@dataclass(frozen=True)
class CheckpointHeader:
    version: int
    topology_hash: int
    scalar_width: int
    step: int
    blob_count: int


class StorageManager:
    """
    Manages every file the tool writes: checkpoints, metrics logs, attention CSVs and plan JSON.
    """

    def __init__(self, base_dir: str = "."):
        """
        Initialize the storage manager.

        Args:
            base_dir: Directory that relative paths are resolved against
        """
        self.base_dir = base_dir
        logger.debug(f"StorageManager initialized with base directory: {self.base_dir}")

    def _resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def _ensure_parent(self, path: str) -> None:
        parent = os.path.dirname(path)
        if parent:
            try:
                os.makedirs(parent, exist_ok=True)
            except OSError as e:
                logger.error(f"Failed to create directory {parent}: {e}")
                raise

    def save_checkpoint(self, graph: ModelGraph, path: str, step: int, topology_hash: int) -> str:
        """
        Write all parameters of a graph.

        Args:
            graph: Model whose parameters are saved in ModelGraph.parameters order
            path: Target file
            step: Optimizer step reached
            topology_hash: 64-bit hash of the model structure

        Returns:
            Path written
        """
        file_path = self._resolve(path)
        self._ensure_parent(file_path)
        scalar = np.dtype(graph.dtype).newbyteorder("<")
        params = graph.parameters()
        with open(file_path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, topology_hash, scalar.itemsize, step, len(params)))
            for _, array in params:
                fh.write(_BLOB_COUNT.pack(array.size))
                fh.write(np.ascontiguousarray(array, dtype=scalar).tobytes())
        log_checkpoint_event(logger, "saved", file_path, f"step {step}, {len(params)} blobs, hash {topology_hash:016x}")
        return file_path

    def read_checkpoint_header(self, path: str) -> CheckpointHeader:
        """
        Read and validate the fixed header.

        Raises:
            CheckpointError: For a missing file, bad magic or unsupported version
        """
        file_path = self._resolve(path)
        try:
            with open(file_path, "rb") as fh:
                raw = fh.read(_HEADER.size)
        except FileNotFoundError as e:
            raise CheckpointError(f"Checkpoint not found: {file_path}") from e
        return self._parse_header(raw, file_path)

    @staticmethod
    def _parse_header(raw: bytes, file_path: str) -> CheckpointHeader:
        if len(raw) < _HEADER.size:
            raise CheckpointError(f"Checkpoint {file_path} is truncated")
        magic, version, topology_hash, width, step, blob_count = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise CheckpointError(f"{file_path} is not a checkpoint (magic {magic!r})")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"Checkpoint {file_path} has unsupported format version {version}")
        if width not in _SCALAR_TYPES:
            raise CheckpointError(f"Checkpoint {file_path} has unsupported scalar width {width}")
        return CheckpointHeader(version, topology_hash, width, step, blob_count)

    def load_checkpoint(self, path: str, graph: ModelGraph, topology_hash: int) -> int:
        """
        Restore parameters into a graph built from the same manifest.

        Args:
            path: Checkpoint file
            graph: Target graph; arrays are overwritten in place
            topology_hash: Expected hash of the model structure

        Returns:
            The stored optimizer step

        Raises:
            TopologyMismatchError: If the stored hash differs
            CheckpointError: For malformed files or blob size mismatches
        """
        file_path = self._resolve(path)
        try:
            with open(file_path, "rb") as fh:
                data = fh.read()
        except FileNotFoundError as e:
            raise CheckpointError(f"Checkpoint not found: {file_path}") from e

        header = self._parse_header(data[:_HEADER.size], file_path)
        if header.topology_hash != topology_hash:
            log_checkpoint_event(logger, "rejected", file_path, "topology mismatch")
            raise TopologyMismatchError(
                f"Checkpoint {file_path} was written for topology {header.topology_hash:016x}, model is {topology_hash:016x}"
            )
        params = graph.parameters()
        if header.blob_count != len(params):
            raise CheckpointError(f"Checkpoint {file_path} holds {header.blob_count} blobs, model has {len(params)} parameters")

        scalar = _SCALAR_TYPES[header.scalar_width]
        offset = _HEADER.size
        for name, array in params:
            if offset + _BLOB_COUNT.size > len(data):
                raise CheckpointError(f"Checkpoint {file_path} is truncated before '{name}'")
            (count,) = _BLOB_COUNT.unpack_from(data, offset)
            offset += _BLOB_COUNT.size
            if count != array.size:
                raise CheckpointError(f"Checkpoint {file_path}: blob for '{name}' has {count} values, expected {array.size}")
            end = offset + count * scalar.itemsize
            if end > len(data):
                raise CheckpointError(f"Checkpoint {file_path} is truncated inside '{name}'")
            array[...] = np.frombuffer(data, dtype=scalar, count=count, offset=offset).reshape(array.shape)
            offset = end
        if offset != len(data):
            raise CheckpointError(f"Checkpoint {file_path} has {len(data) - offset} trailing bytes")

        log_checkpoint_event(logger, "loaded", file_path, f"step {header.step}")
        return header.step

    def append_metrics(self, path: str, records: Sequence[Dict[str, Any]]) -> str:
        """Append metric records to a JSONL file, one object per line."""
        file_path = self._resolve(path)
        self._ensure_parent(file_path)
        try:
            with open(file_path, "a", encoding="utf-8") as jf:
                for record in records:
                    json.dump(record, jf, ensure_ascii=False, sort_keys=True)
                    jf.write("\n")
        except OSError as e:
            logger.error(f"Error saving metrics to {file_path}: {e}")
            raise
        return file_path

    def write_attention_csv(self, out_dir: str, plan: PartitionPlan, stats: np.ndarray) -> str:
        """
        Write one group's mean attention matrix.

        Args:
            out_dir: Output directory
            plan: Partition plan of the group (fixes row labels and columns)
            stats: (m_t, q) matrix

        Returns:
            Path of attention_<group>.csv
        """
        if stats.shape != (plan.m_t, plan.q):
            raise ValueError(f"Attention statistics shape {stats.shape} does not match group '{plan.group_id}' ({plan.m_t}, {plan.q})")
        file_path = os.path.join(self._resolve(out_dir), f"attention_{plan.group_id}.csv")
        self._ensure_parent(file_path)

        header = ["mixture"] + [f"e_{j}" for j in range(1, plan.n + 1)]
        if plan.zero_cell_enabled:
            header.append("e_z")
        rows: List[List[str]] = []
        for layer_id in plan.layer_ids:
            offset = plan.mixture_offset(layer_id)
            for i in range(plan.per_layer_m[layer_id]):
                rows.append([f"{layer_id}#{i + 1}"] + [f"{value:.9g}" for value in stats[offset + i]])

        with open(file_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        log_attention_dump(logger, plan.group_id, stats.shape[0], stats.shape[1], file_path)
        return file_path

    def write_plan_json(self, path: str, payload: Dict[str, Any]) -> str:
        file_path = self._resolve(path)
        self._ensure_parent(file_path)
        with open(file_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        logger.info(f"Wrote plan to {file_path}")
        return file_path

    def read_metrics(self, path: str) -> List[Dict[str, Any]]:
        file_path = self._resolve(path)
        records = []
        with open(file_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        return records
