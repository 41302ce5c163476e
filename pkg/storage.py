import csv
import json
import logging
import platform
import struct
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from errors import ContractError, LoadError
from field import FieldParams
from models import EvalTable, FieldSpec, HistoryRecord, PathSpec, TrainHistory
from pathmodel import PathParams
from transport_eval import TrajectoryBundle
from utils import DTYPE, text_digest

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"WLF1"
BUNDLE_MAGIC = b"WLFB"
_HEADER_LEN = struct.Struct("<I")

TRACKED_PACKAGES = ("numpy", "scipy", "torch", "pydantic", "pydantic-settings", "matplotlib")


def _pack(magic: bytes, header: Dict[str, Any], arrays: List[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return magic + _HEADER_LEN.pack(len(head)) + head + body


def _unpack(path: Path, magic: bytes) -> Tuple[Dict[str, Any], np.ndarray]:
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise LoadError("File not found", details=str(path)) from e
    if raw[: len(magic)] != magic:
        raise LoadError("Not a recognised container (bad magic)", details=str(path))
    offset = len(magic)
    if len(raw) < offset + _HEADER_LEN.size:
        raise LoadError("Truncated header", details=str(path))
    (size,) = _HEADER_LEN.unpack_from(raw, offset)
    offset += _HEADER_LEN.size
    try:
        header = json.loads(raw[offset : offset + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise LoadError("Corrupt header", details=f"{path}: {e}") from e
    payload = raw[offset + size :]
    if len(payload) % 8:
        raise LoadError("Payload is not a whole number of float64 values", details=str(path))
    return header, np.frombuffer(payload, dtype="<f8").copy()


class RunStorage:
    """One directory per run with fixed file names."""

    def __init__(self):
        self.run_dir: Optional[Path] = None

    def initialize(self, output_dir: Union[str, Path]):
        """Create the run directory"""
        try:
            self.run_dir = Path(output_dir)
            existed = self.run_dir.exists()
            self.run_dir.mkdir(parents=True, exist_ok=True)
            if existed:
                logger.info(f"Run directory '{self.run_dir}' already exists, files will be overwritten")
            else:
                logger.info(f"Run directory '{self.run_dir}' created")
        except OSError as e:
            logger.error(f"Failed to initialize run directory: {e}")
            raise
        return self

    def path(self, name: str) -> Path:
        if self.run_dir is None:
            raise ContractError("Run storage is not initialized")
        return self.run_dir / name

    def save_checkpoint(
        self, step: int, field_params: FieldParams, path_params: Optional[PathParams] = None
    ) -> Path:
        """
        checkpoint_<step>.wlf: magic, uint32 header length, JSON header, then the
        parameter vectors as little-endian float64 in header order.
        """
        entries = [{"name": "field", "spec": field_params.spec.model_dump(), "count": field_params.theta.numel()}]
        arrays = [field_params.numpy()]
        if path_params is not None:
            entries.append({"name": "path", "spec": path_params.spec.model_dump(), "count": path_params.eta.numel()})
            arrays.append(path_params.numpy())
        target = self.path(f"checkpoint_{step}.wlf")
        target.write_bytes(_pack(CHECKPOINT_MAGIC, {"format": 1, "step": step, "entries": entries}, arrays))
        logger.info(f"Checkpoint written to {target}")
        return target

    def latest_checkpoint(self) -> Optional[Path]:
        found = sorted(
            self.path("").glob("checkpoint_*.wlf"),
            key=lambda p: int(p.stem.split("_")[-1]) if p.stem.split("_")[-1].isdigit() else -1,
        )
        return found[-1] if found else None

    def write_history(self, history: TrainHistory, name: str = "history.csv") -> Path:
        target = self.path(name)
        with target.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(HistoryRecord.model_fields))
            writer.writeheader()
            for record in history.records:
                writer.writerow(record.model_dump())
        return target

    def write_eval_table(self, table: EvalTable, name: str = "eval.csv") -> Path:
        target = self.path(name)
        fields = ["label", "held_out_index", "held_out_time", "seed", "w1_path", "w1_simulated", "w1_baseline"]
        with target.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for row in table.rows:
                writer.writerow({"label": table.label, **row.model_dump()})
        self.write_json("eval_summary.json", table.model_dump(exclude={"rows"}))
        return target

    def write_json(self, name: str, payload: Any) -> Path:
        target = self.path(name)
        if hasattr(payload, "model_dump_json"):
            target.write_text(payload.model_dump_json(indent=2))
        else:
            target.write_text(json.dumps(payload, indent=2, default=str))
        return target

    def write_manifest(self, command: str, config_text: str, seed: int, extra: Optional[Dict[str, Any]] = None) -> Path:
        manifest = {
            "command": command,
            "config_sha256": text_digest(config_text),
            "seed": seed,
            "created": datetime.now(timezone.utc).isoformat(),
            "python": platform.python_version(),
            "versions": package_versions(),
        }
        if extra:
            manifest.update(extra)
        # earlier commands on the same run directory are kept, oldest first
        target = self.path("manifest.json")
        if target.exists():
            try:
                earlier = json.loads(target.read_text())
            except (OSError, json.JSONDecodeError) as e:
                logger.warning(f"Ignoring unreadable manifest {target}: {e}")
                earlier = None
            if isinstance(earlier, dict):
                manifest["previous"] = earlier.pop("previous", []) + [earlier]
        return self.write_json("manifest.json", manifest)

    def write_bundle(self, bundle: TrajectoryBundle, name: str = "trajectories.csv") -> Path:
        """One row per (particle, step); a comment line records mode and status."""
        target = self.path(name)
        d = bundle.states.shape[2]
        with target.open("w", newline="") as f:
            f.write(f"# mode={bundle.mode} status={bundle.status}\n")
            writer = csv.writer(f)
            writer.writerow(["particle", "step", "t", *[f"x{j}" for j in range(d)], "log_weight"])
            for i in range(bundle.n):
                for k, t in enumerate(bundle.times):
                    writer.writerow([i, k, repr(float(t)), *[repr(float(v)) for v in bundle.states[i, k]],
                                     repr(float(bundle.log_weights[i, k]))])
        return target

    def write_bundle_binary(self, bundle: TrajectoryBundle, name: str = "trajectories.wlfb") -> Path:
        n, steps, d = bundle.states.shape
        header = {"format": 1, "n": n, "steps": steps, "d": d, "mode": bundle.mode, "status": bundle.status}
        target = self.path(name)
        target.write_bytes(_pack(BUNDLE_MAGIC, header, [bundle.times, bundle.states, bundle.log_weights]))
        return target


def load_checkpoint(path: Union[str, Path]) -> Tuple[FieldParams, Optional[PathParams], int]:
    path = Path(path)
    header, values = _unpack(path, CHECKPOINT_MAGIC)
    entries = {e["name"]: e for e in header.get("entries", [])}
    if "field" not in entries:
        raise LoadError("Checkpoint has no field parameters", details=str(path))
    expected = sum(e["count"] for e in header["entries"])
    if values.size != expected:
        raise LoadError(f"Checkpoint holds {values.size} values, header lists {expected}", details=str(path))

    offset = 0
    parsed: Dict[str, torch.Tensor] = {}
    for entry in header["entries"]:
        parsed[entry["name"]] = torch.as_tensor(values[offset : offset + entry["count"]], dtype=DTYPE)
        offset += entry["count"]

    field_params = FieldParams(theta=parsed["field"], spec=FieldSpec(**entries["field"]["spec"]))
    path_params = None
    if "path" in entries:
        path_params = PathParams(eta=parsed["path"], spec=PathSpec(**entries["path"]["spec"]))
    return field_params, path_params, int(header.get("step", 0))


def read_bundle(path: Union[str, Path]) -> TrajectoryBundle:
    path = Path(path)
    header, values = _unpack(path, BUNDLE_MAGIC)
    n, steps, d = header["n"], header["steps"], header["d"]
    if values.size != steps + n * steps * d + n * steps:
        raise LoadError("Bundle payload does not match its header", details=str(path))
    times = values[:steps]
    states = values[steps : steps + n * steps * d].reshape(n, steps, d)
    log_weights = values[steps + n * steps * d :].reshape(n, steps)
    return TrajectoryBundle(times=times, states=states, log_weights=log_weights,
                            mode=header["mode"], status=header["status"])


def read_history(path: Union[str, Path]) -> TrainHistory:
    history = TrainHistory()
    try:
        with Path(path).open(newline="") as f:
            for row in csv.DictReader(f):
                history.append(HistoryRecord(**row))
    except FileNotFoundError as e:
        raise LoadError("History file not found", details=str(path)) from e
    return history


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


# Global instance
run_storage = RunStorage()
