import glob
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from config import RunConfig
from errors import ConfigError, LoadError
from models import DatasetRef, PotentialSpec

logger = logging.getLogger(__name__)

_TIME_IN_NAME = re.compile(r"\d+(?:\.\d+)?")

SYNTH_KINDS = ("gaussian_shift", "gaussian_drift_3pt", "bimodal_split", "mass_change", "parabola_potential")


@dataclass
class MarginalDataset:
    """Ordered snapshots mu_{t_i} on a time axis rescaled to [0, 1]."""

    times: np.ndarray
    snapshots: List[np.ndarray]
    name: str = "dataset"
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.snapshots = [np.asarray(s, dtype=np.float64) for s in self.snapshots]
        if len(self.snapshots) < 2:
            raise ConfigError("A dataset needs at least two marginals")
        if len(self.times) != len(self.snapshots):
            raise ConfigError("One time per snapshot is required")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("Snapshot times must be strictly increasing")
        if self.times[0] != 0.0 or self.times[-1] != 1.0:
            raise ConfigError("Snapshot times must start at 0 and end at 1")
        dims = {s.shape[1] if s.ndim == 2 else -1 for s in self.snapshots}
        if len(dims) != 1 or -1 in dims:
            raise ConfigError(f"Snapshots must be matrices of one width, got widths {sorted(dims)}")
        for i, s in enumerate(self.snapshots):
            if s.shape[0] == 0:
                raise ConfigError(f"Snapshot {i} is empty")
            if not np.all(np.isfinite(s)):
                raise ConfigError(f"Snapshot {i} contains non-finite values")

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def dim(self) -> int:
        return self.snapshots[0].shape[1]

    def means(self) -> np.ndarray:
        return np.stack([s.mean(axis=0) for s in self.snapshots])

    def subset(self, indices: Sequence[int]) -> "MarginalDataset":
        """Keep some marginals on the same global time axis (first and last must stay)."""
        indices = sorted(indices)
        return MarginalDataset(
            times=self.times[indices],
            snapshots=[self.snapshots[i] for i in indices],
            name=self.name,
            metadata=dict(self.metadata),
        )

    def without(self, index: int) -> "MarginalDataset":
        if index <= 0 or index >= len(self) - 1:
            raise ConfigError(f"Only interior marginals can be left out, got index {index}")
        return self.subset([i for i in range(len(self)) if i != index])


def rescale_times(raw: Sequence[float]) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    return (raw - raw[0]) / (raw[-1] - raw[0])


def load_marginals(pattern: str, name: Optional[str] = None) -> MarginalDataset:
    """
    One CSV per timepoint; the time is the last number in the file name.
    Rows are samples, columns coordinates; '#' lines are ignored.
    """
    files = sorted(glob.glob(pattern))
    if len(files) < 2:
        raise LoadError(f"Need at least two snapshot files, found {len(files)}", details=pattern)

    entries = []
    for path in files:
        numbers = _TIME_IN_NAME.findall(Path(path).stem)
        if not numbers:
            raise LoadError("No time encoded in file name", details=path)
        try:
            data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        except ValueError as e:
            raise LoadError(f"Could not parse {path}", details=str(e)) from e
        entries.append((float(numbers[-1]), path, data))
    entries.sort(key=lambda e: e[0])

    widths = {path: data.shape[1] for _, path, data in entries}
    if len(set(widths.values())) != 1:
        listing = ", ".join(f"{Path(p).name} (d={w})" for p, w in widths.items())
        raise LoadError("Snapshots have different dimensions", details=listing)

    raw_times = [t for t, _, _ in entries]
    if len(set(raw_times)) != len(raw_times):
        dupes = [Path(p).name for t, p, _ in entries if raw_times.count(t) > 1]
        raise LoadError("Snapshot times are not strictly increasing", details=", ".join(dupes))

    dataset = MarginalDataset(
        times=rescale_times(raw_times),
        snapshots=[data for _, _, data in entries],
        name=name or Path(pattern).parent.name or "files",
        metadata={"raw_times": raw_times, "files": [p for _, p, _ in entries]},
    )
    logger.info(f"Loaded {len(dataset)} marginals of dimension {dataset.dim} from {pattern}")
    return dataset


def _vector(params: Dict[str, Any], key: str, default: Sequence[float], d: int) -> np.ndarray:
    values = list(params.get(key, default))
    if len(values) > d:
        if any(v != 0 for v in values[d:]):
            raise ConfigError(f"Parameter '{key}' has {len(values)} entries for dimension {d}")
        values = values[:d]
    return np.asarray(values + [0.0] * (d - len(values)), dtype=np.float64)


def parabola_mean(t: float, m0: np.ndarray, m1: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Mean of a constant-acceleration path x(t) = m0 + (m1 - m0) t + a (t^2 - t) / 2."""
    return m0 + (m1 - m0) * t + a * (t * t - t) / 2.0


def _gaussian(rng: np.random.Generator, n: int, mean: np.ndarray, scale: float) -> np.ndarray:
    return mean + scale * rng.standard_normal((n, mean.shape[0]))


def synth(kind: str, seed: int, n: int, d: int, params: Optional[Dict[str, Any]] = None) -> MarginalDataset:
    """Desk-scale synthetic benchmarks; deterministic per seed."""
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    axis1 = 1 if d > 1 else 0

    if kind == "gaussian_shift":
        a = _vector(params, "a", [3.0], d)
        scale = float(params.get("scale", 1.0))
        times = [0.0, 1.0]
        snaps = [_gaussian(rng, n, np.zeros(d), scale), _gaussian(rng, n, a, scale)]
        meta = {"a": a.tolist(), "scale": scale}

    elif kind == "gaussian_drift_3pt":
        m = _vector(params, "m", [3.0], d)
        delta = np.zeros(d)
        delta[axis1] = 1.0
        delta = _vector(params, "delta", delta.tolist(), d)
        scale = float(params.get("scale", 0.5))
        times = [0.0, 0.5, 1.0]
        means = [np.zeros(d), m / 2.0 + delta, m]
        snaps = [_gaussian(rng, n, mu, scale) for mu in means]
        meta = {"means": [mu.tolist() for mu in means], "scale": scale}

    elif kind == "bimodal_split":
        gap = float(params.get("gap", 4.0))
        scale = float(params.get("scale", 0.3))
        offset = np.zeros(d)
        offset[axis1] = gap / 2.0
        signs = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
        times = [0.0, 1.0]
        snaps = [
            _gaussian(rng, n, np.zeros(d), scale),
            signs[:, None] * offset + scale * rng.standard_normal((n, d)),
        ]
        meta = {"gap": gap, "scale": scale}

    elif kind == "mass_change":
        separation = float(params.get("separation", 4.0))
        w0 = float(params.get("w0", 0.8))
        w1 = float(params.get("w1", 0.2))
        scale = float(params.get("scale", 0.5))
        centre = np.zeros(d)
        centre[0] = separation / 2.0

        def mixture(weight: float) -> np.ndarray:
            n_first = int(round(weight * n))
            return np.concatenate([
                _gaussian(rng, n_first, -centre, scale),
                _gaussian(rng, n - n_first, centre, scale),
            ])

        times = [0.0, 1.0]
        snaps = [mixture(w0), mixture(w1)]
        meta = {"separation": separation, "w0": w0, "w1": w1, "scale": scale}

    elif kind == "parabola_potential":
        m0 = _vector(params, "m0", [0.0], d)
        m1 = _vector(params, "m1", [2.0], d)
        accel = np.zeros(d)
        accel[axis1] = 4.0
        a = _vector(params, "a", accel.tolist(), d)
        scale = float(params.get("scale", 0.1))
        times = [float(t) for t in params.get("times", [0.0, 0.25, 0.5, 0.75, 1.0])]
        center = bool(params.get("center", True))
        snaps = []
        for t in times:
            mean = parabola_mean(t, m0, m1, a)
            sample = scale * rng.standard_normal((n, d))
            if center:
                sample = sample - sample.mean(axis=0)
            snaps.append(sample + mean)
        meta = {"m0": m0.tolist(), "m1": m1.tolist(), "a": a.tolist(), "scale": scale}

    else:
        raise ConfigError(f"Unknown synthetic dataset '{kind}'", details=f"choose from {', '.join(SYNTH_KINDS)}")

    meta.update({"kind": kind, "seed": seed})
    return MarginalDataset(times=np.asarray(times), snapshots=snaps, name=kind, metadata=meta)


def load_dataset(ref: DatasetRef, base_dir: Union[str, Path, None] = None) -> MarginalDataset:
    if ref.source == "synthetic":
        return synth(ref.kind, ref.seed, ref.n, ref.dim, ref.params)
    pattern = ref.pattern
    if base_dir is not None and not Path(pattern).is_absolute():
        pattern = str(Path(base_dir) / pattern)
    return load_marginals(pattern)


def marginal_accelerations(times: np.ndarray, means: np.ndarray) -> np.ndarray:
    """
    Three-point divided-difference acceleration of the means at every marginal;
    the first and last marginals inherit their nearest interior value.
    """
    accel = np.zeros_like(means)
    for i in range(1, len(times) - 1):
        h_left = times[i] - times[i - 1]
        h_right = times[i + 1] - times[i]
        slope_left = (means[i] - means[i - 1]) / h_left
        slope_right = (means[i + 1] - means[i]) / h_right
        accel[i] = 2.0 * (slope_right - slope_left) / (h_left + h_right)
    accel[0] = accel[1]
    accel[-1] = accel[-2]
    return accel


def build_mean_accel_potential(dataset: MarginalDataset, held_out: Optional[int] = None) -> PotentialSpec:
    """
    Piecewise potential V_t(x) = -<x, a_t> from the acceleration of the snapshot means.

    With `held_out`, `dataset` is the full set: accelerations use every mean (including the
    held-out marginal's) while the intervals are those of the dataset without it.
    """
    if len(dataset) < 3:
        raise ConfigError("The mean-acceleration potential needs at least three marginals")
    accel = marginal_accelerations(dataset.times, dataset.means())
    if held_out is None:
        knots = dataset.times
    else:
        knots = dataset.without(held_out).times

    per_interval = []
    for left, right in zip(knots[:-1], knots[1:]):
        inside = (dataset.times >= left) & (dataset.times <= right)
        per_interval.append(accel[inside].mean(axis=0).tolist())

    metadata = {"source": "mean_acceleration", "uses_held_out_mean": held_out is not None}
    if held_out is not None:
        metadata["held_out_time"] = float(dataset.times[held_out])
        logger.info(f"Potential built with the held-out marginal at t={dataset.times[held_out]:.3f}")
    return PotentialSpec(
        kind="linear_per_interval",
        interval_times=[float(t) for t in knots],
        accelerations=per_interval,
        metadata=metadata,
    )


def _format_validation_error(e: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
    )


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError("Config file not found", details=str(path)) from e
    except json.JSONDecodeError as e:
        raise ConfigError("Config file is not valid JSON", details=f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("Config file must contain a JSON object", details=str(path))
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError("Invalid run configuration", details=_format_validation_error(e)) from e


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2))
    logger.info(f"Config written to {path}")
    return path
