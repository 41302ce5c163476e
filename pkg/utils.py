import hashlib
import logging
from typing import Optional, Sequence, Type

import numpy as np
import torch

from errors import ContractError, NumericError, WLFError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def validate_finite(
    values, name: str, error_cls: Type[WLFError] = NumericError
) -> None:
    """
    Raise if any entry is NaN or infinite; the message names the first bad row
    """
    arr = values.detach().cpu().numpy() if isinstance(values, torch.Tensor) else np.asarray(values)
    if arr.size == 0 or np.all(np.isfinite(arr)):
        return
    bad = np.argwhere(~np.isfinite(arr))[0]
    raise error_cls(
        f"Non-finite values in {name}",
        details=f"first offending index {tuple(int(i) for i in bad)}",
    )


def validate_matrix(values, name: str, dim: Optional[int] = None) -> np.ndarray:
    """
    Return values as an (n, d) float64 array, checking the column count
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1 and dim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ContractError(f"{name} must be a matrix, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ContractError(f"{name} has {arr.shape[1]} columns, expected {dim}")
    return arr


def to_tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


def derive_seed(master: int, *keys: int) -> int:
    """Independent child seed for (master, keys); stable across platforms and worker counts."""
    state = np.random.SeedSequence([int(master), *[int(k) for k in keys]]).generate_state(1)
    return int(state[0])


def make_rng(master: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))


def route_times(knots: Sequence[float], t: np.ndarray) -> np.ndarray:
    """
    Index of the interval [knots[i], knots[i+1]] covering each time.
    The right endpoint of the last interval belongs to the last interval.
    """
    knots = np.asarray(knots, dtype=np.float64)
    idx = np.searchsorted(knots, np.asarray(t, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, len(knots) - 2)


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def relative_error(actual, expected, floor: float = 1e-8) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(float(np.linalg.norm(expected)), floor)
    return float(np.linalg.norm(actual - expected)) / scale


def format_seconds(seconds: float) -> str:
    """Format a duration in human-readable form"""
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, sec = divmod(seconds, 60)
    if minutes < 60:
        return f"{int(minutes)}m{sec:04.1f}s"
    hours, minutes = divmod(minutes, 60)
    return f"{int(hours)}h{int(minutes):02d}m"
