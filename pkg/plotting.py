"""Static SVG figures: trajectory fans, marginal scatters and dual curves."""
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dataio import MarginalDataset  # noqa: E402
from errors import ContractError  # noqa: E402
from models import TrainHistory  # noqa: E402
from transport_eval import TrajectoryBundle  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Figure written to {path}")
    return path


def plot_trajectories(bundle: TrajectoryBundle, path, dataset: Optional[MarginalDataset] = None,
                      max_paths: int = 128, dims: Sequence[int] = (0, 1)) -> Path:
    """Fan of particle paths over the first two coordinates (time on the x-axis in 1-D)."""
    fig, ax = plt.subplots(figsize=(6, 5))
    shown = bundle.states[:max_paths]
    if bundle.states.shape[2] == 1:
        for path_i in shown:
            ax.plot(bundle.times, path_i[:, 0], color="tab:blue", alpha=0.3, lw=0.8)
        ax.set_xlabel("t")
        ax.set_ylabel("x")
    else:
        i, j = dims
        for path_i in shown:
            ax.plot(path_i[:, i], path_i[:, j], color="tab:blue", alpha=0.3, lw=0.8)
        ax.scatter(shown[:, 0, i], shown[:, 0, j], s=6, color="black", label="start")
        ax.scatter(shown[:, -1, i], shown[:, -1, j], s=6, color="tab:red", label="end")
        if dataset is not None:
            for t, snap in zip(dataset.times, dataset.snapshots):
                ax.scatter(snap[:, i], snap[:, j], s=2, alpha=0.2, label=f"data t={t:.2f}")
        ax.set_xlabel(f"x{i}")
        ax.set_ylabel(f"x{j}")
        ax.legend(loc="best", fontsize=7)
    ax.set_title(f"{bundle.mode} trajectories ({bundle.status})")
    return _save(fig, path)


def plot_marginals(samples: Sequence[np.ndarray], times: Sequence[float], path,
                   reference: Optional[MarginalDataset] = None) -> Path:
    """One panel per requested time with model samples and, if given, the data snapshot there."""
    if len(samples) != len(times) or not samples:
        raise ContractError("One sample cloud per requested time is required")
    fig, axes = plt.subplots(1, len(times), figsize=(3.2 * len(times), 3.2), squeeze=False)
    for ax, t, cloud in zip(axes[0], times, samples):
        cloud = np.asarray(cloud)
        if reference is not None:
            match = np.flatnonzero(np.isclose(reference.times, t))
            if match.size:
                snap = reference.snapshots[match[0]]
                if snap.shape[1] == 1:
                    ax.hist(snap[:, 0], bins=40, density=True, alpha=0.4, color="gray")
                else:
                    ax.scatter(snap[:, 0], snap[:, 1], s=2, alpha=0.3, color="gray")
        if cloud.shape[1] == 1:
            ax.hist(cloud[:, 0], bins=40, density=True, alpha=0.6, color="tab:blue")
        else:
            ax.scatter(cloud[:, 0], cloud[:, 1], s=2, alpha=0.5, color="tab:blue")
        ax.set_title(f"t = {t:.2f}")
    return _save(fig, path)


def plot_history(history: TrainHistory, path, target: Optional[float] = None) -> Path:
    if not history.records:
        raise ContractError("History is empty")
    steps = [r.step for r in history.records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r.dual for r in history.records], label="dual")
    ax.plot(steps, [r.boundary for r in history.records], label="boundary", alpha=0.6)
    ax.plot(steps, [r.integrand for r in history.records], label="integrand", alpha=0.6)
    if target is not None:
        ax.axhline(target, color="black", ls="--", lw=0.8, label="oracle")
    ax.set_xlabel("iteration")
    ax.legend(loc="best")
    return _save(fig, path)
