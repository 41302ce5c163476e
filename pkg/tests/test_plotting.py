import numpy as np
import pytest

from errors import ContractError
from models import HistoryRecord, TrainHistory
from plotting import plot_history, plot_marginals, plot_trajectories
from transport_eval import TrajectoryBundle


def _bundle(d):
    rng = np.random.default_rng(0)
    return TrajectoryBundle(times=np.linspace(0, 1, 5), states=rng.normal(size=(4, 5, d)),
                            log_weights=np.zeros((4, 5)), mode="ode")


@pytest.mark.parametrize("d", [1, 2])
def test_trajectories(tmp_path, three_marginals, d):
    dataset = three_marginals if d == 2 else None
    target = plot_trajectories(_bundle(d), tmp_path / "traj.svg", dataset=dataset)
    assert target.read_text().lstrip().startswith("<?xml")


def test_marginals(tmp_path, three_marginals):
    samples = [s[:20] for s in three_marginals.snapshots]
    assert plot_marginals(samples, [0.0, 0.5, 1.0], tmp_path / "m.svg", reference=three_marginals).exists()
    with pytest.raises(ContractError):
        plot_marginals(samples, [0.0], tmp_path / "bad.svg")


def test_history(tmp_path):
    history = TrainHistory(records=[HistoryRecord(step=s, dual=s / 10, boundary=1.0, integrand=0.5,
                                                  grad_norm_field=1.0, grad_norm_path=0.0, seconds=0.1)
                                    for s in (1, 2, 3)])
    assert plot_history(history, tmp_path / "h.svg", target=4.5).exists()
    with pytest.raises(ContractError):
        plot_history(TrainHistory(), tmp_path / "empty.svg")
