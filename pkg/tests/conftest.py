import numpy as np
import pytest

from dataio import MarginalDataset
from field import FieldParams
from models import FieldSpec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run training-convergence checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def affine_field(weights, dt_coeff: float = 0.0, const: float = 0.0) -> FieldParams:
    """s(t, x) = <w, x> + dt_coeff * t + const, realised exactly with identity activations."""
    w = np.asarray(weights, dtype=np.float64)
    spec = FieldSpec(input_dim=w.shape[0], hidden_widths=[1], activation="identity")
    return FieldParams.from_layers(spec, [
        (np.concatenate([w, [dt_coeff]])[None, :], [0.0]),
        ([[1.0]], [const]),
    ])


def ot_field(a) -> FieldParams:
    """Exact OT potential s_t(x) = <a, x> - t |a|^2 / 2 for a translation by a."""
    a = np.asarray(a, dtype=np.float64)
    return affine_field(a, dt_coeff=-0.5 * float(a @ a))


def quadratic_field(d: int, scale: float = 0.5) -> FieldParams:
    """s(x) = scale * |x|^2 via the square activation."""
    spec = FieldSpec(input_dim=d, hidden_widths=[d], activation="square")
    first = np.concatenate([np.eye(d), np.zeros((d, 1))], axis=1)
    return FieldParams.from_layers(spec, [(first, np.zeros(d)), (scale * np.ones((1, d)), [0.0])])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def shift_dataset():
    rng = np.random.default_rng(0)
    return MarginalDataset(
        times=np.array([0.0, 1.0]),
        snapshots=[rng.normal(size=(200, 2)), rng.normal(size=(200, 2)) + np.array([3.0, 0.0])],
        name="shift",
    )


@pytest.fixture
def three_marginals():
    rng = np.random.default_rng(1)
    return MarginalDataset(
        times=np.array([0.0, 0.5, 1.0]),
        snapshots=[rng.normal(size=(150, 2)) + np.array([c, 0.0]) for c in (0.0, 1.5, 3.0)],
        name="three",
    )


@pytest.fixture
def point_masses():
    """Two (numerically) point-like marginals at 0 and a = (2, 1)."""
    return MarginalDataset(
        times=np.array([0.0, 1.0]),
        snapshots=[np.zeros((64, 2)), np.tile([2.0, 1.0], (64, 1))],
        name="points",
    )
