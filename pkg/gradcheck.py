"""
Finite-difference audits of every exact derivative the solver relies on, plus the
assignment solver against brute force. Used by `check-grads` and the test suite.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from field import CotangentWeights, FieldParams, ScalarField, eval_batch, grad_inputs, grad_params, init_params
from hamiltonians import integrand, integrand_selector
from models import DiffusionSchedule, FieldSpec, PathSpec, PotentialSpec, ProblemSpec
from pathmodel import PairBatch, PathParams, init_path_params, interpolate, mean_integrand, path_gradient
from transport_eval import exact_w1
from utils import DTYPE, make_rng, relative_error, to_tensor

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
TOLERANCE = 1e-4
# parameter coordinates probed per trial by the theta and eta checks; None probes all of them
DEFAULT_COORDS: Optional[int] = 32

FIELD_SPEC = FieldSpec(input_dim=2, hidden_widths=[8, 8], time_embedding="sinusoidal", frequencies=2,
                       use_indicator=True)
PATH_SPEC = PathSpec(input_dim=2, hidden_widths=[8])

PROBLEMS: Dict[str, ProblemSpec] = {
    "w2_quadratic_potential": ProblemSpec(
        potential=PotentialSpec(kind="analytic_quadratic", quadratic=[[1.0, 0.3], [0.3, 0.5]], linear=[0.2, -0.1]),
        potential_weight=0.7,
    ),
    "wfr": ProblemSpec(kinetic="WFR", growth_weight=0.5),
    "entropic": ProblemSpec(entropic=DiffusionSchedule(kind="affine", values=[0.8, 0.3])),
}


@dataclass
class GradCheckResult:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _random_inputs(rng: np.random.Generator, n: int = 4):
    t = rng.uniform(0.05, 0.95, size=n)
    x = rng.normal(size=(n, FIELD_SPEC.input_dim))
    return t, x


def _random_field(rng: np.random.Generator) -> FieldParams:
    params = init_params(FIELD_SPEC, int(rng.integers(2**31)))
    # non-zero biases so every code path is exercised
    theta = params.theta + 0.1 * torch.as_tensor(rng.normal(size=params.theta.numel()), dtype=DTYPE)
    return FieldParams(theta=theta, spec=FIELD_SPEC)


def _values(params: FieldParams, t, x) -> np.ndarray:
    with torch.no_grad():
        return ScalarField(params.spec).value(params.theta, to_tensor(t), to_tensor(x)).numpy()


def _central(fn: Callable[[float], np.ndarray], h: float = FD_STEP) -> np.ndarray:
    return (fn(h) - fn(-h)) / (2.0 * h)


def check_grad_x(rng: np.random.Generator) -> float:
    params = _random_field(rng)
    t, x = _random_inputs(rng)
    exact = eval_batch(params, t, x).grad_x.numpy()
    fd = np.stack(
        [_central(lambda h: _values(params, t, x + h * np.eye(x.shape[1])[j])) for j in range(x.shape[1])],
        axis=1,
    )
    return relative_error(exact, fd)


def check_dt(rng: np.random.Generator) -> float:
    params = _random_field(rng)
    t, x = _random_inputs(rng)
    exact = eval_batch(params, t, x).dt.numpy()
    # the indicator is held fixed, t stays on one side of the threshold
    k = (t < 0.5).astype(np.float64)
    fd = _central(lambda h: ScalarField(params.spec).value(
        params.theta, to_tensor(t + h), to_tensor(x), to_tensor(k)).detach().numpy())
    return relative_error(exact, fd)


def check_laplacian(rng: np.random.Generator) -> float:
    params = _random_field(rng)
    t, x = _random_inputs(rng)
    exact = eval_batch(params, t, x, laplacian=True).laplacian.numpy()
    fd = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        e = np.eye(x.shape[1])[j]
        fd += _central(lambda h: eval_batch(params, t, x + h * e).grad_x.numpy()[:, j])
    return relative_error(exact, fd)


def _pick(rng: np.random.Generator, size: int, coords: Optional[int]) -> np.ndarray:
    if coords is None or coords >= size:
        return np.arange(size)
    return rng.choice(size, size=coords, replace=False)


def check_grad_params(rng: np.random.Generator, coords: Optional[int] = DEFAULT_COORDS) -> float:
    params = _random_field(rng)
    t, x = _random_inputs(rng)
    n, d = x.shape
    weights = CotangentWeights(value=rng.normal(size=n), grad_x=rng.normal(size=(n, d)),
                               dt=rng.normal(size=n), laplacian=rng.normal(size=n))
    exact = grad_params(params, t, x, None, weights)

    def objective(theta: torch.Tensor) -> float:
        fe = eval_batch(FieldParams(theta=theta, spec=params.spec), t, x, laplacian=True)
        return float(
            (to_tensor(weights.value) * fe.value).sum()
            + (to_tensor(weights.grad_x) * fe.grad_x).sum()
            + (to_tensor(weights.dt) * fe.dt).sum()
            + (to_tensor(weights.laplacian) * fe.laplacian).sum()
        )

    picked = _pick(rng, exact.shape[0], coords)
    fd = []
    for i in picked:
        e = torch.zeros_like(params.theta)
        e[i] = 1.0
        fd.append((objective(params.theta + FD_STEP * e) - objective(params.theta - FD_STEP * e)) / (2 * FD_STEP))
    return relative_error(exact[picked], fd)


def _integrand_values(problem: ProblemSpec, params: FieldParams, t, x) -> np.ndarray:
    fe = eval_batch(params, t, x, laplacian=problem.is_entropic)
    return integrand(problem, fe, to_tensor(x), to_tensor(t)).integrand.numpy()


def check_grad_inputs(problem: ProblemSpec) -> Callable[[np.random.Generator], float]:
    def check(rng: np.random.Generator) -> float:
        params = _random_field(rng)
        t, x = _random_inputs(rng)
        exact = grad_inputs(params, t, x, None, integrand_selector(problem), laplacian=problem.is_entropic)
        fd = np.stack(
            [_central(lambda h: _integrand_values(problem, params, t, x + h * np.eye(x.shape[1])[j]))
             for j in range(x.shape[1])],
            axis=1,
        )
        return relative_error(exact, fd)

    return check


def check_path_gradient(
    problem: ProblemSpec, coords: Optional[int] = DEFAULT_COORDS
) -> Callable[[np.random.Generator], float]:
    def check(rng: np.random.Generator) -> float:
        field_params = _random_field(rng)
        path_params = init_path_params(PATH_SPEC, int(rng.integers(2**31)))
        eta0 = path_params.eta + 0.1 * torch.as_tensor(rng.normal(size=path_params.eta.numel()), dtype=DTYPE)
        path_params = PathParams(eta=eta0, spec=PATH_SPEC)
        n = 4
        t = rng.uniform(0.05, 0.95, size=n)
        t_tensor = to_tensor(t)
        batch = PairBatch(
            interval=np.zeros(n, dtype=int),
            t=t_tensor,
            t_left=torch.zeros(n, dtype=DTYPE),
            t_right=torch.ones(n, dtype=DTYPE),
            x_left=to_tensor(rng.normal(size=(n, 2))),
            x_right=to_tensor(rng.normal(size=(n, 2)) + 2.0),
            k=(t_tensor < 0.5).to(DTYPE),
        )
        exact = path_gradient(problem, field_params, path_params, batch)

        def dual_part(eta: torch.Tensor) -> float:
            x_t = interpolate(path_params, batch, eta=eta).detach()
            return -float(mean_integrand(problem, FIELD_SPEC, field_params.theta, x_t, batch.t, create_graph=False))

        picked = _pick(rng, exact.shape[0], coords)
        fd = []
        for i in picked:
            e = torch.zeros_like(eta0)
            e[i] = 1.0
            fd.append((dual_part(eta0 + FD_STEP * e) - dual_part(eta0 - FD_STEP * e)) / (2 * FD_STEP))
        return relative_error(exact[picked], fd)

    return check


def check_exact_w1(rng: np.random.Generator) -> float:
    n = int(rng.integers(1, 7))
    a = rng.normal(size=(n, 2))
    b = rng.normal(size=(n, 2))
    cost = np.linalg.norm(a[:, None] - b[None, :], axis=2)
    brute = min(cost[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))
    return relative_error(exact_w1(a, b), brute)


def suites(coords: Optional[int] = DEFAULT_COORDS) -> Dict[str, Callable[[np.random.Generator], float]]:
    checks = {
        "field.grad_x": check_grad_x,
        "field.dt": check_dt,
        "field.laplacian": check_laplacian,
        "field.grad_params": lambda rng: check_grad_params(rng, coords),
    }
    for name, problem in PROBLEMS.items():
        checks[f"field.grad_inputs[{name}]"] = check_grad_inputs(problem)
        checks[f"pathmodel.path_gradient[{name}]"] = check_path_gradient(problem, coords)
    checks["transport_eval.exact_w1"] = check_exact_w1
    return checks


def run_suites(
    trials: int = 100, seed: int = 0, coords: Optional[int] = DEFAULT_COORDS
) -> List[GradCheckResult]:
    results = []
    for index, (name, check) in enumerate(suites(coords).items()):
        errors = [check(make_rng(seed, index, trial)) for trial in range(trials)]
        result = GradCheckResult(name=name, trials=trials, max_rel_error=float(max(errors)), tolerance=TOLERANCE)
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"{name}: max relative error {result.max_rel_error:.2e} over {trials} trials")
        results.append(result)
    return results
