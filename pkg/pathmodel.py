"""
Constrained path sampler: endpoint-preserving interpolation between consecutive data
marginals with a learned correction network, and Wasserstein-gradient refinement of
the sampled points.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch

from dataio import MarginalDataset
from errors import ConfigError, ContractError
from field import MLP, FieldParams, ScalarField, check_spec, grad_inputs, indicator, time_features
from hamiltonians import integrand, integrand_selector
from models import PathSpec, ProblemSpec
from utils import DTYPE, route_times, to_tensor, validate_finite

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PathParams:
    eta: torch.Tensor
    spec: PathSpec

    def __post_init__(self):
        expected = CorrectionNet(self.spec).net.n_params
        if self.eta.ndim != 1 or self.eta.numel() != expected:
            raise ContractError(
                f"Path parameter vector has {self.eta.numel()} entries, spec implies {expected}"
            )
        validate_finite(self.eta, "path parameters")

    def numpy(self) -> np.ndarray:
        return self.eta.detach().cpu().numpy().copy()


@dataclass
class PairBatch:
    """Independent draws from the two marginals bounding each sample's interval."""

    interval: np.ndarray
    t: torch.Tensor
    t_left: torch.Tensor
    t_right: torch.Tensor
    x_left: torch.Tensor
    x_right: torch.Tensor
    k: torch.Tensor

    def __len__(self) -> int:
        return self.t.shape[0]


@dataclass
class PathDraw:
    batch: PairBatch
    x_t: torch.Tensor

    @property
    def t(self) -> torch.Tensor:
        return self.batch.t

    @property
    def interval(self) -> np.ndarray:
        return self.batch.interval


class CorrectionNet:
    def __init__(self, spec: PathSpec):
        self.spec = spec
        self.net = MLP(spec.in_width, spec.hidden_widths, spec.out_width, spec.activation)

    def __call__(self, eta: torch.Tensor, batch: PairBatch) -> torch.Tensor:
        parts = [time_features(self.spec, batch.t), batch.x_left, batch.x_right]
        if self.spec.use_indicator:
            parts.append(batch.k.reshape(-1, 1))
        return self.net(eta, torch.cat(parts, dim=1))


def init_path_params(spec: PathSpec, seed: int) -> PathParams:
    """Hidden layers use the field's initialization; the output layer starts at zero
    so the initial sampler is the straight interpolation."""
    spec = check_spec(spec)
    net = CorrectionNet(spec).net
    eta = net.init(seed)
    fan_out, fan_in = net.shapes[-1]
    eta[-(fan_out * fan_in + fan_out):] = 0.0
    return PathParams(eta=eta, spec=spec)


def zero_path_params(spec: PathSpec) -> PathParams:
    return PathParams(eta=torch.zeros(CorrectionNet(spec).net.n_params, dtype=DTYPE), spec=spec)


def coefficients(t: torch.Tensor, t_left: torch.Tensor, t_right: torch.Tensor):
    """c_L, c_R and the correction multiplier 1 - c_L^2 - c_R^2."""
    length = t_right - t_left
    c_left = (t_right - t) / length
    c_right = (t - t_left) / length
    return c_left, c_right, 1.0 - c_left**2 - c_right**2


def interpolate(
    params: PathParams,
    batch: PairBatch,
    t_left: Optional[torch.Tensor] = None,
    t_right: Optional[torch.Tensor] = None,
    eta: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    x_t = c_L x_left + c_R x_right + (1 - c_L^2 - c_R^2) net(t, x_left, x_right, k).

    At t == t_left (t_right) the drawn left (right) sample is returned bitwise.
    Pass `eta` to differentiate with respect to the path parameters.
    """
    t_left = batch.t_left if t_left is None else to_tensor(t_left).expand_as(batch.t)
    t_right = batch.t_right if t_right is None else to_tensor(t_right).expand_as(batch.t)
    if len(batch) == 0:
        return batch.x_left.clone()
    if torch.any(batch.t < t_left) or torch.any(batch.t > t_right):
        raise ContractError("Interpolation time outside its interval")
    eta = params.eta if eta is None else eta
    c_left, c_right, bracket = coefficients(batch.t, t_left, t_right)
    correction = CorrectionNet(params.spec)(eta, batch)
    mixed = c_left[:, None] * batch.x_left + c_right[:, None] * batch.x_right + bracket[:, None] * correction
    at_left = (batch.t == t_left)[:, None]
    at_right = (batch.t == t_right)[:, None]
    return torch.where(at_left, batch.x_left, torch.where(at_right, batch.x_right, mixed))


def draw_times(n: int, rng: np.random.Generator, stratified: bool = False) -> np.ndarray:
    if stratified:
        return (np.arange(n) + rng.uniform(0.0, 1.0, size=n)) / max(n, 1)
    return rng.uniform(0.0, 1.0, size=n)


def draw_pairs(
    dataset: MarginalDataset,
    t: np.ndarray,
    rng: np.random.Generator,
    threshold: float = 0.5,
) -> PairBatch:
    """Route each time to its interval and draw independent endpoint samples with replacement."""
    if len(dataset) < 2:
        raise ConfigError("Path sampling needs at least two marginals")
    t = np.asarray(t, dtype=np.float64)
    n = t.shape[0]
    interval = route_times(dataset.times, t)
    sizes = np.array([s.shape[0] for s in dataset.snapshots])
    left_idx = rng.integers(0, sizes[interval]) if n else np.zeros(0, dtype=int)
    right_idx = rng.integers(0, sizes[interval + 1]) if n else np.zeros(0, dtype=int)
    x_left = np.empty((n, dataset.dim))
    x_right = np.empty((n, dataset.dim))
    for i in np.unique(interval):
        mask = interval == i
        x_left[mask] = dataset.snapshots[i][left_idx[mask]]
        x_right[mask] = dataset.snapshots[i + 1][right_idx[mask]]
    t_tensor = to_tensor(t)
    return PairBatch(
        interval=interval,
        t=t_tensor,
        t_left=to_tensor(dataset.times[interval]),
        t_right=to_tensor(dataset.times[interval + 1]),
        x_left=to_tensor(x_left),
        x_right=to_tensor(x_right),
        k=indicator(t_tensor, threshold),
    )


class CurveSampler(Protocol):
    """Anything that can produce samples of rho_t at its knots and at random times."""

    knots: np.ndarray

    def boundary(self, index: int, n: int, rng: np.random.Generator) -> torch.Tensor:
        ...

    def draw(self, n: int, rng: np.random.Generator, stratified: bool = False,
             eta: Optional[torch.Tensor] = None) -> PathDraw:
        ...


class InterpolantSampler:
    """The learned sampler rho_t(x, eta) constrained to the dataset's marginals."""

    trainable = True

    def __init__(self, dataset: MarginalDataset, params: PathParams):
        if params.spec.input_dim != dataset.dim:
            raise ConfigError(
                f"Path network dimension {params.spec.input_dim} != dataset dimension {dataset.dim}"
            )
        self.dataset = dataset
        self.params = params
        self.knots = dataset.times

    def boundary(self, index: int, n: int, rng: np.random.Generator) -> torch.Tensor:
        snap = self.dataset.snapshots[index]
        return to_tensor(snap[rng.integers(0, snap.shape[0], size=n)])

    def draw(self, n: int, rng: np.random.Generator, stratified: bool = False,
             eta: Optional[torch.Tensor] = None) -> PathDraw:
        batch = draw_pairs(self.dataset, draw_times(n, rng, stratified), rng,
                           self.params.spec.indicator_threshold)
        return PathDraw(batch=batch, x_t=interpolate(self.params, batch, eta=eta))


class FixedCurve:
    """A given curve rho_t known only through a sampler `fn(t, rng) -> (n, d)` samples."""

    trainable = False

    def __init__(self, fn: Callable[[np.ndarray, np.random.Generator], np.ndarray],
                 dim: int, knots: Sequence[float] = (0.0, 1.0)):
        self.fn = fn
        self.dim = dim
        self.knots = np.asarray(knots, dtype=np.float64)

    def boundary(self, index: int, n: int, rng: np.random.Generator) -> torch.Tensor:
        return to_tensor(self.fn(np.full(n, self.knots[index]), rng)).reshape(n, self.dim)

    def draw(self, n: int, rng: np.random.Generator, stratified: bool = False,
             eta: Optional[torch.Tensor] = None) -> PathDraw:
        t = draw_times(n, rng, stratified)
        interval = route_times(self.knots, t)
        x_t = to_tensor(self.fn(t, rng)).reshape(n, self.dim)
        t_tensor = to_tensor(t)
        batch = PairBatch(
            interval=interval,
            t=t_tensor,
            t_left=to_tensor(self.knots[interval]),
            t_right=to_tensor(self.knots[interval + 1]),
            x_left=x_t,
            x_right=x_t,
            k=indicator(t_tensor),
        )
        return PathDraw(batch=batch, x_t=x_t)


def sample_path_batch(params: PathParams, dataset: MarginalDataset, n: int, seed: int,
                      stratified: bool = False) -> PathDraw:
    """Uniform global times, routed to intervals, mapped through the sampler; deterministic per seed."""
    if len(dataset) < 2:
        raise ConfigError("Path sampling needs at least two marginals")
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        return InterpolantSampler(dataset, params).draw(n, rng, stratified)


def sample_at_time(params: PathParams, dataset: MarginalDataset, t: float, n: int, seed: int) -> torch.Tensor:
    """n draws of the model marginal at one global time."""
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"time {t} outside [0, 1]")
    rng = np.random.default_rng(seed)
    batch = draw_pairs(dataset, np.full(n, t), rng, params.spec.indicator_threshold)
    with torch.no_grad():
        return interpolate(params, batch)


def refine_multiplier(t: torch.Tensor, t_left: torch.Tensor, t_right: torch.Tensor) -> torch.Tensor:
    c_left, c_right, _ = coefficients(t, t_left, t_right)
    return c_left * c_right


def wasserstein_refine(
    problem: ProblemSpec,
    field_params: FieldParams,
    x_t: torch.Tensor,
    t: torch.Tensor,
    t_left: torch.Tensor,
    t_right: torch.Tensor,
    alpha,
    steps: int,
) -> torch.Tensor:
    """
    x <- x + alpha * c_L c_R * grad_x[dt s + K* + U], `steps` times.

    `alpha` is a scalar or one step size per sample. Samples at interval endpoints have
    multiplier zero and are returned unchanged.
    """
    x = x_t.detach().clone()
    if steps == 0 or x.shape[0] == 0:
        return x
    alpha = to_tensor(alpha)
    if torch.any(alpha <= 0):
        raise ContractError("refinement step size must be positive")
    multiplier = alpha * refine_multiplier(to_tensor(t), to_tensor(t_left), to_tensor(t_right))
    moving = (multiplier != 0)[:, None]
    selector = integrand_selector(problem)
    for _ in range(steps):
        g = torch.as_tensor(
            grad_inputs(field_params, t, x, None, selector, laplacian=problem.is_entropic),
            dtype=DTYPE,
        )
        x = torch.where(moving, x + multiplier[:, None] * g, x)
    return x


def mean_integrand(problem: ProblemSpec, field_spec, theta: torch.Tensor, x_t: torch.Tensor,
                   t: torch.Tensor, create_graph: bool) -> torch.Tensor:
    fe = ScalarField(field_spec).evaluate(
        theta, t, x_t, None, laplacian=problem.is_entropic, create_graph=create_graph
    )
    return integrand(problem, fe, x_t, t).integrand.mean()


def path_gradient(problem: ProblemSpec, field_params: FieldParams, path_params: PathParams,
                  batch: PairBatch) -> np.ndarray:
    """
    Reparameterization gradient of the dual with respect to eta, i.e. -grad_eta of the
    mean integrand. A descent step eta - lr * g lowers the dual.
    """
    if field_params.spec.input_dim != path_params.spec.input_dim:
        raise ContractError("Field and path networks disagree on the state dimension")
    if len(batch) == 0:
        return np.zeros(path_params.eta.numel())
    eta = path_params.eta.detach().clone().requires_grad_(True)
    x_t = interpolate(path_params, batch, eta=eta)
    mean = mean_integrand(problem, field_params.spec, field_params.theta.detach(), x_t, batch.t,
                          create_graph=True)
    if not mean.requires_grad:
        return np.zeros(eta.numel())
    (g,) = torch.autograd.grad(mean, eta, allow_unused=True)
    if g is None:
        return np.zeros(eta.numel())
    return (-g).numpy()
