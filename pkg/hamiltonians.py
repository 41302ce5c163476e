"""
Dual-linear Hamiltonian densities for the supported Lagrangians and the state-space
dynamics they induce.

Densities are batched over samples and built from torch tensors so that callers can
differentiate them with respect to parameters or inputs.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Union

import torch

from errors import ConfigError, ContractError
from field import FieldEval
from models import DiffusionSchedule, PotentialSpec, ProblemSpec
from utils import DTYPE, to_tensor

logger = logging.getLogger(__name__)

PotentialFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

POTENTIAL_CALLBACKS: Dict[str, PotentialFn] = {}

# Interval lookups tolerate round-off at the ends of the covered range
_TIME_SLACK = 1e-12


def register_potential(name: str) -> Callable[[PotentialFn], PotentialFn]:
    """Register V(x, t) -> (n,) under a name usable as PotentialSpec.callback."""

    def decorator(fn: PotentialFn) -> PotentialFn:
        POTENTIAL_CALLBACKS[name] = fn
        return fn

    return decorator


@register_potential("harmonic")
def harmonic_potential(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return 0.5 * (x**2).sum(dim=1)


@dataclass
class HamiltonianTerms:
    kstar: torch.Tensor
    potential: torch.Tensor
    integrand: torch.Tensor


@dataclass
class Dynamics:
    velocity: torch.Tensor
    growth: torch.Tensor
    diffusion: torch.Tensor


def _times(t: Union[float, torch.Tensor], n: int) -> torch.Tensor:
    t = to_tensor(t).reshape(-1)
    if t.numel() == 1 and n != 1:
        t = t.expand(n)
    return t


def diffusion_coefficient(schedule: DiffusionSchedule, t: torch.Tensor) -> torch.Tensor:
    """sigma(t) for a constant, piecewise-constant or affine schedule."""
    t = to_tensor(t)
    values = torch.as_tensor(schedule.values, dtype=DTYPE)
    if schedule.kind == "constant":
        return torch.full_like(t, schedule.values[0])
    if schedule.kind == "affine":
        return values[0] + (values[1] - values[0]) * t
    boundaries = torch.as_tensor(schedule.breakpoints, dtype=DTYPE)
    return values[torch.bucketize(t, boundaries, right=True)]


def kstar_density(problem: ProblemSpec, fe: FieldEval, t) -> torch.Tensor:
    """
    W2: 1/2 |grad s|^2
    WFR(lambda): 1/2 |grad s|^2 + lambda/2 s^2
    entropic (field is Phi): 1/2 |grad Phi|^2 + sigma(t)^2/2 Laplacian Phi
    """
    kstar = 0.5 * (fe.grad_x**2).sum(dim=1)
    if problem.kinetic == "WFR":
        kstar = kstar + 0.5 * problem.growth_weight * fe.value**2
    if problem.entropic is not None:
        if fe.laplacian is None:
            raise ContractError("Entropic mode needs the Laplacian of the field")
        sigma = diffusion_coefficient(problem.entropic, _times(t, len(fe)))
        kstar = kstar + 0.5 * sigma**2 * fe.laplacian
    return kstar


def potential_values(spec: PotentialSpec, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Unweighted V_t(x)."""
    if spec.kind == "linear_per_interval":
        knots = torch.as_tensor(spec.interval_times, dtype=DTYPE)
        if t.numel() and (t.min() < knots[0] - _TIME_SLACK or t.max() > knots[-1] + _TIME_SLACK):
            raise ConfigError(
                "Time outside the intervals covered by the potential",
                details=f"covered [{spec.interval_times[0]}, {spec.interval_times[-1]}]",
            )
        idx = torch.clamp(torch.bucketize(t, knots, right=True) - 1, 0, len(spec.interval_times) - 2)
        accel = torch.as_tensor(spec.accelerations, dtype=DTYPE)[idx]
        return -(x * accel).sum(dim=1)
    if spec.kind == "analytic_quadratic":
        v = torch.zeros(x.shape[0], dtype=DTYPE)
        if spec.quadratic is not None:
            q = torch.as_tensor(spec.quadratic, dtype=DTYPE)
            v = v + 0.5 * torch.einsum("ni,ij,nj->n", x, q, x)
        if spec.linear is not None:
            v = v + x @ torch.as_tensor(spec.linear, dtype=DTYPE)
        return v
    fn = POTENTIAL_CALLBACKS.get(spec.callback)
    if fn is None:
        raise ConfigError(f"No potential registered under '{spec.callback}'")
    return fn(x, t)


def potential_density(problem: ProblemSpec, x, t) -> torch.Tensor:
    """lambda_V * V_t(x), entering the integrand with a plus sign; zero without a potential."""
    x = to_tensor(x)
    if problem.potential is None:
        return torch.zeros(x.shape[0], dtype=DTYPE)
    t = _times(t, x.shape[0])
    return problem.potential_weight * potential_values(problem.potential, x, t)


def integrand(problem: ProblemSpec, fe: FieldEval, x, t) -> HamiltonianTerms:
    """dt s + K* + U at each sample."""
    kstar = kstar_density(problem, fe, t)
    potential = potential_density(problem, x, t)
    return HamiltonianTerms(kstar=kstar, potential=potential, integrand=fe.dt + kstar + potential)


def integrand_selector(problem: ProblemSpec) -> Callable[[FieldEval, torch.Tensor, torch.Tensor], torch.Tensor]:
    """Selector for field.grad_inputs returning the integrand."""
    return lambda fe, x, t: integrand(problem, fe, x, t).integrand


def dynamics(problem: ProblemSpec, fe: FieldEval, t=0.0) -> Dynamics:
    """
    Velocity, growth rate and diffusion induced by the field.

    In entropic mode the velocity is the forward SDE drift grad Phi; the probability-flow
    drift needs grad log rho and is not available from the field.
    """
    n = len(fe)
    zeros = torch.zeros(n, dtype=DTYPE)
    growth = fe.value if problem.kinetic == "WFR" else zeros
    if problem.entropic is not None:
        diffusion = diffusion_coefficient(problem.entropic, _times(t, n))
    else:
        diffusion = zeros
    return Dynamics(velocity=fe.grad_x, growth=growth, diffusion=diffusion)
