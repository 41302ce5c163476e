"""
Saddle-point optimisation of the Monte Carlo dual:

    sup_theta inf_eta  E_mu1[s_1] - E_mu0[s_0] - E_{t, x_t ~ rho_t(eta)}[dt s + K* + U]

theta ascends the dual, eta descends it (through the reparameterized sampler), with
optional Wasserstein refinement of the sampled points between the two gradients.
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple, Union

import numpy as np
import torch

from dataio import MarginalDataset
from errors import ConfigError, ContractError, DivergenceError
from field import FieldParams, ScalarField, init_params
from hamiltonians import integrand
from models import DualReport, FieldSpec, HistoryRecord, IntervalReport, PathSpec, ProblemSpec, TrainConfig, TrainHistory
from pathmodel import (
    CurveSampler,
    FixedCurve,
    InterpolantSampler,
    PathParams,
    init_path_params,
    mean_integrand,
    wasserstein_refine,
)
from utils import DTYPE, derive_seed, format_seconds, make_rng

if TYPE_CHECKING:
    from storage import RunStorage

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    field_params: FieldParams
    path_params: Optional[PathParams]
    history: TrainHistory


def _knot_values(field: ScalarField, theta: torch.Tensor, knots: np.ndarray, draws) -> torch.Tensor:
    """Mean of s_{t_i} over the draws of each marginal."""
    means = []
    for knot, x in zip(knots, draws):
        t = torch.full((x.shape[0],), float(knot), dtype=DTYPE)
        means.append(field.value(theta, t, x).mean())
    return torch.stack(means)


def estimate_curve_dual(
    problem: ProblemSpec,
    field_params: FieldParams,
    sampler: CurveSampler,
    n: int,
    seed: int,
    stratified: bool = False,
) -> DualReport:
    """
    Unbiased Monte Carlo estimate of the dual for fixed (theta, curve).

    One draw set per marginal serves both the global boundary term and the per-interval
    breakdown, so the interval estimates telescope to the global one.
    """
    if n < 1:
        raise ContractError("The dual estimate needs at least one sample")
    rng = np.random.default_rng(seed)
    field = ScalarField(field_params.spec)
    theta = field_params.theta.detach()
    knots = sampler.knots

    with torch.no_grad():
        draws = [sampler.boundary(i, n, rng) for i in range(len(knots))]
        knot_means = _knot_values(field, theta, knots, draws)
        draw = sampler.draw(n, rng, stratified)
    fe = field.evaluate(theta, draw.t, draw.x_t, laplacian=problem.is_entropic)
    values = integrand(problem, fe, draw.x_t, draw.t).integrand.detach()

    intervals = []
    for i in range(len(knots) - 1):
        boundary_i = float(knot_means[i + 1] - knot_means[i])
        integrand_i = float(values[torch.as_tensor(draw.interval == i)].sum()) / n
        intervals.append(IntervalReport(
            index=i,
            t_left=float(knots[i]),
            t_right=float(knots[i + 1]),
            boundary_term=boundary_i,
            integrand_term=integrand_i,
            dual_estimate=boundary_i - integrand_i,
        ))
    boundary = float(knot_means[-1] - knot_means[0])
    integrand_term = float(values.sum()) / n
    return DualReport(
        boundary_term=boundary,
        integrand_term=integrand_term,
        dual_estimate=boundary - integrand_term,
        intervals=intervals,
        n=n,
        seed=seed,
    )


def estimate_dual(
    problem: ProblemSpec,
    field_params: FieldParams,
    path_params: PathParams,
    dataset: MarginalDataset,
    n: int,
    seed: int,
    stratified: bool = False,
) -> DualReport:
    return estimate_curve_dual(
        problem, field_params, InterpolantSampler(dataset, path_params), n, seed, stratified
    )


def _check_dual(step: int, dual: float, bound: float) -> None:
    if not math.isfinite(dual) or abs(dual) > bound:
        raise DivergenceError(
            f"Training diverged at step {step}",
            details=f"dual estimate {dual} exceeds bound {bound:g}",
        )


def _draw_step(sampler: CurveSampler, config: TrainConfig, step: int, eta: Optional[torch.Tensor] = None):
    """Boundary draws and path draw of one iteration; fixed by (config.seed, step)."""
    rng = make_rng(config.seed, step)
    n = config.batch_size
    x0 = sampler.boundary(0, n, rng)
    x1 = sampler.boundary(len(sampler.knots) - 1, n, rng)
    draw = sampler.draw(n, rng, config.time_sampling == "stratified", eta=eta)
    return x0, x1, draw


def _batch_dual(
    problem: ProblemSpec,
    field: ScalarField,
    theta: torch.Tensor,
    x0: torch.Tensor,
    x1: torch.Tensor,
    t: torch.Tensor,
    x_t: torch.Tensor,
    create_graph: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(dual, boundary, integrand) of one minibatch."""
    fe = field.evaluate(theta, t, x_t, laplacian=problem.is_entropic, create_graph=create_graph)
    integrand_term = integrand(problem, fe, x_t, t).integrand.mean()
    ones = torch.ones(x1.shape[0], dtype=DTYPE)
    zeros = torch.zeros(x0.shape[0], dtype=DTYPE)
    boundary = field.value(theta, ones, x1).mean() - field.value(theta, zeros, x0).mean()
    return boundary - integrand_term, boundary, integrand_term


def _optimize(
    problem: ProblemSpec,
    field_params: FieldParams,
    sampler: CurveSampler,
    path_params: Optional[PathParams],
    config: TrainConfig,
    storage: Optional["RunStorage"] = None,
) -> TrainResult:
    spec = field_params.spec
    field = ScalarField(spec)
    theta = field_params.theta.detach().clone().requires_grad_(True)
    opt_theta = torch.optim.Adam([theta], lr=config.lr_field, betas=config.betas)

    train_path = (
        path_params is not None and getattr(sampler, "trainable", False) and config.train_path
    )
    eta = path_params.eta.detach().clone().requires_grad_(True) if train_path else None
    opt_eta = torch.optim.Adam([eta], lr=config.lr_path, betas=config.betas) if train_path else None
    refine = config.refine_steps > 0 and getattr(sampler, "trainable", False)

    history = TrainHistory()
    started = time.perf_counter()

    for step in range(1, config.iterations + 1):
        x0, x1, draw = _draw_step(sampler, config, step, eta)

        # path gradient first, on the unrefined samples
        grad_eta = None
        if eta is not None and step % config.theta_steps_per_eta == 0:
            mean_i = mean_integrand(problem, spec, theta.detach(), draw.x_t, draw.t, create_graph=True)
            if mean_i.requires_grad:
                (grad_eta,) = torch.autograd.grad(-mean_i, eta, allow_unused=True)
            if grad_eta is None:
                grad_eta = torch.zeros_like(eta)

        x_t = draw.x_t.detach()
        if refine:
            batch = draw.batch
            alpha = config.refine_alpha if config.refine_alpha else 0.1 * (batch.t_right - batch.t_left)
            x_t = wasserstein_refine(
                problem, FieldParams(theta=theta.detach().clone(), spec=spec),
                x_t, batch.t, batch.t_left, batch.t_right, alpha, config.refine_steps,
            )

        dual, boundary, integrand_term = _batch_dual(
            problem, field, theta, x0, x1, draw.t, x_t, create_graph=True
        )
        _check_dual(step, float(dual), config.divergence_bound)

        opt_theta.zero_grad()
        (-dual).backward()
        grad_norm_field = float(theta.grad.norm())
        opt_theta.step()

        grad_norm_path = 0.0
        if grad_eta is not None:
            opt_eta.zero_grad()
            eta.grad = grad_eta
            grad_norm_path = float(grad_eta.norm())
            opt_eta.step()

        if step % config.log_every == 0 or step == config.iterations:
            record = HistoryRecord(
                step=step,
                dual=float(dual),
                boundary=float(boundary),
                integrand=float(integrand_term),
                grad_norm_field=grad_norm_field,
                grad_norm_path=grad_norm_path,
                seconds=time.perf_counter() - started,
            )
            history.append(record)
            logger.debug(
                f"step {step}: dual={record.dual:.5f} boundary={record.boundary:.5f} "
                f"integrand={record.integrand:.5f} |g_theta|={grad_norm_field:.3e} |g_eta|={grad_norm_path:.3e}"
            )

        if storage is not None and step % config.eval_every == 0:
            storage.save_checkpoint(step, _field_snapshot(theta, spec), _path_snapshot(eta, path_params))

    if config.iterations:
        logger.info(
            f"Finished {config.iterations} iterations in {format_seconds(time.perf_counter() - started)}; "
            f"last dual {history.records[-1].dual:.5f}"
        )
    return TrainResult(
        field_params=_field_snapshot(theta, spec),
        path_params=_path_snapshot(eta, path_params),
        history=history,
    )


def _field_snapshot(theta: torch.Tensor, spec: FieldSpec) -> FieldParams:
    return FieldParams(theta=theta.detach().clone(), spec=spec)


def _path_snapshot(eta: Optional[torch.Tensor], path_params: Optional[PathParams]) -> Optional[PathParams]:
    if path_params is None:
        return None
    if eta is None:
        return path_params
    return PathParams(eta=eta.detach().clone(), spec=path_params.spec)


def train(
    problem: ProblemSpec,
    dataset: MarginalDataset,
    field_spec: FieldSpec,
    path_spec: PathSpec,
    config: TrainConfig,
    storage: Optional["RunStorage"] = None,
) -> TrainResult:
    """Learn (theta, eta) for the constrained action minimisation; deterministic per seed."""
    if field_spec.input_dim != dataset.dim or path_spec.input_dim != dataset.dim:
        raise ConfigError(
            f"Network dimensions ({field_spec.input_dim}, {path_spec.input_dim}) "
            f"do not match the dataset dimension {dataset.dim}"
        )
    field_params = init_params(field_spec, derive_seed(config.seed, 0))
    path_params = init_path_params(path_spec, derive_seed(config.seed, 1))
    sampler = InterpolantSampler(dataset, path_params)
    logger.info(
        f"Training {problem.kinetic}{' entropic' if problem.is_entropic else ''}"
        f"{' + potential' if problem.potential else ''} on '{dataset.name}' "
        f"({len(dataset)} marginals, d={dataset.dim}) for {config.iterations} iterations"
    )
    return _optimize(problem, field_params, sampler, path_params, config, storage)


def fit_action(
    problem: ProblemSpec,
    curve: Union[FixedCurve, InterpolantSampler],
    field_spec: FieldSpec,
    config: TrainConfig,
) -> Tuple[DualReport, TrainResult]:
    """Inner sup over s_t only: the path is frozen and its action is the converged dual."""
    field_params = init_params(field_spec, derive_seed(config.seed, 0))
    path_params = curve.params if isinstance(curve, InterpolantSampler) else None
    frozen = config.model_copy(update={"train_path": False, "refine_steps": 0})
    result = _optimize(problem, field_params, curve, path_params, frozen)
    report = estimate_curve_dual(
        problem, result.field_params, curve, config.eval_batch_size, derive_seed(config.seed, 2)
    )
    logger.info(f"Action of the fixed curve: {report.dual_estimate:.5f}")
    return report, result


def action_of_path(
    problem: ProblemSpec,
    curve: Union[FixedCurve, InterpolantSampler],
    field_spec: FieldSpec,
    config: TrainConfig,
) -> float:
    report, _ = fit_action(problem, curve, field_spec, config)
    return report.dual_estimate
