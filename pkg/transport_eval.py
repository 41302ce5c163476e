"""
Oracles and metrics: exact W1 by assignment, log-domain Sinkhorn, Bures-Wasserstein,
a grid Schrodinger-bridge oracle, trajectory simulation, straightness and HJ residuals,
and the leave-one-timepoint-out protocol.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.linalg import sqrtm
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from scipy.stats import norm

from config import settings
from dataio import MarginalDataset, build_mean_accel_potential
from errors import ConfigError, ContractError, NumericError, UsageError
from field import FieldParams, eval_batch
from hamiltonians import diffusion_coefficient, dynamics, integrand
from models import EvalConfig, EvalRow, EvalTable, FieldSpec, HJReport, PathSpec, ProblemSpec, TimeResidual, TrainConfig
from pathmodel import sample_at_time, zero_path_params
from trainer import train
from utils import derive_seed, make_rng, validate_finite, validate_matrix

logger = logging.getLogger(__name__)

SIMULATION_MODES = ("ode", "sde", "single-step")

# Tolerated fraction of oracle mass falling outside the grid
GRID_LEAKAGE_TOL = 1e-3


def exact_w1(a, b) -> float:
    """Mean matched Euclidean distance under the optimal assignment of two equal-size clouds."""
    a = validate_matrix(a, "A")
    b = validate_matrix(b, "B", dim=a.shape[1])
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"exact_w1 needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] == 0:
        raise ContractError("exact_w1 needs at least one point")
    if a.shape[0] > settings.max_w1_points:
        raise ContractError(
            f"exact_w1 supports at most {settings.max_w1_points} points, got {a.shape[0]}; subsample first"
        )
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def empirical_w2_sq(a, b) -> float:
    """Squared W2 between equal-size clouds; sorting in 1-D, assignment otherwise."""
    a = validate_matrix(a, "A")
    b = validate_matrix(b, "B", dim=a.shape[1])
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"empirical_w2_sq needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] == 1:
        return float(np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2))
    if a.shape[0] > settings.max_w1_points:
        raise ContractError(f"assignment supports at most {settings.max_w1_points} points in d > 1")
    cost = cdist(a, b, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass
class SinkhornResult:
    coupling: np.ndarray
    cost: float
    row_violation: float
    col_violation: float
    iterations: int
    converged: bool


def sinkhorn(
    a_weights,
    a_support,
    b_weights,
    b_support,
    eps: float,
    iters: int = 1000,
    tol: float = 1e-9,
    cost_matrix: Optional[np.ndarray] = None,
) -> SinkhornResult:
    """
    Log-domain Sinkhorn for min <P, C> + eps KL(P | a x b).

    C defaults to the squared Euclidean cost between the supports. `cost` in the result is
    the transport cost <P, C> without the entropic term.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    a = np.asarray(a_weights, dtype=np.float64)
    b = np.asarray(b_weights, dtype=np.float64)
    if np.any(a < 0) or np.any(b < 0):
        raise ContractError("Sinkhorn weights must be nonnegative")
    a = a / a.sum()
    b = b / b.sum()
    if cost_matrix is None:
        x = validate_matrix(a_support, "A support")
        y = validate_matrix(b_support, "B support", dim=x.shape[1])
        cost_matrix = cdist(x, y, metric="sqeuclidean")
    cost_matrix = np.asarray(cost_matrix, dtype=np.float64)
    if cost_matrix.shape != (a.shape[0], b.shape[0]):
        raise ContractError(f"cost matrix shape {cost_matrix.shape} does not match weights")

    log_k = -cost_matrix / eps
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    u = np.zeros_like(a)
    v = np.zeros_like(b)

    converged = False
    row_err = col_err = np.inf
    it = 0
    for it in range(1, iters + 1):
        u = log_a - logsumexp(log_k + v[None, :], axis=1)
        v = log_b - logsumexp(log_k + u[:, None], axis=0)
        # columns are exact after the v update
        coupling = np.exp(log_k + u[:, None] + v[None, :])
        row_err = float(np.abs(coupling.sum(axis=1) - a).sum())
        if row_err < tol:
            converged = True
            break

    coupling = np.exp(log_k + u[:, None] + v[None, :])
    row_err = float(np.abs(coupling.sum(axis=1) - a).sum())
    col_err = float(np.abs(coupling.sum(axis=0) - b).sum())
    if not converged:
        logger.warning(
            f"Sinkhorn did not converge in {iters} iterations (row violation {row_err:.3e}, eps={eps:g})"
        )
    return SinkhornResult(
        coupling=coupling,
        cost=float((coupling * cost_matrix).sum()),
        row_violation=row_err,
        col_violation=col_err,
        iterations=it,
        converged=converged,
    )


def _spd(matrix, name: str) -> np.ndarray:
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if m.shape[0] != m.shape[1] or not np.allclose(m, m.T):
        raise ContractError(f"{name} must be a symmetric matrix")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError as e:
        raise ContractError(f"{name} is not positive definite") from e
    return m


def gaussian_w2(m0, cov0, m1, cov1) -> float:
    """
    Squared Bures-Wasserstein distance
        |m0 - m1|^2 + tr(S0 + S1 - 2 (S0^1/2 S1 S0^1/2)^1/2).

    The trained OT dual carries 1/2 |v|^2 and therefore targets half of this value.
    """
    s0 = _spd(cov0, "cov0")
    s1 = _spd(cov1, "cov1")
    m0 = np.atleast_1d(np.asarray(m0, dtype=np.float64))
    m1 = np.atleast_1d(np.asarray(m1, dtype=np.float64))
    if not (m0.shape == m1.shape == (s0.shape[0],) and s1.shape == s0.shape):
        raise ContractError("Means and covariances have inconsistent dimensions")
    root0 = np.real(sqrtm(s0))
    cross = np.real(sqrtm(root0 @ s1 @ root0))
    value = float(np.sum((m0 - m1) ** 2) + np.trace(s0 + s1 - 2.0 * cross))
    return max(value, 0.0)


def sb_grid_oracle(grid, mu0, mu1, sigma: float, t: float, iters: int = 5000, tol: float = 1e-10) -> np.ndarray:
    """
    Marginal at time t of the Schrodinger bridge between two 1-D grid densities.

    Static entropic OT with cost 1/2 |x - y|^2 and eps = sigma^2, then the mixture over the
    coupling of Brownian bridges N((1-t) x + t y, sigma^2 t (1-t)). Returns a density on the
    grid (integrating to one with the grid spacing).
    """
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.shape[0] < 2 or np.any(np.diff(grid) <= 0):
        raise ContractError("The oracle grid must be increasing with at least two points")
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"time {t} outside [0, 1]")
    mu0 = np.asarray(mu0, dtype=np.float64)
    mu1 = np.asarray(mu1, dtype=np.float64)
    if mu0.shape != grid.shape or mu1.shape != grid.shape:
        raise ContractError("Densities must be given on the grid")
    dx = float(np.mean(np.diff(grid)))

    cost = 0.5 * (grid[:, None] - grid[None, :]) ** 2
    result = sinkhorn(mu0, None, mu1, None, eps=sigma**2, iters=iters, tol=tol, cost_matrix=cost)
    coupling = result.coupling
    if t == 0.0:
        return coupling.sum(axis=1) / dx
    if t == 1.0:
        return coupling.sum(axis=0) / dx

    std = sigma * np.sqrt(t * (1.0 - t))
    lower = grid - 0.5 * dx
    upper = grid + 0.5 * dx
    mass = np.zeros_like(grid)
    for i in range(grid.shape[0]):
        row = coupling[i]
        keep = row > 0
        if not np.any(keep):
            continue
        centers = (1.0 - t) * grid[i] + t * grid[keep]
        cells = norm.cdf((upper[:, None] - centers[None, :]) / std) - norm.cdf((lower[:, None] - centers[None, :]) / std)
        mass += cells @ row[keep]

    leakage = 1.0 - float(mass.sum())
    if abs(leakage) > GRID_LEAKAGE_TOL:
        logger.warning(f"SB grid oracle lost {leakage:.2e} of its mass at t={t}; widen or refine the grid")
    return mass / (mass.sum() * dx)


def sample_grid_density(grid, density, n: int, seed: int) -> np.ndarray:
    """n draws from a grid density: pick a cell by mass, then uniform within the cell."""
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    density = np.clip(np.asarray(density, dtype=np.float64), 0.0, None)
    if density.sum() <= 0:
        raise ContractError("Density has no mass")
    dx = float(np.mean(np.diff(grid)))
    rng = np.random.default_rng(seed)
    cells = rng.choice(grid.shape[0], size=n, p=density / density.sum())
    return (grid[cells] + rng.uniform(-0.5 * dx, 0.5 * dx, size=n))[:, None]


@dataclass
class TrajectoryBundle:
    """Particle paths: states (n, len(times), d) and log-weights (n, len(times))."""

    times: np.ndarray
    states: np.ndarray
    log_weights: np.ndarray
    mode: str
    status: str = "ok"

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _vector_field(problem: ProblemSpec, params: FieldParams, t: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Velocity and log-weight rate lambda * s at (t, x)."""
    fe = eval_batch(params, np.full(x.shape[0], t), x)
    dyn = dynamics(problem, fe, t)
    rate = dyn.growth * (problem.growth_weight or 0.0)
    return dyn.velocity.numpy(), rate.numpy()


def _check_mode(problem: ProblemSpec, mode: str) -> None:
    if mode not in SIMULATION_MODES:
        raise UsageError(f"Unknown simulation mode '{mode}'", details=f"choose from {SIMULATION_MODES}")
    if problem.is_entropic and mode != "sde":
        raise UsageError("Entropic problems are simulated with --mode sde")
    if mode == "sde" and not problem.is_entropic:
        raise UsageError("--mode sde needs an entropic problem (set problem.entropic)")


def simulate(
    problem: ProblemSpec,
    field_params: FieldParams,
    x0,
    steps: int = 100,
    mode: str = "ode",
    seed: int = 0,
    t0: float = 0.0,
    t1: float = 1.0,
    bound: Optional[float] = None,
) -> TrajectoryBundle:
    """
    Push x0 through the learned dynamics.

    ode: RK4 on dx/dt = grad s_t, with d log w / dt = lambda s_t under WFR.
    sde: Euler-Maruyama with drift grad Phi_t and volatility sigma(t).
    single-step: X_1 = X_0 + grad s_0(X_0).
    A particle leaving the ball of radius `bound` truncates the bundle.
    """
    _check_mode(problem, mode)
    if steps < 1:
        raise ContractError("simulate needs at least one step")
    if not 0.0 <= t0 <= t1 <= 1.0:
        raise ContractError(f"invalid time range [{t0}, {t1}]")
    bound = settings.blowup_bound if bound is None else bound
    x = validate_matrix(x0, "x0", dim=field_params.spec.input_dim).copy()
    n = x.shape[0]

    if mode == "single-step":
        velocity, _ = _vector_field(problem, field_params, 0.0, x)
        states = np.stack([x, x + velocity], axis=1)
        return TrajectoryBundle(times=np.array([0.0, 1.0]), states=states,
                                log_weights=np.zeros((n, 2)), mode=mode)

    times = np.linspace(t0, t1, steps + 1)
    h = (t1 - t0) / steps
    states = [x.copy()]
    log_w = np.zeros(n)
    log_weights = [log_w.copy()]
    rng = np.random.default_rng(seed)
    status = "ok"

    for k in range(steps):
        t = times[k]
        if mode == "ode":
            k1, r1 = _vector_field(problem, field_params, t, x)
            k2, r2 = _vector_field(problem, field_params, t + 0.5 * h, x + 0.5 * h * k1)
            k3, r3 = _vector_field(problem, field_params, t + 0.5 * h, x + 0.5 * h * k2)
            k4, r4 = _vector_field(problem, field_params, times[k + 1], x + h * k3)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            log_w = log_w + h / 6.0 * (r1 + 2 * r2 + 2 * r3 + r4)
        else:
            drift, _ = _vector_field(problem, field_params, t, x)
            sigma = float(diffusion_coefficient(problem.entropic, torch.tensor(t)))
            x = x + h * drift + sigma * np.sqrt(h) * rng.standard_normal(x.shape)

        if not np.all(np.isfinite(x)) or np.max(np.linalg.norm(x, axis=1)) > bound:
            status = f"blowup at step {k + 1} (t={times[k + 1]:.4f})"
            logger.warning(f"Simulation stopped: {status}")
            break
        states.append(x.copy())
        log_weights.append(log_w.copy())

    kept = len(states)
    return TrajectoryBundle(
        times=times[:kept],
        states=np.stack(states, axis=1),
        log_weights=np.stack(log_weights, axis=1),
        mode=mode,
        status=status,
    )


def straightness(bundle: TrajectoryBundle, normalize: bool = True) -> float:
    """
    Mean |x_{k+1} - 2 x_k + x_{k-1}| / h^2 divided by the mean path length.
    normalize=False returns the raw acceleration.
    """
    if bundle.states.shape[1] < 3:
        return 0.0
    h = float(bundle.times[1] - bundle.times[0])
    x = bundle.states
    accel = (x[:, 2:] - 2.0 * x[:, 1:-1] + x[:, :-2]) / h**2
    value = float(np.linalg.norm(accel, axis=2).mean())
    if normalize:
        length = float(np.linalg.norm(np.diff(x, axis=1), axis=2).sum(axis=1).mean())
        if length > 0:
            value /= length
    return value


def hj_residual(problem: ProblemSpec, field_params: FieldParams, cloud, times: Sequence[float]) -> HJReport:
    """
    Per-time mean |I - mean(I)| of the integrand I = dt s + K* + U over the cloud.
    Stationarity only fixes the integrand up to a spatial constant, hence the centering.
    """
    cloud = validate_matrix(cloud, "cloud", dim=field_params.spec.input_dim)
    per_time = []
    for t in times:
        t_vec = np.full(cloud.shape[0], float(t))
        fe = eval_batch(field_params, t_vec, cloud, laplacian=problem.is_entropic)
        values = integrand(problem, fe, torch.as_tensor(cloud), torch.as_tensor(t_vec)).integrand.numpy()
        validate_finite(values, f"integrand at t={t}")
        per_time.append(TimeResidual(t=float(t), residual=float(np.mean(np.abs(values - values.mean())))))
    mean = float(np.mean([r.residual for r in per_time])) if per_time else 0.0
    return HJReport(per_time=per_time, mean=mean)


def _subsample(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    replace = x.shape[0] < m
    return x[rng.choice(x.shape[0], size=m, replace=replace)]


@dataclass
class LeaveOneOutJob:
    dataset: MarginalDataset
    held_out: int
    seed: int
    problem: ProblemSpec
    field_spec: FieldSpec
    path_spec: PathSpec
    config: TrainConfig
    eval_config: EvalConfig


def _problem_for(job: LeaveOneOutJob, reduced: MarginalDataset) -> ProblemSpec:
    if job.eval_config.potential != "mean_acceleration":
        return job.problem
    if job.eval_config.use_held_out_mean:
        potential = build_mean_accel_potential(job.dataset, held_out=job.held_out)
    else:
        potential = build_mean_accel_potential(reduced)
    return job.problem.model_copy(update={"potential": potential})


def run_leave_one_out_job(job: LeaveOneOutJob) -> EvalRow:
    """Train on all marginals but one and score the model marginal at the held-out time."""
    reduced = job.dataset.without(job.held_out)
    problem = _problem_for(job, reduced)
    config = job.config.model_copy(update={"seed": job.seed})
    result = train(problem, reduced, job.field_spec, job.path_spec, config)

    t_star = float(job.dataset.times[job.held_out])
    truth = job.dataset.snapshots[job.held_out]
    m = min(truth.shape[0], job.eval_config.subsample, settings.w1_subsample)
    rng = make_rng(job.seed, job.held_out, 3)
    truth = _subsample(truth, m, rng)
    sample_seed = derive_seed(job.seed, job.held_out, 4)

    predicted = sample_at_time(result.path_params, reduced, t_star, m, sample_seed).numpy()
    baseline = sample_at_time(zero_path_params(job.path_spec), reduced, t_star, m, sample_seed).numpy()

    x0 = _subsample(reduced.snapshots[0], m, rng)
    steps = max(1, int(round(job.eval_config.simulate_steps * t_star)))
    mode = "sde" if problem.is_entropic else "ode"
    bundle = simulate(problem, result.field_params, x0, steps=steps, mode=mode,
                      seed=derive_seed(job.seed, job.held_out, 5), t1=t_star)
    if not bundle.ok:
        raise NumericError("Simulated dynamics blew up before the held-out time", details=bundle.status)

    row = EvalRow(
        held_out_index=job.held_out,
        held_out_time=t_star,
        seed=job.seed,
        w1_path=exact_w1(predicted, truth),
        w1_simulated=exact_w1(bundle.final, truth),
        w1_baseline=exact_w1(baseline, truth),
    )
    logger.info(
        f"Held out t={t_star:.3f} (seed {job.seed}): W1 path={row.w1_path:.4f} "
        f"simulated={row.w1_simulated:.4f} baseline={row.w1_baseline:.4f}"
    )
    return row


def _seed_average(rows: List[EvalRow], seeds: Sequence[int], key: str) -> np.ndarray:
    return np.array([np.mean([getattr(r, key) for r in rows if r.seed == s]) for s in seeds])


def leave_one_out(
    dataset: MarginalDataset,
    problem: ProblemSpec,
    field_spec: FieldSpec,
    path_spec: PathSpec,
    config: TrainConfig,
    eval_config: EvalConfig,
    workers: int = 1,
    label: str = "",
) -> EvalTable:
    """
    Leave-one-timepoint-out W1 table: per seed, W1 averaged over the held-out marginals;
    mean and std across seeds.
    """
    if len(dataset) < 3:
        raise ConfigError("Leave-one-out needs at least three marginals")
    held = eval_config.held_out if eval_config.held_out is not None else list(range(1, len(dataset) - 1))
    for idx in held:
        if idx <= 0 or idx >= len(dataset) - 1:
            raise ConfigError(
                f"Held-out index {idx} is not an interior marginal",
                details=f"valid indices are 1..{len(dataset) - 2}",
            )

    jobs = [
        LeaveOneOutJob(dataset, idx, seed, problem, field_spec, path_spec, config, eval_config)
        for seed in eval_config.seeds
        for idx in held
    ]
    logger.info(f"Leave-one-out: {len(jobs)} training runs on {max(1, workers)} worker(s)")
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(run_leave_one_out_job, jobs))
    else:
        rows = [run_leave_one_out_job(job) for job in jobs]

    seeds = list(eval_config.seeds)
    per_seed = _seed_average(rows, seeds, "w1_path")
    table = EvalTable(
        label=label,
        rows=rows,
        mean=float(per_seed.mean()),
        std=float(per_seed.std()),
        mean_simulated=float(_seed_average(rows, seeds, "w1_simulated").mean()),
        mean_baseline=float(_seed_average(rows, seeds, "w1_baseline").mean()),
        metadata={
            "dataset": dataset.name,
            "kinetic": problem.kinetic,
            "entropic": problem.is_entropic,
            "potential": eval_config.potential,
            "uses_held_out_mean": eval_config.potential == "mean_acceleration" and eval_config.use_held_out_mean,
            "held_out": held,
            "seeds": seeds,
        },
    )
    logger.info(f"Leave-one-out W1 {table.mean:.4f} +/- {table.std:.4f} (baseline {table.mean_baseline:.4f})")
    return table
