"""
Scalar dual potential s(t, x, k; theta) as a small MLP over a flat float64 parameter vector.

All derivatives (grad_x, dt, laplacian, parameter gradients, input gradients of
derived scalars) are exact reverse-mode derivatives computed with torch autograd.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import ValidationError

from errors import CapabilityError, ConfigError, ContractError, NumericError
from models import FieldSpec, NetworkSpec
from utils import DTYPE, to_tensor, validate_finite

logger = logging.getLogger(__name__)

INDICATOR_THRESHOLD = 0.5

ACTIVATIONS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "tanh": torch.tanh,
    "softplus": F.softplus,
    "identity": lambda h: h,
    "square": torch.square,
}


def check_spec(spec: NetworkSpec) -> NetworkSpec:
    """Re-validate a spec (it may have been built with model_construct) as a configuration error."""
    try:
        return type(spec).model_validate(spec.model_dump())
    except ValidationError as e:
        raise ConfigError(f"Invalid {type(spec).__name__}", details=str(e)) from e


class MLP:
    """Fully connected network whose weights live in one flat vector."""

    def __init__(self, in_width: int, hidden_widths: Sequence[int], out_width: int, activation: str):
        if activation not in ACTIVATIONS:
            raise CapabilityError(f"Activation '{activation}' has no exact higher derivatives")
        widths = [in_width, *hidden_widths, out_width]
        self.shapes: List[Tuple[int, int]] = [
            (fan_out, fan_in) for fan_in, fan_out in zip(widths[:-1], widths[1:])
        ]
        self.act = ACTIVATIONS[activation]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def init(self, seed: int) -> torch.Tensor:
        # Glorot uniform weights, zero biases
        rng = np.random.default_rng(seed)
        chunks = []
        for fan_out, fan_in in self.shapes:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-limit, limit, size=fan_out * fan_in))
            chunks.append(np.zeros(fan_out))
        return torch.as_tensor(np.concatenate(chunks), dtype=DTYPE)

    def unpack(self, flat: torch.Tensor) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        layers = []
        offset = 0
        for fan_out, fan_in in self.shapes:
            w = flat[offset : offset + fan_out * fan_in].view(fan_out, fan_in)
            offset += fan_out * fan_in
            b = flat[offset : offset + fan_out]
            offset += fan_out
            layers.append((w, b))
        return layers

    def hidden(self, flat: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        """Activations feeding the output layer."""
        h = inputs
        for w, b in self.unpack(flat)[:-1]:
            h = self.act(h @ w.T + b)
        return h

    def __call__(self, flat: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        w, b = self.unpack(flat)[-1]
        return self.hidden(flat, inputs) @ w.T + b


def time_features(spec: NetworkSpec, t: torch.Tensor) -> torch.Tensor:
    t = t.reshape(-1, 1)
    if spec.time_embedding == "raw":
        return t
    freqs = 2.0 * math.pi * torch.arange(1, spec.frequencies + 1, dtype=DTYPE)
    return torch.cat([t, torch.sin(t * freqs), torch.cos(t * freqs)], dim=1)


def indicator(t: torch.Tensor, threshold: float = INDICATOR_THRESHOLD) -> torch.Tensor:
    return (t < threshold).to(DTYPE)


def _grads(
    output: torch.Tensor, inputs: Sequence[torch.Tensor], create_graph: bool
) -> List[torch.Tensor]:
    """d(sum output)/d each input, with zeros where output does not depend on it."""
    if not output.requires_grad:
        return [torch.zeros_like(i) for i in inputs]
    grads = torch.autograd.grad(
        output.sum(), list(inputs), create_graph=create_graph, retain_graph=True, allow_unused=True
    )
    return [torch.zeros_like(i) if g is None else g for i, g in zip(inputs, grads)]


def _grad(output: torch.Tensor, inputs: torch.Tensor, create_graph: bool) -> torch.Tensor:
    return _grads(output, [inputs], create_graph)[0]


@dataclass(frozen=True)
class FieldParams:
    theta: torch.Tensor
    spec: FieldSpec

    def __post_init__(self):
        expected = MLP(self.spec.in_width, self.spec.hidden_widths, 1, self.spec.activation).n_params
        if self.theta.ndim != 1 or self.theta.numel() != expected:
            raise ContractError(
                f"Field parameter vector has {self.theta.numel()} entries, spec implies {expected}"
            )
        validate_finite(self.theta, "field parameters")

    @classmethod
    def from_layers(cls, spec: FieldSpec, layers: Sequence[Tuple[Sequence, Sequence]]) -> "FieldParams":
        """Build parameters from explicit (W, b) pairs, W of shape (fan_out, fan_in)."""
        flat = [np.concatenate([np.asarray(w, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()])
                for w, b in layers]
        return cls(theta=torch.as_tensor(np.concatenate(flat), dtype=DTYPE), spec=spec)

    def numpy(self) -> np.ndarray:
        return self.theta.detach().cpu().numpy().copy()


@dataclass
class FieldEval:
    value: torch.Tensor
    grad_x: torch.Tensor
    dt: torch.Tensor
    laplacian: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.value.shape[0]

    def detach(self) -> "FieldEval":
        return FieldEval(
            value=self.value.detach(),
            grad_x=self.grad_x.detach(),
            dt=self.dt.detach(),
            laplacian=None if self.laplacian is None else self.laplacian.detach(),
        )

    def rows(self) -> Iterator["FieldEval"]:
        for i in range(len(self)):
            yield FieldEval(
                value=self.value[i : i + 1],
                grad_x=self.grad_x[i : i + 1],
                dt=self.dt[i : i + 1],
                laplacian=None if self.laplacian is None else self.laplacian[i : i + 1],
            )


class ScalarField:
    """Evaluator for one FieldSpec; parameters are passed per call so they may require grad."""

    def __init__(self, spec: FieldSpec):
        self.spec = spec
        self.net = MLP(spec.in_width, spec.hidden_widths, 1, spec.activation)

    def features(self, t: torch.Tensor, x: torch.Tensor, k: Optional[torch.Tensor]) -> torch.Tensor:
        parts = [x, time_features(self.spec, t)]
        if self.spec.use_indicator:
            parts.append((indicator(t) if k is None else k.to(DTYPE)).reshape(-1, 1))
        return torch.cat(parts, dim=1)

    def value(self, theta: torch.Tensor, t: torch.Tensor, x: torch.Tensor,
              k: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.net(theta, self.features(t, x, k)).squeeze(-1)

    def evaluate(
        self,
        theta: torch.Tensor,
        t: torch.Tensor,
        x: torch.Tensor,
        k: Optional[torch.Tensor] = None,
        laplacian: bool = False,
        create_graph: bool = False,
    ) -> FieldEval:
        """
        Value, spatial gradient, time partial and optionally Laplacian at (t, x).

        x keeps its autograd history (so callers can differentiate through x);
        t is always treated as an independent input so dt is the partial derivative.
        """
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        t_in = t.detach().clone().reshape(-1).requires_grad_(True)
        value = self.value(theta, t_in, x, k)
        grad_x, dt = _grads(value, [x, t_in], create_graph=create_graph or laplacian)
        lap = None
        if laplacian:
            cols = [_grad(grad_x[:, j], x, create_graph=create_graph)[:, j] for j in range(x.shape[1])]
            lap = torch.stack(cols, dim=1).sum(dim=1)
        if not create_graph:
            grad_x = grad_x.detach()
            value = value.detach()
            dt = dt.detach()
        return FieldEval(value=value, grad_x=grad_x, dt=dt, laplacian=lap)


def param_count(spec: FieldSpec) -> int:
    return MLP(spec.in_width, spec.hidden_widths, 1, spec.activation).n_params


def init_params(spec: FieldSpec, seed: int) -> FieldParams:
    spec = check_spec(spec)
    net = MLP(spec.in_width, spec.hidden_widths, 1, spec.activation)
    params = FieldParams(theta=net.init(seed), spec=spec)
    logger.debug(f"Initialized field with {net.n_params} parameters (seed={seed})")
    return params


def _batch_inputs(params: FieldParams, t, x, k) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    t = to_tensor(t).reshape(-1)
    x = to_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ContractError(f"x must have shape (n, {params.spec.input_dim}), got {tuple(x.shape)}")
    if t.shape[0] != x.shape[0]:
        raise ContractError(f"t has {t.shape[0]} entries but x has {x.shape[0]} rows")
    validate_finite(t, "t")
    validate_finite(x, "x")
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise ContractError("times must lie in [0, 1]")
    if k is not None:
        k = to_tensor(k).reshape(-1)
        if k.shape[0] != x.shape[0]:
            raise ContractError("indicator length does not match batch size")
    return t, x, k


def eval_batch(params: FieldParams, t, x, k=None, laplacian: bool = False) -> FieldEval:
    t, x, k = _batch_inputs(params, t, x, k)
    return ScalarField(params.spec).evaluate(params.theta.detach(), t, x, k, laplacian=laplacian)


@dataclass
class CotangentWeights:
    """Per-sample coefficients on each FieldEval component; None means zero."""

    value: Optional[object] = None
    grad_x: Optional[object] = None
    dt: Optional[object] = None
    laplacian: Optional[object] = None


def grad_params(params: FieldParams, t, x, k, weights: CotangentWeights) -> np.ndarray:
    """Exact gradient over theta of sum_i <weights_i, FieldEval_i>."""
    t, x, k = _batch_inputs(params, t, x, k)
    n, d = x.shape
    expected = {"value": (n,), "grad_x": (n, d), "dt": (n,), "laplacian": (n,)}
    coeffs = {}
    for name, shape in expected.items():
        w = getattr(weights, name)
        if w is None:
            continue
        w = to_tensor(w)
        if tuple(w.shape) != shape:
            raise ContractError(f"cotangent weights for {name} have shape {tuple(w.shape)}, expected {shape}")
        validate_finite(w, f"{name} weights", ContractError)
        coeffs[name] = w

    theta = params.theta.detach().clone().requires_grad_(True)
    fe = ScalarField(params.spec).evaluate(
        theta, t, x, k, laplacian="laplacian" in coeffs, create_graph=True
    )
    total = torch.zeros((), dtype=DTYPE)
    for name, w in coeffs.items():
        total = total + (w * getattr(fe, name)).sum()
    return _grad(total, theta, create_graph=False).numpy()


def grad_inputs(
    params: FieldParams,
    t,
    x,
    k,
    selector: Callable[[FieldEval, torch.Tensor, torch.Tensor], torch.Tensor],
    laplacian: bool = False,
) -> np.ndarray:
    """
    Exact d/dx of a per-sample scalar built by `selector` from (FieldEval, x, t).

    Needs second derivatives of the network, third when the selector uses the Laplacian.
    """
    if params.spec.activation not in ACTIVATIONS:
        raise CapabilityError(f"Activation '{params.spec.activation}' is not supported")
    t, x, k = _batch_inputs(params, t, x, k)
    x = x.detach().requires_grad_(True)
    fe = ScalarField(params.spec).evaluate(
        params.theta.detach(), t, x, k, laplacian=laplacian, create_graph=True
    )
    scalar = selector(fe, x, t)
    if scalar.shape != (x.shape[0],):
        raise ContractError(f"selector must return one scalar per sample, got {tuple(scalar.shape)}")
    g = _grad(scalar, x, create_graph=False).detach()
    validate_finite(g, "input gradient", NumericError)
    return g.numpy()
