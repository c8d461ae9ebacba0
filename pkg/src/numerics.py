"""
Dense-tensor primitives shared by every loss and model in the package.

All arithmetic runs in float64. Inputs may be any array-like; outputs are
torch tensors so the same functions serve both direct evaluation and
reverse-mode differentiation inside training loops.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from src.errors import DegenerateInputError, DivergenceUndefinedError, ParameterError

DTYPE = torch.float64

logger = logging.getLogger(__name__)


def as_tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values if values.dtype == DTYPE else values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


def _require_nonzero_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1)
    if bool((norms == 0).any()):
        raise DegenerateInputError(f"{what} has zero norm; cosine similarity is undefined")
    return norms


def cosine_similarity(a, b) -> torch.Tensor:
    """dot(a, b) / (|a| |b|), clamped to [-1, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.dim() != 1:
        raise ParameterError(f"cosine_similarity needs equal-length vectors, got {tuple(a.shape)} and {tuple(b.shape)}")
    norm_a = _require_nonzero_rows(a, "first vector")
    norm_b = _require_nonzero_rows(b, "second vector")
    return torch.clamp(torch.dot(a, b) / (norm_a * norm_b), -1.0, 1.0)


def cosine_matrix(a, b) -> torch.Tensor:
    """Pairwise cosine similarities: out[i, j] = cos(a[i], b[j])."""
    a, b = as_tensor(a), as_tensor(b)
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[1]:
        raise ParameterError(f"cosine_matrix needs (N, D) and (M, D) inputs, got {tuple(a.shape)} and {tuple(b.shape)}")
    norm_a = _require_nonzero_rows(a, "a row of the first set")
    norm_b = _require_nonzero_rows(b, "a row of the second set")
    sims = (a / norm_a.unsqueeze(-1)) @ (b / norm_b.unsqueeze(-1)).T
    return torch.clamp(sims, -1.0, 1.0)


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def softmax(logits, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    _check_temperature(temperature)
    # torch.softmax subtracts the running max before exponentiating
    return torch.softmax(as_tensor(logits) / temperature, dim=dim)


def log_softmax(logits, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    _check_temperature(temperature)
    return torch.log_softmax(as_tensor(logits) / temperature, dim=dim)


def kl_divergence(target, predicted) -> torch.Tensor:
    """KL(target || predicted) along the last axis, with 0 log 0 := 0."""
    target, predicted = as_tensor(target), as_tensor(predicted)
    if target.shape != predicted.shape:
        raise ParameterError(f"shape mismatch {tuple(target.shape)} vs {tuple(predicted.shape)}")
    for name, dist in (("target", target), ("predicted", predicted)):
        sums = dist.detach().sum(dim=-1)
        if bool((dist.detach() < 0).any()) or bool(((sums - 1.0).abs() > 1e-6).any()):
            raise ParameterError(f"{name} is not a probability vector (sums {sums.tolist()})")
    if bool(((predicted.detach() == 0) & (target.detach() > 0)).any()):
        raise DivergenceUndefinedError("predicted assigns zero mass where target is positive")
    kl = (torch.special.xlogy(target, target) - torch.special.xlogy(target, predicted)).sum(dim=-1)
    return torch.clamp(kl, min=0.0)


def kl_divergence_from_log(target, log_predicted) -> torch.Tensor:
    """KL(target || exp(log_predicted)) computed without leaving log space."""
    target, log_predicted = as_tensor(target), as_tensor(log_predicted)
    kl = (torch.special.xlogy(target, target) - target * log_predicted).sum(dim=-1)
    return torch.clamp(kl, min=0.0)


def cross_entropy(logits, target) -> torch.Tensor:
    """-log softmax(logits)[target]; batched input (N, K) with (N,) targets returns the mean."""
    logits = as_tensor(logits)
    single = logits.dim() == 1
    if single:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    classes = logits.shape[-1]
    if target.numel() != logits.shape[0]:
        raise ParameterError(f"{target.numel()} targets for {logits.shape[0]} rows of logits")
    if bool(((target < 0) | (target >= classes)).any()):
        raise ParameterError(f"target index out of range [0, {classes}): {target.tolist()}")
    return F.cross_entropy(logits, target)


@dataclass
class SgdState:
    """Momentum SGD state; velocities are created lazily on the first step."""

    learning_rate: float
    momentum: float = 0.9
    velocities: list[torch.Tensor] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: SgdState) -> list[torch.Tensor]:
    """v <- momentum * v + g;  p <- p - lr * v.  Returns new parameter tensors."""
    if len(params) != len(grads):
        raise ParameterError(f"{len(params)} parameters but {len(grads)} gradients")
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads, strict=True)]
    for p, g in zip(params, grads, strict=True):
        if p.shape != g.shape:
            raise ParameterError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
    if state.velocities is None:
        state.velocities = [torch.zeros_like(p, dtype=DTYPE) for p in params]
    elif [v.shape for v in state.velocities] != [p.shape for p in params]:
        raise ParameterError("velocity shapes no longer match parameter shapes")

    updated = []
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads, strict=True)):
            state.velocities[i] = state.momentum * state.velocities[i] + g
            updated.append(p - state.learning_rate * state.velocities[i])
    return updated


def apply_sgd_step(parameters: Sequence[torch.nn.Parameter], state: SgdState) -> None:
    """In-place sgd_step over module parameters using their .grad fields."""
    parameters = list(parameters)
    new_values = sgd_step([p.detach() for p in parameters], [p.grad for p in parameters], state)
    with torch.no_grad():
        for p, value in zip(parameters, new_values, strict=True):
            p.copy_(value)


@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    coordinates_checked: int
    worst: tuple[int, int] | None
    tolerance: float


def finite_diff_check(
    loss_fn: Callable[[list[torch.Tensor]], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients of `loss_fn` against central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). When
    `max_coords` is set, a seeded random subset of coordinates is checked.
    """
    base = [as_tensor(p).detach().clone() for p in params]
    leaves = [p.clone().requires_grad_(True) for p in base]
    loss = torch.as_tensor(loss_fn(leaves))
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    else:
        # loss independent of every input
        grads = (None,) * len(leaves)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(base, grads, strict=True)]

    coords = [(i, j) for i, p in enumerate(base) for j in range(p.numel())]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picks = sorted(rng.choice(len(coords), size=max_coords, replace=False).tolist())
        coords = [coords[k] for k in picks]

    worst, max_error = None, 0.0
    with torch.no_grad():
        for i, j in coords:
            shifted = [p.clone() for p in base]
            flat = shifted[i].view(-1)
            flat[j] = base[i].view(-1)[j] + epsilon
            f_plus = float(loss_fn(shifted))
            flat[j] = base[i].view(-1)[j] - epsilon
            f_minus = float(loss_fn(shifted))
            numeric = (f_plus - f_minus) / (2 * epsilon)
            exact = float(analytic[i].view(-1)[j])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            if error > max_error or worst is None:
                worst, max_error = (i, j), max(error, max_error)

    report = GradCheckReport(max_error, max_error <= tolerance, len(coords), worst, tolerance)
    logger.debug(f"gradient check over {len(coords)} coordinates: max relative error {max_error:.3e}")
    return report
