"""Shared numeric kernel: dtype policy, gradients, Adam, finite-difference checks.

Reverse-mode differentiation and the Adam update are delegated to PyTorch.
The gradient checker is written independently of autograd: it only ever
evaluates the loss, so it can serve as an oracle for every analytic gradient
in the package.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient stops being finite during training."""


DTYPES = {"float64": torch.float64, "float32": torch.float32}


def resolve_dtype(name: str) -> torch.dtype:
    try:
        return DTYPES[name]
    except KeyError:
        raise ContractError(f"unsupported dtype {name!r}; choose from {sorted(DTYPES)}") from None


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; return a dedicated torch generator."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def named_parameters(params: nn.Module | Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    if isinstance(params, nn.Module):
        return dict(params.named_parameters())
    return dict(params)


def backward(loss: torch.Tensor, params: nn.Module | Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss for every named parameter.

    Parameters the loss does not depend on get an explicit zero gradient.
    The ``.grad`` fields are populated as well so an optimizer can follow.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    named = named_parameters(params)
    tensors = list(named.values())
    if loss.requires_grad:
        grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)
    out = {}
    for (name, p), g in zip(named.items(), grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        out[name] = g
        p.grad = g.clone()
    return out


@dataclass
class AdamState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: nn.Module | Mapping[str, torch.Tensor], state: AdamState) -> None:
    """One Adam update from the ``.grad`` fields, in place.

    A parameter without a gradient is treated as having a zero gradient, so
    its moments still decay. NaN or inf in any gradient aborts the step before
    anything is modified.
    """
    named = named_parameters(params)
    for name, p in named.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in named.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m = state.exp_avg.setdefault(name, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if state.lr == 0.0:
                continue
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m / bc1, denom, value=-state.lr)


class Adam:
    """Thin optimizer facade over :func:`adam_step` with per-group learning rates."""

    def __init__(self, groups: Iterable[tuple[nn.Module, float]], betas=(0.9, 0.999), eps=1e-8):
        self.groups = [(module, AdamState(lr=lr, betas=betas, eps=eps)) for module, lr in groups]

    def zero_grad(self) -> None:
        for module, _ in self.groups:
            for p in module.parameters():
                p.grad = None

    def step(self) -> None:
        for module, state in self.groups:
            if any(p.grad is not None for p in module.parameters()):
                adam_step(module, state)


def check_finite(value: torch.Tensor, where: str) -> None:
    if not torch.isfinite(value).all():
        raise DivergenceError(f"non-finite loss at {where}")


class _StopGradientTape:
    """Records stop-gradient values on the first pass and replays them after."""

    def __init__(self):
        self.values: list[torch.Tensor] = []
        self.pos = 0
        self.recording = True

    def rewind(self) -> None:
        if self.pos:
            self.recording = False
        self.pos = 0

    def take(self, x: torch.Tensor) -> torch.Tensor:
        if self.recording:
            self.values.append(x.detach().clone())
            return self.values[-1]
        if self.pos >= len(self.values) or self.values[self.pos].shape != x.shape:
            raise ContractError("loss evaluated a different stop-gradient sequence on replay")
        self.pos += 1
        return self.values[self.pos - 1]


_TAPE: _StopGradientTape | None = None


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """``x.detach()``; under :func:`frozen_stop_gradients` the value is also
    held at what it was on the first evaluation."""
    if _TAPE is None:
        return x.detach()
    if _TAPE.recording:
        _TAPE.pos += 1
    return _TAPE.take(x)


@contextmanager
def frozen_stop_gradients():
    """Freeze every stop-gradient operand (and so every code index) at its
    first-pass value. Inside, finite differences see the function whose exact
    derivative is the straight-through gradient."""
    global _TAPE
    prev, _TAPE = _TAPE, _StopGradientTape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    flagged: dict[str, list[tuple[int, ...]]]
    tolerance: float
    deterministic: bool = True

    @property
    def passed(self) -> bool:
        return self.deterministic and not any(self.flagged.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: nn.Module | Mapping[str, torch.Tensor],
    epsilon: float = 1e-6,
    tolerance: float = 1e-5,
    abs_floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    freeze_stop_gradients: bool = False,
    reference: tuple[Callable[[], torch.Tensor], nn.Module | Mapping[str, torch.Tensor]] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients against central differences.

    ``loss_fn`` is evaluated with every parameter entry nudged by
    ``+-epsilon`` in turn; the relative error per entry is
    ``|a - n| / max(|a|, |n|, abs_floor)``. ``max_entries`` samples a subset
    of entries per parameter (deterministically) for large tensors.
    With ``freeze_stop_gradients`` every :func:`stop_gradient` operand is
    held at its unperturbed value, which checks straight-through gradients
    with code indices frozen.

    ``reference`` is an optional ``(loss_fn, params)`` pair describing the
    same function at higher precision (same parameter names and shapes).
    The finite differences are then taken there, so a 32-bit gradient can be
    judged against a 64-bit numerical derivative.
    """
    ref_fn, ref_params = reference if reference is not None else (loss_fn, params)
    if freeze_stop_gradients:
        with frozen_stop_gradients() as tape:
            loss_fn = _replaying(loss_fn, tape)
            analytic = _analytic(loss_fn, params)
            if analytic is None:
                return GradCheckReport({}, {}, tolerance, deterministic=False)
        with frozen_stop_gradients() as tape:
            return _compare(analytic, _replaying(ref_fn, tape), ref_params, epsilon, tolerance, abs_floor,
                            max_entries, seed)
    analytic = _analytic(loss_fn, params)
    if analytic is None:
        return GradCheckReport({}, {}, tolerance, deterministic=False)
    return _compare(analytic, ref_fn, ref_params, epsilon, tolerance, abs_floor, max_entries, seed)


def _replaying(loss_fn, tape):
    def replayed():
        tape.rewind()
        return loss_fn()

    return replayed


def _analytic(loss_fn, params) -> dict[str, torch.Tensor] | None:
    named = named_parameters(params)
    with torch.no_grad():
        first = float(loss_fn())
        second = float(loss_fn())
    if first != second:
        return None
    for p in named.values():
        p.grad = None
    return {k: g.detach().double() for k, g in backward(loss_fn(), named).items()}


def _compare(analytic, loss_fn, params, epsilon, tolerance, abs_floor, max_entries, seed) -> GradCheckReport:
    named = named_parameters(params)
    if set(named) != set(analytic):
        raise ContractError("reference parameters do not match the checked parameters")
    with torch.no_grad():
        if float(loss_fn()) != float(loss_fn()):
            return GradCheckReport({}, {}, tolerance, deterministic=False)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    flagged: dict[str, list[tuple[int, ...]]] = {}
    for name, p in named.items():
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = np.sort(rng.choice(flat.numel(), size=max_entries, replace=False))
        worst = 0.0
        bad = []
        for j in idx:
            orig = float(flat[j])
            with torch.no_grad():
                flat[j] = orig + epsilon
                up = float(loss_fn())
                flat[j] = orig - epsilon
                down = float(loss_fn())
                flat[j] = orig
            numeric = (up - down) / (2 * epsilon)
            err = _rel_error(float(analytic[name].view(-1)[j]), numeric, abs_floor)
            worst = max(worst, err)
            if err > tolerance or math.isnan(err):
                bad.append(tuple(np.unravel_index(j, tuple(p.shape))))
        errors[name] = worst
        flagged[name] = bad
    return GradCheckReport(errors, flagged, tolerance)
