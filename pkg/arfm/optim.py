from __future__ import annotations

import logging
import typing
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)


class NonFiniteGradient(RuntimeError):
    pass


class OptimizerState(object):
    def __init__(self, params: typing.Iterable[torch.Tensor], lr: float = 5e-5, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, clip_norm: float = 1.0) -> None:
        """ AdamW moments and step counters for one set of parameters. """
        self.params = [param for param in params if param.requires_grad]
        self.optimizer = torch.optim.AdamW(self.params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        self.clip_norm = clip_norm
        self.accepted_steps = 0
        self.rejected_steps = 0

    def __repr__(self) -> str:
        return f"<OptimizerState (accepted: {self.accepted_steps}, rejected: {self.rejected_steps})>"

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def state_dict(self) -> dict:
        return {"optimizer": self.optimizer.state_dict(), "accepted_steps": self.accepted_steps,
                "rejected_steps": self.rejected_steps}

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.accepted_steps = state["accepted_steps"]
        self.rejected_steps = state["rejected_steps"]


def adamw_step(state: OptimizerState, grads: typing.Optional[typing.Sequence[torch.Tensor]] = None,
               strict: bool = False) -> bool:
    """
    Clip the global gradient norm and apply one AdamW update.
    A step with non-finite gradients leaves parameters and moments untouched.
    :param grads: gradients matching `state.params`; defaults to the `.grad` of each parameter
    :param strict: raise NonFiniteGradient instead of rejecting the step
    :return: True when the update was applied
    """
    if grads is not None:
        if len(grads) != len(state.params):
            raise ValueError(f"got {len(grads)} gradients for {len(state.params)} parameters")
        for param, grad in zip(state.params, grads):
            param.grad = None if grad is None else grad.detach().clone()
    finite = all(torch.isfinite(param.grad).all() for param in state.params if param.grad is not None)
    if not finite:
        state.rejected_steps += 1
        state.zero_grad()
        if strict:
            raise NonFiniteGradient(f"non-finite gradient after {state.accepted_steps} accepted steps")
        logger.warning("Rejected optimizer step with non-finite gradient (%d rejected so far)", state.rejected_steps)
        return False
    if state.clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(state.params, state.clip_norm)
    state.optimizer.step()
    state.zero_grad()
    state.accepted_steps += 1
    return True


class EmaState(object):
    def __init__(self, model: nn.Module, decay: float = 0.9999, interval: int = 100, warmup: bool = False) -> None:
        """
        Exponential moving average of the parameters of `model`.
        :param interval: update only on steps divisible by this
        :param warmup: cap the decay at (1 + n) / (10 + n) for the n-th update
        """
        assert 0.0 <= decay <= 1.0, "decay must be in [0, 1]"
        assert interval >= 1, "interval must be positive"
        self.decay = decay
        self.interval = interval
        self.warmup = warmup
        self.updates = 0
        self.shadow = {name: param.detach().clone() for name, param in model.named_parameters()}

    def __repr__(self) -> str:
        return f"<EmaState (decay: {self.decay}, interval: {self.interval}, updates: {self.updates})>"

    def current_decay(self) -> float:
        if self.warmup:
            return min(self.decay, (1 + self.updates) / (10 + self.updates))
        return self.decay

    def maybe_update(self, step: int, model: nn.Module) -> bool:
        if step % self.interval != 0:
            return False
        ema_update(self, model)
        return True

    def copy_to(self, model: nn.Module) -> None:
        with torch.no_grad():
            for name, param in model.named_parameters():
                param.copy_(self.shadow[name])

    def state_dict(self, prefix: str = "") -> dict[str, torch.Tensor]:
        return {f"{prefix}{name}": value.clone() for name, value in self.shadow.items()}


def ema_update(ema: EmaState, model: typing.Union[nn.Module, dict]) -> EmaState:
    """ shadow <- decay * shadow + (1 - decay) * params """
    params = dict(model.named_parameters()) if isinstance(model, nn.Module) else model
    weight = 1.0 - ema.current_decay()
    with torch.no_grad():
        for name, shadow in ema.shadow.items():
            shadow.lerp_(params[name].detach(), weight)
    ema.updates += 1
    return ema


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    tolerance: float
    worst: typing.Optional[tuple[int, int]] = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_diff_check(loss_fn: typing.Callable[[], torch.Tensor], params: typing.Sequence[torch.Tensor],
                      epsilon: float = 1e-3, tolerance: float = 1e-3, samples_per_param: int = 8, seed: int = 0,
                      floor: float = 1e-6) -> GradCheckReport:
    """
    Compare autograd gradients with central differences on sampled coordinates.
    Meant for float64 parameters.
    :param loss_fn: closure recomputing the scalar loss from `params`
    :return: GradCheckReport with the largest relative error |a - f| / max(|a|, |f|, floor)
    """
    params = list(params)
    loss = loss_fn()
    if loss.requires_grad:
        analytic = torch.autograd.grad(loss, params, allow_unused=True)
    else:
        analytic = [None] * len(params)
    analytic = [torch.zeros_like(param) if grad is None else grad.detach() for param, grad in zip(params, analytic)]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, max_abs_error=0.0, checked=0, tolerance=tolerance)
    with torch.no_grad():
        for param_index, param in enumerate(params):
            flat = param.data.view(-1)
            count = min(samples_per_param, flat.numel())
            for index in rng.choice(flat.numel(), size=count, replace=False):
                index = int(index)
                original = flat[index].item()
                flat[index] = original + epsilon
                plus = float(loss_fn())
                flat[index] = original - epsilon
                minus = float(loss_fn())
                flat[index] = original
                numeric = (plus - minus) / (2.0 * epsilon)
                value = analytic[param_index].view(-1)[index].item()
                abs_error = abs(value - numeric)
                rel_error = abs_error / max(abs(value), abs(numeric), floor)
                report.checked += 1
                report.max_abs_error = max(report.max_abs_error, abs_error)
                if rel_error > report.max_rel_error:
                    report.max_rel_error = rel_error
                    report.worst = (param_index, index)
    logger.debug("Gradient check over %d coordinates: max relative error %.3g", report.checked, report.max_rel_error)
    return report
