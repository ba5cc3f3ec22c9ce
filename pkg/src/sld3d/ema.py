"""EMA teacher, its smoothing schedule, the consistency weight ramp and loss."""
from __future__ import annotations

import copy

import torch
import torch.nn as nn

from .fields import dice_loss, mips

STEPS_PER_EPOCH = 200


def alpha(i: int, steps_per_epoch: int = STEPS_PER_EPOCH) -> float:
    """EMA smoothing coefficient, ramping from 0 toward 1."""
    if i < 0 or steps_per_epoch <= 0:
        raise ValueError("need i >= 0 and steps_per_epoch > 0")
    return 1.0 - 1.0 / (i / steps_per_epoch + 1.0)


def lambda_con(i: int, steps_per_epoch: int = STEPS_PER_EPOCH) -> float:
    """Consistency-loss weight: linear ramp 4i/I capped at 10."""
    if i < 0:
        raise ValueError("step must be nonnegative")
    return min(4.0 * i / steps_per_epoch, 10.0)


@torch.no_grad()
def ema_update_(shadow, params, a: float):
    """In-place ``shadow = a * shadow + (1 - a) * params`` over matching tensors."""
    shadow, params = list(shadow), list(params)
    if len(shadow) != len(params):
        raise ValueError("parameter lists differ in length")
    for s, p in zip(shadow, params):
        if s.shape != p.shape:
            raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(p.shape)}")
        s.mul_(a).add_(p.detach(), alpha=1.0 - a)


class EmaTeacher:
    """Shadow copy of a student network, updated once per optimisation step.

    The step counter starts at zero, so the first update copies the student.
    """

    def __init__(self, student: nn.Module, steps_per_epoch: int = STEPS_PER_EPOCH):
        self.model = copy.deepcopy(student)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.steps_per_epoch = steps_per_epoch
        self.step = 0

    @property
    def alpha(self) -> float:
        return alpha(self.step, self.steps_per_epoch)

    def update(self, student: nn.Module) -> float:
        a = self.alpha
        ema_update_(self.model.parameters(), student.parameters(), a)
        with torch.no_grad():
            for b_t, b_s in zip(self.model.buffers(), student.buffers()):
                b_t.copy_(b_s)
        self.step += 1
        return a

    @torch.no_grad()
    def predict(self, x: torch.Tensor):
        self.model.eval()
        return self.model(x)

    def state_dict(self):
        return {"model": self.model.state_dict(), "step": self.step, "steps_per_epoch": self.steps_per_epoch}

    def load_state_dict(self, state):
        self.model.load_state_dict(state["model"])
        self.step = int(state["step"])
        self.steps_per_epoch = int(state["steps_per_epoch"])


def _flat_mips(vessel: torch.Tensor) -> torch.Tensor:
    return torch.cat([s.reshape(-1) for n in range(vessel.shape[0]) for s in mips(vessel[n])])


def loss_consistency(student: torch.Tensor, teacher: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Dice agreement of (N, D, H, W) vessel maps plus dice agreement of all their MIPs.

    Each dice term is taken over the whole concatenated set, not averaged per item.
    """
    if student.shape != teacher.shape:
        raise ValueError(f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    teacher = teacher.detach()
    vol = dice_loss(student, teacher, eps)
    proj = dice_loss(_flat_mips(student), _flat_mips(teacher), eps)
    return vol + proj
