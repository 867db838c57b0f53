"""Step-indexed learning-rate, temperature, and contrastive-weight schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleSpec:
    total_steps: int
    warmup_steps: int = 0
    lr_base: float = 1e-3
    lr_final: float = 1e-6
    tau_start: float = 0.2
    tau_end: float = 0.07
    lambda_start: float = 0.05
    lambda_end: float = 0.3
    lambda_warmup_fraction: float = 0.5
    lambda_hold_fraction: float = 0.1
    lambda_shape: str = "ramp"  # or "triangular"

    def validate(self):
        if self.total_steps < 1:
            raise ScheduleError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ScheduleError(f"warmup_steps {self.warmup_steps} must lie in [0, total_steps)")
        if not self.tau_start >= self.tau_end > 0:
            raise ScheduleError("need tau_start >= tau_end > 0")
        if self.lambda_start < 0 or self.lambda_end < 0:
            raise ScheduleError("lambda values must be non-negative")
        if not self.lambda_hold_fraction <= self.lambda_warmup_fraction <= 1:
            raise ScheduleError("need lambda_hold_fraction <= lambda_warmup_fraction <= 1")
        if self.lambda_shape not in ("ramp", "triangular"):
            raise ScheduleError(f"unknown lambda_shape {self.lambda_shape!r}")
        return self


def _check(spec, step):
    if not 0 <= step <= spec.total_steps:
        raise ScheduleError(f"step {step} outside [0, {spec.total_steps}]")


def _cosine(start, end, progress):
    if progress <= 0:
        return start
    if progress >= 1:
        return end
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * progress))


def lr_at(spec, step):
    """Linear warmup from 0 to ``lr_base``, then cosine decay to ``lr_final``."""
    _check(spec, step)
    w = spec.warmup_steps
    if step < w:
        return spec.lr_base * step / w
    return _cosine(spec.lr_base, spec.lr_final, (step - w) / (spec.total_steps - w))


def tau_at(spec, step):
    _check(spec, step)
    return _cosine(spec.tau_start, spec.tau_end, step / spec.total_steps)


def lambda_at(spec, step):
    """Hold, ramp linearly, then hold at the end value.

    The triangular shape mirrors the ramp back down over the remaining steps.
    """
    _check(spec, step)
    frac = step / spec.total_steps
    lo, hi = spec.lambda_start, spec.lambda_end
    hold, peak = spec.lambda_hold_fraction, spec.lambda_warmup_fraction
    if frac <= hold:
        return lo
    if frac < peak:
        return lo + (hi - lo) * (frac - hold) / (peak - hold)
    if spec.lambda_shape == "ramp" or peak >= 1:
        return hi
    return lo + (hi - lo) * (1.0 - frac) / (1.0 - peak)
