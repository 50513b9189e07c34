"""Linear warm-up followed by per-epoch polynomial decay."""

from __future__ import annotations

from dataclasses import dataclass


class OutOfRangeIteration(ValueError):
    pass


class OutOfRangeEpoch(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    lr_init_image: float = 1e-4
    lr_init_text: float = 5e-5
    t_max_warmup: int = 5000
    e_max: int = 100
    poly_power: float = 0.9
    iterations_per_epoch: int = 250

    def __post_init__(self):
        if self.lr_init_image <= 0 or self.lr_init_text <= 0:
            raise ValueError("initial learning rates must be positive")
        if self.t_max_warmup < 1 or self.e_max < 1 or self.iterations_per_epoch < 1:
            raise ValueError("t_max_warmup, e_max and iterations_per_epoch must be >= 1")


def warmup_lr(t: int, cfg: ScheduleConfig, lr_init: float | None = None) -> float:
    """``lr_init * t / t_max`` for 1 <= t <= t_max."""
    if not 1 <= t <= cfg.t_max_warmup:
        raise OutOfRangeIteration(f"iteration {t} outside [1, {cfg.t_max_warmup}]")
    base = cfg.lr_init_image if lr_init is None else lr_init
    return base * t / cfg.t_max_warmup


def poly_lr(e: int, cfg: ScheduleConfig, lr_init: float | None = None) -> float:
    """``lr_init * (1 - e / e_max) ** power`` for 0 <= e <= e_max."""
    if not 0 <= e <= cfg.e_max:
        raise OutOfRangeEpoch(f"epoch {e} outside [0, {cfg.e_max}]")
    base = cfg.lr_init_image if lr_init is None else lr_init
    return base * (1 - e / cfg.e_max) ** cfg.poly_power


def scheduled_lr(iteration: int, cfg: ScheduleConfig, lr_init: float) -> float:
    """Learning rate at 1-based training ``iteration``.

    Warm-up covers iterations 1..t_max; afterwards the decay epoch is the
    number of whole epochs completed since warm-up ended.
    """
    if iteration <= cfg.t_max_warmup:
        return warmup_lr(iteration, cfg, lr_init)
    e = (iteration - cfg.t_max_warmup - 1) // cfg.iterations_per_epoch
    return poly_lr(e, cfg, lr_init)
