"""RMSProp and LARS optimizers plus the learning-rate schedule engine.

The schedule scales a reference rate linearly with the global batch (per 256
samples), warms up linearly from zero, then decays either exponentially
(staircase) or polynomially. Schedule arithmetic is float64 so closed-form
checks hold to 1e-12; optimizer steps run in whatever dtype the parameters
carry (float32 in training).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter

EXCLUDED_FROM_ADAPTATION = frozenset({"bias", "bn_gamma", "bn_beta"})


@dataclass(frozen=True)
class RmsPropConfig:
    decay: float = 0.9
    momentum: float = 0.9
    eps: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"rmsprop decay must be in (0,1), got {self.decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.eps <= 0:
            raise ValueError(f"rmsprop eps must be > 0, got {self.eps}")


@dataclass(frozen=True)
class LarsConfig:
    eta: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-5
    eps: float = 0.0
    exclude_tags: frozenset = EXCLUDED_FROM_ADAPTATION

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"trust coefficient must be > 0, got {self.eta}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0 or self.eps < 0:
            raise ValueError("weight_decay and eps must be >= 0")


@dataclass
class OptimizerState:
    """Per-parameter slot tensors, keyed by parameter name."""

    kind: str
    slots: dict[str, dict[str, np.ndarray]]

    _SLOT_NAMES = {"rmsprop": ("acc", "mom"), "lars": ("mom",)}

    @classmethod
    def for_params(cls, kind: str, params: list[Parameter]) -> "OptimizerState":
        if kind not in cls._SLOT_NAMES:
            raise ValueError(f"unknown optimizer kind {kind!r}")
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        slots = {
            p.name: {s: np.zeros_like(p.value) for s in cls._SLOT_NAMES[kind]}
            for p in params
        }
        return cls(kind, slots)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.kind,
            {n: {s: a.copy() for s, a in d.items()} for n, d in self.slots.items()},
        )


def _check_step_args(params, grads, state, kind):
    if state.kind != kind:
        raise ValueError(f"optimizer state is for {state.kind!r}, not {kind!r}")
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter {p.name} shape "
                f"{p.value.shape}"
            )


def rmsprop_step(
    params: list[Parameter],
    grads: list[np.ndarray],
    lr: float,
    cfg: RmsPropConfig,
    state: OptimizerState,
) -> None:
    """acc <- rho*acc + (1-rho)*g^2; mom <- m*mom + lr*g/sqrt(acc+eps); w -= mom."""
    _check_step_args(params, grads, state, "rmsprop")
    for p, g in zip(params, grads):
        sl = state.slots[p.name]
        acc, mom = sl["acc"], sl["mom"]
        np.multiply(acc, cfg.decay, out=acc)
        acc += (1.0 - cfg.decay) * (g * g)
        np.multiply(mom, cfg.momentum, out=mom)
        mom += lr * g / np.sqrt(acc + cfg.eps)
        p.value -= mom


def lars_trust_ratio(w_norm: float, g_norm: float, cfg: LarsConfig) -> float:
    """Layer-adaptation multiplier eta*|w| / (|g| + wd*|w| + eps).

    Degenerate layers (zero weight norm, or zero denominator) fall back to 1
    so the update reduces to plain momentum SGD.
    """
    if w_norm < 0 or g_norm < 0:
        raise ValueError("norms must be >= 0")
    denom = g_norm + cfg.weight_decay * w_norm
    if w_norm > 0 and denom > 0:
        return cfg.eta * w_norm / (denom + cfg.eps)
    return 1.0


def lars_step(
    params: list[Parameter],
    grads: list[np.ndarray],
    lr: float,
    cfg: LarsConfig,
    state: OptimizerState,
) -> None:
    """Momentum SGD with per-layer trust-ratio scaling and weight decay.

    Parameters whose tag is excluded (biases and BN affine terms by default)
    skip both the adaptation and the weight decay.
    """
    _check_step_args(params, grads, state, "lars")
    for p, g in zip(params, grads):
        mom = state.slots[p.name]["mom"]
        if p.tag in cfg.exclude_tags:
            local_lr = lr
            step_grad = g
        else:
            w_norm = float(np.linalg.norm(p.value))
            g_norm = float(np.linalg.norm(g))
            local_lr = lr * lars_trust_ratio(w_norm, g_norm, cfg)
            step_grad = g + cfg.weight_decay * p.value if cfg.weight_decay else g
        np.multiply(mom, cfg.momentum, out=mom)
        mom += local_lr * step_grad
        p.value -= mom


# ---------------------------------------------------------------------------
# learning-rate schedule


def base_lr(lr_per_256: float, global_batch: int) -> float:
    """Linear scaling rule: the reference rate applied per 256 samples."""
    if global_batch < 1:
        raise ValueError(f"global batch must be >= 1, got {global_batch}")
    return lr_per_256 * global_batch / 256.0


@dataclass(frozen=True)
class ExponentialDecay:
    rate: float = 0.97
    epochs_per_decay: float = 2.4

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"decay rate must be in (0,1], got {self.rate}")
        if self.epochs_per_decay <= 0:
            raise ValueError("epochs_per_decay must be > 0")


@dataclass(frozen=True)
class PolynomialDecay:
    power: float = 2.0
    end_lr: float = 0.0

    def __post_init__(self):
        if self.power <= 0:
            raise ValueError(f"polynomial power must be > 0, got {self.power}")
        if self.end_lr < 0:
            raise ValueError(f"end_lr must be >= 0, got {self.end_lr}")


@dataclass(frozen=True)
class ScheduleSpec:
    lr_per_256: float
    global_batch: int
    warmup_epochs: float
    steps_per_epoch: int
    total_epochs: float = 350.0
    decay: ExponentialDecay | PolynomialDecay = field(default_factory=PolynomialDecay)

    def __post_init__(self):
        if self.lr_per_256 <= 0:
            raise ValueError(f"lr_per_256 must be > 0, got {self.lr_per_256}")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if not 0.0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError(
                f"need 0 <= warmup ({self.warmup_epochs}) <= total "
                f"({self.total_epochs})"
            )

    @property
    def peak_lr(self) -> float:
        return base_lr(self.lr_per_256, self.global_batch)


# Guards floor() against float noise when an epoch lands exactly on a decay
# boundary; boundaries are assigned to the new stair (right-continuous).
_BOUNDARY_EPS = 1e-9


def lr_at(spec: ScheduleSpec, step: int) -> float:
    """Learning rate at an integer step of the schedule."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    e = step / spec.steps_per_epoch
    peak = spec.peak_lr
    if e < spec.warmup_epochs:
        return peak * e / spec.warmup_epochs
    d = spec.decay
    if isinstance(d, ExponentialDecay):
        k = math.floor((e - spec.warmup_epochs) / d.epochs_per_decay + _BOUNDARY_EPS)
        return peak * d.rate**k
    if e >= spec.total_epochs:
        return d.end_lr
    frac = (e - spec.warmup_epochs) / (spec.total_epochs - spec.warmup_epochs)
    return d.end_lr + (peak - d.end_lr) * (1.0 - frac) ** d.power
