"""bfloat16 emulation and the mixed-precision policy.

Mixed precision rounds convolution operands (inputs and kernels) to the
nearest bfloat16-representable value and accumulates in fp32; every non-conv
operation stays fp32. Values are stored as fp32 throughout -- the emulation is
numerical, not a memory-layout change. Backward convolutions reuse the same
rounded operands as the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

_HI_MASK = np.uint32(0xFFFF0000)
_HALF_ULP = np.uint32(0x7FFF)
_ONE = np.uint32(1)
_SIXTEEN = np.uint32(16)


@dataclass(frozen=True)
class PrecisionPolicy:
    mode: str

    def __post_init__(self):
        if self.mode not in ("fp32_only", "mixed_bf16_conv"):
            raise ValueError(f"unknown precision mode {self.mode!r}")

    @property
    def rounds_conv(self) -> bool:
        return self.mode == "mixed_bf16_conv"


FP32_ONLY = PrecisionPolicy("fp32_only")
MIXED_BF16_CONV = PrecisionPolicy("mixed_bf16_conv")


def to_bf16(x) -> np.ndarray:
    """Round fp32 values to the nearest bfloat16-representable fp32 value.

    Round-to-nearest-even on the 16 discarded mantissa bits; NaNs pass
    through unchanged, infinities are preserved, and finite values beyond
    the bf16 range round to infinity as RNE requires.
    """
    arr = np.asarray(x, dtype=np.float32)
    flat = np.ascontiguousarray(arr).reshape(-1)
    bits = flat.view(np.uint32)
    rounded = (bits + _HALF_ULP + ((bits >> _SIXTEEN) & _ONE)) & _HI_MASK
    out = np.where(np.isnan(flat), flat, rounded.view(np.float32))
    return out.reshape(arr.shape)


def conv2d_mixed(
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    padding: str = "same",
    policy: PrecisionPolicy = FP32_ONLY,
) -> np.ndarray:
    if policy.rounds_conv:
        return nn.conv2d_forward(to_bf16(x), to_bf16(kernel), stride, padding)
    return nn.conv2d_forward(x, kernel, stride, padding)


def conv2d_mixed_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: str = "same",
    policy: PrecisionPolicy = FP32_ONLY,
):
    if policy.rounds_conv:
        return nn.conv2d_backward(to_bf16(x), to_bf16(kernel), grad_out, stride, padding)
    return nn.conv2d_backward(x, kernel, grad_out, stride, padding)


def depthwise_conv2d_mixed(
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    padding: str = "same",
    policy: PrecisionPolicy = FP32_ONLY,
) -> np.ndarray:
    if policy.rounds_conv:
        return nn.depthwise_conv2d_forward(to_bf16(x), to_bf16(kernel), stride, padding)
    return nn.depthwise_conv2d_forward(x, kernel, stride, padding)


def depthwise_conv2d_mixed_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: str = "same",
    policy: PrecisionPolicy = FP32_ONLY,
):
    if policy.rounds_conv:
        return nn.depthwise_conv2d_backward(
            to_bf16(x), to_bf16(kernel), grad_out, stride, padding
        )
    return nn.depthwise_conv2d_backward(x, kernel, grad_out, stride, padding)
