#!/usr/bin/env python3
"""bfloat16 rounding up close: nearest-even behavior, the error bound of a
mixed-precision convolution, and why fp32 accumulation keeps it tame.
"""

import numpy as np

from minipod import nn
from minipod.precision import FP32_ONLY, MIXED_BF16_CONV, conv2d_mixed, to_bf16


def bits(x):
    return f"0x{np.float32(x).view(np.uint32):08x}"


print("value            -> bf16-rounded        (fp32 bit patterns)")
for v in [1.0, 0.1, 1 + 2**-9, 1 + 2**-8, 1 + 2**-7 + 2**-8, 3.14159265]:
    q = float(to_bf16(np.float32(v)))
    print(f"{v!r:16} -> {q!r:20} {bits(v)} -> {bits(q)}")

print("\nexact ties round to the even mantissa:")
print(f"  1 + 2^-8          -> {float(to_bf16(np.float32(1 + 2**-8)))!r} (down, even)")
print(f"  1 + 2^-7 + 2^-8   -> {float(to_bf16(np.float32(1 + 2**-7 + 2**-8)))!r} (up, even)")

rng = np.random.default_rng(0)
x = rng.random((4, 16, 16, 8)).astype(np.float32)
k = rng.random((3, 3, 8, 8)).astype(np.float32)
exact = nn.conv2d_forward(x, k)
mixed = conv2d_mixed(x, k, policy=MIXED_BF16_CONV)
rel = np.abs(mixed - exact) / np.abs(exact)
acc_len = 3 * 3 * 8
print(f"\nmixed conv vs fp32 conv on positive inputs:")
print(f"  max relative error {rel.max():.2e}")
print(f"  bound 2^-7 * accumulation length = {2**-7 * acc_len:.2e}")

same = conv2d_mixed(x, k, policy=FP32_ONLY)
print(f"  fp32_only policy bitwise identical: {same.tobytes() == exact.tobytes()}")
