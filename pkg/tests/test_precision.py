"""bfloat16 rounding and mixed-precision convolution tests."""

import numpy as np
import pytest

from minipod import nn
from minipod.precision import (
    FP32_ONLY,
    MIXED_BF16_CONV,
    PrecisionPolicy,
    conv2d_mixed,
    conv2d_mixed_backward,
    to_bf16,
)


def all_bf16_patterns() -> np.ndarray:
    """Every fp32 value whose low 16 bits are zero (i.e. all 2^16 bf16s)."""
    bits = (np.arange(2**16, dtype=np.uint32) << np.uint32(16))
    return bits.view(np.float32)


def test_known_values():
    assert float(to_bf16(np.float32(1.0))) == 1.0
    assert float(to_bf16(np.float32(0.1))) == 0.10009765625
    # below the halfway point of the 2^-7 ulp at 1.0: rounds down
    assert float(to_bf16(np.float32(1 + 2**-9))) == 1.0


def test_round_to_nearest_even_ties():
    # exact ties on either side of an even mantissa
    assert float(to_bf16(np.float32(1 + 2**-8))) == 1.0           # tie -> even (down)
    assert float(to_bf16(np.float32(1 + 2**-7 + 2**-8))) == 1 + 2**-6  # tie -> even (up)
    assert float(to_bf16(np.float32(1 + 2**-8 + 2**-9))) == 1 + 2**-7  # above tie


def test_exhaustive_roundtrip_all_patterns():
    pats = all_bf16_patterns()
    out = to_bf16(pats)
    assert out.view(np.uint32).tobytes() == pats.view(np.uint32).tobytes()


def test_idempotent_and_monotone_on_random_samples():
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2**32, size=1_000_000, dtype=np.uint64).astype(np.uint32)
    x = bits.view(np.float32)
    finite = x[np.isfinite(x)]
    q = to_bf16(finite)
    assert to_bf16(q).tobytes() == q.tobytes()
    # keep values whose rounding stays finite, so diffs never hit inf - inf
    ordered = np.sort(finite[np.abs(finite) < 3.38e38])
    qo = to_bf16(ordered)
    assert not (np.diff(qo) < 0).any()


def test_special_values():
    x = np.array([np.inf, -np.inf, 0.0, -0.0, np.nan], dtype=np.float32)
    q = to_bf16(x)
    assert q[0] == np.inf and q[1] == -np.inf
    assert q[2] == 0.0 and np.signbit(q[3])
    assert np.isnan(q[4])
    # finite values beyond the largest bf16 round to infinity
    big = np.float32(np.finfo(np.float32).max)
    assert to_bf16(big) == np.inf


def test_policy_validation():
    with pytest.raises(ValueError):
        PrecisionPolicy("fp16")


def test_fp32_policy_is_bitwise_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 6, 6, 3)).astype(np.float32)
    k = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
    a = conv2d_mixed(x, k, 2, "same", FP32_ONLY)
    b = nn.conv2d_forward(x, k, 2, "same")
    assert a.tobytes() == b.tobytes()


def test_bf16_representable_inputs_identical_paths():
    rng = np.random.default_rng(2)
    # small integers are exactly representable in bf16
    x = rng.integers(-8, 9, size=(1, 5, 5, 2)).astype(np.float32)
    k = rng.integers(-4, 5, size=(3, 3, 2, 2)).astype(np.float32)
    a = conv2d_mixed(x, k, 1, "valid", MIXED_BF16_CONV)
    b = nn.conv2d_forward(x, k, 1, "valid")
    assert a.tobytes() == b.tobytes()


def test_mixed_error_bound_scales_with_accumulation_length():
    rng = np.random.default_rng(3)
    # positive operands: no cancellation, so the elementwise bound is tight
    x = rng.random((2, 8, 8, 4)).astype(np.float32)
    k = rng.random((3, 3, 4, 4)).astype(np.float32)
    exact = nn.conv2d_forward(x, k, 1, "valid")
    mixed = conv2d_mixed(x, k, 1, "valid", MIXED_BF16_CONV)
    acc_len = 3 * 3 * 4
    rel = np.abs(mixed - exact) / np.abs(exact)
    assert float(rel.max()) <= 2.0**-7 * acc_len


def test_mixed_backward_uses_rounded_operands():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 5, 5, 2)).astype(np.float32)
    k = rng.standard_normal((3, 3, 2, 3)).astype(np.float32)
    g = rng.standard_normal((1, 3, 3, 3)).astype(np.float32)
    got = conv2d_mixed_backward(x, k, g, 1, "valid", MIXED_BF16_CONV)
    want = nn.conv2d_backward(to_bf16(x), to_bf16(k), g, 1, "valid")
    assert got[0].tobytes() == want[0].tobytes()
    assert got[1].tobytes() == want[1].tobytes()


def test_mixed_gradcheck_consistency():
    # conv output is linear in each single operand element, so the secant
    # between two bf16 grid points equals the exact partial derivative.
    rng = np.random.default_rng(5)
    x = to_bf16(rng.standard_normal((1, 4, 4, 2)).astype(np.float32))
    k = to_bf16(rng.standard_normal((3, 3, 2, 2)).astype(np.float32))
    w = rng.standard_normal(nn.conv2d_forward(x, k, 1, "valid").shape).astype(np.float32)

    def loss():
        return float((conv2d_mixed(x, k, 1, "valid", MIXED_BF16_CONV) * w).sum())

    _, gk = conv2d_mixed_backward(x, k, w, 1, "valid", MIXED_BF16_CONV)
    kf = k.reshape(-1)
    worst = 0.0
    for j in range(kf.size):
        orig = kf[j]
        step = np.float32(2.0 ** (np.floor(np.log2(abs(orig))) - 3)) if orig else np.float32(2**-10)
        kf[j] = to_bf16(orig + step).item()
        hi_val, hi_arg = loss(), float(kf[j])
        kf[j] = to_bf16(orig - step).item()
        lo_val, lo_arg = loss(), float(kf[j])
        kf[j] = orig
        secant = (hi_val - lo_val) / (hi_arg - lo_arg)
        a = float(gk.reshape(-1)[j])
        worst = max(worst, abs(a - secant) / max(abs(a), abs(secant), 1e-8))
    assert worst < 1e-2
