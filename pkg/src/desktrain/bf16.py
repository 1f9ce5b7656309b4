"""Software bfloat16 emulation with nearest-even and stochastic rounding.

bfloat16 here means 1 sign bit, 8 exponent bits, 7 mantissa bits. Values are
carried around as float64 scalars or arrays whose values lie exactly on the
bfloat16 grid; ``BF16Word`` is the packed 16-bit encoding. Every float64 is
wide enough to hold any finite bfloat16 exactly, so decode/encode are lossless.

Two rounding modes are supported:

* RNE: round to nearest, ties to the neighbor with an even mantissa.
* SR: stochastic rounding. For a finite input x with grid neighbors
  down <= x <= up, the result is up with probability (x - down) / (up - down)
  and down otherwise, which makes the rounded value an unbiased estimator of
  x. Randomness comes from an explicit seeded stream (`SRStream`) so any
  computation is bit-replayable and the stream position can be checkpointed.

The random draw is a 32-bit uniform integer compared against the residual
ratio scaled by 2**32; the residual ratio itself is computed from the exact
float64 residual, so rounding probabilities are correct to one part in 2**32.

Finite inputs beyond the largest representable magnitude saturate to
+-MAX_FINITE and are tallied in a module-level counter instead of producing
infinities, which keeps long runs inspectable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

MANTISSA_BITS = 7
#: Largest finite bfloat16 value: 2**127 * (255/128), bit pattern 0x7f7f.
MAX_FINITE = float(np.ldexp(255.0, 120))
#: Smallest positive normal value, 2**-126.
MIN_NORMAL = float(np.ldexp(1.0, -126))
#: Smallest positive subnormal value (and the grid spacing below MIN_NORMAL).
MIN_SUBNORMAL = float(np.ldexp(1.0, -133))

_saturation_count = 0


def saturation_count() -> int:
    """Number of out-of-range inputs saturated to +-MAX_FINITE so far."""
    return _saturation_count


def reset_saturation_count() -> None:
    global _saturation_count
    _saturation_count = 0


class RoundNearestEven:
    """Marker type for deterministic round-to-nearest-even."""

    def __repr__(self) -> str:
        return "RNE"


#: The nearest-even rounding mode singleton.
RNE = RoundNearestEven()


class SRStream:
    """Seeded random stream driving stochastic-rounding decisions.

    Two streams built from equal seeds produce identical draws. The stream
    position is part of the value: `state()` / `set_state()` capture and
    restore it exactly, so a consumer can checkpoint mid-computation and
    replay bit-identically. Not safe to share across threads; use one
    stream per thread instead.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)
        self._gen = np.random.Generator(self._bits)

    def draw_u32(self, shape: tuple[int, ...]) -> np.ndarray:
        """Draw uniform uint32 values.

        The draw sequence depends only on the stream position, not on how
        draws are batched: consuming one value at a time or one big array
        yields the same words. (PCG64 serializes its half-word buffer, so
        this holds across state round trips too.)
        """
        n = 1
        for s in shape:
            n *= int(s)
        if n == 0:
            return np.empty(shape, dtype=np.uint32)
        return self._gen.integers(0, 1 << 32, size=n, dtype=np.uint32).reshape(shape)

    def state(self) -> dict:
        """JSON-serializable snapshot of seed and stream position."""
        return {"seed": self.seed, "pcg64": self._bits.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._bits.state = state["pcg64"]

    @classmethod
    def from_state(cls, state: dict) -> "SRStream":
        stream = cls(0)
        stream.set_state(state)
        return stream

    def __repr__(self) -> str:
        return f"SRStream(seed={self.seed})"


RoundingMode = Union[RoundNearestEven, SRStream]


@dataclass(frozen=True)
class BF16Word:
    """A packed bfloat16 value: 1 sign, 8 exponent, 7 mantissa bits."""

    bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.bits < 1 << 16:
            raise ValueError(f"bits out of range for a 16-bit word: {self.bits}")

    @property
    def value(self) -> float:
        return float(decode_bf16(self.bits))

    @property
    def is_finite(self) -> bool:
        return (self.bits >> 7) & 0xFF != 0xFF

    def __repr__(self) -> str:
        return f"BF16Word(0x{self.bits:04x}={self.value!r})"


def decode_bf16(bits) -> np.ndarray:
    """Decode 16-bit pattern(s) to exact float64 values (subnormals included)."""
    b = (np.asarray(bits, dtype=np.uint32) << np.uint32(16)).view(np.float32)
    return b.astype(np.float64)


def encode_bf16(values) -> np.ndarray:
    """Encode float64 value(s) already on the bfloat16 grid to bit patterns.

    The float64 -> float32 cast is exact for grid values, so this is the
    inverse of `decode_bf16` on finite words.
    """
    f32 = np.asarray(values, dtype=np.float64).astype(np.float32)
    return (f32.view(np.uint32) >> np.uint32(16)).astype(np.uint16)


def bf16_neighbors(x) -> tuple[np.ndarray, np.ndarray]:
    """Grid neighbors (down, up) with down <= x <= up for finite input(s).

    `up - down` is the local grid spacing; when x is exactly representable,
    down == x and up is the next pattern toward +inf.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("bf16_neighbors requires finite inputs")
    spacing, k, _ = _grid(arr)
    down = k * spacing
    up = (k + 1.0) * spacing
    # _grid promotes 0-d input to 1-d; give callers back the input's shape.
    return down.reshape(arr.shape), up.reshape(arr.shape)


# Bit-level constants for the fast paths below. Magnitude comparisons on
# finite doubles can run on the raw bit patterns because IEEE ordering of
# non-negative values matches unsigned integer ordering of their encodings.
_ABS_MASK = np.uint64(0x7FFFFFFFFFFFFFFF)
_SIGN_MASK = np.uint64(0x8000000000000000)
_EXP_MASK = np.uint64(0x7FF0000000000000)
_INF_BITS = _EXP_MASK
_MAX_FINITE_BITS = np.uint64(np.float64(MAX_FINITE).view(np.uint64))
#: Exponent field of MAX_FINITE's binade; values at or above it may
#: saturate (or be non-finite) and take the precise checking path.
_SAT_BINADE_BITS = _MAX_FINITE_BITS & _EXP_MASK
#: Bit pattern of 2^-126, the smallest bf16-normal binade.
_MIN_NORMAL_BITS = np.uint64(np.float64(MIN_NORMAL).view(np.uint64))
_MIN_NORMAL_M1_BITS = _MIN_NORMAL_BITS - np.uint64(1)
#: For bf16-normal magnitudes the grid keeps the top 7 of the 52 f64
#: mantissa bits; the 45 below the cut are the fractional grid position.
_GRID_FRAC_MASK = np.uint64((1 << 45) - 1)
_GRID_STEP_BITS = np.uint64(1 << 45)


def _spacing_for(bits: np.ndarray) -> np.ndarray:
    """bf16 grid spacing per element, from raw f64 bit patterns.

    Masking to the exponent field reinterprets as 2^e for |x| in the binade
    [2^e, 2^(e+1)); clamping that to 2^-126 and scaling by 2^-7 yields
    2^(e-7) for normal-range values and the constant subnormal spacing
    2^-133 for everything smaller, zeros and f64 subnormals included. Both
    the clamp and the power-of-two scale are exact.
    """
    return np.maximum(bits & _EXP_MASK, _MIN_NORMAL_BITS).view(np.float64) * 0.0078125


def _grid(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact grid decomposition: x = (k + frac) * spacing with frac in [0, 1).

    spacing is a power of two, so the division and the floor residual are
    computed without rounding error; frac is exactly the SR up-probability.
    """
    spacing = _spacing_for(np.ascontiguousarray(x).view(np.uint64))
    scaled = x / spacing
    k = np.floor(scaled)
    frac = scaled - k
    return spacing, k, frac


def _round_values(x: np.ndarray, mode: RoundingMode) -> np.ndarray:
    global _saturation_count
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if isinstance(mode, SRStream) and x.size:
        # Integer fast path for the training-loop case: every magnitude is
        # zero or bf16-normal. There the grid is a bit field of the f64
        # encoding: the 45 mantissa bits below the cut are exactly
        # frac * 2^45, one grid step is +2^45 in integer space (mantissa
        # carry walks binades), and the SR compare u < frac * 2^32 becomes
        # u * 2^13 < dropped. Every quantity is exact, and zeros keep their
        # sign for free because the sign bit is never touched.
        ax = x.view(np.uint64) & _ABS_MASK
        peak = np.max(ax)
        if peak >= _INF_BITS:
            raise ValueError("bf16 rounding requires finite inputs")
        if peak > _MAX_FINITE_BITS:
            over = ax > _MAX_FINITE_BITS
            _saturation_count += int(np.count_nonzero(over))
            x = np.where(over, np.copysign(MAX_FINITE, x), x)
            np.bitwise_and(x.view(np.uint64), _ABS_MASK, out=ax)
        # Zeros wrap to the top under the -1, so one min distinguishes
        # "all magnitudes zero or >= MIN_NORMAL" from "subnormals present".
        np.subtract(ax, np.uint64(1), out=ax)
        if np.min(ax) >= _MIN_NORMAL_M1_BITS:
            bits = x.view(np.uint64)
            dropped = bits & _GRID_FRAC_MASK
            out_bits = bits ^ dropped
            u = mode.draw_u32(x.shape).astype(np.uint64)
            np.left_shift(u, np.uint64(13), out=u)
            go_up = u < dropped
            # Stepping away from zero with probability dropped / 2^45 is the
            # same distribution as stepping up in value with probability
            # frac: for negatives the two directions swap together.
            np.multiply(go_up, _GRID_STEP_BITS, out=u)
            np.add(out_bits, u, out=out_bits)
            return out_bits.view(np.float64)
        # Sub-grid magnitudes present (rare): exact division path below.
    return _round_general(x, mode)


def _round_general(x: np.ndarray, mode: RoundingMode) -> np.ndarray:
    global _saturation_count
    # The exponent-field pass doubles as the safety check: a max over the
    # masked exponents detects non-finite input and anything close enough
    # to the top binade to possibly saturate, so the hot path needs no
    # separate magnitude scan.
    eb = x.view(np.uint64) & _EXP_MASK
    peak_exp = np.uint64(0) if x.size == 0 else np.max(eb)
    if peak_exp >= _SAT_BINADE_BITS:
        ax_bits = x.view(np.uint64) & _ABS_MASK
        peak = np.max(ax_bits)
        if peak >= _INF_BITS:
            raise ValueError("bf16 rounding requires finite inputs")
        if peak > _MAX_FINITE_BITS:
            over = ax_bits > _MAX_FINITE_BITS
            _saturation_count += int(np.count_nonzero(over))
            x = np.where(over, np.copysign(MAX_FINITE, x), x)
            eb = x.view(np.uint64) & _EXP_MASK
    # Inlined _spacing_for, reusing the eb buffer; this carries the RNE
    # mode and the subnormal-range SR fallback.
    np.maximum(eb, _MIN_NORMAL_BITS, out=eb)
    spacing = eb.view(np.float64)
    np.multiply(spacing, 0.0078125, out=spacing)
    scaled = x / spacing
    if isinstance(mode, SRStream):
        k = np.floor(scaled)
        u = mode.draw_u32(x.shape)
        # scaled becomes the up-probability threshold in u32 units; k then
        # absorbs the rounding decision and the rescale, all in place.
        np.subtract(scaled, k, out=scaled)
        np.multiply(scaled, 4294967296.0, out=scaled)
        go_up = u < scaled
        np.add(k, go_up, out=k)
        out = np.multiply(k, spacing, out=k)
        # Rounding never crosses zero, so the result's sign always equals
        # the input's. OR-ing the input sign bit in repairs the one wrong
        # case (a negative value rounding up to the zero grid point yields
        # +0, must be -0) and is a bit-level no-op everywhere else.
        ob = out.view(np.uint64)
        np.bitwise_or(ob, x.view(np.uint64) & _SIGN_MASK, out=ob)
        return out
    if isinstance(mode, RoundNearestEven):
        # scaled is exact and ties sit halfway between integer grid indices,
        # so IEEE round-half-even on scaled is exactly tie-to-even-index;
        # rint also keeps the sign of zero, as does the rescale.
        out = np.rint(scaled, out=scaled)
        return np.multiply(out, spacing, out=out)
    raise TypeError(f"unsupported rounding mode: {mode!r}")


def round_bf16(x: float, mode: RoundingMode) -> BF16Word:
    """Round one finite float to bfloat16 under the given mode.

    Raises ValueError for NaN or infinite input. Finite input beyond the
    representable range saturates to +-MAX_FINITE and is counted.
    """
    v = float(x)
    if math.isnan(v):
        raise ValueError("cannot round NaN")
    rounded = _round_values(np.array([v], dtype=np.float64), mode)
    return BF16Word(int(encode_bf16(rounded)[0]))


def round_bf16_array(x, mode: RoundingMode) -> np.ndarray:
    """Vectorized rounding; returns float64 values on the bfloat16 grid."""
    return _round_values(np.asarray(x, dtype=np.float64), mode)


def accumulate(addends: Iterable[float], init: float, mode: RoundingMode) -> BF16Word:
    """Left fold with rounding after every addition.

    The accumulator starts at round(init) and each step computes
    round(acc + addend), i.e. the accumulator is a bfloat16 value at all
    times. This is the scalar reference used by tests; vectorized
    experiments live in `sr_accumulation_experiment`.
    """
    acc = _round_values(np.array([float(init)], dtype=np.float64), mode)
    for a in addends:
        acc = _round_values(acc + float(a), mode)
    return BF16Word(int(encode_bf16(acc)[0]))


def quantized_matmul(a, b, mode: RoundingMode | None = None) -> np.ndarray:
    """Matrix product with double-precision accumulation, then one rounding
    per output entry. `mode=None` is the full-precision reference: the raw
    float64 product is returned unquantized.

    Accepts stacked operands with matmul broadcasting; inner dimensions must
    agree.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("quantized_matmul requires at least 1-d operands")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise ValueError(
            f"inner dimensions do not agree: {a.shape} x {b.shape}"
        )
    out = a @ b
    if mode is None:
        return out
    return _round_values(out, mode)


def sr_accumulation_experiment(
    trials: int = 1000,
    seed: int = 0,
    increments: int = 1024,
    base: float = 256.0,
    increment: float = 2.0 ** -10,
) -> dict:
    """Small-increment accumulation comparison between RNE and SR.

    Adds `increments` copies of `increment` to `base`, where the increment
    is far below the grid spacing at `base`. RNE drops every increment;
    SR accumulates them in expectation. Returns a JSON-friendly summary.
    """
    rne = accumulate([increment] * increments, base, RNE)
    stream = SRStream(seed)
    acc = np.full(trials, float(base))
    acc = _round_values(acc, stream)
    for _ in range(increments):
        acc = _round_values(acc + increment, stream)
    return {
        "base": base,
        "increment": increment,
        "increments": increments,
        "trials": trials,
        "seed": seed,
        "exact_sum": base + increments * increment,
        "rne_result": rne.value,
        "sr_trial_mean": float(acc.mean()),
        "sr_trial_std": float(acc.std()),
    }


def sr_unbiasedness_sweep(
    n_values: int = 50,
    trials: int = 100_000,
    seed: int = 0,
) -> dict:
    """Empirical check that SR rounding is mean-preserving.

    For random in-range values x, compares the trial mean of SR roundings
    against x in units of the binomial standard error
    sigma = spacing * sqrt(p * (1 - p)). Returns the per-value z-scores'
    maximum plus details for each value.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    exponents = rng.integers(-20, 21, size=n_values)
    mantissas = rng.random(n_values) * 0.5 + 0.5
    signs = rng.choice([-1.0, 1.0], size=n_values)
    values = signs * np.ldexp(mantissas, exponents)
    stream = SRStream(seed + 1)
    results = []
    worst = 0.0
    for x in values:
        down, up = bf16_neighbors(x)
        spacing = float(up - down)
        p = float((x - down) / spacing)
        rounded = _round_values(np.full(trials, float(x)), stream)
        mean = float(rounded.mean())
        sigma = spacing * math.sqrt(p * (1.0 - p))
        se = sigma / math.sqrt(trials)
        z = abs(mean - float(x)) / se if se > 0 else 0.0
        worst = max(worst, z)
        results.append({"value": float(x), "mean": mean, "z": z})
    return {
        "n_values": n_values,
        "trials": trials,
        "seed": seed,
        "max_abs_z": worst,
        "values": results,
    }
