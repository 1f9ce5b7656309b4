"""Small decoder-only transformer in numpy with a hand-derived backward pass.

Architecture, per layer, pre-norm residual form:

    x  = x + attn(rmsnorm(x))      with rotary position embedding
    x  = x + swiglu_ffn(rmsnorm(x))

followed by a final rmsnorm and an untied output projection. The QKV
projection is one coalesced [d, 3d] matrix and the FFN gate/up projection is
one coalesced [d, 2f] matrix, mirroring how fused kernels lay out these
weights; gradients accumulate into the coalesced tensors directly. The causal
mask is built internally from the sequence length, never passed in.

Numeric policy, controlled by a `NumericContext`:

* `rounding=None` is the full-precision reference: everything in float64.
* In bf16 modes, every primitive forward op's output tensor is rounded to
  the bfloat16 grid (matmul products, norm outputs, rotary outputs, the
  scaled query, attention probabilities, SiLU outputs, gate products,
  residual sums, logits), emulating an engine that materializes each
  intermediate in bf16 while accumulating matmuls in wider precision.
  Softmax and the loss are computed exactly in float64 and only their
  output tensors are rounded.
* The backward pass rounds matmul outputs and the final per-tensor
  gradients; cheap elementwise chain-rule factors stay in float64. This
  matches hardware that fuses elementwise backward math into wider
  accumulation.

Weight initialization is normal(0, base_init_std) except the two residual-
writing projections of layer l (attention output, FFN down), which are
scaled down to base_init_std / sqrt(2 l) with l counted from 1, so deeper
residual streams start with unit-scale activations.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .bf16 import RNE, RoundingMode, SRStream, quantized_matmul, round_bf16_array

Params = dict[str, np.ndarray]
Grads = dict[str, np.ndarray]

NUMERIC_MODES = ("f32", "bf16-rne", "bf16-sr")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    model_dim: int
    num_layers: int
    num_heads: int
    max_seq_len: int
    ffn_hidden: int | None = None
    rope_theta: float = 10000.0
    rmsnorm_eps: float = 1e-6
    base_init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.model_dim < 1 or self.num_layers < 1 or self.num_heads < 1:
            raise ValueError("model_dim, num_layers and num_heads must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if (self.model_dim // self.num_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary pairs")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.rmsnorm_eps <= 0 or self.rope_theta <= 0 or self.base_init_std <= 0:
            raise ValueError("rmsnorm_eps, rope_theta and base_init_std must be positive")
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", default_ffn_hidden(self.model_dim))
        elif self.ffn_hidden < 2 or self.ffn_hidden % 2 != 0:
            raise ValueError("ffn_hidden must be a positive even integer")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def default_ffn_hidden(model_dim: int) -> int:
    """round(8 d / 3), rounded up to a multiple of 2."""
    f = round(8 * model_dim / 3)
    return f + (f % 2)


@dataclass(frozen=True)
class NumericContext:
    """Binds a rounding mode to the forward/backward quantization policy."""

    rounding: RoundingMode | None = None

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return quantized_matmul(a, b, self.rounding)

    def quantize(self, x: np.ndarray) -> np.ndarray:
        if self.rounding is None:
            return x
        return round_bf16_array(x, self.rounding)


#: Full-precision reference context.
REFERENCE = NumericContext(None)


def make_context(mode: str, sr_seed: int = 0) -> NumericContext:
    """Build a NumericContext from a mode name.

    "f32" is the full-precision reference (computed in float64; the name
    follows the convention of naming the non-emulated baseline after the
    hardware's single-precision path). "bf16-rne" and "bf16-sr" emulate
    bfloat16 storage with deterministic and stochastic rounding.
    """
    if mode == "f32":
        return NumericContext(None)
    if mode == "bf16-rne":
        return NumericContext(RNE)
    if mode == "bf16-sr":
        return NumericContext(SRStream(sr_seed))
    raise ValueError(f"unknown numeric mode {mode!r}; expected one of {NUMERIC_MODES}")


def init_params(config: ModelConfig, seed: int) -> Params:
    """Seeded parameter initialization.

    Draw order is fixed (embedding, then per-layer qkv / attn_out /
    gate_up / down, then head), so equal seeds give identical parameters.
    """
    gen = np.random.Generator(np.random.PCG64(seed))
    d, f = config.model_dim, config.ffn_hidden
    std = config.base_init_std
    params: Params = {"embed": gen.normal(0.0, std, (config.vocab_size, d))}
    for layer in range(config.num_layers):
        # Residual writers shrink with depth; l is 1-indexed.
        depth_std = std / np.sqrt(2.0 * (layer + 1))
        prefix = f"layers.{layer}."
        params[prefix + "attn_norm"] = np.ones(d)
        params[prefix + "qkv"] = gen.normal(0.0, std, (d, 3 * d))
        params[prefix + "attn_out"] = gen.normal(0.0, depth_std, (d, d))
        params[prefix + "ffn_norm"] = np.ones(d)
        params[prefix + "gate_up"] = gen.normal(0.0, std, (d, 2 * f))
        params[prefix + "down"] = gen.normal(0.0, depth_std, (f, d))
    params["final_norm"] = np.ones(d)
    params["head"] = gen.normal(0.0, std, (d, config.vocab_size))
    return params


def num_params(params: Params) -> int:
    return sum(int(p.size) for p in params.values())


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    """x / sqrt(mean(x^2, last) + eps) * weight."""
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / r * weight


def rmsnorm_backward(
    gy: np.ndarray, x: np.ndarray, weight: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of rmsnorm wrt input and weight.

    With r = sqrt(mean(x^2) + eps) and y = (x / r) * w:
        dx = (gy * w) / r - x * sum(gy * w * x) / (d * r^3)
        dw = sum over rows of gy * x / r
    """
    d = x.shape[-1]
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    gw_term = gy * weight
    dx = gw_term / r - x * np.sum(gw_term * x, axis=-1, keepdims=True) / (d * r**3)
    dweight = np.sum(gy * x / r, axis=tuple(range(x.ndim - 1)))
    return dx, dweight


@lru_cache(maxsize=32)
def _rope_tables(seq_len: int, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    positions = np.arange(seq_len, dtype=np.float64)
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = positions[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_apply(x: np.ndarray, positions: np.ndarray | None = None, theta: float = 10000.0) -> np.ndarray:
    """Rotary position embedding over interleaved pairs (2i, 2i+1).

    Pair i of the head dimension is rotated by angle pos * theta**(-2i/hd).
    x has shape [..., seq, head_dim]; positions defaults to arange(seq).
    """
    seq_len, head_dim = x.shape[-2], x.shape[-1]
    cos, sin = _rope_pair_tables(seq_len, head_dim, theta, positions)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rope_backward(g: np.ndarray, positions: np.ndarray | None = None, theta: float = 10000.0) -> np.ndarray:
    """Adjoint of `rope_apply`: the inverse rotation applied to the gradient."""
    seq_len, head_dim = g.shape[-2], g.shape[-1]
    cos, sin = _rope_pair_tables(seq_len, head_dim, theta, positions)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = np.empty_like(g)
    out[..., 0::2] = ge * cos + go * sin
    out[..., 1::2] = -ge * sin + go * cos
    return out


def _rope_pair_tables(seq_len, head_dim, theta, positions):
    if positions is None:
        return _rope_tables(seq_len, head_dim, float(theta))
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = positions[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


@lru_cache(maxsize=32)
def _causal_mask(seq_len: int) -> np.ndarray:
    return np.tril(np.ones((seq_len, seq_len), dtype=bool))


def _silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def _silu_grad(z: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def forward(
    params: Params,
    config: ModelConfig,
    tokens: np.ndarray,
    ctx: NumericContext = REFERENCE,
) -> np.ndarray:
    """Token ids [batch, seq] -> logits [batch, seq, vocab]."""
    logits, _ = _forward_with_cache(params, config, tokens, ctx)
    return logits


def _check_tokens(config: ModelConfig, tokens: np.ndarray, name: str) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"{name} must be [batch, seq], got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq_len:
        raise ValueError(
            f"{name} length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= config.vocab_size:
        raise ValueError(f"{name} contain ids outside [0, {config.vocab_size})")
    return tokens.astype(np.int64, copy=False)


def _forward_with_cache(params, config, tokens, ctx):
    tokens = _check_tokens(config, tokens, "tokens")
    batch, seq = tokens.shape
    heads, head_dim = config.num_heads, config.head_dim
    d, f = config.model_dim, config.ffn_hidden
    eps, theta = config.rmsnorm_eps, config.rope_theta
    inv_scale = 1.0 / np.sqrt(head_dim)
    mask = _causal_mask(seq)

    x = params["embed"][tokens]
    layer_caches = []
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        xn1 = ctx.quantize(rmsnorm(x, params[p + "attn_norm"], eps))
        qkv = ctx.matmul(xn1, params[p + "qkv"])
        q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
        qh = q.reshape(batch, seq, heads, head_dim).transpose(0, 2, 1, 3)
        kh = k.reshape(batch, seq, heads, head_dim).transpose(0, 2, 1, 3)
        vh = v.reshape(batch, seq, heads, head_dim).transpose(0, 2, 1, 3)
        qr = ctx.quantize(rope_apply(qh, theta=theta))
        kr = ctx.quantize(rope_apply(kh, theta=theta))
        qs = ctx.quantize(qr * inv_scale)
        scores = ctx.matmul(qs, kr.transpose(0, 1, 3, 2))
        scores = np.where(mask, scores, -np.inf)
        # Softmax stays exact in float64; only the probability tensor is
        # rounded for the value matmul that consumes it.
        m = scores.max(axis=-1, keepdims=True)
        expd = np.exp(scores - m)
        probs = ctx.quantize(expd / expd.sum(axis=-1, keepdims=True))
        ctx_h = ctx.matmul(probs, vh)
        merged = ctx_h.transpose(0, 2, 1, 3).reshape(batch, seq, d)
        attn_out = ctx.matmul(merged, params[p + "attn_out"])
        x2 = ctx.quantize(x + attn_out)

        xn2 = ctx.quantize(rmsnorm(x2, params[p + "ffn_norm"], eps))
        gate_up = ctx.matmul(xn2, params[p + "gate_up"])
        gate, up = gate_up[..., :f], gate_up[..., f:]
        sg = ctx.quantize(_silu(gate))
        su = ctx.quantize(sg * up)
        ffn_out = ctx.matmul(su, params[p + "down"])
        x3 = ctx.quantize(x2 + ffn_out)

        layer_caches.append(
            dict(x=x, xn1=xn1, qs=qs, kr=kr, probs=probs, vh=vh, merged=merged,
                 x2=x2, xn2=xn2, gate=gate, up=up, sg=sg, su=su)
        )
        x = x3

    xnf = ctx.quantize(rmsnorm(x, params["final_norm"], eps))
    logits = ctx.matmul(xnf, params["head"])
    cache = dict(tokens=tokens, x_final=x, xnf=xnf, layers=layer_caches)
    return logits, cache


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean token-level cross entropy in float64 (stable log-sum-exp)."""
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    picked = np.take_along_axis(z - lse, targets[..., None], axis=-1)
    return float(-picked.mean())


def loss_and_backward(
    params: Params,
    config: ModelConfig,
    tokens: np.ndarray,
    targets: np.ndarray,
    ctx: NumericContext = REFERENCE,
) -> tuple[float, Grads]:
    """Mean cross-entropy loss and gradients for every parameter tensor.

    The loss itself is always exact float64. Gradients follow the numeric
    policy described in the module docstring.
    """
    targets = _check_tokens(config, targets, "targets")
    logits, cache = _forward_with_cache(params, config, tokens, ctx)
    tokens = cache["tokens"]
    if targets.shape != tokens.shape:
        raise ValueError(f"targets shape {targets.shape} != tokens shape {tokens.shape}")
    batch, seq = tokens.shape
    heads, head_dim = config.num_heads, config.head_dim
    d, f = config.model_dim, config.ffn_hidden
    eps = config.rmsnorm_eps
    theta = config.rope_theta
    inv_scale = 1.0 / np.sqrt(head_dim)
    n_tok = batch * seq

    m = logits.max(axis=-1, keepdims=True)
    expz = np.exp(logits - m)
    probs_full = expz / expz.sum(axis=-1, keepdims=True)
    picked = np.take_along_axis(logits - m - np.log(expz.sum(axis=-1, keepdims=True)),
                                targets[..., None], axis=-1)
    loss = float(-picked.mean())

    d_logits = probs_full.copy()
    np.put_along_axis(
        d_logits,
        targets[..., None],
        np.take_along_axis(d_logits, targets[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    d_logits /= n_tok

    grads: Grads = {}

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    grads["head"] = ctx.matmul(flat(cache["xnf"]).T, flat(d_logits))
    d_xnf = ctx.matmul(d_logits, params["head"].T)
    d_x, grads["final_norm"] = rmsnorm_backward(d_xnf, cache["x_final"], params["final_norm"], eps)

    for layer in reversed(range(config.num_layers)):
        p = f"layers.{layer}."
        c = cache["layers"][layer]

        # FFN branch: x3 = x2 + down(silu(gate) * up), gate/up from one matmul.
        d_su = ctx.matmul(d_x, params[p + "down"].T)
        grads[p + "down"] = ctx.matmul(flat(c["su"]).T, flat(d_x))
        d_sg = d_su * c["up"]
        d_up = d_su * c["sg"]
        d_gate = d_sg * _silu_grad(c["gate"])
        d_gate_up = np.concatenate([d_gate, d_up], axis=-1)
        grads[p + "gate_up"] = ctx.matmul(flat(c["xn2"]).T, flat(d_gate_up))
        d_xn2 = ctx.matmul(d_gate_up, params[p + "gate_up"].T)
        d_x2_norm, grads[p + "ffn_norm"] = rmsnorm_backward(d_xn2, c["x2"], params[p + "ffn_norm"], eps)
        d_x2 = d_x + d_x2_norm

        # Attention branch.
        d_merged = ctx.matmul(d_x2, params[p + "attn_out"].T)
        grads[p + "attn_out"] = ctx.matmul(flat(c["merged"]).T, flat(d_x2))
        d_ctx_h = d_merged.reshape(batch, seq, heads, head_dim).transpose(0, 2, 1, 3)
        d_probs = ctx.matmul(d_ctx_h, c["vh"].transpose(0, 1, 3, 2))
        d_vh = ctx.matmul(c["probs"].transpose(0, 1, 3, 2), d_ctx_h)
        # Masked entries have probs == 0, so they contribute no gradient.
        d_scores = c["probs"] * (d_probs - np.sum(d_probs * c["probs"], axis=-1, keepdims=True))
        d_qs = ctx.matmul(d_scores, c["kr"])
        d_kr = ctx.matmul(d_scores.transpose(0, 1, 3, 2), c["qs"])
        d_qh = rope_backward(d_qs * inv_scale, theta=theta)
        d_kh = rope_backward(d_kr, theta=theta)
        d_q = d_qh.transpose(0, 2, 1, 3).reshape(batch, seq, d)
        d_k = d_kh.transpose(0, 2, 1, 3).reshape(batch, seq, d)
        d_v = d_vh.transpose(0, 2, 1, 3).reshape(batch, seq, d)
        d_qkv = np.concatenate([d_q, d_k, d_v], axis=-1)
        grads[p + "qkv"] = ctx.matmul(flat(c["xn1"]).T, flat(d_qkv))
        d_xn1 = ctx.matmul(d_qkv, params[p + "qkv"].T)
        d_x_norm, grads[p + "attn_norm"] = rmsnorm_backward(d_xn1, c["x"], params[p + "attn_norm"], eps)
        d_x = d_x2 + d_x_norm

    d_embed = np.zeros_like(params["embed"])
    np.add.at(d_embed, tokens, d_x)
    grads["embed"] = d_embed

    grads = {name: ctx.quantize(g) for name, g in grads.items()}
    return loss, grads
