"""Dense numeric kernels with an exact multiply-add counter.

All tensors are plain numpy arrays, float32 by default (the kernels are
dtype-generic, which the gradient-check tests exploit by running them in
float64). Every matrix product that belongs to the transformer core goes
through :func:`matmul` so that a run's cost can be accounted exactly:
a product of shapes (m, k) @ (k, n) contributes 2*m*n*k multiply-adds to
the counter under its component tag. Softmax, normalization, rotary
phases, and embedding/LM-head products are deliberately outside the
counted scope so the analytical cost model can be reconciled against the
counter with integer equality.

Counters are per-run accumulators: share one within an inference stream,
merge across streams, never mutate one concurrently from two threads.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError, ValidationError

DTYPE = np.float32

ROPE_BASE = 10000.0

# Component tags for counted matrix products.
PROJECTION = "projection"
ATTENTION_SCORE = "attention_score"
ATTENTION_VALUE = "attention_value"
OUTPUT_PROJECTION = "output_projection"
FEED_FORWARD = "feed_forward"

COMPONENT_TAGS = (
    PROJECTION,
    ATTENTION_SCORE,
    ATTENTION_VALUE,
    OUTPUT_PROJECTION,
    FEED_FORWARD,
)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical stream on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def fold_seed(seed: int, label: str) -> int:
    """Derive a stable sub-seed from a base seed and a purpose label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class OpCounter:
    """Cumulative multiply-add counts, partitioned by component tag.

    Counts are exact integers and monotonically non-decreasing between
    resets. Use :meth:`merge` to combine counters from independent runs.
    """

    def __init__(self) -> None:
        self.mul_adds: dict[str, int] = {tag: 0 for tag in COMPONENT_TAGS}

    def add(self, tag: str, count: int) -> None:
        if tag not in self.mul_adds:
            raise ValidationError(f"unknown component tag {tag!r}")
        self.mul_adds[tag] += int(count)

    def total(self) -> int:
        return sum(self.mul_adds.values())

    def reset(self) -> None:
        for tag in self.mul_adds:
            self.mul_adds[tag] = 0

    def merge(self, other: "OpCounter") -> None:
        for tag, count in other.mul_adds.items():
            self.add(tag, count)

    def by_report_component(self) -> dict[str, int]:
        """Collapse the five tags into the projection/attention/feed-forward
        components used by the analytical cost model."""
        return {
            "projection": self.mul_adds[PROJECTION],
            "attention": (
                self.mul_adds[ATTENTION_SCORE]
                + self.mul_adds[ATTENTION_VALUE]
                + self.mul_adds[OUTPUT_PROJECTION]
            ),
            "feed_forward": self.mul_adds[FEED_FORWARD],
        }

    def snapshot(self) -> dict[str, int]:
        return dict(self.mul_adds)


def matmul(
    a: np.ndarray,
    b: np.ndarray,
    tag: str | None = None,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Counted 2-D matrix product.

    Adds exactly 2*m*n*k multiply-adds to ``counter`` under ``tag`` for
    shapes (m, k) @ (k, n). Pass ``counter=None`` for uncounted products
    (embedding lookups, LM head, adapter) that sit outside the core scope.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a @ b
    if counter is not None:
        if tag is None:
            raise ValidationError("counted matmul requires a component tag")
        counter.add(tag, 2 * a.shape[0] * b.shape[1] * a.shape[1])
    return out


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by row-max subtraction.

    Rejects NaN input; -inf-style large-negative mask values are fine and
    underflow to exact zeros.
    """
    if np.isnan(m).any():
        raise ValidationError("softmax input contains NaN")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(
    x: np.ndarray,
    gain: np.ndarray,
    bias: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Per-row normalization to zero mean / unit variance, then affine."""
    out, _, _ = layer_norm_with_stats(x, gain, bias, eps)
    return out


def layer_norm_with_stats(
    x: np.ndarray,
    gain: np.ndarray,
    bias: np.ndarray,
    eps: float = 1e-5,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Layer norm that also returns (x_hat, inv_std) for hand-written backprop."""
    if eps <= 0:
        raise ValidationError(f"layer_norm eps must be positive, got {eps}")
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"gain/bias width {gain.shape[-1]}/{bias.shape[-1]} != x width {x.shape[-1]}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    x_hat = (x - mean) * inv_std
    return x_hat * gain + bias, x_hat, inv_std


def layer_norm_backward(
    d_out: np.ndarray,
    x_hat: np.ndarray,
    inv_std: np.ndarray,
    gain: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_x, d_gain, d_bias) for :func:`layer_norm_with_stats`."""
    axes = tuple(range(d_out.ndim - 1))
    d_gain = (d_out * x_hat).sum(axis=axes)
    d_bias = d_out.sum(axis=axes)
    d_xhat = d_out * gain
    mean_dxhat = d_xhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (d_xhat * x_hat).mean(axis=-1, keepdims=True)
    d_x = inv_std * (d_xhat - mean_dxhat - x_hat * mean_dxhat_xhat)
    return d_x, d_gain, d_bias


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh form."""
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return np.asarray(0.5, dtype=x.dtype) * x * (1.0 + np.tanh(inner))


def gelu_with_tape(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GELU plus the inner tanh value, so backprop can skip recomputing it."""
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    return np.asarray(0.5, dtype=x.dtype) * x * (1.0 + t), t


def gelu_grad(x: np.ndarray, tanh_inner: np.ndarray | None = None) -> np.ndarray:
    """Derivative of the tanh-form GELU at ``x``.

    Pass the tanh recorded by :func:`gelu_with_tape` to avoid the dominant
    transcendental cost in backward passes.
    """
    x2 = x * x
    if tanh_inner is None:
        inner = _GELU_C * (x + _GELU_A * x * x2)
        tanh_inner = np.tanh(inner)
    t = tanh_inner
    d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return np.asarray(0.5, dtype=x.dtype) * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner


def rope_tables(
    positions: np.ndarray,
    head_dim: int,
    dtype: np.dtype = DTYPE,
) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) phase tables of shape (len(positions), head_dim // 2).

    Pair j rotates by angle position * ROPE_BASE ** (-2j / head_dim); the
    angles are evaluated in float64 before casting.
    """
    if head_dim % 2 != 0:
        raise ShapeError(f"rotary head_dim must be even, got {head_dim}")
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_rotate(
    x: np.ndarray,
    cos: np.ndarray,
    sin: np.ndarray,
    head_dim: int,
    inverse: bool = False,
) -> np.ndarray:
    """Rotate consecutive dimension pairs of ``x`` by the given phase tables.

    ``x`` has shape (..., rows, width) with width a multiple of head_dim;
    cos/sin have shape (rows, head_dim // 2) and broadcast over leading axes
    and over the per-head groups. ``inverse=True`` applies the transpose
    rotation (used by backprop).
    """
    width = x.shape[-1]
    if head_dim % 2 != 0:
        raise ShapeError(f"rotary head_dim must be even, got {head_dim}")
    if width % head_dim != 0:
        raise ShapeError(f"width {width} not a multiple of head_dim {head_dim}")
    if inverse:
        sin = -sin
    half = head_dim // 2
    groups = width // head_dim
    shaped = x.reshape(*x.shape[:-1], groups, half, 2)
    c = cos[..., :, None, :]
    s = sin[..., :, None, :]
    even = shaped[..., 0]
    odd = shaped[..., 1]
    out = np.empty_like(shaped)
    out[..., 0] = even * c - odd * s
    out[..., 1] = even * s + odd * c
    return out.reshape(x.shape)


def rope_apply(x: np.ndarray, positions: np.ndarray, head_dim: int) -> np.ndarray:
    """Rotary position encoding over (rows, width) with per-row positions."""
    positions = np.asarray(positions)
    if positions.shape[0] != x.shape[0]:
        raise ShapeError(
            f"positions length {positions.shape[0]} != rows {x.shape[0]}"
        )
    cos, sin = rope_tables(positions, head_dim, dtype=x.dtype)
    return rope_rotate(x, cos, sin, head_dim)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= logits.shape[1]:
        raise ValidationError(
            f"target out of range [0, {logits.shape[1]}): {targets.tolist()}"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(logits.shape[0]), targets]
    return float(np.mean(lse - picked))


@dataclass
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment estimates, keyed like the parameter dict."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
    step_index: int,
) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Rejects non-finite gradients, naming the offending parameter, before
    touching any state.
    """
    if step_index < 1:
        raise ValidationError(f"step_index must be >= 1, got {step_index}")
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != g.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}"
            )
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    bc1 = 1.0 - hyper.beta1**step_index
    bc2 = 1.0 - hyper.beta2**step_index
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(p.dtype)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_norm(grads)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
