"""Decoder-only transformer: configuration, weights, and the block kernel.

The same :func:`block_forward` drives every execution mode in the package —
the conventional all-tokens-at-layer-0 forward here, the two-phase late-entry
prefill, and incremental decoding — so equivalence claims between those modes
are claims about orchestration, not about divergent math. Weights are
immutable after initialization and safe to share across threads; hidden
states and KV appendage are single-owner per inference stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import numerics
from .errors import ConfigError, ShapeError, ValidationError
from .numerics import (
    ATTENTION_SCORE,
    ATTENTION_VALUE,
    DTYPE,
    FEED_FORWARD,
    OUTPUT_PROJECTION,
    PROJECTION,
    OpCounter,
    matmul,
)

MASK_VALUE = -1e9  # additive mask; exp underflows to exactly 0 after row-max shift


@dataclass(frozen=True)
class ModelConfig:
    """Architectural hyperparameters, including the insertion layer.

    ``insert_layer`` is the first layer that processes multimodal tokens;
    0 recovers the conventional architecture and ``n_layers`` means they
    bypass the whole stack.
    """

    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    vocab_size: int
    max_positions: int
    insert_layer: int = 0

    def __post_init__(self) -> None:
        if min(self.n_layers, self.d_model, self.d_ff, self.n_heads,
               self.vocab_size, self.max_positions) <= 0:
            raise ConfigError(f"all dimensions must be positive: {self}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim={self.head_dim} must be even for rotary phases")
        if not 0 <= self.insert_layer <= self.n_layers:
            raise ConfigError(
                f"insert_layer={self.insert_layer} outside [0, {self.n_layers}]"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def with_insert_layer(self, insert_layer: int) -> "ModelConfig":
        return replace(self, insert_layer=insert_layer)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "insert_layer": self.insert_layer,
        }


LAYER_PARAM_NAMES = (
    "w_q", "w_k", "w_v", "w_o", "w_ff1", "w_ff2",
    "ln1_g", "ln1_b", "ln2_g", "ln2_b",
)


class Weights:
    """Named parameter tensors plus the config that determines their shapes.

    The LM head is tied to the token embedding table, so ``tok_emb`` serves
    both roles. Tensor iteration order is fixed by construction, which keeps
    checkpoints and optimizer traversals deterministic.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self.validate()

    def validate(self) -> None:
        for name, shape in expected_shapes(self.config).items():
            if name not in self.tensors:
                raise ShapeError(f"missing weight tensor {name!r}")
            if tuple(self.tensors[name].shape) != shape:
                raise ShapeError(
                    f"tensor {name!r} has shape {self.tensors[name].shape}, expected {shape}"
                )
            if not np.isfinite(self.tensors[name]).all():
                raise ValidationError(f"tensor {name!r} contains non-finite values")

    def layer(self, i: int, name: str) -> np.ndarray:
        return self.tensors[f"layers.{i}.{name}"]

    @property
    def tok_emb(self) -> np.ndarray:
        return self.tensors["tok_emb"]

    def clone(self) -> "Weights":
        return Weights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def with_insert_layer(self, insert_layer: int) -> "Weights":
        """Same tensors viewed under a different insertion layer."""
        w = Weights.__new__(Weights)
        w.config = self.config.with_insert_layer(insert_layer)
        w.tensors = self.tensors
        return w


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (config.vocab_size, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "w_q"] = (d, d)
        shapes[p + "w_k"] = (d, d)
        shapes[p + "w_v"] = (d, d)
        shapes[p + "w_o"] = (d, d)
        shapes[p + "w_ff1"] = (d, f)
        shapes[p + "w_ff2"] = (f, d)
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
    shapes["final_ln_g"] = (d,)
    shapes["final_ln_b"] = (d,)
    return shapes


def init_weights(config: ModelConfig, rng: np.random.Generator) -> Weights:
    """Scaled normal initialization (std 0.02), deterministic per seed.

    Matrices feeding the residual stream (w_o, w_ff2) are scaled down by
    1/sqrt(2*n_layers); norms start at identity. Draw order is fixed, so
    the same generator state always yields the same weights.
    """
    d, f = config.d_model, config.d_ff
    std = 0.02
    resid_std = std / math.sqrt(2 * config.n_layers)

    def normal(shape, scale):
        return rng.normal(0.0, scale, size=shape).astype(DTYPE)

    tensors: dict[str, np.ndarray] = {"tok_emb": normal((config.vocab_size, d), std)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        tensors[p + "w_q"] = normal((d, d), std)
        tensors[p + "w_k"] = normal((d, d), std)
        tensors[p + "w_v"] = normal((d, d), std)
        tensors[p + "w_o"] = normal((d, d), resid_std)
        tensors[p + "w_ff1"] = normal((d, f), std)
        tensors[p + "w_ff2"] = normal((f, d), resid_std)
        tensors[p + "ln1_g"] = np.ones(d, dtype=DTYPE)
        tensors[p + "ln1_b"] = np.zeros(d, dtype=DTYPE)
        tensors[p + "ln2_g"] = np.ones(d, dtype=DTYPE)
        tensors[p + "ln2_b"] = np.zeros(d, dtype=DTYPE)
    tensors["final_ln_g"] = np.ones(d, dtype=DTYPE)
    tensors["final_ln_b"] = np.zeros(d, dtype=DTYPE)
    return Weights(config, tensors)


@dataclass
class HiddenState:
    """Activations plus per-token global positions and segment tags."""

    activations: np.ndarray     # (rows, d_model)
    positions: np.ndarray       # (rows,) int64, strictly increasing
    is_mm: np.ndarray           # (rows,) bool

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.is_mm = np.asarray(self.is_mm, dtype=bool)
        n = self.activations.shape[0]
        if self.positions.shape != (n,) or self.is_mm.shape != (n,):
            raise ShapeError(
                f"positions/tags length mismatch: {self.positions.shape}, "
                f"{self.is_mm.shape} vs {n} rows"
            )
        if n > 1 and not np.all(np.diff(self.positions) > 0):
            raise ValidationError(f"positions not strictly increasing: {self.positions}")

    def __len__(self) -> int:
        return self.activations.shape[0]


def embed(tokens: np.ndarray, positions: np.ndarray, weights: Weights,
          is_mm: np.ndarray | None = None) -> HiddenState:
    """Token embedding lookup; positions pass through unchanged."""
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    cfg = weights.config
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValidationError(f"token out of range [0, {cfg.vocab_size}): {tokens.tolist()}")
    if positions.size and (positions.min() < 0 or positions.max() >= cfg.max_positions):
        raise ValidationError(
            f"position out of range [0, {cfg.max_positions}): {positions.tolist()}"
        )
    if tokens.shape != positions.shape:
        raise ShapeError(f"tokens shape {tokens.shape} != positions shape {positions.shape}")
    acts = weights.tok_emb[tokens].copy() if tokens.size else np.zeros((0, cfg.d_model), dtype=DTYPE)
    if is_mm is None:
        is_mm = np.zeros(tokens.shape, dtype=bool)
    return HiddenState(acts, positions, is_mm)


class LayerKV:
    """Append-only K/V rows for one layer, with global positions and tags.

    Keys are stored after rotary encoding at their own positions, so a later
    query only needs its own rotation.
    """

    def __init__(self, config: ModelConfig):
        h, hd = config.n_heads, config.head_dim
        self.k = np.zeros((h, 0, hd), dtype=DTYPE)
        self.v = np.zeros((h, 0, hd), dtype=DTYPE)
        self.positions = np.zeros(0, dtype=np.int64)
        self.is_mm = np.zeros(0, dtype=bool)

    def __len__(self) -> int:
        return self.k.shape[1]

    def append(self, k: np.ndarray, v: np.ndarray, positions: np.ndarray,
               is_mm: np.ndarray) -> None:
        if len(self) and positions.size and positions.min() <= self.positions.max():
            raise ValidationError(
                f"cache positions must be appended in increasing order: "
                f"have max {self.positions.max()}, got min {positions.min()}"
            )
        self.k = np.concatenate([self.k, k], axis=1)
        self.v = np.concatenate([self.v, v], axis=1)
        self.positions = np.concatenate([self.positions, positions])
        self.is_mm = np.concatenate([self.is_mm, is_mm])


@dataclass
class TraceLayer:
    """One query token's attention rows at one layer: (n_heads, n_keys)."""

    layer: int
    probs: np.ndarray
    key_positions: np.ndarray
    key_is_mm: np.ndarray


@dataclass
class TraceCapture:
    """Collects one designated query row's attention across layers."""

    query_kind: str                       # "last_prompt" | "first_answer"
    query_position: int
    layers: list[TraceLayer] = field(default_factory=list)


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    rows, width = x.shape
    return x.reshape(rows, n_heads, width // n_heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, rows, hd = x.shape
    return x.transpose(1, 0, 2).reshape(rows, h * hd)


def block_forward(
    weights: Weights,
    layer_index: int,
    state: HiddenState,
    kv: Optional[LayerKV] = None,
    counter: Optional[OpCounter] = None,
    trace: Optional[TraceCapture] = None,
    trace_row: int | None = None,
    return_probs: bool = False,
) -> HiddenState | tuple[HiddenState, np.ndarray]:
    """One pre-norm transformer block over ``state``, causal by position.

    New K/V rows are appended to ``kv`` when one is given; pre-existing
    entries become attendable context and must all precede the new rows.
    With ``return_probs`` the full (n_heads, rows, keys) attention tensor is
    also returned (used by attention-based token pruning).
    """
    cfg = weights.config
    if not 0 <= layer_index < cfg.n_layers:
        raise ValidationError(f"layer_index {layer_index} outside [0, {cfg.n_layers})")
    x = state.activations
    n_new = x.shape[0]
    if kv is not None and len(kv) and n_new:
        if kv.positions.max() >= state.positions.min():
            raise ValidationError(
                f"cached positions (max {kv.positions.max()}) must precede "
                f"new positions (min {state.positions.min()})"
            )

    h_norm = numerics.layer_norm(x, weights.layer(layer_index, "ln1_g"),
                                 weights.layer(layer_index, "ln1_b"))
    q = matmul(h_norm, weights.layer(layer_index, "w_q"), PROJECTION, counter)
    k = matmul(h_norm, weights.layer(layer_index, "w_k"), PROJECTION, counter)
    v = matmul(h_norm, weights.layer(layer_index, "w_v"), PROJECTION, counter)

    q = numerics.rope_apply(q, state.positions, cfg.head_dim)
    k = numerics.rope_apply(k, state.positions, cfg.head_dim)

    q_h = split_heads(q, cfg.n_heads)
    k_h = split_heads(k, cfg.n_heads)
    v_h = split_heads(v, cfg.n_heads)

    if kv is not None:
        k_all = np.concatenate([kv.k, k_h], axis=1)
        v_all = np.concatenate([kv.v, v_h], axis=1)
        key_positions = np.concatenate([kv.positions, state.positions])
        key_is_mm = np.concatenate([kv.is_mm, state.is_mm])
        kv.append(k_h, v_h, state.positions, state.is_mm)
    else:
        k_all = np.concatenate([np.zeros_like(k_h[:, :0]), k_h], axis=1)
        v_all = np.concatenate([np.zeros_like(v_h[:, :0]), v_h], axis=1)
        key_positions = state.positions
        key_is_mm = state.is_mm

    allowed = key_positions[None, :] <= state.positions[:, None]
    scale = np.asarray(1.0 / math.sqrt(cfg.head_dim), dtype=x.dtype)
    mask_add = np.where(allowed, x.dtype.type(0.0), x.dtype.type(MASK_VALUE))

    out_heads = []
    probs_heads = []
    want_probs = return_probs or trace is not None
    for head in range(cfg.n_heads):
        scores = matmul(q_h[head], np.ascontiguousarray(k_all[head].T),
                        ATTENTION_SCORE, counter) * scale
        probs = numerics.softmax_rows(scores + mask_add)
        out_heads.append(matmul(probs, np.ascontiguousarray(v_all[head]),
                                ATTENTION_VALUE, counter))
        if want_probs:
            probs_heads.append(probs)

    attn = matmul(merge_heads(np.stack(out_heads)),
                  weights.layer(layer_index, "w_o"), OUTPUT_PROJECTION, counter)
    x = x + attn

    h2 = numerics.layer_norm(x, weights.layer(layer_index, "ln2_g"),
                             weights.layer(layer_index, "ln2_b"))
    a = matmul(h2, weights.layer(layer_index, "w_ff1"), FEED_FORWARD, counter)
    y = matmul(numerics.gelu(a), weights.layer(layer_index, "w_ff2"), FEED_FORWARD, counter)
    x = x + y

    new_state = HiddenState(x, state.positions, state.is_mm)
    all_probs = np.stack(probs_heads) if want_probs else None
    if trace is not None:
        row = n_new - 1 if trace_row is None else trace_row
        trace.layers.append(TraceLayer(
            layer=layer_index,
            probs=all_probs[:, row, :].copy(),
            key_positions=key_positions.copy(),
            key_is_mm=key_is_mm.copy(),
        ))
    if return_probs:
        return new_state, all_probs
    return new_state


def final_logits(weights: Weights, x: np.ndarray,
                 rows: np.ndarray | None = None) -> np.ndarray:
    """Final norm then tied LM head on the requested rows.

    Deliberately uncounted: the cost model's scope is the per-layer core.
    """
    if rows is not None:
        x = x[rows]
    h = numerics.layer_norm(x, weights.tensors["final_ln_g"], weights.tensors["final_ln_b"])
    return h @ weights.tok_emb.T


def baseline_forward(
    weights: Weights,
    state: HiddenState,
    rows: np.ndarray | None = None,
    counter: Optional[OpCounter] = None,
    trace: Optional[TraceCapture] = None,
    capture_hidden: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Conventional forward: the assembled sequence enters at layer 0.

    ``state`` is the layer-0 input (token embeddings with any multimodal
    rows already spliced in). Returns logits for ``rows`` (default: last).
    """
    cfg = weights.config
    if len(state) > cfg.max_positions:
        raise ValidationError(
            f"sequence length {len(state)} exceeds max_positions {cfg.max_positions}"
        )
    kv_fill = [LayerKV(cfg) for _ in range(cfg.n_layers)]
    for layer in range(cfg.n_layers):
        state = block_forward(weights, layer, state, kv=kv_fill[layer],
                              counter=counter, trace=trace)
        if capture_hidden is not None:
            capture_hidden.append(state.activations.copy())
    if rows is None:
        rows = np.array([len(state) - 1])
    return final_logits(weights, state.activations, rows)
