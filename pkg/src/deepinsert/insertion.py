"""Late-entry engine: two-phase prefill, split KV cache, decoding, pruning.

Multimodal embeddings do not enter the network at layer 0. Phase one runs
only the language tokens (with global positions that reserve a gap for the
multimodal slot) through the early layers; phase two splices the multimodal
embeddings into the hidden sequence at the insertion layer and runs the
remaining layers over the full sequence. The cache mirrors this split: a
shallow region holding language-only K/V for the early layers and a deep
region holding full-sequence K/V from the insertion layer on. Bypass is
structural — no attention score is ever computed against a multimodal
position in an early layer, because the shallow region never contains one.

Attention-based token pruning (keep the top-R fraction of multimodal tokens
from some layer on) and hard withdrawal (drop all multimodal K/V from some
layer on) compose with the same machinery.

One inference stream owns one cache; streams share immutable weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .model import (
    HiddenState,
    LayerKV,
    ModelConfig,
    TraceCapture,
    Weights,
    block_forward,
    embed,
    final_logits,
)
from .numerics import DTYPE, OpCounter


@dataclass
class PromptLayout:
    """A prompt split into pre-text, multimodal slot, and post-text.

    Global positions are assigned as if the multimodal tokens were present
    from the start: pre-text occupies [0, n_pre), the slot occupies
    [n_pre, n_pre + l_mm), post-text follows. Phase one therefore runs the
    text tokens with a position gap where the slot will be spliced in.
    """

    pre_text: np.ndarray
    mm_embeddings: np.ndarray
    post_text: np.ndarray

    def __post_init__(self) -> None:
        self.pre_text = np.asarray(self.pre_text, dtype=np.int64)
        self.post_text = np.asarray(self.post_text, dtype=np.int64)
        self.mm_embeddings = np.asarray(self.mm_embeddings)
        if self.mm_embeddings.ndim != 2:
            raise ShapeError(
                f"mm_embeddings must be 2-D (L_mm x d_model), got {self.mm_embeddings.shape}"
            )

    @property
    def n_pre(self) -> int:
        return int(self.pre_text.shape[0])

    @property
    def n_post(self) -> int:
        return int(self.post_text.shape[0])

    @property
    def l_mm(self) -> int:
        return int(self.mm_embeddings.shape[0])

    @property
    def l_text(self) -> int:
        return self.n_pre + self.n_post

    @property
    def combined_length(self) -> int:
        return self.l_text + self.l_mm

    @property
    def pre_range(self) -> tuple[int, int]:
        return (0, self.n_pre)

    @property
    def mm_range(self) -> tuple[int, int]:
        return (self.n_pre, self.n_pre + self.l_mm)

    @property
    def post_range(self) -> tuple[int, int]:
        return (self.n_pre + self.l_mm, self.combined_length)

    @property
    def text_tokens(self) -> np.ndarray:
        return np.concatenate([self.pre_text, self.post_text])

    @property
    def text_positions(self) -> np.ndarray:
        return np.concatenate([
            np.arange(*self.pre_range, dtype=np.int64),
            np.arange(*self.post_range, dtype=np.int64),
        ])

    @property
    def is_mm_full(self) -> np.ndarray:
        flags = np.zeros(self.combined_length, dtype=bool)
        flags[self.mm_range[0]:self.mm_range[1]] = True
        return flags


def segment_prompt(tokens: np.ndarray, mm_embeddings: np.ndarray,
                   placeholder: int) -> PromptLayout:
    """Split a token template around its single multimodal placeholder."""
    tokens = np.asarray(tokens, dtype=np.int64)
    slots = np.where(tokens == placeholder)[0]
    if slots.size != 1:
        raise ValidationError(
            f"template must contain exactly one placeholder token {placeholder}, "
            f"found {slots.size}"
        )
    i = int(slots[0])
    return PromptLayout(tokens[:i], mm_embeddings, tokens[i + 1:])


@dataclass(frozen=True)
class PruneConfig:
    """Multimodal token pruning mode for the deep layers.

    ``fastv``: at ``fastv_start_layer`` keep the top ceil(R * L_mm) multimodal
    tokens ranked by mean attention received (at the previous layer) from all
    later-position queries. ``vtw``: at ``vtw_exit_layer`` drop every
    multimodal token. Layer indices are absolute and must lie within
    [insert_layer, n_layers]; a boundary equal to n_layers never triggers.
    """

    mode: str = "none"
    fastv_start_layer: Optional[int] = None
    fastv_retention: Optional[float] = None
    vtw_exit_layer: Optional[int] = None

    @staticmethod
    def none() -> "PruneConfig":
        return PruneConfig()

    @staticmethod
    def fastv(start_layer: int, retention: float) -> "PruneConfig":
        return PruneConfig(mode="fastv", fastv_start_layer=start_layer,
                           fastv_retention=retention)

    @staticmethod
    def vtw(exit_layer: int) -> "PruneConfig":
        return PruneConfig(mode="vtw", vtw_exit_layer=exit_layer)

    def validate(self, config: ModelConfig) -> None:
        if self.mode == "none":
            return
        if self.mode == "fastv":
            if self.fastv_start_layer is None or self.fastv_retention is None:
                raise ConfigError("fastv pruning requires start_layer and retention")
            if not config.insert_layer <= self.fastv_start_layer <= config.n_layers:
                raise ConfigError(
                    f"fastv start_layer {self.fastv_start_layer} outside "
                    f"[{config.insert_layer}, {config.n_layers}]"
                )
            if not 0.0 < self.fastv_retention <= 1.0:
                raise ConfigError(
                    f"fastv retention must be in (0, 1], got {self.fastv_retention}"
                )
        elif self.mode == "vtw":
            if self.vtw_exit_layer is None:
                raise ConfigError("vtw pruning requires exit_layer")
            if self.vtw_exit_layer < config.insert_layer:
                raise ConfigError(
                    f"vtw exit_layer {self.vtw_exit_layer} precedes insert_layer "
                    f"{config.insert_layer}: tokens cannot exit before they enter"
                )
            if self.vtw_exit_layer > config.n_layers:
                raise ConfigError(
                    f"vtw exit_layer {self.vtw_exit_layer} > n_layers {config.n_layers}"
                )
        else:
            raise ConfigError(f"unknown prune mode {self.mode!r}")

    def retention_count(self, l_mm: int) -> int:
        if self.mode != "fastv":
            return l_mm
        return min(l_mm, max(1, math.ceil(self.fastv_retention * l_mm))) if l_mm else 0


class SplitKVCache:
    """Two-region K/V store for one inference stream.

    Shallow region: one :class:`LayerKV` per layer below the insertion layer,
    holding language (and later, decoded) rows only. Deep region: one per
    layer at or above it, holding the full combined sequence. Decoded tokens
    append to every layer's region.
    """

    def __init__(self, config: ModelConfig, l_text: int, l_mm: int):
        self.config = config
        self.l_text = l_text
        self.l_mm = l_mm
        self.n_decoded = 0
        self.pruned = False
        self.shallow = [LayerKV(config) for _ in range(config.insert_layer)]
        self.deep = [LayerKV(config) for _ in range(config.n_layers - config.insert_layer)]

    @property
    def combined_len(self) -> int:
        return self.l_text + self.l_mm + self.n_decoded

    def layer_kv(self, layer: int) -> LayerKV:
        if layer < self.config.insert_layer:
            return self.shallow[layer]
        return self.deep[layer - self.config.insert_layer]

    def validate(self) -> None:
        for i, kv in enumerate(self.shallow):
            if kv.is_mm.any():
                raise ValidationError(f"shallow cache layer {i} contains multimodal rows")
            if len(kv) != self.l_text + self.n_decoded:
                raise ValidationError(
                    f"shallow cache layer {i} has {len(kv)} rows, expected "
                    f"{self.l_text + self.n_decoded}"
                )
        if not self.pruned:
            for i, kv in enumerate(self.deep):
                if len(kv) != self.l_text + self.l_mm + self.n_decoded:
                    raise ValidationError(
                        f"deep cache layer {i} has {len(kv)} rows, expected "
                        f"{self.l_text + self.l_mm + self.n_decoded}"
                    )


@dataclass
class PrefillResult:
    logits: np.ndarray                     # (vocab,) at the last prompt token
    cache: SplitKVCache
    trace: Optional[TraceCapture] = None
    hidden_states: Optional[list[np.ndarray]] = None
    layer_lengths: list[int] = field(default_factory=list)
    kept_mm_positions: Optional[np.ndarray] = None


@dataclass
class DecodeResult:
    logits: np.ndarray                     # (vocab,)
    trace: Optional[TraceCapture] = None


def assemble_baseline_state(layout: PromptLayout, weights: Weights) -> HiddenState:
    """Layer-0 input for the conventional forward: text embeddings with the
    multimodal rows spliced in at their reserved positions."""
    _check_widths(layout, weights.config)
    pre = embed(layout.pre_text, np.arange(*layout.pre_range), weights)
    post = embed(layout.post_text, np.arange(*layout.post_range), weights)
    acts = np.concatenate([
        pre.activations,
        layout.mm_embeddings.astype(DTYPE, copy=False),
        post.activations,
    ])
    return HiddenState(acts, np.arange(layout.combined_length), layout.is_mm_full)


def _check_widths(layout: PromptLayout, config: ModelConfig) -> None:
    if layout.l_mm and layout.mm_embeddings.shape[1] != config.d_model:
        raise ShapeError(
            f"adapter embedding width {layout.mm_embeddings.shape[1]} != "
            f"d_model {config.d_model}"
        )
    if layout.combined_length > config.max_positions:
        raise ValidationError(
            f"combined length {layout.combined_length} exceeds max_positions "
            f"{config.max_positions}"
        )


def fastv_prune(
    probs: Optional[np.ndarray],
    query_positions: np.ndarray,
    key_positions: np.ndarray,
    key_is_mm: np.ndarray,
    retention_ratio: float,
) -> np.ndarray:
    """Sequence-row indices of the multimodal tokens to keep.

    Importance of a multimodal key is its mean attention received, over
    all heads and all queries at later positions, in the supplied attention
    tensor (n_heads, n_queries, n_keys). Ties (including the degenerate
    no-signal case where ``probs`` is None) are broken toward lower index.
    """
    if not 0.0 < retention_ratio <= 1.0:
        raise ConfigError(f"retention ratio must be in (0, 1], got {retention_ratio}")
    mm_idx = np.where(key_is_mm)[0]
    n_keep = min(len(mm_idx), max(1, math.ceil(retention_ratio * len(mm_idx)))) if len(mm_idx) else 0
    scores = np.zeros(len(mm_idx), dtype=np.float64)
    if probs is not None:
        for slot, j in enumerate(mm_idx):
            later = query_positions > key_positions[j]
            if later.any():
                scores[slot] = float(probs[:, later, j].mean())
    order = np.argsort(-scores, kind="stable")
    return np.sort(mm_idx[order[:n_keep]])


def _drop_rows(state: HiddenState, keep: np.ndarray) -> HiddenState:
    return HiddenState(
        np.ascontiguousarray(state.activations[keep]),
        state.positions[keep],
        state.is_mm[keep],
    )


def deepinsert_prefill(
    layout: PromptLayout,
    weights: Weights,
    prune: Optional[PruneConfig] = None,
    counter: Optional[OpCounter] = None,
    capture_trace: bool = False,
    capture_hidden: bool = False,
) -> PrefillResult:
    """Two-phase prefill; returns last-token logits and the filled cache.

    Phase one: language tokens (reserved global positions) through layers
    [0, insert_layer), filling the shallow region. Phase two: multimodal
    embeddings spliced in at their position range, layers
    [insert_layer, n_layers) over the full sequence, filling the deep region.
    """
    cfg = weights.config
    _check_widths(layout, cfg)
    if prune is not None:
        prune.validate(cfg)
    n_di = cfg.insert_layer
    cache = SplitKVCache(cfg, layout.l_text, layout.l_mm)
    trace = TraceCapture("last_prompt", layout.combined_length - 1) if capture_trace else None
    hidden: Optional[list[np.ndarray]] = [] if capture_hidden else None
    layer_lengths: list[int] = []

    state = embed(layout.text_tokens, layout.text_positions, weights)
    for layer in range(n_di):
        layer_lengths.append(len(state))
        state = block_forward(weights, layer, state, kv=cache.shallow[layer],
                              counter=counter, trace=trace)
        if hidden is not None:
            hidden.append(state.activations.copy())

    full_acts = np.concatenate([
        state.activations[:layout.n_pre],
        layout.mm_embeddings.astype(DTYPE, copy=False),
        state.activations[layout.n_pre:],
    ])
    state = HiddenState(full_acts, np.arange(layout.combined_length), layout.is_mm_full)

    saved_probs: Optional[np.ndarray] = None
    saved_meta: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None
    kept_positions: Optional[np.ndarray] = None
    for layer in range(n_di, cfg.n_layers):
        if prune is not None and state.is_mm.any():
            if prune.mode == "vtw" and layer == prune.vtw_exit_layer:
                state = _drop_rows(state, ~state.is_mm)
                cache.pruned = True
                kept_positions = np.zeros(0, dtype=np.int64)
            elif prune.mode == "fastv" and layer == prune.fastv_start_layer:
                if saved_meta is not None:
                    qpos, kpos, kmm = saved_meta
                else:
                    qpos, kpos, kmm = state.positions, state.positions, state.is_mm
                kept = fastv_prune(saved_probs, qpos, kpos, kmm, prune.fastv_retention)
                keep_mask = ~state.is_mm
                keep_mask[kept] = True
                if keep_mask.sum() < len(state):
                    cache.pruned = True
                kept_positions = state.positions[kept]
                state = _drop_rows(state, keep_mask)
        layer_lengths.append(len(state))
        need_probs = (prune is not None and prune.mode == "fastv"
                      and layer == (prune.fastv_start_layer or 0) - 1)
        out = block_forward(weights, layer, state, kv=cache.deep[layer - n_di],
                            counter=counter, trace=trace, return_probs=need_probs)
        if need_probs:
            state, probs = out
            saved_probs = probs
            saved_meta = (state.positions, state.positions, state.is_mm)
        else:
            state = out
        if hidden is not None:
            hidden.append(state.activations.copy())

    logits = final_logits(weights, state.activations, np.array([len(state) - 1]))[0]
    cache.validate()
    return PrefillResult(logits=logits, cache=cache, trace=trace,
                         hidden_states=hidden, layer_lengths=layer_lengths,
                         kept_mm_positions=kept_positions)


def decode_step(
    cache: SplitKVCache,
    token: int,
    weights: Weights,
    counter: Optional[OpCounter] = None,
    capture_trace: bool = False,
) -> DecodeResult:
    """Process one new token through all layers against the split cache.

    Early layers attend to the shallow (language + previously decoded)
    region only; layers at or past the insertion layer attend to the deep
    region including multimodal entries. The new K/V rows are appended to
    both regions, so early layers keep full language context.
    """
    cfg = weights.config
    cache.validate()
    pos = cache.combined_len
    trace = TraceCapture("first_answer", pos) if capture_trace else None
    state = embed(np.array([token]), np.array([pos]), weights)
    for layer in range(cfg.n_layers):
        state = block_forward(weights, layer, state, kv=cache.layer_kv(layer),
                              counter=counter, trace=trace)
    cache.n_decoded += 1
    logits = final_logits(weights, state.activations, np.array([0]))[0]
    return DecodeResult(logits=logits, trace=trace)


def generate(
    layout: PromptLayout,
    weights: Weights,
    max_new_tokens: int,
    stop_token: Optional[int] = None,
    prune: Optional[PruneConfig] = None,
    counter: Optional[OpCounter] = None,
) -> list[int]:
    """Greedy decoding; deterministic for fixed weights and layout."""
    if max_new_tokens < 1:
        raise ValidationError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
    result = deepinsert_prefill(layout, weights, prune=prune, counter=counter)
    tokens: list[int] = [int(np.argmax(result.logits))]
    while len(tokens) < max_new_tokens and tokens[-1] != stop_token:
        step = decode_step(result.cache, tokens[-1], weights, counter=counter)
        tokens.append(int(np.argmax(step.logits)))
    return tokens
