"""Quantitative instruments: analytical cost model, counter reconciliation,
attention diagnostics, and mutual k-nearest-neighbor alignment.

The cost model counts the multiply-adds of the per-layer core (QKV
projections, attention score and value products, output projection,
feed-forward pair) and drops everything else — softmax, norms, rotary
phases, embedding and LM-head products — exactly matching the scope of the
instrumented counter, so analytical totals and counted totals agree as
integers rather than approximately.

Per layer over L tokens:

    projection   = 6 * L * d^2
    attention    = 4 * L^2 * d + 2 * L * d^2
    feed_forward = 4 * L * d * d_ff

With late entry at layer n_di, the first n_di layers see only the text
tokens and the rest see the combined sequence, which can be written either
as a split sum over the two layer ranges or as the full-sequence total minus
an n_di-proportional correction; both forms are computed and must agree.
"""

from __future__ import annotations

import json
import math
import statistics
import time
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .model import TraceCapture
from .numerics import OpCounter


@dataclass(frozen=True)
class FlopsQuery:
    """Inputs to the late-entry cost model."""

    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    l_text: int
    l_mm: int
    insert_layer: int

    def __post_init__(self) -> None:
        if min(self.n_layers, self.d_model, self.d_ff, self.n_heads, self.l_text) <= 0:
            raise ConfigError(f"counts must be positive: {self}")
        if self.l_mm < 0:
            raise ConfigError(f"l_mm must be non-negative, got {self.l_mm}")
        if not 0 <= self.insert_layer <= self.n_layers:
            raise ConfigError(
                f"insert_layer {self.insert_layer} outside [0, {self.n_layers}]"
            )


@dataclass
class LayerFlops:
    projection: int
    attention: int
    feed_forward: int

    @property
    def total(self) -> int:
        return self.projection + self.attention + self.feed_forward


def flops_per_layer(l_tokens: int, d_model: int, d_ff: int,
                    n_heads: int = 1) -> LayerFlops:
    """Core multiply-adds of one layer over ``l_tokens`` tokens.

    ``n_heads`` does not appear: the per-head softmax term it would add is
    dropped, as heads are small relative to the model width.
    """
    if min(l_tokens, d_model, d_ff, n_heads) <= 0:
        raise ConfigError("flops_per_layer expects positive counts")
    return LayerFlops(
        projection=6 * l_tokens * d_model * d_model,
        attention=4 * l_tokens * l_tokens * d_model + 2 * l_tokens * d_model * d_model,
        feed_forward=4 * l_tokens * d_model * d_ff,
    )


@dataclass
class FlopsReport:
    query: FlopsQuery
    per_layer_text: LayerFlops
    per_layer_combined: LayerFlops
    total: int
    total_split_form: int
    instrumented: Optional[dict[str, int]] = None

    def components(self) -> dict[str, int]:
        n_di = self.query.insert_layer
        n_deep = self.query.n_layers - n_di
        return {
            "projection": n_di * self.per_layer_text.projection
            + n_deep * self.per_layer_combined.projection,
            "attention": n_di * self.per_layer_text.attention
            + n_deep * self.per_layer_combined.attention,
            "feed_forward": n_di * self.per_layer_text.feed_forward
            + n_deep * self.per_layer_combined.feed_forward,
        }

    def to_dict(self) -> dict:
        return {
            "query": self.query.__dict__,
            "per_layer_text": self.per_layer_text.__dict__,
            "per_layer_combined": self.per_layer_combined.__dict__,
            "components": self.components(),
            "total": self.total,
            "instrumented": self.instrumented,
        }


def flops_deepinsert(query: FlopsQuery) -> FlopsReport:
    """Total core multiply-adds of one late-entry prefill.

    Subtraction form: n_layers * per_layer(L_text + L_mm) minus
    insert_layer * (8*L_mm*d^2 + 4*(2*L_text + L_mm)*L_mm*d + 4*L_mm*d*d_ff).
    The equivalent split-sum form is computed as a cross-check and the two
    must agree exactly.
    """
    q = query
    d, f = q.d_model, q.d_ff
    combined = q.l_text + q.l_mm
    pl_text = flops_per_layer(q.l_text, d, f, q.n_heads)
    pl_comb = flops_per_layer(combined, d, f, q.n_heads)
    correction = q.insert_layer * (
        8 * q.l_mm * d * d
        + 4 * (2 * q.l_text + q.l_mm) * q.l_mm * d
        + 4 * q.l_mm * d * f
    )
    total = q.n_layers * pl_comb.total - correction
    split = q.insert_layer * pl_text.total + (q.n_layers - q.insert_layer) * pl_comb.total
    if total != split:
        raise ValidationError(
            f"cost model forms disagree: subtraction {total} vs split {split}"
        )
    return FlopsReport(q, pl_text, pl_comb, total, split)


def flops_piecewise(layer_lengths: Sequence[int], d_model: int, d_ff: int,
                    n_heads: int = 1) -> int:
    """Total over explicit per-layer sequence lengths (pruned runs)."""
    return sum(flops_per_layer(l, d_model, d_ff, n_heads).total for l in layer_lengths)


def predicted_layer_lengths(query: FlopsQuery, vtw_exit_layer: Optional[int] = None,
                            fastv_start_layer: Optional[int] = None,
                            fastv_kept: Optional[int] = None) -> list[int]:
    """Per-layer sequence lengths implied by late entry plus optional pruning."""
    lengths = []
    for layer in range(query.n_layers):
        if layer < query.insert_layer:
            lengths.append(query.l_text)
        else:
            mm = query.l_mm
            if vtw_exit_layer is not None and layer >= vtw_exit_layer:
                mm = 0
            if fastv_start_layer is not None and layer >= fastv_start_layer:
                mm = fastv_kept if fastv_kept is not None else mm
            lengths.append(query.l_text + mm)
    return lengths


@dataclass
class ReconcileReport:
    matches: bool
    analytical: dict[str, int]
    instrumented: dict[str, int]
    diff: dict[str, int]

    def to_dict(self) -> dict:
        return {"matches": self.matches, "analytical": self.analytical,
                "instrumented": self.instrumented, "diff": self.diff}


def reconcile_counts(counter: OpCounter, query: FlopsQuery) -> ReconcileReport:
    """Compare a prefill's counted mul-adds against the analytical model.

    The counter's scope (core matmuls only) matches the model's scope, so
    equality is exact integer equality; any difference is reported
    per component.
    """
    analytical = flops_deepinsert(query).components()
    instrumented = counter.by_report_component()
    diff = {k: instrumented[k] - analytical[k] for k in analytical}
    return ReconcileReport(
        matches=all(v == 0 for v in diff.values()),
        analytical=analytical,
        instrumented=instrumented,
        diff=diff,
    )


def validate_trace(trace: TraceCapture, tol: float = 1e-6) -> None:
    for tl in trace.layers:
        sums = tl.probs.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > tol):
            raise ValidationError(
                f"trace layer {tl.layer}: attention rows sum to {sums}, expected 1"
            )


def var_per_layer(trace: TraceCapture) -> np.ndarray:
    """Share of the query token's attention mass on multimodal positions,
    per layer, summed over heads and divided by the head count.

    Each head's row sums to one, so the value lies in [0, 1]; layers whose
    keys include no multimodal rows score exactly 0.
    """
    validate_trace(trace)
    out = np.zeros(len(trace.layers))
    for i, tl in enumerate(trace.layers):
        n_heads = tl.probs.shape[0]
        out[i] = float(tl.probs[:, tl.key_is_mm].sum() / n_heads)
    return out


def token_contribution_map(
    traces: Sequence[TraceCapture],
    top_heads: int = 5,
    exclude_first_layers: int = 0,
) -> np.ndarray:
    """(n_layers, n_mm_tokens) matrix of layer-relative token contributions.

    Per layer and multimodal token: mean attention over that token's
    ``top_heads`` strongest heads, averaged over traces; each token's column
    is then normalized to sum to 1 across layers (when its raw total is
    positive). ``exclude_first_layers`` zeroes the earliest layers before
    normalizing, for models whose first layers swamp the picture.
    """
    if not traces:
        raise ValidationError("no traces supplied")
    n_layers = len(traces[0].layers)
    mm_counts = {int(tl.key_is_mm.sum()) for tr in traces for tl in tr.layers
                 if tl.key_is_mm.any()}
    if not mm_counts:
        raise ValidationError("traces contain no multimodal keys")
    if len(mm_counts) != 1:
        raise ValidationError(f"inconsistent multimodal token counts: {mm_counts}")
    n_mm = mm_counts.pop()
    acc = np.zeros((n_layers, n_mm))
    n_heads = traces[0].layers[0].probs.shape[0]
    if n_heads < top_heads:
        warnings.warn(
            f"only {n_heads} heads available, using all of them instead of "
            f"top {top_heads}",
            stacklevel=2,
        )
        top_heads = n_heads
    for trace in traces:
        validate_trace(trace)
        if len(trace.layers) != n_layers:
            raise ValidationError("traces disagree on layer count")
        for li, tl in enumerate(trace.layers):
            if not tl.key_is_mm.any():
                continue
            rows = tl.probs[:, tl.key_is_mm]          # (heads, n_mm)
            top = np.sort(rows, axis=0)[-top_heads:]  # per-token strongest heads
            acc[li] += top.mean(axis=0)
    acc /= len(traces)
    if exclude_first_layers:
        acc[:exclude_first_layers] = 0.0
    totals = acc.sum(axis=0, keepdims=True)
    safe = np.where(totals > 0, totals, 1.0)
    return acc / safe


def mutual_knn_alignment(feats_a: np.ndarray, feats_b: np.ndarray, k: int) -> float:
    """Mean normalized intersection of inner-product k-NN sets.

    Both feature sets cover the same n samples (widths may differ). Self is
    excluded from each neighbor set; similarity ties break toward the lower
    sample index. Symmetric in its arguments and in [0, 1].
    """
    if feats_a.shape[0] != feats_b.shape[0]:
        raise ShapeError(
            f"feature sets cover different sample counts: "
            f"{feats_a.shape[0]} vs {feats_b.shape[0]}"
        )
    n = feats_a.shape[0]
    if not 0 < k < n:
        raise ConfigError(f"need 0 < k < n samples, got k={k}, n={n}")
    if not (np.isfinite(feats_a).all() and np.isfinite(feats_b).all()):
        raise ValidationError("features contain non-finite values")

    def knn_sets(feats: np.ndarray) -> np.ndarray:
        sims = feats.astype(np.float64) @ feats.astype(np.float64).T
        np.fill_diagonal(sims, -np.inf)
        order = np.argsort(-sims, axis=1, kind="stable")
        return order[:, :k]

    nn_a = knn_sets(feats_a)
    nn_b = knn_sets(feats_b)
    overlap = 0
    for i in range(n):
        overlap += len(set(nn_a[i].tolist()) & set(nn_b[i].tolist()))
    return overlap / (n * k)


def alignment_grid(layers_a: Sequence[np.ndarray], layers_b: Sequence[np.ndarray],
                   k: int) -> np.ndarray:
    """Pairwise alignment of every layer of A against every layer of B."""
    if not layers_a or not layers_b:
        raise ValidationError("alignment grid needs at least one layer per side")
    n = layers_a[0].shape[0]
    for feats in list(layers_a) + list(layers_b):
        if feats.shape[0] != n:
            raise ShapeError("all layer feature sets must cover the same samples")
    grid = np.zeros((len(layers_a), len(layers_b)))
    for i, fa in enumerate(layers_a):
        for j, fb in enumerate(layers_b):
            grid[i, j] = mutual_knn_alignment(fa, fb, k)
    return grid


def prompt_hidden_features(result_hidden: list[np.ndarray],
                           insert_layer: int, l_text: int) -> list[np.ndarray]:
    """Last-prompt-token activation per layer from a captured prefill.

    Early layers carry text-only rows, so the last prompt token is the last
    row in both phases.
    """
    del insert_layer, l_text  # the last row is the last prompt token in both phases
    return [h[-1] for h in result_hidden]


TRACE_SCHEMA = "deepinsert-trace v1"


def traces_to_jsonl(traces: Sequence[TraceCapture]) -> str:
    """One JSON object per (trace, layer, head) row, under a version header."""
    lines = [f"# {TRACE_SCHEMA}"]
    for ti, trace in enumerate(traces):
        for tl in trace.layers:
            for head in range(tl.probs.shape[0]):
                lines.append(json.dumps({
                    "trace": ti,
                    "query_kind": trace.query_kind,
                    "query_position": trace.query_position,
                    "layer": tl.layer,
                    "head": head,
                    "key_positions": tl.key_positions.tolist(),
                    "key_is_mm": [bool(x) for x in tl.key_is_mm],
                    "probs": [round(float(p), 9) for p in tl.probs[head]],
                }, sort_keys=True, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def traces_from_jsonl(text: str) -> list[TraceCapture]:
    from .model import TraceLayer

    lines = text.splitlines()
    if not lines or lines[0] != f"# {TRACE_SCHEMA}":
        raise ValidationError(
            f"trace file schema mismatch: expected '# {TRACE_SCHEMA}'"
        )
    staged: dict[tuple[int, int], dict] = {}
    meta: dict[int, tuple[str, int]] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        key = (obj["trace"], obj["layer"])
        meta[obj["trace"]] = (obj["query_kind"], obj["query_position"])
        entry = staged.setdefault(key, {
            "heads": {},
            "key_positions": np.array(obj["key_positions"], dtype=np.int64),
            "key_is_mm": np.array(obj["key_is_mm"], dtype=bool),
        })
        entry["heads"][obj["head"]] = np.array(obj["probs"])
    traces = []
    for ti in sorted(meta):
        kind, qpos = meta[ti]
        layers = []
        for (t, layer) in sorted(k for k in staged if k[0] == ti):
            entry = staged[(t, layer)]
            probs = np.stack([entry["heads"][h] for h in sorted(entry["heads"])])
            layers.append(TraceLayer(layer, probs, entry["key_positions"],
                                     entry["key_is_mm"]))
        traces.append(TraceCapture(kind, qpos, layers))
    return traces


def measure_prefill_ms(run_prefill, reps: int = 30, warmup: int = 5) -> float:
    """Median wall-clock milliseconds of ``run_prefill()`` over ``reps`` runs."""
    for _ in range(warmup):
        run_prefill()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        run_prefill()
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(statistics.median(times))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValidationError("pearson needs two equally sized series of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc * xc).sum() * (yc * yc).sum()))
    if denom == 0:
        raise ValidationError("pearson undefined for constant series")
    return float((xc * yc).sum() / denom)


def collect_flops_vs_runtime(weights_for_layer, query_for_layer, candidate_layers,
                             reps: int = 9, warmup: int = 2) -> list[dict]:
    """FLOPs and measured prefill time per candidate insertion layer.

    ``weights_for_layer(layer)`` must return a zero-argument prefill callable;
    ``query_for_layer(layer)`` the matching :class:`FlopsQuery`.
    """
    rows = []
    for layer in candidate_layers:
        run = weights_for_layer(layer)
        ms = measure_prefill_ms(run, reps=reps, warmup=warmup)
        rows.append({
            "insert_layer": layer,
            "flops": flops_deepinsert(query_for_layer(layer)).total,
            "ms": ms,
        })
    return rows
