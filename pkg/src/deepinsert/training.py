"""Joint training of the transformer and adapter on grid-QA.

Backpropagation is written out by hand against the same numeric kernels the
inference engine uses; there is no autodiff graph. The batched forward mirrors
the engine's two-phase structure: text rows run through the early layers
alone, multimodal rows are spliced in at the insertion layer, and gradients
flow through the late layers into the adapter and through the whole stack
into the language-path weights. The frozen encoder sits outside the
parameter set entirely, so it cannot receive updates.

Loss is next-token cross-entropy masked to the answer position only.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .errors import CheckpointError, ConfigError, DivergenceError, ValidationError
from .insertion import PromptLayout, PruneConfig, deepinsert_prefill
from .modality import (
    TOK_MM,
    Adapter,
    DatasetSplits,
    FrozenEncoder,
    GridSample,
    GridVocab,
    segment_sample,
)
from .model import ModelConfig, Weights, expected_shapes
from .numerics import (
    DTYPE,
    AdamHyper,
    AdamState,
    OpCounter,
    adam_step,
    clip_by_global_norm,
    fold_seed,
    gelu_grad,
    gelu_with_tape,
    layer_norm_backward,
    layer_norm_with_stats,
    make_rng,
    rope_rotate,
    rope_tables,
    softmax_rows,
)

MASK_VALUE = -1e9


@dataclass
class TrainConfig:
    lr: float = 3e-4
    schedule: str = "cosine"          # "constant" | "cosine"
    batch_size: int = 32
    total_steps: int = 1200
    eval_interval: int = 200
    seed: int = 0
    clip_norm: float = 1.0
    checkpoint_path: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.total_steps >= self.eval_interval >= 1:
            raise ConfigError(
                f"need total_steps >= eval_interval >= 1, got "
                f"{self.total_steps} / {self.eval_interval}"
            )
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.lr
        frac = step / max(1, self.total_steps)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(1.0, frac)))


@dataclass
class EvalRow:
    step: int
    val_loss: float
    acc_identity: float
    acc_majority: float
    muladds_fwd: int
    ms_fwd: float


@dataclass
class MetricsLog:
    """Per-step training losses plus per-eval validation metrics."""

    step_loss: list[float] = field(default_factory=list)
    evals: list[EvalRow] = field(default_factory=list)
    diverged: bool = False

    def to_csv(self) -> str:
        lines = ["step,loss,val_acc_identity,val_acc_majority,muladds_fwd,ms_fwd"]
        by_step = {e.step: e for e in self.evals}
        for i, loss in enumerate(self.step_loss, start=1):
            e = by_step.get(i)
            if e is None:
                lines.append(f"{i},{loss:.6f},,,,")
            else:
                lines.append(
                    f"{i},{loss:.6f},{e.acc_identity:.6f},{e.acc_majority:.6f},"
                    f"{e.muladds_fwd},{e.ms_fwd:.3f}"
                )
        return "\n".join(lines) + "\n"


@dataclass
class EvalResult:
    accuracy: float
    acc_by_qtype: dict[str, float]
    mean_nll: float
    n: int


@dataclass
class Batch:
    features: np.ndarray       # (B, M, d_enc)
    pre_tokens: np.ndarray     # (B, P)
    post_tokens: np.ndarray    # (B, T)
    answers: np.ndarray        # (B,)
    qtypes: list[str]


def assemble_batch(samples: list[GridSample], encoder: FrozenEncoder) -> Batch:
    template = samples[0].template_tokens()
    slot = int(np.where(template == TOK_MM)[0][0])
    pre_len, post_len = slot, len(template) - slot - 1
    pre = np.zeros((len(samples), pre_len), dtype=np.int64)
    post = np.zeros((len(samples), post_len), dtype=np.int64)
    feats = np.zeros((len(samples), samples[0].grid.size, encoder.d_enc), dtype=DTYPE)
    answers = np.zeros(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        t = s.template_tokens()
        if len(t) != len(template):
            raise ValidationError("all samples in a batch must share template length")
        pre[i] = t[:slot]
        post[i] = t[slot + 1:]
        feats[i] = encoder.encode(s.grid)
        answers[i] = s.answer_token
    return Batch(feats, pre, post, answers, [s.qtype for s in samples])


def _positions(pre_len: int, mm_len: int, post_len: int) -> tuple[np.ndarray, np.ndarray]:
    total = pre_len + mm_len + post_len
    text = np.concatenate([
        np.arange(pre_len, dtype=np.int64),
        np.arange(pre_len + mm_len, total, dtype=np.int64),
    ])
    return text, np.arange(total, dtype=np.int64)


def _block_forward_batch(weights: Weights, layer: int, x: np.ndarray,
                         positions: np.ndarray,
                         tape: Optional[list]) -> np.ndarray:
    cfg = weights.config
    b, s, d = x.shape
    hd, nh = cfg.head_dim, cfg.n_heads
    flat = x.reshape(b * s, d)
    y1, xhat1, inv1 = layer_norm_with_stats(flat, weights.layer(layer, "ln1_g"),
                                            weights.layer(layer, "ln1_b"))
    q = (y1 @ weights.layer(layer, "w_q")).reshape(b, s, nh, hd).transpose(0, 2, 1, 3)
    k = (y1 @ weights.layer(layer, "w_k")).reshape(b, s, nh, hd).transpose(0, 2, 1, 3)
    v = (y1 @ weights.layer(layer, "w_v")).reshape(b, s, nh, hd).transpose(0, 2, 1, 3)
    cos, sin = rope_tables(positions, hd, dtype=x.dtype)
    q = rope_rotate(q, cos, sin, hd)
    k = rope_rotate(k, cos, sin, hd)
    scale = np.asarray(1.0 / math.sqrt(hd), dtype=x.dtype)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    allowed = positions[None, :] <= positions[:, None]
    scores = scores + np.where(allowed, x.dtype.type(0.0), x.dtype.type(MASK_VALUE))
    probs = softmax_rows(scores.reshape(b * nh * s, s)).reshape(b, nh, s, s)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b * s, d)
    attn = ctx @ weights.layer(layer, "w_o")
    x_mid = flat + attn
    y2, xhat2, inv2 = layer_norm_with_stats(x_mid, weights.layer(layer, "ln2_g"),
                                            weights.layer(layer, "ln2_b"))
    ff_pre = y2 @ weights.layer(layer, "w_ff1")
    ff_act, ff_tanh = gelu_with_tape(ff_pre)
    out = x_mid + ff_act @ weights.layer(layer, "w_ff2")
    if tape is not None:
        tape.append({
            "layer": layer, "shape": (b, s, d),
            "xhat1": xhat1, "inv1": inv1, "y1": y1,
            "q": q, "k": k, "v": v, "probs": probs, "ctx": ctx,
            "cos": cos, "sin": sin,
            "xhat2": xhat2, "inv2": inv2, "y2": y2,
            "ff_pre": ff_pre, "ff_act": ff_act, "ff_tanh": ff_tanh,
        })
    return out.reshape(b, s, d)


def _block_backward_batch(weights: Weights, rec: dict, d_out: np.ndarray,
                          grads: dict[str, np.ndarray]) -> np.ndarray:
    cfg = weights.config
    layer = rec["layer"]
    b, s, d = rec["shape"]
    hd, nh = cfg.head_dim, cfg.n_heads
    p = f"layers.{layer}."
    d_flat = d_out.reshape(b * s, d)

    # feed-forward sublayer
    d_ff2_in = d_flat
    grads[p + "w_ff2"] += rec["ff_act"].T @ d_ff2_in
    d_act = d_ff2_in @ weights.layer(layer, "w_ff2").T
    d_pre = d_act * gelu_grad(rec["ff_pre"], rec["ff_tanh"])
    grads[p + "w_ff1"] += rec["y2"].T @ d_pre
    d_y2 = d_pre @ weights.layer(layer, "w_ff1").T
    d_x_mid, d_g2, d_b2 = layer_norm_backward(d_y2, rec["xhat2"], rec["inv2"],
                                              weights.layer(layer, "ln2_g"))
    grads[p + "ln2_g"] += d_g2
    grads[p + "ln2_b"] += d_b2
    d_mid = d_flat + d_x_mid

    # attention sublayer
    grads[p + "w_o"] += rec["ctx"].T @ d_mid
    d_ctx = (d_mid @ weights.layer(layer, "w_o").T).reshape(b, s, nh, hd).transpose(0, 2, 1, 3)
    probs, v, q, k = rec["probs"], rec["v"], rec["q"], rec["k"]
    d_probs = d_ctx @ v.transpose(0, 1, 3, 2)
    d_v = probs.transpose(0, 1, 3, 2) @ d_ctx
    d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
    d_scores = d_scores * np.asarray(1.0 / math.sqrt(hd), dtype=d_scores.dtype)
    d_q = d_scores @ k
    d_k = d_scores.transpose(0, 1, 3, 2) @ q
    d_q = rope_rotate(d_q, rec["cos"], rec["sin"], hd, inverse=True)
    d_k = rope_rotate(d_k, rec["cos"], rec["sin"], hd, inverse=True)

    def heads_to_flat(t: np.ndarray) -> np.ndarray:
        return t.transpose(0, 2, 1, 3).reshape(b * s, d)

    d_q2, d_k2, d_v2 = heads_to_flat(d_q), heads_to_flat(d_k), heads_to_flat(d_v)
    y1 = rec["y1"]
    grads[p + "w_q"] += y1.T @ d_q2
    grads[p + "w_k"] += y1.T @ d_k2
    grads[p + "w_v"] += y1.T @ d_v2
    d_y1 = (d_q2 @ weights.layer(layer, "w_q").T
            + d_k2 @ weights.layer(layer, "w_k").T
            + d_v2 @ weights.layer(layer, "w_v").T)
    d_x_ln, d_g1, d_b1 = layer_norm_backward(d_y1, rec["xhat1"], rec["inv1"],
                                             weights.layer(layer, "ln1_g"))
    grads[p + "ln1_g"] += d_g1
    grads[p + "ln1_b"] += d_b1
    return (d_mid + d_x_ln).reshape(b, s, d)


@dataclass
class ForwardTape:
    layers: list = field(default_factory=list)
    adapter: dict = field(default_factory=dict)
    h_final: Optional[np.ndarray] = None
    xhat_f: Optional[np.ndarray] = None
    inv_f: Optional[np.ndarray] = None
    dims: tuple = ()


def forward_batch(
    weights: Weights,
    adapter: Adapter,
    batch: Batch,
    tape: Optional[ForwardTape] = None,
) -> np.ndarray:
    """Two-phase batched forward; returns logits (B, L, vocab)."""
    cfg = weights.config
    b, m = batch.features.shape[0], batch.features.shape[1]
    p_len, t_len = batch.pre_tokens.shape[1], batch.post_tokens.shape[1]
    total = p_len + m + t_len
    if total > cfg.max_positions:
        raise ValidationError(f"sequence length {total} exceeds max_positions")
    n_di = cfg.insert_layer
    emb = weights.tok_emb
    x_pre = emb[batch.pre_tokens].astype(emb.dtype)
    x_post = emb[batch.post_tokens].astype(emb.dtype)
    mm = adapter.forward(batch.features.reshape(b * m, -1).astype(emb.dtype),
                         tape.adapter if tape is not None else None)
    mm = mm.reshape(b, m, -1)
    pos_text, pos_full = _positions(p_len, m, t_len)

    x = np.concatenate([x_pre, x_post], axis=1)
    layer_tape = tape.layers if tape is not None else None
    for layer in range(n_di):
        x = _block_forward_batch(weights, layer, x, pos_text, layer_tape)
    x = np.concatenate([x[:, :p_len], mm, x[:, p_len:]], axis=1)
    for layer in range(n_di, cfg.n_layers):
        x = _block_forward_batch(weights, layer, x, pos_full, layer_tape)

    flat = x.reshape(b * total, cfg.d_model)
    h, xhat_f, inv_f = layer_norm_with_stats(flat, weights.tensors["final_ln_g"],
                                             weights.tensors["final_ln_b"])
    logits = (h @ emb.T).reshape(b, total, cfg.vocab_size)
    if tape is not None:
        tape.h_final = h
        tape.xhat_f = xhat_f
        tape.inv_f = inv_f
        tape.dims = (b, p_len, m, t_len)
    return logits


def backward_batch(
    weights: Weights,
    adapter: Adapter,
    tape: ForwardTape,
    d_logits: np.ndarray,
    batch: Batch,
) -> dict[str, np.ndarray]:
    """Gradients for every model tensor and adapter tensor (prefixed 'adapter.')."""
    cfg = weights.config
    b, p_len, m, t_len = tape.dims
    total = p_len + m + t_len
    emb = weights.tok_emb
    grads = {name: np.zeros(shape, dtype=np.float64 if emb.dtype == np.float64 else DTYPE)
             for name, shape in expected_shapes(cfg).items()}
    for name, arr in adapter.params.items():
        grads[f"adapter.{name}"] = np.zeros_like(arr)

    d_flat = d_logits.reshape(b * total, cfg.vocab_size)
    d_h = d_flat @ emb
    grads["tok_emb"] += d_flat.T @ tape.h_final
    d_x, d_gf, d_bf = layer_norm_backward(d_h, tape.xhat_f, tape.inv_f,
                                          weights.tensors["final_ln_g"])
    grads["final_ln_g"] += d_gf
    grads["final_ln_b"] += d_bf
    d_x = d_x.reshape(b, total, cfg.d_model)

    n_di = cfg.insert_layer
    deep = [rec for rec in tape.layers if rec["layer"] >= n_di]
    shallow = [rec for rec in tape.layers if rec["layer"] < n_di]
    for rec in reversed(deep):
        d_x = _block_backward_batch(weights, rec, d_x, grads)

    d_mm = d_x[:, p_len:p_len + m].reshape(b * m, cfg.d_model)
    for name, g in adapter.backward(tape.adapter, d_mm).items():
        grads[f"adapter.{name}"] += g
    d_x = np.concatenate([d_x[:, :p_len], d_x[:, p_len + m:]], axis=1)
    for rec in reversed(shallow):
        d_x = _block_backward_batch(weights, rec, d_x, grads)

    d_text = d_x.reshape(b * (p_len + t_len), cfg.d_model)
    tokens = np.concatenate([batch.pre_tokens, batch.post_tokens], axis=1).ravel()
    np.add.at(grads["tok_emb"], tokens, d_text)
    return grads


def sequence_loss(
    logits: np.ndarray,
    targets: np.ndarray,
    loss_mask: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over masked positions, plus d_loss/d_logits.

    Targets outside the mask are ignored entirely, which is what confines
    the training signal to answer positions.
    """
    b, s, v = logits.shape
    flat = logits.reshape(b * s, v)
    mask = loss_mask.reshape(b * s)
    tgt = targets.reshape(b * s)
    idx = np.where(mask)[0]
    if idx.size == 0:
        raise ValidationError("loss mask selects no positions")
    if tgt[idx].min() < 0 or tgt[idx].max() >= v:
        raise ValidationError("target token outside vocabulary at a masked position")
    sel = flat[idx]
    probs = softmax_rows(sel)
    picked = probs[np.arange(idx.size), tgt[idx]]
    loss = float(np.mean(-np.log(np.maximum(picked, 1e-30))))
    d_flat = np.zeros_like(flat)
    d_sel = probs.copy()
    d_sel[np.arange(idx.size), tgt[idx]] -= 1.0
    d_flat[idx] = d_sel / idx.size
    return loss, d_flat.reshape(b, s, v)


def batch_loss_and_grads(
    weights: Weights,
    adapter: Adapter,
    batch: Batch,
) -> tuple[float, dict[str, np.ndarray]]:
    """One training forward/backward: answer-position loss and all gradients."""
    tape = ForwardTape()
    logits = forward_batch(weights, adapter, batch, tape)
    b, total = logits.shape[0], logits.shape[1]
    targets = np.zeros((b, total), dtype=np.int64)
    targets[:, -1] = batch.answers
    mask = np.zeros((b, total), dtype=bool)
    mask[:, -1] = True
    loss, d_logits = sequence_loss(logits, targets, mask)
    grads = backward_batch(weights, adapter, tape, d_logits, batch)
    return loss, grads


def evaluate(
    weights: Weights,
    adapter: Adapter,
    samples: list[GridSample],
    encoder: FrozenEncoder,
    vocab: GridVocab,
    prune: Optional[PruneConfig] = None,
    batch_size: int = 256,
) -> EvalResult:
    """Greedy single-token accuracy (per question type) and mean NLL.

    Predictions are the argmax over the answer-symbol tokens, mirroring
    choice-restricted scoring; NLL is over the full vocabulary. With a
    prune config the engine path is used sample by sample.
    """
    if not samples:
        raise ValidationError("evaluation split is empty")
    sym = vocab.symbol_tokens()
    correct: dict[str, int] = {}
    counts: dict[str, int] = {}
    nll_sum = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        if prune is None:
            batch = assemble_batch(chunk, encoder)
            logits = forward_batch(weights, adapter, batch)[:, -1, :]
        else:
            rows = []
            for s in chunk:
                layout = segment_sample(s, encoder, adapter)
                rows.append(deepinsert_prefill(layout, weights, prune=prune).logits)
            logits = np.stack(rows)
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        answers = np.array([s.answer_token for s in chunk])
        nll_sum += float(np.sum(lse - shifted[np.arange(len(chunk)), answers]))
        pred = sym[np.argmax(logits[:, sym], axis=1)]
        for s, p in zip(chunk, pred):
            counts[s.qtype] = counts.get(s.qtype, 0) + 1
            if p == s.answer_token:
                correct[s.qtype] = correct.get(s.qtype, 0) + 1
    acc_by_qtype = {q: correct.get(q, 0) / counts[q] for q in counts}
    total_correct = sum(correct.values())
    return EvalResult(
        accuracy=total_correct / len(samples),
        acc_by_qtype=acc_by_qtype,
        mean_nll=nll_sum / len(samples),
        n=len(samples),
    )


def instrument_forward(weights: Weights, adapter: Adapter, encoder: FrozenEncoder,
                       sample: GridSample, reps: int = 3) -> tuple[int, float]:
    """Counted mul-adds and median wall-clock ms of one engine prefill."""
    layout = segment_sample(sample, encoder, adapter)
    counter = OpCounter()
    deepinsert_prefill(layout, weights, counter=counter)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        deepinsert_prefill(layout, weights)
        times.append((time.perf_counter() - t0) * 1000.0)
    return counter.total(), float(np.median(times))


def train(
    weights: Weights,
    adapter: Adapter,
    splits: DatasetSplits,
    tcfg: TrainConfig,
    start_step: int = 0,
    opt_state: Optional[AdamState] = None,
) -> MetricsLog:
    """Train in place; returns the metrics log.

    Deterministic per seed: the batch stream is a pure function of the seed
    and the absolute step index, so resuming from a checkpoint reproduces
    the uninterrupted run. On a non-finite loss the last evaluated state is
    restored and the log is marked diverged.
    """
    if not splits.train:
        raise ValidationError("training split is empty")
    cfg = weights.config
    encoder = FrozenEncoder(splits.n_symbols, adapter.d_enc)
    vocab = splits.vocab
    params = dict(weights.tensors)
    params.update({f"adapter.{k}": v for k, v in adapter.params.items()})
    state = opt_state if opt_state is not None else AdamState()
    log = MetricsLog()

    batch_rng = make_rng(fold_seed(tcfg.seed, "batch-stream"))
    if start_step:
        batch_rng.integers(0, len(splits.train), size=start_step * tcfg.batch_size)

    last_good: Optional[tuple[dict, dict, AdamState, int]] = None

    def snapshot(step: int) -> None:
        nonlocal last_good
        last_good = (
            {k: v.copy() for k, v in weights.tensors.items()},
            {k: v.copy() for k, v in adapter.params.items()},
            AdamState({k: v.copy() for k, v in state.m.items()},
                      {k: v.copy() for k, v in state.v.items()}),
            step,
        )

    def restore() -> None:
        if last_good is None:
            return
        w, a, s, _ = last_good
        for k, v in w.items():
            weights.tensors[k][...] = v
        for k, v in a.items():
            adapter.params[k][...] = v
        state.m = s.m
        state.v = s.v

    def run_eval(step: int) -> None:
        res = evaluate(weights, adapter, splits.val, encoder, vocab)
        muladds, ms = instrument_forward(weights, adapter, encoder, splits.val[0])
        log.evals.append(EvalRow(
            step=step,
            val_loss=res.mean_nll,
            acc_identity=res.acc_by_qtype.get("cell_identity", 0.0),
            acc_majority=res.acc_by_qtype.get("row_majority", 0.0),
            muladds_fwd=muladds,
            ms_fwd=ms,
        ))
        if tcfg.checkpoint_path:
            save_checkpoint(tcfg.checkpoint_path, weights, adapter, state, step, splits)
        snapshot(step)

    snapshot(start_step)
    for step in range(start_step + 1, tcfg.total_steps + 1):
        idx = batch_rng.integers(0, len(splits.train), size=tcfg.batch_size)
        chunk = [splits.train[i] for i in idx]
        batch = assemble_batch(chunk, encoder)
        try:
            loss, grads = batch_loss_and_grads(weights, adapter, batch)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}")
            clip_by_global_norm(grads, tcfg.clip_norm)
            adam_step(params, grads, state, AdamHyper(lr=tcfg.lr_at(step)), step)
        except DivergenceError:
            restore()
            log.diverged = True
            break
        log.step_loss.append(loss)
        if step % tcfg.eval_interval == 0 or step == tcfg.total_steps:
            run_eval(step)
    return log


def save_checkpoint(path: str, weights: Weights, adapter: Adapter,
                    opt_state: AdamState, step: int, splits: DatasetSplits) -> None:
    meta = {
        "kind": "deepinsert-checkpoint",
        "model": weights.config.to_dict(),
        "adapter": {"d_enc": adapter.d_enc, "hidden": adapter.hidden,
                    "d_model": adapter.d_model},
        "data": {"grid_size": splits.grid_size, "n_symbols": splits.n_symbols},
        "step": step,
    }
    tensors: dict[str, np.ndarray] = {}
    for name, arr in weights.tensors.items():
        tensors[f"model.{name}"] = arr
    for name, arr in adapter.params.items():
        tensors[f"adapter.{name}"] = arr
    for name, arr in opt_state.m.items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in opt_state.v.items():
        tensors[f"opt.v.{name}"] = arr
    ckpt.save_container(path, meta, tensors)


@dataclass
class RestoredState:
    weights: Weights
    adapter: Adapter
    opt_state: AdamState
    step: int
    meta: dict


def load_checkpoint(path: str) -> RestoredState:
    meta, tensors = ckpt.load_container(path)
    if meta.get("kind") != "deepinsert-checkpoint":
        raise CheckpointError(f"{path}: not a deepinsert checkpoint")
    config = ModelConfig(**meta["model"])
    model_tensors = {name[len("model."):]: arr for name, arr in tensors.items()
                     if name.startswith("model.")}
    ckpt.check_shapes(model_tensors, expected_shapes(config))
    weights = Weights(config, {k: v.astype(DTYPE, copy=False)
                               for k, v in model_tensors.items()})
    ad = meta["adapter"]
    adapter = Adapter(ad["d_enc"], ad["d_model"], ad["hidden"], params={
        name[len("adapter."):]: arr.astype(DTYPE, copy=False)
        for name, arr in tensors.items() if name.startswith("adapter.")
    })
    opt = AdamState(
        m={name[len("opt.m."):]: arr for name, arr in tensors.items()
           if name.startswith("opt.m.")},
        v={name[len("opt.v."):]: arr for name, arr in tensors.items()
           if name.startswith("opt.v.")},
    )
    return RestoredState(weights, adapter, opt, int(meta["step"]), meta)
