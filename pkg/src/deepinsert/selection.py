"""Insertion-layer selection: no-retrain sweep and a REINFORCE policy.

The sweep loads an already-trained model under each candidate insertion
layer without touching the weights; the degradation profile across
candidates is the selection signal. The policy is a small MLP over the mean
language-token embedding that outputs a distribution over candidate layers,
trained with REINFORCE against reward

    R = -NLL(answer) + lambda * (layer / n_layers)

so lambda trades answer quality against depth skipped (0 = no skipping,
1 = skipping everything). A moving-average baseline keeps the updates
low-variance. The model under evaluation stays frozen throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ValidationError
from .modality import Adapter, FrozenEncoder, GridSample, GridVocab
from .model import Weights
from .numerics import (
    DTYPE,
    AdamHyper,
    AdamState,
    adam_step,
    fold_seed,
    gelu,
    gelu_grad,
    make_rng,
    softmax_rows,
)
from .training import evaluate, forward_batch, assemble_batch


@dataclass
class SweepEntry:
    insert_layer: int
    accuracy: float
    acc_by_qtype: dict[str, float]
    mean_nll: float
    flops: int


@dataclass
class SweepResult:
    entries: list[SweepEntry]

    def accuracies(self) -> list[float]:
        return [e.accuracy for e in self.entries]

    def to_csv(self) -> str:
        lines = ["insert_layer,accuracy,acc_cell_identity,acc_row_majority,mean_nll,flops"]
        for e in self.entries:
            lines.append(
                f"{e.insert_layer},{e.accuracy:.6f},"
                f"{e.acc_by_qtype.get('cell_identity', float('nan')):.6f},"
                f"{e.acc_by_qtype.get('row_majority', float('nan')):.6f},"
                f"{e.mean_nll:.6f},{e.flops}"
            )
        return "\n".join(lines) + "\n"


def noretrain_sweep(
    weights: Weights,
    adapter: Adapter,
    samples: list[GridSample],
    encoder: FrozenEncoder,
    vocab: GridVocab,
    candidates: Sequence[int],
) -> SweepResult:
    """Evaluate frozen weights under each candidate insertion layer.

    No weight updates happen; candidate 0 reproduces the model's own
    evaluation exactly. FLOPs are the analytical prefill cost for this
    task's prompt shape.
    """
    from .analysis import FlopsQuery, flops_deepinsert

    if not samples:
        raise ValidationError("sweep needs a non-empty split")
    template = samples[0].template_tokens()
    l_text = len(template) - 1
    l_mm = samples[0].grid.size
    entries = []
    for layer in candidates:
        view = weights.with_insert_layer(int(layer))
        res = evaluate(view, adapter, samples, encoder, vocab)
        flops = flops_deepinsert(FlopsQuery(
            n_layers=view.config.n_layers, d_model=view.config.d_model,
            d_ff=view.config.d_ff, n_heads=view.config.n_heads,
            l_text=l_text, l_mm=l_mm, insert_layer=int(layer),
        )).total
        entries.append(SweepEntry(int(layer), res.accuracy, res.acc_by_qtype,
                                  res.mean_nll, flops))
    return SweepResult(entries)


@dataclass
class PolicyConfig:
    candidates: tuple[int, ...]
    tradeoff_lambda: float = 0.0
    lr: float = 5e-2
    rollout_steps: int = 200
    rollout_batch: int = 8
    hidden: int = 32
    seed: int = 0
    baseline_decay: float = 0.9

    def __post_init__(self) -> None:
        if self.tradeoff_lambda < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.tradeoff_lambda}")
        if not self.candidates:
            raise ConfigError("candidate layer set is empty")


class LayerPolicy:
    """MLP from mean prompt embedding to a distribution over candidate layers."""

    def __init__(self, d_model: int, candidates: Sequence[int], hidden: int,
                 rng: np.random.Generator):
        self.candidates = tuple(int(c) for c in candidates)
        self.params = {
            "w1": rng.normal(0.0, 0.1, size=(d_model, hidden)).astype(DTYPE),
            "b1": np.zeros(hidden, dtype=DTYPE),
            "w2": rng.normal(0.0, 0.1, size=(hidden, len(self.candidates))).astype(DTYPE),
            "b2": np.zeros(len(self.candidates), dtype=DTYPE),
        }

    def distribution(self, prompt_embedding: np.ndarray) -> np.ndarray:
        """Probabilities over candidates; rows of a batch each sum to 1."""
        x = np.atleast_2d(prompt_embedding)
        pre = x @ self.params["w1"] + self.params["b1"]
        logits = gelu(pre) @ self.params["w2"] + self.params["b2"]
        probs = softmax_rows(logits)
        return probs[0] if prompt_embedding.ndim == 1 else probs

    def grads_for(self, prompt_embeddings: np.ndarray,
                  d_logits: np.ndarray) -> dict[str, np.ndarray]:
        pre = prompt_embeddings @ self.params["w1"] + self.params["b1"]
        act = gelu(pre)
        d_w2 = act.T @ d_logits
        d_b2 = d_logits.sum(axis=0)
        d_act = d_logits @ self.params["w2"].T
        d_pre = d_act * gelu_grad(pre)
        d_w1 = prompt_embeddings.T @ d_pre
        d_b1 = d_pre.sum(axis=0)
        return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}


@dataclass
class PolicyResult:
    policy: LayerPolicy
    candidates: tuple[int, ...]
    mean_distribution: np.ndarray
    reward_log: list[dict] = field(default_factory=list)

    @property
    def modal_layer(self) -> int:
        return self.candidates[int(np.argmax(self.mean_distribution))]

    @property
    def expected_depth(self) -> float:
        return float(np.dot(self.mean_distribution, self.candidates))

    def reward_csv(self) -> str:
        lines = ["step,total_reward,performance_reward,efficiency_reward"]
        for row in self.reward_log:
            lines.append(
                f"{row['step']},{row['total']:.6f},{row['performance']:.6f},"
                f"{row['efficiency']:.6f}"
            )
        return "\n".join(lines) + "\n"


def prompt_embedding(weights: Weights, sample: GridSample) -> np.ndarray:
    """Mean token embedding of the language tokens (placeholder excluded)."""
    from .modality import TOK_MM

    tokens = sample.template_tokens()
    lang = tokens[tokens != TOK_MM]
    return weights.tok_emb[lang].mean(axis=0)


def _sample_nlls(weights: Weights, adapter: Adapter, encoder: FrozenEncoder,
                 chunk: list[GridSample], layer: int) -> np.ndarray:
    """Per-sample answer NLL under insertion at ``layer`` (frozen weights)."""
    batch = assemble_batch(chunk, encoder)
    logits = forward_batch(weights.with_insert_layer(layer), adapter, batch)[:, -1, :]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(chunk)), batch.answers]
    return lse - picked


def reinforce_train(
    weights: Weights,
    adapter: Adapter,
    samples: list[GridSample],
    encoder: FrozenEncoder,
    pcfg: PolicyConfig,
) -> PolicyResult:
    """Train the layer policy by REINFORCE on a frozen model.

    Each rollout samples a layer per prompt, runs prefill at that layer, and
    rewards -NLL + lambda * (layer / n_layers); updates use the advantage
    against an exponential moving-average baseline. A single-candidate set
    short-circuits to a point mass.
    """
    if not samples:
        raise ValidationError("policy training needs a non-empty sample set")
    n_layers = weights.config.n_layers
    for c in pcfg.candidates:
        if not 0 <= c <= n_layers:
            raise ConfigError(f"candidate layer {c} outside [0, {n_layers}]")
    rng = make_rng(fold_seed(pcfg.seed, "layer-policy"))
    policy = LayerPolicy(weights.config.d_model, pcfg.candidates, pcfg.hidden, rng)
    embeddings = np.stack([prompt_embedding(weights, s) for s in samples])

    if len(pcfg.candidates) == 1:
        return PolicyResult(policy, policy.candidates, np.array([1.0]), [])

    opt_state = AdamState()
    baseline = 0.0
    baseline_ready = False
    log: list[dict] = []
    for step in range(1, pcfg.rollout_steps + 1):
        idx = rng.integers(0, len(samples), size=pcfg.rollout_batch)
        chunk = [samples[i] for i in idx]
        embs = embeddings[idx]
        probs = policy.distribution(embs)
        p64 = probs.astype(np.float64)
        p64 /= p64.sum(axis=1, keepdims=True)
        choice = np.array([rng.choice(len(pcfg.candidates), p=p64[i])
                           for i in range(len(chunk))])
        perf = np.zeros(len(chunk))
        for ci in np.unique(choice):
            members = np.where(choice == ci)[0]
            nlls = _sample_nlls(weights, adapter, encoder,
                                [chunk[i] for i in members],
                                policy.candidates[ci])
            perf[members] = -nlls
        efficiency = pcfg.tradeoff_lambda * np.array(
            [policy.candidates[c] / n_layers for c in choice])
        rewards = perf + efficiency
        if not baseline_ready:
            baseline = float(rewards.mean())
            baseline_ready = True
        advantage = rewards - baseline
        baseline = (pcfg.baseline_decay * baseline
                    + (1 - pcfg.baseline_decay) * float(rewards.mean()))
        onehot = np.zeros_like(probs)
        onehot[np.arange(len(chunk)), choice] = 1.0
        d_logits = (probs - onehot) * advantage[:, None] / len(chunk)
        grads = policy.grads_for(embs, d_logits.astype(embs.dtype))
        adam_step(policy.params, grads, opt_state, AdamHyper(lr=pcfg.lr), step)
        log.append({
            "step": step,
            "total": float(rewards.mean()),
            "performance": float(perf.mean()),
            "efficiency": float(efficiency.mean()),
        })
    mean_dist = np.asarray(policy.distribution(embeddings)).mean(axis=0)
    return PolicyResult(policy, policy.candidates, mean_dist, log)


def select_layer(
    source: Union[SweepResult, PolicyResult],
    criterion: str = "best-accuracy",
    delta: float = 1.0,
) -> int:
    """Recommend an insertion layer.

    ``best-accuracy``: argmax accuracy, ties resolved toward the deeper
    layer. ``knee``: the deepest candidate whose accuracy stays within
    ``delta`` percentage points of the shallowest candidate. ``expected-depth``:
    round of the policy's mean depth.
    """
    if criterion == "expected-depth":
        if not isinstance(source, PolicyResult):
            raise ConfigError("expected-depth requires a policy result")
        return int(round(source.expected_depth))
    if not isinstance(source, SweepResult):
        raise ConfigError(f"criterion {criterion!r} requires a sweep result")
    entries = sorted(source.entries, key=lambda e: e.insert_layer)
    if not entries:
        raise ValidationError("sweep result is empty")
    if criterion == "best-accuracy":
        best = max(entries, key=lambda e: (e.accuracy, e.insert_layer))
        return best.insert_layer
    if criterion == "knee":
        reference = entries[0].accuracy
        eligible = [e for e in entries if e.accuracy >= reference - delta / 100.0]
        return max(eligible, key=lambda e: e.insert_layer).insert_layer
    raise ConfigError(f"unknown selection criterion {criterion!r}")
