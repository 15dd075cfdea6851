"""Synthetic grid-QA task: frozen perceptual encoder plus trainable adapter.

A sample is a G x G grid of symbol ids together with a question about it:
either cell identity ("what is at (r, c)?") or row majority ("which symbol
is most frequent in row r?"). Answers are single symbol tokens and every
row-majority grid is constructed with a strict majority, so the answer is
always determined by the grid. The encoder maps symbols to fixed random
features and is never trained; the adapter is the only trainable bridge
into the model's embedding space.

Prompt template: [BOS] [multimodal slot] [qtype arg0 arg1] [SEP]; the
answer token is predicted at the SEP position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError
from .fileio import atomic_write_text
from .numerics import DTYPE, fold_seed, gelu_grad, gelu_with_tape, make_rng, matmul

SCHEMA_HEADER = "# grid-qa-jsonl v1"
ENCODER_SEED = 7451  # pinned for the project's lifetime; never derived from run seeds

QTYPE_CELL = "cell_identity"
QTYPE_MAJORITY = "row_majority"

# Fixed vocabulary prefix; symbol/argument tokens follow.
TOK_BOS = 0
TOK_MM = 1
TOK_SEP = 2
TOK_NO_ARG = 3
TOK_Q_CELL = 4
TOK_Q_MAJORITY = 5
ARG_BASE = 6


@dataclass(frozen=True)
class GridVocab:
    """Token id layout for a given grid size and symbol alphabet."""

    grid_size: int
    n_symbols: int

    @property
    def symbol_base(self) -> int:
        return ARG_BASE + self.grid_size

    @property
    def min_vocab_size(self) -> int:
        return self.symbol_base + self.n_symbols

    def arg_token(self, index: int) -> int:
        if not 0 <= index < self.grid_size:
            raise ConfigError(f"argument index {index} outside grid of size {self.grid_size}")
        return ARG_BASE + index

    def symbol_token(self, symbol: int) -> int:
        if not 0 <= symbol < self.n_symbols:
            raise ConfigError(f"symbol {symbol} outside alphabet of {self.n_symbols}")
        return self.symbol_base + symbol

    def symbol_tokens(self) -> np.ndarray:
        return np.arange(self.symbol_base, self.symbol_base + self.n_symbols)

    def token_name(self, token: int) -> str:
        fixed = {TOK_BOS: "BOS", TOK_MM: "MM", TOK_SEP: "SEP", TOK_NO_ARG: "NOARG",
                 TOK_Q_CELL: "Q_CELL", TOK_Q_MAJORITY: "Q_MAJ"}
        if token in fixed:
            return fixed[token]
        if ARG_BASE <= token < self.symbol_base:
            return f"ARG{token - ARG_BASE}"
        if self.symbol_base <= token < self.min_vocab_size:
            return f"SYM{token - self.symbol_base}"
        return f"TOK{token}"


@dataclass
class GridSample:
    grid: np.ndarray            # (G, G) symbol ids
    qtype: str
    args: tuple[int, ...]
    question_tokens: tuple[int, ...]
    answer_token: int

    def template_tokens(self) -> np.ndarray:
        return np.array([TOK_BOS, TOK_MM, *self.question_tokens, TOK_SEP], dtype=np.int64)

    def answer_symbol(self, vocab: GridVocab) -> int:
        return self.answer_token - vocab.symbol_base


@dataclass
class DatasetSplits:
    train: list[GridSample]
    val: list[GridSample]
    test: list[GridSample]
    grid_size: int
    n_symbols: int

    @property
    def vocab(self) -> GridVocab:
        return GridVocab(self.grid_size, self.n_symbols)


def _row_majority(row: np.ndarray) -> int:
    counts = np.bincount(row)
    return int(np.argmax(counts))  # ties break toward the lower symbol id


def _make_question(vocab: GridVocab, qtype: str, args: tuple[int, ...]) -> tuple[int, ...]:
    if qtype == QTYPE_CELL:
        r, c = args
        return (TOK_Q_CELL, vocab.arg_token(r), vocab.arg_token(c))
    if qtype == QTYPE_MAJORITY:
        (r,) = args
        return (TOK_Q_MAJORITY, vocab.arg_token(r), TOK_NO_ARG)
    raise ConfigError(f"unknown question type {qtype!r}")


def _plant_majority_row(rng: np.random.Generator, g: int, n_symbols: int,
                        symbol: int) -> np.ndarray:
    """A row of length g whose strict majority symbol is ``symbol``."""
    majority_count = max(2, g // 2)
    others = [s for s in range(n_symbols) if s != symbol]
    rest: list[int] = []
    counts: dict[int, int] = {}
    while len(rest) < g - majority_count:
        s = int(rng.choice(others))
        if counts.get(s, 0) + 1 < majority_count:
            counts[s] = counts.get(s, 0) + 1
            rest.append(s)
    row = np.array([symbol] * majority_count + rest, dtype=np.int64)
    rng.shuffle(row)
    return row


def generate_dataset(
    seed: int,
    size: int,
    grid_size: int = 4,
    n_symbols: int = 8,
    query_mix: tuple[float, float] = (0.5, 0.5),
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> DatasetSplits:
    """Deterministic train/val/test splits, disjoint by grid content.

    Answers are balanced exactly: within each split and question type the
    target symbol cycles through a shuffled alphabet, and each grid is
    constructed to realize its target (cell overwrite, or planted strict
    row majority). Rejects alphabets too small to fill the request with
    unique grids.
    """
    if size < 3:
        raise ConfigError(f"dataset size must be at least 3, got {size}")
    if n_symbols < 3:
        raise ConfigError(f"need at least 3 symbols for majority planting, got {n_symbols}")
    if abs(sum(query_mix) - 1.0) > 1e-9 or min(query_mix) < 0:
        raise ConfigError(f"query mix must be non-negative and sum to 1, got {query_mix}")
    cells = grid_size * grid_size
    if cells * np.log(n_symbols) < np.log(size * 4.0):
        raise ConfigError(
            f"symbol space too small: {n_symbols}^{cells} distinct grids cannot "
            f"fill {size} unique samples"
        )
    rng = make_rng(fold_seed(seed, "grid-dataset"))
    vocab = GridVocab(grid_size, n_symbols)
    n_train = max(1, round(size * split_fractions[0]))
    n_val = max(1, round(size * split_fractions[1]))
    n_test = max(1, size - n_train - n_val)

    seen_hashes: set[bytes] = set()
    max_attempts = 100 * size

    def build_split(n: int) -> list[GridSample]:
        n_cell = round(n * query_mix[0])
        qtypes = [QTYPE_CELL] * n_cell + [QTYPE_MAJORITY] * (n - n_cell)
        targets: list[int] = []
        for block in range(-(-n // n_symbols)):
            order = np.arange(n_symbols)
            rng.shuffle(order)
            targets.extend(int(s) for s in order)
        samples: list[GridSample] = []
        attempts = 0
        for qtype, target in zip(qtypes, targets):
            while True:
                attempts += 1
                if attempts > max_attempts:
                    raise ConfigError(
                        "could not generate enough unique grids; "
                        "symbol space too small for requested size"
                    )
                grid = rng.integers(0, n_symbols, size=(grid_size, grid_size),
                                    dtype=np.int64)
                if qtype == QTYPE_CELL:
                    r = int(rng.integers(grid_size))
                    c = int(rng.integers(grid_size))
                    grid[r, c] = target
                    args = (r, c)
                else:
                    r = int(rng.integers(grid_size))
                    grid[r] = _plant_majority_row(rng, grid_size, n_symbols, target)
                    args = (r,)
                digest = grid.tobytes()
                if digest in seen_hashes:
                    continue
                seen_hashes.add(digest)
                break
            samples.append(GridSample(
                grid=grid,
                qtype=qtype,
                args=args,
                question_tokens=_make_question(vocab, qtype, args),
                answer_token=vocab.symbol_token(target),
            ))
        order = rng.permutation(len(samples))
        return [samples[i] for i in order]

    return DatasetSplits(
        train=build_split(n_train),
        val=build_split(n_val),
        test=build_split(n_test),
        grid_size=grid_size,
        n_symbols=n_symbols,
    )


class FrozenEncoder:
    """Fixed random featurizer for grid cells; never trained.

    Features are a per-symbol embedding table composed with a fixed random
    projection, both drawn from a pinned seed, so the same grid maps to the
    same features for the project's lifetime.
    """

    def __init__(self, n_symbols: int, d_enc: int = 16, seed: int = ENCODER_SEED):
        self.n_symbols = n_symbols
        self.d_enc = d_enc
        rng = make_rng(fold_seed(seed, "frozen-encoder"))
        table = rng.normal(0.0, 1.0, size=(n_symbols, d_enc))
        projection = rng.normal(0.0, 1.0 / np.sqrt(d_enc), size=(d_enc, d_enc))
        self.features = (table @ projection).astype(DTYPE)

    def encode(self, grid: np.ndarray) -> np.ndarray:
        """Per-cell features in row-major order: (G*G, d_enc)."""
        grid = np.asarray(grid)
        if grid.min() < 0 or grid.max() >= self.n_symbols:
            raise ConfigError(
                f"grid symbols outside [0, {self.n_symbols}): {grid.tolist()}"
            )
        return self.features[grid.ravel()]

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.features.tobytes()).hexdigest()


class Adapter:
    """Trainable two-layer map from encoder features to model embeddings."""

    def __init__(self, d_enc: int, d_model: int, hidden: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None,
                 params: Optional[dict[str, np.ndarray]] = None):
        self.d_enc = d_enc
        self.d_model = d_model
        self.hidden = hidden if hidden is not None else d_model
        if params is not None:
            self.params = params
        else:
            if rng is None:
                raise ConfigError("Adapter needs either params or an rng to initialize")
            std = 0.02
            self.params = {
                "w1": rng.normal(0.0, std, size=(d_enc, self.hidden)).astype(DTYPE),
                "b1": np.zeros(self.hidden, dtype=DTYPE),
                "w2": rng.normal(0.0, std, size=(self.hidden, d_model)).astype(DTYPE),
                "b2": np.zeros(d_model, dtype=DTYPE),
            }
        self._check_shapes()

    def _check_shapes(self) -> None:
        expect = {"w1": (self.d_enc, self.hidden), "b1": (self.hidden,),
                  "w2": (self.hidden, self.d_model), "b2": (self.d_model,)}
        for name, shape in expect.items():
            if name not in self.params or tuple(self.params[name].shape) != shape:
                raise ShapeError(f"adapter tensor {name!r} missing or misshaped")

    def forward(self, features: np.ndarray,
                tape: Optional[dict] = None) -> np.ndarray:
        """(rows, d_enc) -> (rows, d_model); differentiable in adapter params only."""
        if features.ndim != 2 or features.shape[1] != self.d_enc:
            raise ShapeError(
                f"adapter expects (rows, {self.d_enc}) features, got {features.shape}"
            )
        pre = matmul(features, self.params["w1"]) + self.params["b1"]
        act, tanh_inner = gelu_with_tape(pre)
        out = matmul(act, self.params["w2"]) + self.params["b2"]
        if tape is not None:
            tape["features"] = features
            tape["pre"] = pre
            tape["act"] = act
            tape["tanh"] = tanh_inner
        return out

    def backward(self, tape: dict, d_out: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for a batch run recorded on ``tape``."""
        act, pre, features = tape["act"], tape["pre"], tape["features"]
        d_w2 = act.T @ d_out
        d_b2 = d_out.sum(axis=0)
        d_act = d_out @ self.params["w2"].T
        d_pre = d_act * gelu_grad(pre, tape["tanh"])
        d_w1 = features.T @ d_pre
        d_b1 = d_pre.sum(axis=0)
        return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}

    def clone(self) -> "Adapter":
        return Adapter(self.d_enc, self.d_model, self.hidden,
                       params={k: v.copy() for k, v in self.params.items()})


def adapt(features: np.ndarray, adapter: Adapter) -> np.ndarray:
    """Multimodal embeddings for one encoded grid."""
    return adapter.forward(features)


def segment_sample(sample: GridSample, encoder: FrozenEncoder,
                   adapter: Adapter):
    """Prompt layout for one sample: encode, adapt, split around the slot."""
    from .insertion import segment_prompt

    embeddings = adapter.forward(encoder.encode(sample.grid))
    return segment_prompt(sample.template_tokens(), embeddings, TOK_MM)


def write_split(path: str, samples: Iterable[GridSample]) -> None:
    """One JSON object per line under a schema-version header comment."""
    lines = [SCHEMA_HEADER]
    for s in samples:
        lines.append(json.dumps({
            "grid": s.grid.tolist(),
            "qtype": s.qtype,
            "args": list(s.args),
            "question_tokens": list(s.question_tokens),
            "answer_token": int(s.answer_token),
        }, sort_keys=True, separators=(",", ":")))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_split(path: str) -> list[GridSample]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DataFormatError(f"{path}: missing schema header line")
    if lines[0].strip() != SCHEMA_HEADER:
        raise DataFormatError(
            f"{path}: schema version mismatch: found {lines[0].strip()!r}, "
            f"expected {SCHEMA_HEADER!r}"
        )
    samples: list[GridSample] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            samples.append(GridSample(
                grid=np.array(obj["grid"], dtype=np.int64),
                qtype=str(obj["qtype"]),
                args=tuple(int(a) for a in obj["args"]),
                question_tokens=tuple(int(t) for t in obj["question_tokens"]),
                answer_token=int(obj["answer_token"]),
            ))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: corrupted line {lineno}: {exc}") from exc
    return samples
