"""Late-entry multimodal transformer engine.

Multimodal embeddings bypass the early layers of a decoder-only transformer
and are spliced into the hidden sequence at a configurable insertion layer,
with a split KV cache keeping generation incremental. The package bundles
the engine, a synthetic grid-QA training harness with hand-written
backprop, an exact analytical/instrumented cost model, attention
diagnostics, and insertion-layer selection tools.
"""

from .analysis import (
    FlopsQuery,
    FlopsReport,
    alignment_grid,
    flops_deepinsert,
    flops_per_layer,
    flops_piecewise,
    mutual_knn_alignment,
    reconcile_counts,
    token_contribution_map,
    var_per_layer,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    DeepInsertError,
    DivergenceError,
    ShapeError,
    ValidationError,
)
from .insertion import (
    PromptLayout,
    PruneConfig,
    SplitKVCache,
    assemble_baseline_state,
    decode_step,
    deepinsert_prefill,
    fastv_prune,
    generate,
    segment_prompt,
)
from .modality import (
    Adapter,
    DatasetSplits,
    FrozenEncoder,
    GridSample,
    GridVocab,
    adapt,
    generate_dataset,
    read_split,
    segment_sample,
    write_split,
)
from .model import (
    HiddenState,
    ModelConfig,
    TraceCapture,
    Weights,
    baseline_forward,
    block_forward,
    embed,
    init_weights,
)
from .numerics import OpCounter, make_rng
from .selection import (
    LayerPolicy,
    PolicyConfig,
    PolicyResult,
    SweepResult,
    noretrain_sweep,
    reinforce_train,
    select_layer,
)
from .training import (
    EvalResult,
    MetricsLog,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
