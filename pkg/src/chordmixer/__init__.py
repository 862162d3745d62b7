"""Multi-scale rotation networks for variable-length sequences.

A parameter-free Rotate layer shifts channel tracks by power-of-two
offsets, a shared two-layer MLP mixes every position, and sequences of
length N traverse only the first ceil(log2 N) of the network's
ceil(log2 N_max) residual blocks. Batches group sequences by their
ceil(log2 N) key and concatenate along the position axis, so nothing is
ever padded. Everything runs on numpy float64 through a small
reverse-mode autodiff engine.
"""

from .autograd import (
    Adam,
    AdamState,
    Rng,
    Tensor,
    adam_step,
    clip_gradients,
    concat_columns,
    dropout,
    gelu,
    global_grad_norm,
    matmul,
    mean_over_positions,
    mse_loss,
    take_columns,
    tensor_sum,
    weighted_cross_entropy,
)
from .data import (
    AddingInstance,
    LabeledSequence,
    LengthBucket,
    adding_accuracy,
    batched_forward,
    bucket_batches,
    bucket_key,
    gen_adding,
    length_stats,
    load_adding,
    load_labeled,
    save_adding,
    split,
    write_labeled,
)
from .model import (
    ActivationTrace,
    ChordMixerNet,
    MixMlp,
    RankReport,
    ReceptiveField,
    block_forward,
    elimination_rank,
    export_activations,
    load_checkpoint,
    mix,
    net_forward,
    param_count,
    rank_certificates,
    receptive_field,
    rotate,
    rotation_permutation_matrix,
    save_checkpoint,
)
from .topology import (
    ChordGraph,
    ReachReport,
    TrackLayout,
    build_layout,
    ceil_log2,
    chord_graph,
    default_hops,
    dense_adjacency,
    ladder_offsets,
    reachability_closure,
    reaching_probabilities,
    rotation_offsets,
)
from .training import (
    DivergenceError,
    TrainConfig,
    TrainResult,
    class_weights,
    evaluate,
    percentile_report,
    roc_auc,
    train,
)

__version__ = "0.1.0"
