"""Desk-scale training toolkit: bfloat16 rounding emulation, packed
streaming data, a verified numpy transformer, and failure-recovery
simulation, all deterministic end to end."""

from .bf16 import (
    MAX_FINITE,
    RNE,
    BF16Word,
    SRStream,
    accumulate,
    bf16_neighbors,
    decode_bf16,
    encode_bf16,
    quantized_matmul,
    round_bf16,
    round_bf16_array,
    saturation_count,
)
from .checkpoint import (
    CheckpointBundle,
    CheckpointError,
    bundle_from_bytes,
    bundle_to_bytes,
    load_checkpoint,
    save_checkpoint,
)
from .config import (
    ConfigError,
    DataConfig,
    MonitorConfig,
    NumericsConfig,
    TrainConfig,
    config_from_dict,
    effective_config_dict,
    parse_config,
    write_effective_config,
)
from .data import (
    ByteTokenizer,
    Corpus,
    EndOfData,
    LoaderState,
    LoaderStateError,
    SequencePrefetcher,
    next_batch,
    next_sequence,
    restore_state,
    save_state,
    shuffle_and_split,
)
from .model import (
    ModelConfig,
    NumericContext,
    cross_entropy,
    forward,
    init_params,
    loss_and_backward,
    make_context,
)
from .monitor import (
    MetricsLog,
    MetricsRecord,
    SpikeEvent,
    SpikeScan,
    detect_spikes,
    global_l2,
    spike_histogram,
)
from .optim import OptimConfig, OptimState, adamw_step, clip_global_norm, lr_at
from .simulate import (
    FailureEvent,
    SimConfig,
    SimulationAborted,
    UptimeReport,
    all_reduce_mean,
    random_failure_schedule,
    run_sim,
)
from .trainer import TrainSession, build_session

__version__ = "0.1.0"
