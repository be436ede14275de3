"""Energy-aware spike budgeting for continual learning, from scratch on numpy.

A small research library around four pieces: a leaky integrate-and-fire
layer trained with surrogate-gradient BPTT, class-balanced experience
replay, a spike-rate budget with a proportional controller on its
coefficient, and a class-incremental evaluation harness reporting
ACC / forgetting / BWT alongside spike rates.
"""

from .budget import (
    BudgetConfig,
    BudgetControllerState,
    budget_penalty,
    controller_update,
    spike_rate,
)
from .continual import (
    CONFIG_FLAGS,
    AccuracyMatrix,
    RunConfig,
    RunResult,
    acc_metric,
    bwt_metric,
    evaluate,
    forgetting_metric,
    parse_schedule,
    run_config,
    split_tasks,
)
from .datasets import DatasetSplits, load_dataset
from .encoding import (
    EVENT_DTYPE,
    FormatError,
    FrameImage,
    bin_events,
    encode_frames,
    parse_event_file,
    parse_idx,
    poisson_encode,
    write_event_file,
    write_idx,
)
from .network import (
    AdamState,
    FcSnn,
    adam_step,
    apply_update,
    backward,
    clip_gradients,
    forward,
    gradcheck,
    init_fcsnn,
    load_checkpoint,
    predict,
    save_checkpoint,
    task_loss,
)
from .neuron import LifLayerState, LifParams, lif_step, surrogate_grad
from .replay import ReplayBuffer, compose_batch

__version__ = "0.1.0"
