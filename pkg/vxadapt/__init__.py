# flake8: noqa

from .checkpoint import load_weights, save_weights
from .config import TrainConfig, load_train_config
from .dataset import (
    Batch,
    Dataset,
    DatasetConfig,
    PrefetchIterator,
    build_dataset,
    generate_dataset,
    load_dataset_files,
    save_dataset_files,
)
from .evaluation import (
    IoUResult,
    RetrievalResult,
    compare_adaptation,
    compute_iou,
    compute_iou_aligned,
    evaluate_iou,
    export_outputs,
    phi2_sweep,
    retrieve_nearest,
)
from .exceptions import VxError
from .fields import DelimitedList, LayerSpecs
from .losses import (
    EquilibriumState,
    LossConfig,
    LossReport,
    convergence_measure,
    d2_losses,
    d3_losses,
    g2_loss,
    g3_loss,
    rec_loss_2d,
    rec_loss_3d,
    total_losses,
)
from .networks import (
    NetworkConfig,
    ParameterSet,
    build_network,
    decode2d,
    discriminate,
    encode2d,
    generate3d,
    network_configs,
    reconstruct2d,
)
from .optim import AdamState, adam_step
from .rendering import ImageSample, render_view, stylize
from .shapes import ShapeRecipe, generate_shape
from .specs import LayerSpec, parse_layer_spec
from .tensor import Tape, Tensor, backward, stop_gradient
from .training import (
    TrainState,
    load_checkpoint,
    run_schedule,
    save_checkpoint,
    train_step_joint,
    train_step_stage1,
    train_step_stage2,
)

__version__ = "0.1.0"
