"""Explainable grid-graph GNN for grayscale image target recognition."""

from .autodiff import Tape, Tensor, backward
from .dataset import MSTAR_CLASSES, DatasetManifest, Sample, SyntheticConfig, generate_synthetic, load_dataset, split
from .errors import (
    CorruptionError,
    DatasetIOError,
    DivergedError,
    IntegrityError,
    InvalidInputError,
    SarGnnError,
    ShapeError,
    StratificationError,
    UnsupportedVersionError,
)
from .explain import (
    ClassificationReport,
    SaliencyMap,
    backproject_saliency,
    build_report,
    explain,
    render_overlay,
    vertex_importance,
)
from .graph import GridGraph, Image, build_grid_graph, coarsen_grid, neighbors, vertex_to_pixels
from .model import (
    AttentionParams,
    LayerTrace,
    ModelParams,
    SageLayerParams,
    channel_attention,
    forward,
    grid_max_pool,
    init_model,
    sage_aggregate,
    sage_update,
    softmax_probs,
    spatial_attention,
)
from .modelfile import load_model, save_model
from .training import Metrics, TrainConfig, evaluate, loss_ce_lasso, prune_weights, train

__version__ = "0.1.0"
