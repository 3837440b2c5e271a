"""Semantic correspondence matching with adaptive neighbourhood-consensus
4D convolution: correlation volumes, learnable consensus filtering,
probabilistic match extraction, keypoint/orthogonal losses, and training.
"""

from .autodiff import Tape, Variable, backward, grad_check, zero_grads
from .backend import active_backend, set_backend, set_threads
from .conv4d import AncConfig, anc_config, anc_forward, bidirectional_refine, init_anc_params
from .errors import (
    AncError,
    FormatError,
    GenerationError,
    InvalidArgumentError,
    IoError,
    NumericError,
)
from .features import FeatureMap, GridTransform, SyntheticPair, correlation_map, l2_normalize, load_feature_pair, synth_pair
from .kernels import conv4d_fast, conv4d_naive
from .losses import LossConfig, gt_probability_map, loss_keypoint, loss_orthogonal, loss_total
from .matching import (
    SOURCE_TO_TARGET,
    TARGET_TO_SOURCE,
    FlowField,
    ProbabilityMap4D,
    argmax_match,
    dense_flow,
    mutual_nn_filter,
    refine_subcell,
    softmax_probabilities,
    to_pixel,
    warp_bilinear,
)
from .model import ModelConfig, ModelParams, init_model_params, predict_probability
from .self_similarity import SelfSimConfig, init_selfsim_params, multiscale_forward, self_sim_base
from .tensor_core import Rng, permute, rng_fill, tns_read, tns_write
from .training import Adam, TrainConfig, TrainState, checkpoint_load, checkpoint_save, run_training, train_epoch
from .evaluation import PckConfig, bench_conv4d, identity_baseline, pck

__version__ = "0.1.0"
