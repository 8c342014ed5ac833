"""Excitation Dropout: saliency-guided dropout on a from-scratch numpy network library."""

from .dropout import (DropoutPlan, Strategy, curriculum_retain, make_masks, make_plan,
                      retain_prob_excitation, retention_vector)
from .estimator import ExcitationDropoutClassifier
from .excitation import (OutputPrior, SaliencyDistribution, eb_conditional,
                         excitation_backprop, excitation_backprop_batch, spatial_saliency_map)
from .exceptions import DimensionError, FormatError, ValidationError
from .harness import (AblationCurve, Dataset, TrainConfig, ablate_cumulative, ablate_random,
                      evaluate, export_saliency_pgm, load_cifar10, make_blobs, train,
                      utilization, write_csv)
from .metrics import UtilizationReport, conservative_filters, entropy, neurons_on, peak_peb
from .network import (Network, backward, build_cnn2, build_cnn2_mini, build_mlp, forward,
                      load_checkpoint, loss_softmax_ce, save_checkpoint, sgd_step)
from .tensor import Rng, conv2d, matmul, maxpool2d, relu

__version__ = "0.1.0"
