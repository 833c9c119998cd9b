"""Deep metric learning with a cosine softmax classifier.

Subpackages follow the data flow: :mod:`tensor` (arrays, RNG streams, binary
tensors), :mod:`autodiff`, :mod:`network`, :mod:`losses`, :mod:`training`,
:mod:`evaluation`, :mod:`dataio` and the :mod:`cli`.
"""

from .autodiff import Mode, Node, backward, grad_check
from .dataio import SyntheticSpec, generate_synthetic, scan_directory
from .evaluation import EmbeddingSet, EvalReport, evaluate_single_shot, oracle_evaluate
from .losses import CosineSoftmaxHead, StandardSoftmaxHead, magnet_loss, triplet_loss
from .network import build_paper_encoder, count_parameters
from .tensor import Rng
from .training import TrainConfig, train

__version__ = "0.1.0"
