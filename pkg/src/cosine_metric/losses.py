"""Training objectives: standard and cosine softmax, triplet, unimodal magnet.

Loss functions take a feature :class:`~cosine_metric.autodiff.Node` and return
a scalar node, so gradients reach both the encoder and any head parameters.
Class labels are 0-based integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import (
    ContractError,
    DegenerateVarianceError,
    LabelError,
    NoTripletError,
)

UNIT_NORM_TOL = 1e-6


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise LabelError(f"label {bad} outside [0, {num_classes})")
    return labels


def _check_unit_rows(features: np.ndarray) -> None:
    norms = np.linalg.norm(features, axis=1)
    if not np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOL):
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise ContractError(
            f"cosine softmax needs unit-length features; row {worst} has norm {norms[worst]:.9g}"
        )


def _bind(params: dict[str, np.ndarray], bound: dict[str, Node] | None, name: str) -> Node:
    if bound is not None and name in bound:
        return bound[name]
    return ad.constant(params[name])


# -- softmax heads ----------------------------------------------------------

def cosine_logits(features: Node, weights: Node, kappa: Node) -> Node:
    """``kappa * w_k.r / |w_k|`` for every row ``r`` and class ``k``."""
    unit_w = ad.l2_normalize(weights)
    return ad.matmul(features, ad.transpose(unit_w)) * kappa


def cosine_softmax_probs(features, weights, kappa: float) -> np.ndarray:
    """Class posteriors of the cosine softmax classifier, shape ``(n, K)``."""
    features = np.asarray(features, dtype=np.float64)
    _check_unit_rows(features)
    logits = cosine_logits(ad.constant(features), ad.constant(weights),
                           ad.constant(np.array(float(kappa)))).value
    return ad.softmax(logits)


def standard_softmax_probs(features, weights, bias) -> np.ndarray:
    logits = np.asarray(features) @ np.asarray(weights).T + np.asarray(bias)
    return ad.softmax(logits)


def cross_entropy(logits: Node, labels) -> Node:
    labels = _check_labels(labels, logits.shape[1])
    return ad.mean(ad.softmax_cross_entropy(logits, labels))


@dataclass
class CosineSoftmaxHead:
    """Bias-free classifier on unit features with a trainable scale.

    The scale is stored as ``log_kappa`` so that it stays positive under
    unconstrained optimisation.  ``kappa_weight_decay * kappa**2`` is added
    to the loss.
    """

    weights: np.ndarray
    log_kappa: np.ndarray = field(default_factory=lambda: np.zeros(1))
    kappa_weight_decay: float = 0.1

    kind = "cosine"

    @classmethod
    def init(cls, num_classes: int, dim: int, rng: np.random.Generator,
             kappa: float = 1.0, kappa_weight_decay: float = 0.1) -> "CosineSoftmaxHead":
        weights = rng.standard_normal((num_classes, dim)) / np.sqrt(dim)
        return cls(weights, np.array([np.log(kappa)]), kappa_weight_decay)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def kappa(self) -> float:
        return float(np.exp(self.log_kappa[0]))

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "log_kappa": self.log_kappa}

    def probs(self, features) -> np.ndarray:
        return cosine_softmax_probs(features, self.weights, self.kappa)

    def loss(self, features: Node, labels, bound: dict[str, Node] | None = None) -> Node:
        return cosine_softmax_loss(features, labels, _bind(self.params, bound, "weights"),
                                   _bind(self.params, bound, "log_kappa"),
                                   self.kappa_weight_decay)


def cosine_softmax_loss(features: Node, labels, weights: Node, log_kappa: Node,
                        kappa_weight_decay: float = 0.0) -> Node:
    features = ad.constant(features)
    _check_unit_rows(features.value)
    kappa = ad.exp(ad.reshape(log_kappa, ()))
    loss = cross_entropy(cosine_logits(features, ad.constant(weights), kappa), labels)
    if kappa_weight_decay:
        loss = loss + ad.scale(ad.square(kappa), kappa_weight_decay)
    return loss


@dataclass
class StandardSoftmaxHead:
    weights: np.ndarray
    bias: np.ndarray

    kind = "standard"

    @classmethod
    def init(cls, num_classes: int, dim: int, rng: np.random.Generator) -> "StandardSoftmaxHead":
        weights = rng.standard_normal((num_classes, dim)) / np.sqrt(dim)
        return cls(weights, np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}

    def probs(self, features) -> np.ndarray:
        return standard_softmax_probs(features, self.weights, self.bias)

    def loss(self, features: Node, labels, bound: dict[str, Node] | None = None) -> Node:
        return standard_softmax_loss(features, labels, _bind(self.params, bound, "weights"),
                                     _bind(self.params, bound, "bias"))


def standard_softmax_loss(features: Node, labels, weights: Node, bias: Node) -> Node:
    logits = ad.matmul(ad.constant(features), ad.transpose(ad.constant(weights))) + bias
    return cross_entropy(logits, labels)


# -- triplet loss -----------------------------------------------------------

@dataclass(frozen=True)
class TripletConfig:
    variant: str = "soft_margin"  # or "hard_margin"
    margin: float = 1.0  # ignored by the soft-margin variant

    def __post_init__(self):
        if self.variant not in ("soft_margin", "hard_margin"):
            raise ValueError(f"unknown triplet variant {self.variant!r}")


def triplet_indices(labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All in-batch ``(anchor, positive, negative)`` index triples."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(labels.size, dtype=bool)
    valid = pos[:, :, None] & ~same[:, None, :]
    return np.nonzero(valid)


def pairwise_distances(features: Node) -> Node:
    return ad.sqrt(ad.maximum(ad.squared_euclidean_pairwise(features), 0.0))


def triplet_loss(features: Node, labels, cfg: TripletConfig = TripletConfig()) -> Node:
    """Mean over every valid in-batch triplet of the hinge/softplus of ``d_ap - d_an``."""
    features = ad.constant(features)
    a, p, n = triplet_indices(labels)
    if a.size == 0:
        raise NoTripletError("batch has no (anchor, positive, negative) triplet")
    dist = pairwise_distances(features)
    gap = dist[(a, p)] - dist[(a, n)]
    if cfg.variant == "soft_margin":
        per_triplet = ad.softplus(gap)
    else:
        per_triplet = ad.relu(gap + cfg.margin)
    return ad.mean(per_triplet)


def monitor_triplet(features, labels) -> float | None:
    """Soft-margin triplet value of a batch, or ``None`` when it has no triplet."""
    try:
        return float(triplet_loss(ad.constant(features), labels).value)
    except NoTripletError:
        return None


# -- magnet loss ------------------------------------------------------------

@dataclass(frozen=True)
class MagnetConfig:
    margin: float = 1.0
    min_variance: float = 1e-12


def magnet_statistics(features: Node, labels) -> tuple[Node, Node, np.ndarray]:
    """Batch class means, shared variance (``1/(N-1)`` normaliser) and class index per row."""
    features = ad.constant(features)
    classes, inverse = np.unique(np.asarray(labels), return_inverse=True)
    n = features.shape[0]
    onehot = np.zeros((n, classes.size))
    onehot[np.arange(n), inverse] = 1.0
    averaging = (onehot / onehot.sum(axis=0)).T
    means = ad.matmul(ad.constant(averaging), features)
    deviation = features - means[inverse]
    variance = ad.scale(ad.sum(ad.square(deviation)), 1.0 / max(n - 1, 1))
    return means, variance, inverse


def magnet_loss_from_stats(features: Node, class_index, means: Node, variance: Node,
                           margin: float) -> Node:
    """Per-batch mean of the unimodal magnet objective given class statistics.

    ``class_index[i]`` is the row of ``means`` that sample ``i`` belongs to.
    """
    features, means, variance = ad.constant(features), ad.constant(means), ad.constant(variance)
    class_index = np.asarray(class_index)
    n, d = features.shape
    c = means.shape[0]
    if c < 2:
        raise ContractError("magnet loss needs at least two classes in the batch")
    diff = ad.reshape(features, (n, 1, d)) - ad.reshape(means, (1, c, d))
    sq = ad.sum(ad.square(diff), axis=2)
    scaled = sq / ad.scale(ad.reshape(variance, (1, 1)), 2.0)
    own = scaled[(np.arange(n), class_index)]
    others = np.ones((n, c), dtype=bool)
    others[np.arange(n), class_index] = False
    rival = ad.logsumexp(-scaled, axis=1, mask=others)
    return ad.mean(ad.relu(own + margin + rival))


def magnet_loss(features: Node, labels, cfg: MagnetConfig = MagnetConfig()) -> Node:
    features = ad.constant(features)
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ContractError("magnet loss needs at least two classes in the batch")
    means, variance, inverse = magnet_statistics(features, labels)
    if float(variance.value) < cfg.min_variance:
        raise DegenerateVarianceError(f"batch variance {float(variance.value):.3e} is degenerate")
    return magnet_loss_from_stats(features, inverse, means, variance, cfg.margin)
