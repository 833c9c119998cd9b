"""PK batch sampling, flip augmentation, Adam and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Mode
from .dataio import DatasetIndex, split_train_val
from .errors import (
    ContractError,
    DegenerateBatchError,
    DegenerateVarianceError,
    NoTripletError,
    TrainingError,
)
from .evaluation import evaluate_single_shot, extract_embeddings
from .losses import (
    CosineSoftmaxHead,
    MagnetConfig,
    StandardSoftmaxHead,
    TripletConfig,
    magnet_loss,
    monitor_triplet,
    triplet_loss,
)
from .network import PAPER_INPUT_SHAPE, Checkpoint, EncoderSpec, make_checkpoint, save_checkpoint
from .tensor import Rng

log = logging.getLogger(__name__)

LOSSES = ("cosine-softmax", "softmax", "triplet-soft", "triplet-hard", "magnet")
LOG_COLUMNS = ("iteration", "loss", "triplet_monitor", "val_rank1", "kappa", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "cosine-softmax"
    iterations: int = 100_000
    learning_rate: float = 1e-3
    batch_size: int | None = None  # None: 128 for the paper encoder, 32 for the toy one
    images_per_identity: int = 4
    weight_decay_network: float = 1e-8
    weight_decay_kappa: float = 1e-1
    dropout_p: float = 0.4
    flip_augment: bool = True
    seed: int = 0
    val_fraction: float = 0.10
    log_interval: int = 100
    eval_interval: int | None = None  # None: 200 for the toy encoder, 2000 otherwise
    architecture: str = "toy"
    toy_widths: tuple[int, ...] = (128, 128, 64)  # hidden..., embedding
    final_l2: bool | None = None  # None: on for cosine-softmax only
    triplet_margin: float = 1.0
    magnet_margin: float = 1.0
    checkpoint_every_eval: bool = True

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {', '.join(LOSSES)}")
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", 128 if self.architecture == "paper" else 32)
        if self.architecture not in ("paper", "toy"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.batch_size % self.images_per_identity:
            raise ValueError("batch_size must be divisible by images_per_identity")
        if self.loss == "cosine-softmax" and self.final_l2 is False:
            raise ContractError("cosine-softmax needs l2-normalised encoder outputs")

    @property
    def identities_per_batch(self) -> int:
        return self.batch_size // self.images_per_identity

    @property
    def uses_final_l2(self) -> bool:
        return self.loss == "cosine-softmax" if self.final_l2 is None else self.final_l2

    @property
    def eval_every(self) -> int:
        if self.eval_interval is not None:
            return self.eval_interval
        return 200 if self.architecture == "toy" else 2000

    @property
    def metric(self) -> str:
        """Gallery ranking metric: cosine for softmax heads, Euclidean otherwise."""
        return "cosine" if self.loss in ("cosine-softmax", "softmax") else "euclidean"

    def encoder_spec(self, input_shape) -> EncoderSpec:
        if self.architecture == "paper":
            if tuple(input_shape) != PAPER_INPUT_SHAPE:
                raise ContractError(
                    f"paper encoder needs {PAPER_INPUT_SHAPE} images, dataset has shape {input_shape}")
            return EncoderSpec("paper", final_l2=self.uses_final_l2, dropout=self.dropout_p)
        if len(input_shape) != 1:
            raise ContractError(f"toy encoder needs vector inputs, dataset has shape {input_shape}")
        return EncoderSpec("toy", (input_shape[0],) + tuple(self.toy_widths), self.uses_final_l2)


# -- sampling and augmentation ----------------------------------------------

def sample_pk_batch(index: DatasetIndex, identities: int, per_identity: int,
                    rng: np.random.Generator, groups: dict[int, list[int]] | None = None) -> list[int]:
    """Positions of ``identities * per_identity`` entries, ``per_identity`` per identity.

    Identities are drawn uniformly without replacement.  An identity with fewer
    than ``per_identity`` images is sampled with replacement.
    """
    groups = index.by_identity() if groups is None else groups
    ids = sorted(groups)
    if len(ids) < 2:
        raise ContractError("PK sampling needs at least two identities")
    if identities > len(ids):
        raise ContractError(f"batch asks for {identities} identities, dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=identities, replace=False)
    batch = []
    for c in chosen:
        members = groups[ids[c]]
        replace_ = len(members) < per_identity
        picks = rng.choice(len(members), size=per_identity, replace=replace_)
        batch.extend(members[p] for p in picks)
    return batch


def augment_flip(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Reverse the width axis of a ``C x H x W`` image with probability 1/2."""
    if rng.random() < 0.5:
        return image[..., ::-1].copy()
    return image


# -- optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float | dict[str, float] = 0.0) -> AdamState:
    """One in-place Adam update; decay adds ``decay * theta`` to the gradient first."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        decay = weight_decay.get(name, 0.0) if isinstance(weight_decay, dict) else weight_decay
        if decay:
            g = g + decay * theta
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# -- training loop ----------------------------------------------------------

@dataclass
class TrainLogRecord:
    iteration: int
    loss: float
    triplet_monitor: float | None
    val_rank1: float | None
    kappa: float | None
    seconds: float

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(v)
        return [str(self.iteration), fmt(self.loss), fmt(self.triplet_monitor),
                fmt(self.val_rank1), fmt(self.kappa), f"{self.seconds:.3f}"]


@dataclass
class TrainLog:
    records: list[TrainLogRecord] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)  # every iteration

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow(r.row())

    @staticmethod
    def read_csv(path) -> list[dict[str, str]]:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best validation checkpoint (final one without validation)
    log: TrainLog
    encoder: object
    head: object
    best_iteration: int
    best_val_rank1: float | None
    val_history: list[tuple[int, float]]


def build_head(config: TrainConfig, num_classes: int, dim: int, rng: np.random.Generator):
    if config.loss == "cosine-softmax":
        return CosineSoftmaxHead.init(num_classes, dim, rng, kappa_weight_decay=config.weight_decay_kappa)
    if config.loss == "softmax":
        return StandardSoftmaxHead.init(num_classes, dim, rng)
    return None


def decay_assignment(encoder, head, config: TrainConfig) -> dict[str, float]:
    """Per-parameter weight decay: network decay everywhere except batchnorm
    gamma/beta (0) and the cosine scale (kappa decay, applied inside the loss)."""
    table = {f"enc/{k}": (0.0 if k in encoder.no_decay else config.weight_decay_network)
             for k in encoder.params}
    if head is not None:
        for k in head.params:
            table[f"head/{k}"] = config.weight_decay_kappa if k == "log_kappa" else config.weight_decay_network
    return table


def objective(config: TrainConfig, features, labels, head, head_nodes):
    if config.loss in ("cosine-softmax", "softmax"):
        return head.loss(features, labels, head_nodes)
    if config.loss == "triplet-soft":
        return triplet_loss(features, labels, TripletConfig("soft_margin"))
    if config.loss == "triplet-hard":
        return triplet_loss(features, labels, TripletConfig("hard_margin", config.triplet_margin))
    return magnet_loss(features, labels, MagnetConfig(config.magnet_margin))


def validation_rank1(encoder, train_set: DatasetIndex, val_set: DatasetIndex, metric: str) -> float | None:
    if len(val_set) == 0:
        return None
    gallery = extract_embeddings(encoder, train_set, batch_size=256)
    queries = extract_embeddings(encoder, val_set, batch_size=256)
    report = evaluate_single_shot(queries, gallery, metric, max_rank=1)
    return report.rank(1) if report.num_valid_queries else None


def train(config: TrainConfig, dataset: DatasetIndex, out_dir=None) -> TrainResult:
    """Run ``config.iterations`` optimisation steps with validation-based model selection.

    The log holds one record every ``log_interval`` iterations, starting at
    iteration 0 (before any update) and ending at ``config.iterations``,
    where the loss is measured on a fresh batch without a further update.
    """
    rng = Rng(config.seed)
    weights_rng = rng.stream("weights")
    sampling_rng = rng.stream("sampling")
    dropout_rng = rng.stream("dropout")
    augment_rng = rng.stream("augmentation")

    train_set, val_set = split_train_val(dataset, config.val_fraction, config.seed)
    groups = train_set.by_identity()
    class_of = {identity: k for k, identity in enumerate(sorted(groups))}
    encoder = config.encoder_spec(dataset.input_shape).build(weights_rng)
    head = build_head(config, len(class_of), encoder.embedding_dim, weights_rng)
    decay = decay_assignment(encoder, head, config)
    adam_decay = {k: (0.0 if k == "head/log_kappa" else v) for k, v in decay.items()}
    state = AdamState()
    is_image = len(dataset.input_shape) == 3

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    log_ = TrainLog()
    best = None
    best_iter, best_rank1 = 0, None
    val_history: list[tuple[int, float]] = []
    started = time.perf_counter()

    def params():
        out_ = {f"enc/{k}": v for k, v in encoder.params.items()}
        if head is not None:
            out_.update({f"head/{k}": v for k, v in head.params.items()})
        return out_

    def draw_batch():
        positions = sample_pk_batch(train_set, config.identities_per_batch,
                                    config.images_per_identity, sampling_rng, groups)
        x = train_set.load_batch(positions)
        if is_image and config.flip_augment:
            x = np.stack([augment_flip(img, augment_rng) for img in x])
        labels = np.array([class_of[train_set.entries[p].identity] for p in positions])
        return x, labels

    def forward_loss():
        x, labels = draw_batch()
        nodes = {k: ad.parameter(v) for k, v in params().items()}
        enc_nodes = {k[4:]: n for k, n in nodes.items() if k.startswith("enc/")}
        head_nodes = {k[5:]: n for k, n in nodes.items() if k.startswith("head/")}
        features = encoder.forward(x, Mode.TRAINING, dropout_rng, enc_nodes)
        return objective(config, features, labels, head, head_nodes), features, labels, nodes

    for it in range(config.iterations + 1):
        try:
            loss, features, labels, nodes = forward_loss()
        except (NoTripletError, DegenerateVarianceError, DegenerateBatchError):
            log.warning("degenerate batch at iteration %d; resampling once", it)
            loss, features, labels, nodes = forward_loss()
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at iteration {it}")
        log_.losses.append(value)

        rank1 = None
        if it % config.eval_every == 0 or it == config.iterations:
            rank1 = validation_rank1(encoder, train_set, val_set, config.metric)
            if rank1 is not None:
                val_history.append((it, rank1))
            if best is None or (rank1 is not None and (best_rank1 is None or rank1 > best_rank1)):
                best = make_checkpoint(encoder, head, it)
                best_iter, best_rank1 = it, rank1
            if out is not None and config.checkpoint_every_eval:
                save_checkpoint(out / f"ckpt_{it}.cmck", make_checkpoint(encoder, head, it))

        if it % config.log_interval == 0 or it == config.iterations:
            kappa = head.kappa if isinstance(head, CosineSoftmaxHead) else None
            log_.records.append(TrainLogRecord(
                it, value, monitor_triplet(features.value, labels), rank1, kappa,
                time.perf_counter() - started))
            log.info("iter %d loss %.5f val_rank1 %s", it, value, rank1)

        if it == config.iterations:
            break
        ad.backward(loss)
        grads = {k: n.grad for k, n in nodes.items()}
        adam_step(params(), grads, state, config.learning_rate, adam_decay)

    if best is None:
        best = make_checkpoint(encoder, head, config.iterations)
        best_iter = config.iterations
    if out is not None:
        save_checkpoint(out / "best.cmck", best)
        log_.to_csv(out / "train_log.csv")
    return TrainResult(best, log_, encoder, head, best_iter, best_rank1, val_history)


def restore(result: TrainResult):
    """Encoder/head copies holding the best checkpoint's weights."""
    from .network import encoder_from_checkpoint, head_from_checkpoint

    return encoder_from_checkpoint(result.checkpoint), head_from_checkpoint(result.checkpoint)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})

