"""The desk-scale synthetic runs shared by the training and acceptance tests."""

import math
import time
from dataclasses import dataclass

from cosine_metric.dataio import SyntheticSpec, generate_synthetic
from cosine_metric.evaluation import EmbeddingSet, evaluate_single_shot, extract_embeddings
from cosine_metric.network import encoder_from_checkpoint
from cosine_metric.training import TrainConfig, TrainResult, train

DESK_SPEC = SyntheticSpec(num_identities=25, samples_per_identity=40, input_dim=32,
                          cluster_spread=0.15, heldout_identities=5, seed=0)
ITERATIONS = 2000


def desk_config(loss: str, seed: int = 0) -> TrainConfig:
    return TrainConfig(loss=loss, iterations=ITERATIONS, learning_rate=1e-3, batch_size=32,
                       images_per_identity=4, seed=seed)


@dataclass
class DeskRun:
    config: TrainConfig
    result: TrainResult
    seconds: float

    def heldout_embeddings(self, data) -> EmbeddingSet:
        encoder = encoder_from_checkpoint(self.result.checkpoint)
        return extract_embeddings(encoder, data.heldout)

    def heldout_report(self, data):
        es = self.heldout_embeddings(data)
        return evaluate_single_shot(es, es, self.config.metric)


class DeskRunner:
    def __init__(self):
        self.data = generate_synthetic(DESK_SPEC)
        self._cache: dict[str, DeskRun] = {}

    def run(self, loss: str, seed: int = 0, cached: bool = True) -> DeskRun:
        key = f"{loss}/{seed}"
        if cached and key in self._cache:
            return self._cache[key]
        config = desk_config(loss, seed)
        started = time.perf_counter()
        result = train(config, self.data.train)
        out = DeskRun(config, result, time.perf_counter() - started)
        if cached:
            self._cache[key] = out
        return out


def cosine_loss_floor(classes: int, kappa_decay: float) -> float:
    """Lower bound of the cosine-softmax objective over every feature layout.

    With each cosine in [-1, 1] the cross-entropy is at least
    ``log(1 + (K-1) exp(-2 kappa))``.  Adding ``kappa_decay * kappa**2`` keeps
    the bound convex in kappa, so ternary search finds its minimum.
    """
    def f(kappa):
        return math.log1p((classes - 1) * math.exp(-2.0 * kappa)) + kappa_decay * kappa * kappa

    lo, hi = 0.0, 1.0 / kappa_decay + 10.0
    for _ in range(200):
        a, b = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        if f(a) < f(b):
            hi = b
        else:
            lo = a
    return f((lo + hi) / 2)
