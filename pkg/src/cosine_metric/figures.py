"""Data series for posterior-probability plots.

Nothing here renders images.  Both functions return rows ready for CSV export
so any plotting tool can draw them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import CosineSoftmaxHead, StandardSoftmaxHead, cosine_logits, cross_entropy
from .training import AdamState, adam_step


def grid_points(n: int) -> np.ndarray:
    """Cell centres of an ``n x n`` grid over ``[-1, 1]^2``, row-major in ``y`` then ``x``."""
    if n < 1:
        raise ValueError("grid size must be positive")
    c = -1.0 + (2.0 * np.arange(n) + 1.0) / n
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def posterior_grid(head, n: int) -> tuple[list[str], list[list[float]]]:
    """Class posteriors over a planar grid for a 2-D embedding head.

    A cosine head sees the unit direction of each grid point (the origin has
    none and gets zero logits, i.e. a uniform posterior); a standard softmax
    head sees the point itself.
    """
    dim = head.weights.shape[1]
    if dim != 2:
        raise ValueError(f"posterior grid needs a 2-D embedding, head has dimension {dim}")
    pts = grid_points(n)
    if isinstance(head, CosineSoftmaxHead):
        logits = cosine_logits(ad.l2_normalize(ad.constant(pts)), ad.constant(head.weights),
                               ad.constant(np.array(head.kappa)))
        probs = ad.softmax(logits.value)
    elif isinstance(head, StandardSoftmaxHead):
        probs = head.probs(pts)
    else:
        raise TypeError("posterior grid needs a softmax head")
    k = probs.shape[1]
    header = ["x", "y"] + [f"p_{i + 1}" for i in range(k)] + ["argmax"]
    rows = [[float(x), float(y), *map(float, p), int(np.argmax(p)) + 1]
            for (x, y), p in zip(pts, probs)]
    return header, rows


@dataclass(frozen=True)
class KappaSweepConfig:
    classes: int = 3
    samples_per_class: int = 8
    iterations: int = 500
    learning_rate: float = 0.05
    curve_points: int = 360


def class_directions(k: int) -> np.ndarray:
    angles = 2.0 * math.pi * np.arange(k) / k
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def kappa_sweep(kappa: float, rng: np.random.Generator,
                cfg: KappaSweepConfig = KappaSweepConfig()) -> tuple[list[str], list[list]]:
    """Optimise sample positions on the unit circle under a fixed-scale cosine softmax.

    Class weights sit at evenly spaced angles and stay fixed; only the samples
    move.  Returns ``sample`` rows (optimised positions) followed by ``curve``
    rows (posteriors over the full circle).
    """
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    k = cfg.classes
    weights = class_directions(k)
    labels = np.repeat(np.arange(k), cfg.samples_per_class)
    # start spread across each class's own sector
    start = 2.0 * math.pi * labels / k + rng.uniform(-math.pi / k, math.pi / k, size=labels.size)
    points = np.stack([np.cos(start), np.sin(start)], axis=1)
    state = AdamState()
    w, scale = ad.constant(weights), ad.constant(np.array(float(kappa)))
    for _ in range(cfg.iterations):
        p = ad.parameter(points)
        loss = cross_entropy(cosine_logits(ad.l2_normalize(p), w, scale), labels)
        ad.backward(loss)
        adam_step({"p": points}, {"p": p.grad}, state, cfg.learning_rate)

    header = ["kind", "label", "angle"] + [f"p_{i + 1}" for i in range(k)]
    head = CosineSoftmaxHead(weights, np.array([math.log(kappa)]))
    unit = points / np.linalg.norm(points, axis=1, keepdims=True)
    rows: list[list] = []
    for label, r, p in zip(labels, unit, head.probs(unit)):
        rows.append(["sample", int(label) + 1, math.atan2(r[1], r[0]), *map(float, p)])
    angles = np.linspace(-math.pi, math.pi, cfg.curve_points, endpoint=False)
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    for a, p in zip(angles, head.probs(circle)):
        rows.append(["curve", int(np.argmax(p)) + 1, float(a), *map(float, p)])
    return header, rows


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
