"""Training objectives.

The feature prototype loss shapes the prototype bank (cohesion pulls pixels
toward their most relevant prototype, divergence hinges prototype pairs apart
up to a margin). The three consistency losses supervise de-raining from
time-lapse pairs without ground truth. Pixel losses use means rather than raw
sums so the weights are resolution- and batch-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .rspu import PrototypeSet, RelevanceMap


@dataclass
class LossConfig:
    """Loss weights; defaults follow the published training setup."""

    lambda_a: float = 0.1
    delta: float = 1.0
    lambda_c: float = 0.1
    lambda_s: float = 0.001
    lambda_f: float = 0.1

    def __post_init__(self):
        for name in ("lambda_a", "lambda_c", "lambda_s", "lambda_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass
class LossReport:
    """Per-term scalar values of one training step, for logging."""

    coh: float
    div: float
    fea: float
    b: float
    c: float
    s: float
    total: float

    HEADER = "step\tcoh\tdiv\tfea\tb\tc\ts\ttotal"

    def line(self, step: int) -> str:
        return (
            f"{step}\t{self.coh:.9g}\t{self.div:.9g}\t{self.fea:.9g}"
            f"\t{self.b:.9g}\t{self.c:.9g}\t{self.s:.9g}\t{self.total:.9g}"
        )


def _flatten_features(x: Tensor) -> Tensor:
    if x.data.ndim == 3:
        h, w, c = x.shape
        return nm.reshape(x, (h * w, c))
    if x.data.ndim == 2:
        return x
    raise ValueError(f"expected [H, W, C] or [K, C] features, got {x.shape}")


def cohesion_loss(x: Tensor, prototypes: PrototypeSet, alpha: RelevanceMap) -> Tensor:
    """Mean L2 distance from each encoding vector to its most relevant prototype.

    The argmax selection is index-only: gradients flow into x and the selected
    prototype rows, never through the selection itself. Ties break toward the
    smallest prototype index.
    """
    xf = _flatten_features(x)
    if alpha.shape != (xf.shape[0], prototypes.shape[0]):
        raise ValueError(f"cohesion_loss: relevance {alpha.shape} inconsistent with features {xf.shape} and prototypes {prototypes.shape}")
    nearest = alpha.data.argmax(axis=1)  # plain indices, outside the tape
    selected = nm.gather_rows(prototypes, nearest)
    return nm.reduce_mean(nm.vector_l2(nm.sub(xf, selected), axis=1))


def divergence_loss(prototypes: PrototypeSet, delta: float) -> Tensor:
    """Hinge that pushes prototype pairs at least ``delta`` apart.

    Averages [delta - ||p_m - p_m'||]_+ over all ordered pairs m != m'; the
    diagonal is excluded since it would only add a constant with no gradient.
    The value lives in [0, delta].
    """
    m = prototypes.shape[0]
    if prototypes.data.ndim != 2 or m < 2:
        raise ValueError(f"divergence_loss needs at least 2 prototypes, got shape {prototypes.shape}")
    rows, cols = np.where(~np.eye(m, dtype=bool))
    left = nm.gather_rows(prototypes, rows)
    right = nm.gather_rows(prototypes, cols)
    distances = nm.vector_l2(nm.sub(left, right), axis=1)
    return nm.reduce_mean(nm.relu(nm.sub(float(delta), distances)))


def feature_prototype_loss(x: Tensor, prototypes: PrototypeSet, alpha: RelevanceMap, cfg: LossConfig) -> Tensor:
    """Cohesion plus lambda_a-weighted divergence."""
    return nm.add(
        cohesion_loss(x, prototypes, alpha),
        nm.mul(divergence_loss(prototypes, cfg.delta), cfg.lambda_a),
    )


def _mean_abs_diff(a: Tensor, b: Tensor, name: str) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return nm.reduce_mean(nm.absolute(nm.sub(a, b)))


def background_consistency(y_w: Tensor, y_v: Tensor) -> Tensor:
    """Mean absolute difference between two de-rained frames of one scene."""
    return _mean_abs_diff(y_w, y_v, "background_consistency")


def cross_consistency(x_w: Tensor, y_v: Tensor) -> Tensor:
    """Mean absolute difference between a rainy frame and the other frame's background estimate."""
    return _mean_abs_diff(x_w, y_v, "cross_consistency")


def self_consistency(x: Tensor, y_hat: Tensor, r_hat: Tensor) -> Tensor:
    """Mean absolute residual of the decomposition x = y_hat + r_hat."""
    if not (x.shape == y_hat.shape == r_hat.shape):
        raise ValueError(f"self_consistency: shape mismatch {x.shape}, {y_hat.shape}, {r_hat.shape}")
    return nm.reduce_mean(nm.absolute(nm.sub(x, nm.add(y_hat, r_hat))))


def total_loss(
    coh: Tensor,
    divergence: Tensor,
    background: Tensor,
    cross: Tensor,
    self_term: Tensor,
    cfg: LossConfig,
) -> tuple[Tensor, LossReport]:
    """Weighted combination of all terms, plus a per-term report.

    total = b + lambda_c * c + lambda_s * s + lambda_f * (coh + lambda_a * div)
    """
    fea = nm.add(coh, nm.mul(divergence, cfg.lambda_a))
    total = nm.add(
        background,
        nm.add(
            nm.mul(cross, cfg.lambda_c),
            nm.add(nm.mul(self_term, cfg.lambda_s), nm.mul(fea, cfg.lambda_f)),
        ),
    )
    report = LossReport(
        coh=coh.item(),
        div=divergence.item(),
        fea=fea.item(),
        b=background.item(),
        c=cross.item(),
        s=self_term.item(),
        total=total.item(),
    )
    return total, report
