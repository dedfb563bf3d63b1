"""
baseline.py — vanilla mini-batch SGD with backpropagation on the same networks
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from bcdtrain.diagnostics import UNSET, TraceRecord
from bcdtrain.linalg import Matrix, fro_norm_sq, matmul
from bcdtrain.operators import activation_apply, activation_derivative
from bcdtrain.state import (
    NetworkSpec,
    ObjectiveBreakdown,
    aug,
    init_weights,
    predict,
    predict_accuracy,
    seed_streams,
    split_weight,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SgdConfig:
    lr:     float = 0.001
    batch:  int   = 512
    epochs: int   = 50
    seed:   int   = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be nonnegative, got {self.lr}")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")


def backprop_grads(spec: NetworkSpec, weights: list[Matrix], Xb: Matrix, Yb: Matrix) -> list[Matrix]:
    """Gradients of (1/b) sum_j 1/2 ||Phi(x_j) - y_j||^2 with respect to each W_i."""
    b = Xb.shape[1]
    Zs, Hs = [], [Xb]
    for i in range(1, spec.N + 1):
        Z = matmul(weights[i - 1], aug(Hs[-1], spec.bias))
        H = activation_apply(spec.act(i), Z)
        if spec.skip(i):
            H = H + Hs[-1]
        Zs.append(Z)
        Hs.append(H)

    grads: list[Matrix] = [None] * spec.N
    dH = (Hs[-1] - Yb) / b
    for i in range(spec.N, 0, -1):
        dZ = dH * activation_derivative(spec.act(i), Zs[i - 1])
        grads[i - 1] = matmul(dZ, aug(Hs[i - 1], spec.bias).T)
        if i > 1:
            Wt, _ = split_weight(weights[i - 1], spec.bias)
            back = matmul(Wt.T, dZ)
            dH = back + dH if spec.skip(i) else back
    return grads


def sgd_risk(spec: NetworkSpec, weights: list[Matrix], X: Matrix, Y: Matrix) -> float:
    return 0.5 * fro_norm_sq(predict(spec, weights, X) - Y) / X.shape[1]


def sgd_train(spec: NetworkSpec, data, cfg: SgdConfig, *, init_std: float = 0.01,
              init_bias: float = 0.1, test=None) -> list[TraceRecord]:
    if cfg.batch > data.n:
        raise ValueError(f"batch ({cfg.batch}) exceeds the number of samples ({data.n})")
    streams = seed_streams(cfg.seed)
    weights = init_weights(spec, init_std, init_bias, streams.weights)
    rng = np.random.default_rng(streams.shuffle)
    n = data.n

    def record(epoch: int, seconds: float) -> TraceRecord:
        risk = sgd_risk(spec, weights, data.X, data.Y)
        held = predict_accuracy(spec, weights, test.X, test.labels) if test is not None else UNSET
        return TraceRecord(
            epoch         = epoch,
            objective     = ObjectiveBreakdown(risk, UNSET, UNSET, UNSET, risk),
            delta_sq      = UNSET,
            residual_norm = UNSET,
            bbar_bound    = UNSET,
            train_acc     = predict_accuracy(spec, weights, data.X, data.labels),
            test_acc      = held,
            wall_seconds  = seconds,
        )

    started = time.perf_counter()
    trace = [record(0, 0.0)]
    logger.info(f"[sgd] lr={cfg.lr} | batch={cfg.batch} | n={n} | risk0={trace[0].objective.risk:.6e}")

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            cols = order[start:start + cfg.batch]
            grads = backprop_grads(spec, weights, data.X[:, cols], data.Y[:, cols])
            weights = [W - cfg.lr * G for W, G in zip(weights, grads)]
        trace.append(record(epoch, time.perf_counter() - started))
        r = trace[-1]
        logger.info(f"[sgd] epoch {epoch:>4} | risk={r.objective.risk:.6e} | "
                    f"train={r.train_acc:.4f} | test={r.test_acc:.4f}")
    return trace
