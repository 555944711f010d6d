"""Private stochastic gradient descent-ascent under rate constraints.

One step of :func:`train`:

1. Poisson-sample a batch.
2. Build the exact (cell, class) soft-prediction histogram of the batch and
   add Laplace noise.
3. Primal: per-record gradients of the loss (scaled by ``1 / (r |D|)``) plus
   the histogram-normalised regularizer, clipped to ``C / (r |D|)``, summed,
   Gaussian-noised and applied.
4. Dual: projected ascent on the constraint values reconstructed from the
   noisy histogram alone.

With ``constraints=None`` the loop is plain DP-SGD.
"""

from __future__ import annotations

import inspect
import logging
import math
import typing
from dataclasses import dataclass, field, replace

import numpy as np

from .constraints import ConstraintSet, evaluate_dataset, evaluate_from_histogram
from .data import MiniBatch, PartitionedDataset, poisson_sample
from .model import loss_and_grad, soft_predict, softmax_jacobian_weights
from .privacy import (
    ClosedFormAccountant,
    NoiseStream,
    PredictionHistogram,
    PrivacyConfig,
    clip_rows,
    compute_histogram,
    gaussian_noise,
    privatize_histogram,
)

logger = logging.getLogger(__name__)

# Ranges searched in the reference experiments; informational only.
SEARCH_SPACE = {
    "sigma": (3.0, 6.0),
    "b": (0.1, 0.5),
    "lr": (1e-4, 0.1),
    "dual_lr": (1e-4, 0.1),
    "batch_size": (256, 1256),
    "temperature": (1.0, 10.0),
}


class ConfigurationError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class DualState:
    """Multipliers kept inside the box ``[0, lambda_max]^J``."""

    lam: np.ndarray
    lambda_max: float = 10.0
    lr: float = 0.1

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        if not (0 <= self.lambda_max < math.inf):
            raise ConfigurationError("lambda_max must be finite and >= 0")

    def project(self, lam) -> np.ndarray:
        return np.clip(lam, 0.0, self.lambda_max)


@dataclass
class Hyperparams:
    lr: float = 0.1
    dual_lr: float = 0.1
    lambda_max: float = 10.0
    kappa: float = 1.0
    log_every: int = 10
    hard_dual: bool = False


@dataclass
class Checkpoint:
    step: int
    theta: np.ndarray
    lam: np.ndarray
    metrics: dict


@dataclass
class TrainerState:
    theta: np.ndarray
    dual: DualState
    step: int = 0
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def cell_coefficients(cs: ConstraintSet, lam, hist, kappa: float) -> np.ndarray:
    """``(Q, K)`` weight each record of cell ``q`` puts on ``grad sigma_k``.

    Entry ``[q, k]`` is ``sum_j lam_j sum_{I ∋ q} alpha_{j,I,k} / max(n_I, kappa)``
    with ``n_I`` the histogram mass of the cells in ``I``.
    """
    H = np.asarray(getattr(hist, "values", hist), dtype=float)
    M = cs.term_membership
    denom = np.maximum(M @ H.sum(axis=1), kappa)
    weights = np.asarray(lam, dtype=float)[cs.term_owner, None] * cs.term_alpha / denom[:, None]
    return M.T @ weights


def regularizer_gradients(theta, X, cells, lam, hist, cs: ConstraintSet, kappa: float) -> np.ndarray:
    """Per-record regularizer gradients, shape ``(n, K, d)``."""
    coef = cell_coefficients(cs, lam, hist, kappa)[cells]
    p = soft_predict(theta, X, cs.temperature, cs.softmax_sign)
    w = softmax_jacobian_weights(p, coef, cs.temperature, cs.softmax_sign)
    return w[:, :, None] * X[:, None, :]


def per_sample_regularizer_grad(theta, lam, hist, x, cell: int, cs: ConstraintSet, kappa: float = 1.0):
    """Regularizer gradient of one record as a flat ``K * d`` vector."""
    x = np.asarray(x, dtype=float)[None, :]
    return regularizer_gradients(theta, x, np.array([cell]), lam, hist, cs, kappa)[0].ravel()


def per_sample_gradients(theta, X, y, cells, lam, hist, cs, kappa, rate, n_total) -> np.ndarray:
    """``(n, K*d)`` matrix of unclipped per-record Lagrangian gradients."""
    _, grads = loss_and_grad(theta, X, y)
    grads = grads / (rate * n_total)
    if cs is not None:
        grads = grads + regularizer_gradients(theta, X, cells, lam, hist, cs, kappa)
    return grads.reshape(len(X), -1)


def primal_step(theta, lam, data: PartitionedDataset, batch: MiniBatch, hist, cs, privacy: PrivacyConfig,
                hp: Hyperparams, rng: np.random.Generator, step: int = 0) -> np.ndarray:
    """Clipped, noised descent step on the primal parameters."""
    n = len(data)
    idx = batch.indices
    bound = privacy.clip_norm / (privacy.sampling_rate * n)
    total = np.zeros(theta.size)
    if idx.size:
        G = per_sample_gradients(
            theta, data.features[idx], data.labels[idx], data.partition_index[idx],
            lam, hist, cs, hp.kappa, privacy.sampling_rate, n,
        )
        total = clip_rows(G, bound).sum(axis=0)
    g = total + gaussian_noise(theta.size, privacy.sigma, rng)
    if not np.all(np.isfinite(g)):
        raise TrainingDivergedError(
            f"non-finite gradient at step {step}: |theta|={np.linalg.norm(theta):.4g}, lambda={np.asarray(lam)}"
        )
    return theta - hp.lr * g.reshape(theta.shape)


def dual_step(dual: DualState, hist: PredictionHistogram, cs: ConstraintSet, kappa: float = 1.0) -> DualState:
    """Projected ascent from the constraint values encoded in ``hist``."""
    grad = evaluate_from_histogram(cs, hist, kappa) - cs.gammas
    return replace(dual, lam=dual.project(dual.lam + dual.lr * grad))


def dual_step_hard(dual: DualState, data: PartitionedDataset, batch: MiniBatch, theta, cs: ConstraintSet,
                   certified: bool, kappa: float = 1.0) -> DualState:
    """Dual ascent on hard rates of the raw batch. Not covered by the DP guarantee."""
    if certified:
        raise ConfigurationError("hard-rate dual updates read raw records; not allowed in certified mode")
    idx = batch.indices
    if idx.size == 0:
        return dual
    preds = np.argmax(data.features[idx] @ np.asarray(theta).T, axis=1)
    H = np.zeros((cs.n_cells, cs.n_classes))
    np.add.at(H, (data.partition_index[idx], preds), 1.0)
    return dual_step(dual, PredictionHistogram(H), cs, kappa)


_RECORD_TYPES = (PartitionedDataset, MiniBatch)
_RECORD_NAMES = {"data", "batch", "records", "features", "x", "X"}


def check_dual_dataflow(fn=dual_step) -> None:
    """Refuse a dual update whose signature can receive raw records.

    In certified mode the dual update may only post-process the privatised
    histogram, so no parameter may be a dataset or batch.
    """
    hints = typing.get_type_hints(fn)
    for name in inspect.signature(fn).parameters:
        ann = hints.get(name)
        types = typing.get_args(ann) or (ann,)
        if name in _RECORD_NAMES or any(isinstance(a, type) and issubclass(a, _RECORD_TYPES) for a in types):
            raise ConfigurationError(f"dual update {fn.__name__} accepts raw records via {name!r}")


def _metrics(theta, data, cs):
    if data is None:
        return {}
    pred = np.argmax(data.features @ theta.T, axis=1)
    out = {"error": float(np.mean(pred != data.labels))}
    if cs is not None:
        values = evaluate_dataset(cs, data, theta, "hard")
        out["constraint_values"] = values.tolist()
        out["violation"] = float(np.max(values - cs.gammas))
    return out


def step(state: TrainerState, data: PartitionedDataset, cs: ConstraintSet | None, privacy: PrivacyConfig,
         hp: Hyperparams, stream: NoiseStream, t: int) -> TrainerState:
    """One in-place iteration: sample, histogram, primal step, dual step."""
    batch = poisson_sample(len(data), privacy.sampling_rate, stream.generator(t, "sample"))
    hist = None
    if cs is not None:
        exact = compute_histogram(data, batch, state.theta, cs.temperature, cs.softmax_sign)
        hist = privatize_histogram(exact, privacy.b, stream.generator(t, "histogram"))
    new_theta = primal_step(
        state.theta, state.dual.lam, data, batch, hist, cs, privacy, hp, stream.generator(t, "gradient"), t,
    )
    if cs is not None:
        if hp.hard_dual:
            state.dual = dual_step_hard(state.dual, data, batch, state.theta, cs, privacy.certified, hp.kappa)
        else:
            state.dual = dual_step(state.dual, hist, cs, hp.kappa)
    state.theta = new_theta
    state.step = t + 1
    return state


def init_state(data: PartitionedDataset, cs: ConstraintSet | None, hp: Hyperparams, theta0=None) -> TrainerState:
    K, d = data.n_classes, data.n_features
    theta = np.zeros((K, d)) if theta0 is None else np.array(theta0, dtype=float)
    if theta.shape != (K, d):
        raise ConfigurationError(f"initial parameters have shape {theta.shape}, expected {(K, d)}")
    J = len(cs) if cs is not None else 0
    return TrainerState(theta, DualState(np.zeros(J), hp.lambda_max, hp.dual_lr))


def train(data: PartitionedDataset, constraints: ConstraintSet | None, privacy: PrivacyConfig,
          hp: Hyperparams | None = None, seed: int = 0, val: PartitionedDataset | None = None,
          theta0=None, accountant=None) -> TrainerState:
    """Run ``privacy.steps`` steps; log and checkpoint every ``hp.log_every`` steps."""
    hp = hp or Hyperparams()
    cs = constraints
    if cs is not None and (cs.n_cells != data.n_cells or cs.n_classes != data.n_classes):
        raise ConfigurationError("constraint set does not match the dataset partition")
    if privacy.certified:
        if hp.hard_dual:
            raise ConfigurationError("hard-rate dual updates are not allowed in certified mode")
        check_dual_dataflow(dual_step)
    accountant = accountant or ClosedFormAccountant()

    n = len(data)
    state = init_state(data, cs, hp, theta0)
    stream = NoiseStream(seed)

    for t in range(privacy.steps):
        step(state, data, cs, privacy, hp, stream, t)

        if hp.log_every and (state.step % hp.log_every == 0 or state.step == privacy.steps):
            eps = accountant.epsilon(
                privacy.delta, privacy.sampling_rate, state.step, privacy.sigma, privacy.b, privacy.clip_norm, n
            )
            row = {"step": state.step, "lambda": state.dual.lam.tolist(), "epsilon": eps,
                   "train": _metrics(state.theta, data, cs), "val": _metrics(state.theta, val, cs)}
            state.history.append(row)
            state.checkpoints.append(Checkpoint(state.step, state.theta.copy(), state.dual.lam.copy(), row))
    return state


def select_checkpoint(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Best validation accuracy among checkpoints meeting the train constraints.

    Without validation metrics, train accuracy is used. If no checkpoint
    satisfies the train constraints, the least-violating one is returned.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")

    def accuracy(c):
        m = c.metrics["val"] or c.metrics["train"]
        return -m["error"]

    feasible = [c for c in checkpoints if c.metrics["train"].get("violation", 0.0) <= 0.0]
    if feasible:
        return max(feasible, key=lambda c: (accuracy(c), c.step))
    return min(checkpoints, key=lambda c: (c.metrics["train"]["violation"], -c.step))


def sgd_step(theta, data: PartitionedDataset, batch: MiniBatch, lr: float) -> np.ndarray:
    """Non-private minibatch SGD step on the mean loss (timing baseline)."""
    idx = batch.indices
    if idx.size == 0:
        return theta
    X, y = data.features[idx], data.labels[idx]
    z = X @ theta.T
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    return theta - lr * (p.T @ X) / len(y)
