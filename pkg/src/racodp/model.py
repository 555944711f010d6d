"""Linear multiclass model: scores, tempered softmax and their gradients.

Parameters are a ``(K, d)`` weight matrix; the bias is the last feature
column. Functions accept a single feature vector ``x`` of shape ``(d,)`` or
a batch of shape ``(n, d)`` and return correspondingly shaped results.

Two softmax orientations are supported. ``"negated"`` is
``exp(-tau * z_k) / sum_l exp(-tau * z_l)``, which puts the largest mass on
the *smallest* score. ``"standard"`` uses ``exp(+tau * z_k)`` and agrees with
the argmax used by :func:`hard_predict` and with the cross-entropy loss.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SOFTMAX_SIGNS = {"standard": 1.0, "negated": -1.0}
CHECKPOINT_FORMAT = "racodp.linear/v1"


def _sign(softmax_sign: str) -> float:
    try:
        return SOFTMAX_SIGNS[softmax_sign]
    except KeyError:
        raise ValueError(
            f"softmax_sign must be one of {sorted(SOFTMAX_SIGNS)}, got {softmax_sign!r}"
        ) from None


def scores(theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != theta.shape[1]:
        raise ValueError(f"feature dimension {x.shape[-1]} != model dimension {theta.shape[1]}")
    return x @ theta.T


def softmax(z: np.ndarray, tau: float = 1.0, softmax_sign: str = "standard") -> np.ndarray:
    """Tempered softmax of score vectors along the last axis."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite prediction scores")
    logits = _sign(softmax_sign) * tau * z
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def soft_predict(theta, x, tau: float = 1.0, softmax_sign: str = "standard") -> np.ndarray:
    return softmax(scores(theta, x), tau, softmax_sign)


def hard_predict(theta, x) -> np.ndarray:
    """Argmax class; ``np.argmax`` breaks ties toward the lowest index."""
    return np.argmax(scores(theta, x), axis=-1)


def loss_and_grad(theta, x, y):
    """Cross-entropy of the ordinary softmax and its gradient.

    For a batch the loss and gradient are returned per record, with shapes
    ``(n,)`` and ``(n, K, d)``.
    """
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    z = scores(theta, xb)
    zmax = z.max(axis=1, keepdims=True)
    log_norm = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(len(yb))
    loss = log_norm - z[rows, yb]
    resid = np.exp(z - log_norm[:, None])
    resid[rows, yb] -= 1.0
    grad = resid[:, :, None] * xb[:, None, :]
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def softmax_jacobian_weights(p: np.ndarray, coef: np.ndarray, tau: float, softmax_sign: str):
    """Per-record weights ``w`` with ``sum_k coef_k grad(sigma_k) = w (x) x``.

    For the linear model ``d sigma_k / d theta_j = s tau sigma_k (1[k=j] - sigma_j) x``
    so the contraction with ``coef`` is ``s tau sigma_j (coef_j - coef . sigma) x``.
    """
    centred = coef - np.sum(coef * p, axis=-1, keepdims=True)
    return _sign(softmax_sign) * tau * p * centred


def soft_prediction_grad(theta, x, tau: float, k: int, softmax_sign: str = "standard"):
    """Gradient of ``sigma_tau(h(theta; x))_k`` w.r.t. ``theta``, shape ``(K, d)``."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    p = soft_predict(theta, x, tau, softmax_sign)
    coef = np.zeros_like(p)
    coef[..., k] = 1.0
    w = softmax_jacobian_weights(p, coef, tau, softmax_sign)
    return w[..., :, None] * x[..., None, :]


def save_checkpoint(theta, path, **meta) -> None:
    theta = np.asarray(theta, dtype=float)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "shape": list(theta.shape),
        "values": theta.ravel().tolist(),
        "meta": meta,
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[np.ndarray, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    theta = np.asarray(payload["values"], dtype=float).reshape(payload["shape"])
    return theta, payload.get("meta", {})
