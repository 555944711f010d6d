"""scikit-learn style wrapper around the private constrained trainer."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .constraints import build_demographic_parity, build_equalized_odds, build_fnr
from .data import PartitionedDataset
from .model import hard_predict, soft_predict
from .optimizer import ConfigurationError, Hyperparams, select_checkpoint, train
from .privacy import PrivacyConfig

CONSTRAINTS = ("demographic_parity", "equalized_odds", "fnr", "none")


def _cells(family, n_groups, labels, groups):
    if family == "demographic_parity":
        return groups
    if family == "equalized_odds":
        return labels * n_groups + groups
    return labels


def build_constraints(family, z_values, n_classes, gamma, temperature=1.0, softmax_sign="standard",
                      eo_variant="counterfactual", fnr_classes=None):
    """Constraint set for ``family``; ``None`` for ``"none"`` (plain DP-SGD)."""
    kw = dict(temperature=temperature, softmax_sign=softmax_sign)
    if family == "demographic_parity":
        return build_demographic_parity(z_values, n_classes, gamma, **kw)[1]
    if family == "equalized_odds":
        return build_equalized_odds(z_values, n_classes, gamma, variant=eo_variant, **kw)[1]
    if family == "fnr":
        return build_fnr(n_classes, gamma, classes=fnr_classes, **kw)[1]
    if family == "none":
        return None
    raise ConfigurationError(f"constraint must be one of {CONSTRAINTS}, got {family!r}")


def resolve_privacy(epsilon, delta, sigma, b, n_steps, sampling_rate, clip_norm, n) -> PrivacyConfig:
    """Exactly one route: a budget ``epsilon`` or explicit noise ``(sigma, b)``.

    With a budget, ``n_steps`` fixes the calibrated noise; giving
    ``(sigma, b)`` and ``n_steps=None`` instead solves for the step count.
    """
    b = math.inf if b is None and sigma is not None else b
    if epsilon is None:
        if sigma is None or n_steps is None:
            raise ConfigurationError("without epsilon, sigma and n_steps are required")
        return PrivacyConfig(sigma, b, clip_norm, sampling_rate, int(n_steps), delta)
    if sigma is None and n_steps is not None:
        return PrivacyConfig.from_budget(epsilon, delta, sampling_rate, clip_norm, n, steps=n_steps)
    if sigma is not None and n_steps is None:
        return PrivacyConfig.from_budget(epsilon, delta, sampling_rate, clip_norm, n, sigma=sigma, b=b)
    raise ConfigurationError("with epsilon give either n_steps or (sigma, b), not both")


class RaCODPClassifier(ClassifierMixin, BaseEstimator):
    """Linear classifier trained by private gradient descent-ascent under rate constraints.

    Parameters
    ----------
    constraint : {"demographic_parity", "equalized_odds", "fnr", "none"}
    gamma : float or array
        Slack per constraint.
    epsilon, delta : privacy budget. ``epsilon=None`` runs with the explicit
        ``sigma``/``b`` noise (``sigma=0`` is non-private).
    batch_size : expected Poisson batch size; the sampling rate is
        ``batch_size / n``.

    Attributes
    ----------
    coef_ : ndarray of shape (n_classes, n_features)
    intercept_ : ndarray of shape (n_classes,)
    lambda_ : final (or selected) multipliers
    history_ : logged metric rows
    privacy_ : resolved :class:`PrivacyConfig`
    """

    def __init__(self, constraint="demographic_parity", gamma=0.05, epsilon=3.0, delta=1e-5, n_steps=1000,
                 sigma=None, b=None, batch_size=512, clip_norm=1.0, lr=0.1, dual_lr=0.1, temperature=1.0,
                 lambda_max=10.0, kappa=1.0, softmax_sign="standard", eo_variant="counterfactual",
                 fnr_classes=None, hard_dual=False, log_every=10, fit_intercept=True, random_state=0):
        self.constraint = constraint
        self.gamma = gamma
        self.epsilon = epsilon
        self.delta = delta
        self.n_steps = n_steps
        self.sigma = sigma
        self.b = b
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.lr = lr
        self.dual_lr = dual_lr
        self.temperature = temperature
        self.lambda_max = lambda_max
        self.kappa = kappa
        self.softmax_sign = softmax_sign
        self.eo_variant = eo_variant
        self.fnr_classes = fnr_classes
        self.hard_dual = hard_dual
        self.log_every = log_every
        self.fit_intercept = fit_intercept
        self.random_state = random_state

    def _design(self, X):
        if self.fit_intercept:
            return np.hstack([X, np.ones((len(X), 1))])
        return X

    def _dataset(self, X, y_idx, sensitive):
        needs_groups = self.constraint in ("demographic_parity", "equalized_odds")
        groups = np.zeros(len(X), dtype=np.int64)
        if needs_groups:
            if sensitive is None:
                raise ValueError(f"constraint {self.constraint!r} needs sensitive_features")
            sensitive = np.asarray(sensitive)
            if sensitive.shape != (len(X),):
                raise ValueError("sensitive_features must have one value per sample")
            unknown = ~np.isin(sensitive, self.groups_)
            if unknown.any():
                raise ValueError(f"unseen sensitive value {sensitive[unknown][0]!r}")
            groups = np.searchsorted(self.groups_, sensitive)
        cells = _cells(self.constraint, len(self.groups_), y_idx, groups)
        n_cells = {"demographic_parity": len(self.groups_),
                   "equalized_odds": len(self.classes_) * len(self.groups_)}.get(self.constraint, len(self.classes_))
        return PartitionedDataset(self._design(X), y_idx, cells, n_cells, len(self.classes_))

    def fit(self, X, y, sensitive_features=None, eval_set=None):
        """Train on ``(X, y)``.

        ``eval_set=(X_val, y_val, sensitive_val)`` enables checkpoint
        selection on validation accuracy; without it the selection uses
        training accuracy.
        """
        X, y = check_X_y(X, y, dtype=float)
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        self.groups_ = np.unique(np.asarray(sensitive_features)) if sensitive_features is not None else np.array([0])
        data = self._dataset(X, self._le.transform(y), sensitive_features)
        val = None
        if eval_set is not None:
            Xv, yv, sv = eval_set
            Xv, yv = check_X_y(Xv, yv, dtype=float)
            val = self._dataset(Xv, self._le.transform(yv), sv)

        cs = build_constraints(self.constraint, list(self.groups_), len(self.classes_), self.gamma,
                               self.temperature, self.softmax_sign, self.eo_variant, self.fnr_classes)
        n = len(data)
        rate = min(1.0, self.batch_size / n)
        self.privacy_ = resolve_privacy(self.epsilon, self.delta, self.sigma, self.b, self.n_steps, rate,
                                        self.clip_norm, n)
        hp = Hyperparams(self.lr, self.dual_lr, self.lambda_max, self.kappa, self.log_every, self.hard_dual)
        state = train(data, cs, self.privacy_, hp, seed=self.random_state, val=val)
        self.history_ = state.history
        theta, lam = state.theta, state.dual.lam
        if state.checkpoints:
            chosen = select_checkpoint(state.checkpoints)
            theta, lam = chosen.theta, chosen.lam
            self.selected_step_ = chosen.step
        self.theta_ = theta
        self.lambda_ = lam
        self.constraints_ = cs
        if self.fit_intercept:
            self.coef_, self.intercept_ = theta[:, :-1], theta[:, -1]
        else:
            self.coef_, self.intercept_ = theta, np.zeros(len(theta))
        return self

    def _check(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self._design(X)

    def decision_function(self, X):
        """Class scores, shape ``(n_samples, n_classes)``."""
        return self._check(X) @ self.theta_.T

    def predict_proba(self, X):
        return soft_predict(self.theta_, self._check(X))

    def predict(self, X):
        X = self._check(X)
        return self.classes_[hard_predict(self.theta_, X)]
