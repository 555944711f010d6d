import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from racodp import RaCODPClassifier
from racodp.estimator import resolve_privacy
from racodp.optimizer import ConfigurationError


@pytest.fixture
def toy():
    rng = np.random.default_rng(0)
    n = 600
    s = np.where(rng.random(n) < 0.5, "F", "M")
    X = np.column_stack([rng.normal(size=n), rng.normal(size=n)])
    y = np.where(X[:, 0] + 0.8 * (s == "M") > 0.4, "yes", "no")
    return X, y, s


def small(**kw):
    params = dict(epsilon=None, sigma=0.0, n_steps=200, batch_size=100, clip_norm=math.inf, lr=0.5)
    params.update(kw)
    return RaCODPClassifier(**params)


def test_params_roundtrip():
    clf = RaCODPClassifier(gamma=0.02, batch_size=256)
    params = clf.get_params()
    assert params["gamma"] == 0.02 and params["batch_size"] == 256
    twin = clone(clf).set_params(lr=0.3)
    assert twin.lr == 0.3 and clf.lr == 0.1


def test_fit_predict_labels(toy):
    X, y, s = toy
    clf = small().fit(X, y, sensitive_features=s)
    assert set(clf.classes_) == {"no", "yes"}
    pred = clf.predict(X)
    assert pred.dtype == y.dtype and set(pred) <= {"no", "yes"}
    assert clf.score(X, y) > 0.7
    proba = clf.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert clf.decision_function(X).shape == (len(X), 2)
    assert clf.coef_.shape == (2, 2) and clf.intercept_.shape == (2,)
    assert clf.lambda_.shape == (4,)
    assert not clf.privacy_.certified


def test_constraint_reduces_disparity(toy):
    X, y, s = toy
    free = small(constraint="none").fit(X, y)
    fair = small(gamma=0.02, n_steps=1000, dual_lr=0.5).fit(X, y, sensitive_features=s)

    def gap(clf):
        p = clf.predict(X) == "yes"
        return abs(p[s == "F"].mean() - p[s == "M"].mean())

    assert gap(fair) < gap(free)


def test_private_budget_route(toy):
    X, y, s = toy
    clf = RaCODPClassifier(epsilon=3.0, n_steps=50, batch_size=100, clip_norm=1.0).fit(X, y, sensitive_features=s)
    assert clf.privacy_.certified
    assert clf.privacy_.certified_epsilon(len(X)) == pytest.approx(3.0)


def test_eval_set_selection(toy):
    X, y, s = toy
    clf = small(log_every=20).fit(X[:400], y[:400], sensitive_features=s[:400],
                                  eval_set=(X[400:], y[400:], s[400:]))
    assert clf.selected_step_ in {row["step"] for row in clf.history_}
    assert clf.history_[0]["val"]["error"] >= 0


def test_fnr_needs_no_sensitive(toy):
    X, y, _ = toy
    clf = small(constraint="fnr", gamma=0.0, fnr_classes=[0]).fit(X, y)
    assert clf.lambda_.shape == (1,)


def test_missing_sensitive_rejected(toy):
    X, y, _ = toy
    with pytest.raises(ValueError, match="sensitive_features"):
        small().fit(X, y)


def test_input_validation(toy):
    X, y, s = toy
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        small().fit(bad, y, sensitive_features=s)
    clf = small().fit(X, y, sensitive_features=s)
    with pytest.raises(ValueError, match="features"):
        clf.predict(X[:, :1])
    with pytest.raises(NotFittedError):
        small().predict(X)
    with pytest.raises(ValueError, match="two classes"):
        small().fit(X, np.zeros(len(X)), sensitive_features=s)


def test_unknown_constraint(toy):
    X, y, s = toy
    with pytest.raises(ConfigurationError):
        small(constraint="parity").fit(X, y, sensitive_features=s)


def test_resolve_privacy_routes():
    explicit = resolve_privacy(None, 1e-5, 0.0, None, 10, 0.1, 1.0, 1000)
    assert explicit.b == math.inf and not explicit.certified
    budget = resolve_privacy(2.0, 1e-5, None, None, 10, 0.1, 1.0, 1000)
    solved = resolve_privacy(2.0, 1e-5, budget.sigma, budget.b, None, 0.1, 1.0, 1000)
    assert solved.steps >= 10
    with pytest.raises(ConfigurationError):
        resolve_privacy(2.0, 1e-5, 1.0, 1.0, 10, 0.1, 1.0, 1000)
    with pytest.raises(ConfigurationError):
        resolve_privacy(None, 1e-5, None, None, 10, 0.1, 1.0, 1000)
