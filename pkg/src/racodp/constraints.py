"""Generalized rate constraints over a global partition.

A constraint ``j`` is a family of cell subsets ``I`` with weights
``alpha[I, k]`` and a slack ``gamma_j``; its value is
``sum_I sum_k alpha[I, k] * P_k(union of cells in I)`` where ``P_k`` is a
(soft or hard) prediction rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import hard_predict, soft_predict


class EmptyRateError(ValueError):
    """A prediction rate was requested over an empty set of records."""


@dataclass(frozen=True)
class RateConstraint:
    subsets: tuple[tuple[int, ...], ...]
    alpha: np.ndarray  # (len(subsets), K)
    gamma: float = 0.0

    def __post_init__(self):
        subsets = tuple(tuple(sorted(set(int(i) for i in s))) for s in self.subsets)
        alpha = np.array(self.alpha, dtype=float)
        if alpha.ndim != 2 or alpha.shape[0] != len(subsets):
            raise ValueError("alpha must have one row per subset")
        if any(len(s) == 0 for s in subsets):
            raise ValueError("constraint subsets must be nonempty")
        if any(i < 0 for s in subsets for i in s):
            raise ValueError("cell indices must be nonnegative")
        if not np.all(np.isfinite(alpha)):
            raise ValueError("alpha must be finite")
        if not self.gamma >= 0:
            raise ValueError("slack gamma must be >= 0")
        alpha.setflags(write=False)
        object.__setattr__(self, "subsets", subsets)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def alpha_l1(self) -> float:
        return float(np.abs(self.alpha).sum())

    def scaled(self, c: float) -> "RateConstraint":
        return RateConstraint(self.subsets, c * self.alpha, self.gamma)

    def __eq__(self, other):
        if not isinstance(other, RateConstraint):
            return NotImplemented
        return (
            self.subsets == other.subsets
            and self.alpha.shape == other.alpha.shape
            and np.array_equal(self.alpha, other.alpha)
            and self.gamma == other.gamma
        )

    __hash__ = None


@dataclass(frozen=True)
class ConstraintSet:
    constraints: tuple[RateConstraint, ...]
    n_cells: int
    n_classes: int
    temperature: float = 1.0
    softmax_sign: str = "standard"
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        constraints = tuple(self.constraints)
        object.__setattr__(self, "constraints", constraints)
        if not constraints:
            raise ValueError("a constraint set needs at least one constraint")
        for j, c in enumerate(constraints):
            if c.alpha.shape[1] != self.n_classes:
                raise ValueError(f"constraint {j}: alpha has {c.alpha.shape[1]} classes")
            if any(i >= self.n_cells for s in c.subsets for i in s):
                raise ValueError(f"constraint {j} references a cell >= {self.n_cells}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        names = tuple(self.names) or tuple(f"c{j}" for j in range(len(constraints)))
        object.__setattr__(self, "names", names)

        # flattened (constraint, subset) terms for vectorised evaluation
        terms = [(j, s, a) for j, c in enumerate(constraints) for s, a in zip(c.subsets, c.alpha)]
        membership = np.zeros((len(terms), self.n_cells))
        for t, (_, s, _) in enumerate(terms):
            membership[t, list(s)] = 1.0
        object.__setattr__(self, "_owner", np.array([t[0] for t in terms]))
        object.__setattr__(self, "_membership", membership)
        object.__setattr__(self, "_term_alpha", np.array([t[2] for t in terms]))

    def __len__(self):
        return len(self.constraints)

    @property
    def gammas(self) -> np.ndarray:
        return np.array([c.gamma for c in self.constraints])

    @property
    def alpha_l1(self) -> np.ndarray:
        return np.array([c.alpha_l1 for c in self.constraints])

    @property
    def term_owner(self) -> np.ndarray:
        return self._owner

    @property
    def term_membership(self) -> np.ndarray:
        """``(n_terms, Q)`` 0/1 matrix: which cells each subset covers."""
        return self._membership

    @property
    def term_alpha(self) -> np.ndarray:
        return self._term_alpha

    def with_gamma(self, gamma) -> "ConstraintSet":
        gammas = np.broadcast_to(np.asarray(gamma, dtype=float), (len(self),))
        return self._replace([RateConstraint(c.subsets, c.alpha, g) for c, g in zip(self.constraints, gammas)])

    def scaled(self, c: float) -> "ConstraintSet":
        return self._replace([k.scaled(c) for k in self.constraints])

    def _replace(self, constraints):
        return ConstraintSet(
            tuple(constraints), self.n_cells, self.n_classes,
            self.temperature, self.softmax_sign, self.names,
        )

    def to_config(self) -> dict:
        """Serialise to the config-file schema (subset lists, sparse alpha)."""
        out = []
        for c in self.constraints:
            alpha = [
                {"subset_idx": int(i), "class": int(k), "weight": float(c.alpha[i, k])}
                for i, k in zip(*np.nonzero(c.alpha))
            ]
            out.append({"subsets": [list(s) for s in c.subsets], "alpha": alpha, "gamma": c.gamma})
        return {
            "n_cells": self.n_cells,
            "n_classes": self.n_classes,
            "temperature": self.temperature,
            "softmax_sign": self.softmax_sign,
            "names": list(self.names),
            "constraints": out,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ConstraintSet":
        K = int(cfg["n_classes"])
        constraints = []
        for item in cfg["constraints"]:
            alpha = np.zeros((len(item["subsets"]), K))
            for entry in item["alpha"]:
                alpha[int(entry["subset_idx"]), int(entry["class"])] += float(entry["weight"])
            constraints.append(RateConstraint(tuple(map(tuple, item["subsets"])), alpha, item.get("gamma", 0.0)))
        return cls(
            tuple(constraints),
            int(cfg["n_cells"]),
            K,
            float(cfg.get("temperature", 1.0)),
            cfg.get("softmax_sign", "standard"),
            tuple(cfg.get("names", ())),
        )


def _as_gammas(gamma, J):
    return np.broadcast_to(np.asarray(gamma, dtype=float), (J,))


def build_demographic_parity(z_values: Sequence, n_classes: int, gamma, sensitive_column="sensitive", **kw):
    """``P_k(Z = z) - P_k(Z != z) <= gamma`` for every group ``z`` and class ``k``.

    Returns ``(partition_spec, constraint_set)`` with one cell per group.
    """
    z_values = list(z_values)
    Q, K = len(z_values), int(n_classes)
    if Q < 2:
        raise ValueError("demographic parity needs at least two sensitive groups")
    gammas = _as_gammas(gamma, Q * K)
    constraints, names = [], []
    for z in range(Q):
        rest = tuple(i for i in range(Q) if i != z)
        for k in range(K):
            alpha = np.zeros((2, K))
            alpha[0, k], alpha[1, k] = 1.0, -1.0
            constraints.append(RateConstraint(((z,), rest), alpha, gammas[len(constraints)]))
            names.append(f"dp[{sensitive_column}={z_values[z]},k={k}]")
    spec = [{sensitive_column: v} for v in z_values]
    return spec, ConstraintSet(tuple(constraints), Q, K, names=tuple(names), **kw)


def build_equalized_odds(
    z_values: Sequence, n_classes: int, gamma, sensitive_column="sensitive", variant="counterfactual", **kw
):
    """Equalized odds over cells ``D[Y=k', Z=z]`` (cell index ``k' * |Z| + z``).

    ``variant="counterfactual"`` compares each group against all others
    combined (``K**2 * |Z|`` constraints); ``"all_pairs"`` compares every
    ordered pair of groups.
    """
    z_values = list(z_values)
    nz, K = len(z_values), int(n_classes)
    if nz < 2:
        raise ValueError("equalized odds needs at least two sensitive groups")
    if variant not in ("counterfactual", "all_pairs"):
        raise ValueError(f"unknown equalized-odds variant {variant!r}")

    def cell(ky, z):
        return ky * nz + z

    rows = []
    for k in range(K):
        for ky in range(K):
            for z in range(nz):
                if variant == "counterfactual":
                    others = tuple(cell(ky, o) for o in range(nz) if o != z)
                    rows.append((k, (cell(ky, z),), others, f"eo[k={k},y={ky},{sensitive_column}={z_values[z]}]"))
                else:
                    for o in range(nz):
                        if o != z:
                            rows.append((
                                k, (cell(ky, z),), (cell(ky, o),),
                                f"eo[k={k},y={ky},{sensitive_column}={z_values[z]}vs{z_values[o]}]",
                            ))
    gammas = _as_gammas(gamma, len(rows))
    constraints, names = [], []
    for j, (k, a, b, name) in enumerate(rows):
        alpha = np.zeros((2, K))
        alpha[0, k], alpha[1, k] = 1.0, -1.0
        constraints.append(RateConstraint((a, b), alpha, gammas[j]))
        names.append(name)
    spec = [{"label": ky, sensitive_column: v} for ky in range(K) for v in z_values]
    return spec, ConstraintSet(tuple(constraints), K * nz, K, names=tuple(names), **kw)


def build_fnr(n_classes: int, gamma, classes: Sequence[int] | None = None, **kw):
    """``P_k(D[Y != k]) <= gamma``; one cell per true label.

    For binary labels the constraint on class 0 is the usual false negative
    rate of the positive class. ``classes`` restricts which ``k`` are
    constrained (default: all).
    """
    K = int(n_classes)
    if K < 2:
        raise ValueError("FNR constraints need at least two classes")
    classes = list(range(K)) if classes is None else [int(k) for k in classes]
    gammas = _as_gammas(gamma, len(classes))
    constraints = []
    for j, k in enumerate(classes):
        alpha = np.zeros((1, K))
        alpha[0, k] = 1.0
        constraints.append(RateConstraint((tuple(i for i in range(K) if i != k),), alpha, gammas[j]))
    spec = [{"label": y} for y in range(K)]
    names = tuple(f"fnr[k={k}]" for k in classes)
    return spec, ConstraintSet(tuple(constraints), K, K, names=names, **kw)


def _records(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        raise EmptyRateError("prediction rate over an empty record set")
    return x


def soft_rate(x, theta, tau: float, k: int, softmax_sign: str = "standard") -> float:
    """Mean tempered-softmax probability of class ``k`` over records ``x``."""
    return float(soft_predict(theta, _records(x), tau, softmax_sign)[:, k].mean())


def hard_rate(x, theta, k: int) -> float:
    return float(np.mean(hard_predict(theta, _records(x)) == k))


def _predictions(cs, x, theta, mode):
    if mode == "soft":
        return soft_predict(theta, x, cs.temperature, cs.softmax_sign)
    if mode == "hard":
        return np.eye(cs.n_classes)[hard_predict(theta, x)]
    raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")


def evaluate_exact(cs: ConstraintSet, features, partition_index, theta, mode: str = "soft") -> np.ndarray:
    """Constraint values computed directly from the records.

    Raises ``EmptyRateError`` naming the constraint and subset if a local
    dataset has no records.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    partition_index = np.asarray(partition_index)
    preds = _predictions(cs, features, theta, mode) if len(features) else np.zeros((0, cs.n_classes))
    values = np.zeros(len(cs))
    for j, c in enumerate(cs.constraints):
        for i, subset in enumerate(c.subsets):
            mask = np.isin(partition_index, subset)
            if not mask.any():
                raise EmptyRateError(f"constraint {cs.names[j]} subset {list(subset)} has no records")
            values[j] += c.alpha[i] @ preds[mask].mean(axis=0)
    return values


def evaluate_dataset(cs: ConstraintSet, data, theta, mode: str = "soft") -> np.ndarray:
    return evaluate_exact(cs, data.features, data.partition_index, theta, mode)


def evaluate_from_histogram(cs: ConstraintSet, histogram, kappa: float = 1.0) -> np.ndarray:
    """Constraint values reconstructed only from a ``(Q, K)`` histogram.

    Each subset's rate is its summed class mass over its summed total mass;
    totals are floored at ``kappa`` so noisy histograms stay finite.
    """
    H = np.asarray(getattr(histogram, "values", histogram), dtype=float)
    if H.shape != (cs.n_cells, cs.n_classes):
        raise ValueError(f"histogram shape {H.shape} != {(cs.n_cells, cs.n_classes)}")
    M = cs.term_membership
    numer = M @ H
    denom = np.maximum(M @ H.sum(axis=1), kappa)
    term_values = np.sum(cs.term_alpha * numer, axis=1) / denom
    return np.bincount(cs.term_owner, weights=term_values, minlength=len(cs))


def max_violation(values, gammas) -> float:
    return float(np.max(np.asarray(values) - np.asarray(gammas)))
