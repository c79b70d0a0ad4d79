"""Positive / hardest-negative prototype choice and the α confidence weight.

The per-pixel functions return a :class:`PrototypeSelection`; the trainer uses
:func:`select_batch`, which does the same work for a stack of embeddings and
returns the prototypes as an (N, C, D) array with the positive's slot index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .gmm_density import GmmBank, joint_log_table


@dataclass(frozen=True, eq=False)
class PrototypeSelection:
    positive: Tuple[int, int, np.ndarray]
    negatives: List[Tuple[int, int, np.ndarray]]
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        classes = [c for c, _, _ in self.negatives]
        if self.positive[0] in classes or len(set(classes)) != len(classes):
            raise ValueError("negatives must hold one entry per non-positive class")

    @property
    def positive_class(self) -> int:
        return self.positive[0]

    @property
    def positive_component(self) -> int:
        return self.positive[1]

    def prototypes(self) -> np.ndarray:
        """Positive first, then negatives: shape (1 + len(negatives), D)."""
        return np.stack([self.positive[2]] + [q for _, _, q in self.negatives])

    def same_as(self, other: "PrototypeSelection") -> bool:
        return (
            self.positive[:2] == other.positive[:2]
            and np.array_equal(self.positive[2], other.positive[2])
            and [n[:2] for n in self.negatives] == [n[:2] for n in other.negatives]
            and all(np.array_equal(a[2], b[2]) for a, b in zip(self.negatives, other.negatives))
            and self.alpha == other.alpha
        )


@dataclass
class BatchSelection:
    """Vectorized selection for N embeddings.

    ``components[n, c]`` is the chosen component of class c and
    ``prototypes[n, c]`` its mean; ``positive[n]`` is the positive class.
    """

    positive: np.ndarray  # (N,)
    components: np.ndarray  # (N, C)
    prototypes: np.ndarray  # (N, C, D)
    alpha: np.ndarray  # (N,)

    def __len__(self):
        return len(self.positive)

    def pixel(self, n: int) -> PrototypeSelection:
        c_pos = int(self.positive[n])
        C = self.components.shape[1]
        neg = [(c, int(self.components[n, c]), self.prototypes[n, c]) for c in range(C) if c != c_pos]
        return PrototypeSelection(
            (c_pos, int(self.components[n, c_pos]), self.prototypes[n, c_pos]), neg, float(self.alpha[n])
        )


def component_sigma(variances: np.ndarray, mode: str = "trace") -> np.ndarray:
    """Scalar spread of a diagonal component: total or per-dimension variance."""
    if mode == "trace":
        return variances.sum(axis=-1)
    if mode == "mean":
        return variances.mean(axis=-1)
    raise ValueError(f"unknown sigma mode {mode!r}")


def gmm_alpha(f, mean, sigma) -> np.ndarray:
    """exp(-||f - mean||^2 / (2 sigma)); lies in (0, 1]."""
    d2 = np.sum((np.asarray(f) - np.asarray(mean)) ** 2, axis=-1)
    a = np.exp(-d2 / (2.0 * np.asarray(sigma)))
    # keep strictly positive so far-away pixels stay in (0, 1]
    return np.maximum(a, np.finfo(np.float64).tiny)


def select_batch(bank: GmmBank, f, labels: Optional[np.ndarray] = None,
                 alpha_sigma: str = "trace", log_table: Optional[np.ndarray] = None) -> BatchSelection:
    """Select prototypes for every row of ``f``.

    With ``labels`` the positive class is given (labeled source, or target
    pseudo/weak labels) and alpha is 1. Without labels the positive is the
    joint (class, component) argmax under uniform class priors and alpha
    measures proximity to that component.
    """
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    n = len(f)
    table = joint_log_table(bank, f) if log_table is None else log_table  # (N, C, M)
    comps = np.argmax(table, axis=2)  # within-class argmax; first index wins ties
    protos = bank.means[np.arange(bank.C)[None, :], comps]  # (N, C, D)
    if labels is not None:
        pos = np.asarray(labels, dtype=np.int64)
        alpha = np.ones(n)
    else:
        flat = np.argmax(table.reshape(n, -1), axis=1)
        pos = flat // bank.M
        m_pos = flat % bank.M
        # the joint argmax is also the within-class argmax of its class
        assert np.array_equal(comps[np.arange(n), pos], m_pos)
        sigma = component_sigma(bank.variances[pos, m_pos], alpha_sigma)
        alpha = gmm_alpha(f, bank.means[pos, m_pos], sigma)
    return BatchSelection(pos, comps, protos, alpha)


def select_labeled_source(bank: GmmBank, f, y: int) -> PrototypeSelection:
    if not 0 <= y < bank.C:
        raise ValueError(f"class {y} out of range")
    return select_batch(bank, f, labels=np.array([y])).pixel(0)


def select_unlabeled_source(bank: GmmBank, f, alpha_sigma: str = "trace") -> PrototypeSelection:
    return select_batch(bank, f, alpha_sigma=alpha_sigma).pixel(0)


def select_noisy_source(bank: GmmBank, f, y_noisy: int, alpha_sigma: str = "trace") -> PrototypeSelection:
    """Noisy labels are not trusted for prototype choice; same as unlabeled."""
    if not 0 <= y_noisy < bank.C:
        raise ValueError(f"class {y_noisy} out of range")
    return select_unlabeled_source(bank, f, alpha_sigma)
