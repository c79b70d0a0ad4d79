"""Target-side state: reliable-embedding bank, EMA prototypes and class priors,
label-shift corrected pseudo-labels, and per-scene GMMs built from weak labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import softmax

from .gmm_density import FifoQueue, GmmBank, joint_log_table, lse
from .prototype_select import component_sigma, gmm_alpha


class TargetState:
    def __init__(self, n_classes: int, dim: int, capacity: int = 32768, prior_floor: float = 1e-6):
        self.C, self.D = n_classes, dim
        self.prior_floor = prior_floor
        self.prototypes = np.zeros((n_classes, dim))
        self.proto_ready = np.zeros(n_classes, dtype=bool)
        self.queues = [FifoQueue(capacity, dim) for _ in range(n_classes)]
        self.delta_target = np.full(n_classes, 1.0 / n_classes)
        self.delta_source = np.full(n_classes, 1.0 / n_classes)

    @classmethod
    def from_config(cls, cfg) -> "TargetState":
        return cls(cfg.C, cfg.D, cfg.bank_capacity, cfg.prior_floor)

    def snapshot(self) -> dict:
        return {
            "prototypes": self.prototypes.copy(),
            "proto_ready": self.proto_ready.copy(),
            "delta_target": self.delta_target.copy(),
            "delta_source": self.delta_source.copy(),
            "queues": [q.state() for q in self.queues],
        }

    def equals(self, other: "TargetState") -> bool:
        same = all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("prototypes", "proto_ready", "delta_target", "delta_source")
        )
        return same and all(
            np.array_equal(a.contents(), b.contents()) for a, b in zip(self.queues, other.queues)
        )


def top_k_reliable(embeddings, pseudo_labels, c: int, k: int) -> np.ndarray:
    """Indices of the k class-c members most cosine-similar to their class mean.

    Ties (cosines equal to 12 decimals) go to the earlier index.
    """
    idx = np.flatnonzero(np.asarray(pseudo_labels) == c)
    if len(idx) == 0:
        return idx
    members = embeddings[idx]
    centre = members.mean(axis=0)
    cn = np.linalg.norm(centre)
    if cn == 0:
        return idx[:k]
    cos = members @ centre / (np.linalg.norm(members, axis=1) * cn)
    # exact ties (e.g. two members are equidistant from their mean) must not be
    # decided by rounding noise
    order = np.argsort(-np.round(cos, 12), kind="stable")
    return idx[order[:k]]


def update_target_bank(state: TargetState, embeddings, pseudo_labels, k_top: int,
                       lambda_ema: float) -> TargetState:
    """Push the most reliable embeddings per class, then EMA the prototypes."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    for c in range(state.C):
        sel = top_k_reliable(embeddings, pseudo_labels, c, k_top)
        if len(sel) == 0:
            continue
        state.queues[c].push(embeddings[sel])
        qmean = state.queues[c].mean()
        if state.proto_ready[c]:
            p = lambda_ema * state.prototypes[c] + (1 - lambda_ema) * qmean
        else:
            p = qmean
        norm = np.linalg.norm(p)
        if norm > 0:
            state.prototypes[c] = p / norm
            state.proto_ready[c] = True
    return state


def source_class_posterior(bank: GmmBank, f) -> np.ndarray:
    """p_s(c | f) = sum_m p_s(c, m | f) with uniform class priors. Shape (N, C)."""
    table = joint_log_table(bank, f)
    n = table.shape[0]
    per_class = lse(table, axis=2)
    return np.exp(per_class - lse(per_class, axis=1, keepdims=True)).reshape(n, bank.C)


def apply_prior_ratio(posterior, delta_target, delta_source) -> np.ndarray:
    """Reweight by delta_target / delta_source and renormalize each row."""
    p = np.atleast_2d(posterior) * (np.asarray(delta_target) / np.asarray(delta_source))[None, :]
    return p / p.sum(axis=1, keepdims=True)


def shift_corrected_posterior(bank: GmmBank, state: TargetState, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    out = apply_prior_ratio(source_class_posterior(bank, f), state.delta_target, state.delta_source)
    return out[0] if f.ndim == 1 else out


def prototype_affinity(state: TargetState, f) -> np.ndarray:
    """softmax over classes of cosine(target prototype, f). Shape (N, C)."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    fn = f / np.linalg.norm(f, axis=1, keepdims=True)
    # prototypes are unit-norm once ready; unready rows are zero -> cosine 0
    cos = fn @ state.prototypes.T
    return softmax(cos, axis=1)


def pseudo_label_scores(bank: GmmBank, state: TargetState, f) -> np.ndarray:
    """Per-class score: corrected GMM posterior times prototype affinity."""
    return shift_corrected_posterior(bank, state, np.atleast_2d(f)) * prototype_affinity(state, f)


def pseudo_label_target(bank: GmmBank, state: TargetState, f):
    """Return ``(class, score)`` for one embedding, or arrays for a stack."""
    f = np.asarray(f, dtype=np.float64)
    scores = pseudo_label_scores(bank, state, f)
    cls = np.argmax(scores, axis=1)
    best = scores[np.arange(len(scores)), cls]
    if f.ndim == 1:
        return int(cls[0]), float(best[0])
    return cls, best


@dataclass
class SceneGmm:
    means: Dict[int, np.ndarray] = field(default_factory=dict)
    sigmas: Dict[int, float] = field(default_factory=dict)

    def __contains__(self, k):
        return k in self.means

    @property
    def classes(self):
        return sorted(self.means)


def fit_scene_gmm(features, weak_labels, pseudo_labels, var_floor: float = 1e-4,
                  mode: str = "hard") -> SceneGmm:
    """One component per weakly labeled class of a scene.

    The mean comes from the weakly labeled pixels; the spread is the root mean
    squared distance to that mean over pixels pseudo-labeled with the class.
    In ``soft`` mode ``pseudo_labels`` is an (N, C) probability table and the
    spread is ``sqrt(sum_n p[n, k] ||f_n - mu_k||^2 / N)``.
    """
    f = np.asarray(features, dtype=np.float64)
    weak = np.asarray(weak_labels)
    if not np.any(weak >= 0):
        raise ValueError("scene has no weakly labeled pixel")
    out = SceneGmm()
    for k in np.unique(weak[weak >= 0]):
        k = int(k)
        mu = f[weak == k].mean(axis=0)
        d2 = np.sum((f - mu) ** 2, axis=1)
        if mode == "hard":
            members = np.asarray(pseudo_labels) == k
            sigma = np.sqrt(d2[members].mean()) if members.any() else var_floor
        elif mode == "soft":
            p = np.asarray(pseudo_labels, dtype=np.float64)[:, k]
            sigma = np.sqrt(np.sum(p * d2) / len(f))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        out.means[k] = mu
        out.sigmas[k] = max(float(sigma), var_floor)
    return out


def scene_alpha(scene_gmm: SceneGmm, f, k: int, bank: Optional[GmmBank] = None,
                alpha_sigma: str = "trace"):
    """exp(-||f - mu_k||^2 / (2 sigma_k)) for the positive class ``k``.

    If the scene has no weak label of class ``k`` the value falls back to the
    source-GMM weight against class ``k``'s nearest component.
    """
    f = np.asarray(f, dtype=np.float64)
    if k in scene_gmm:
        return gmm_alpha(f, scene_gmm.means[k], scene_gmm.sigmas[k])
    if bank is None:
        raise ValueError(f"class {k} absent from scene and no source GMM for fallback")
    return source_alpha(bank, f, k, alpha_sigma)


def source_alpha(bank: GmmBank, f, k, alpha_sigma: str = "trace"):
    """Source-GMM weight of ``f`` against class ``k``'s most probable component."""
    f2 = np.atleast_2d(np.asarray(f, dtype=np.float64))
    k = np.broadcast_to(np.asarray(k), (len(f2),))
    table = joint_log_table(bank, f2)
    m = np.argmax(table[np.arange(len(f2)), k], axis=1)
    sigma = component_sigma(bank.variances[k, m], alpha_sigma)
    a = gmm_alpha(f2, bank.means[k, m], sigma)
    return float(a[0]) if np.asarray(f).ndim == 1 else a


def scene_alpha_batch(scene_gmm: SceneGmm, f, k, fallback) -> np.ndarray:
    """Vectorized :func:`scene_alpha`; ``fallback`` holds precomputed source weights."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    k = np.asarray(k)
    out = np.array(fallback, dtype=np.float64, copy=True)
    for c in scene_gmm.classes:
        rows = k == c
        if rows.any():
            out[rows] = gmm_alpha(f[rows], scene_gmm.means[c], scene_gmm.sigmas[c])
    return out


def _histogram(labels, n_classes: int, floor: float) -> np.ndarray:
    h = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    h = np.maximum(h / h.sum(), floor)
    return h / h.sum()


def ema_prior(prior, labels, lambda_ema: float, floor: float) -> np.ndarray:
    new = lambda_ema * prior + (1 - lambda_ema) * _histogram(labels, len(prior), floor)
    new = np.maximum(new, floor)
    return new / new.sum()


def update_priors(state: TargetState, source_labels, target_pseudo_labels,
                  lambda_ema: float) -> TargetState:
    """Fold batch class histograms into the EMA source and target priors.

    An empty side leaves that prior unchanged.
    """
    src = np.asarray(source_labels)
    tgt = np.asarray(target_pseudo_labels)
    if len(src) == 0 and len(tgt) == 0:
        raise ValueError("need at least one label or pseudo-label")
    if len(src):
        state.delta_source = ema_prior(state.delta_source, src, lambda_ema, state.prior_floor)
    if len(tgt):
        state.delta_target = ema_prior(state.delta_target, tgt, lambda_ema, state.prior_floor)
    return state
