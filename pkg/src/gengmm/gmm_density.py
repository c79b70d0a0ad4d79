"""Per-class diagonal Gaussian mixtures fitted online with momentum Sinkhorn-EM.

Every class keeps a FIFO queue of embeddings that passed the agreement gate.
Each update runs one entropic-transport E-step over the queue contents,
followed by an exponential-moving-average M-step.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .core_types import NumericalInstability

LOG_2PI = np.log(2.0 * np.pi)


def lse(a: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """log-sum-exp over ``axis`` for finite inputs (leaner than scipy's)."""
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


@dataclass
class ClassGmm:
    cls: int
    weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, D)
    variances: np.ndarray  # (M, D)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def copy(self) -> "ClassGmm":
        return ClassGmm(self.cls, self.weights.copy(), self.means.copy(), self.variances.copy())


def log_gaussian_diag(x, means, variances) -> np.ndarray:
    """log N(x; mean, diag(var)) for every row of ``x`` and every component.

    ``x`` is (N, D); ``means`` and ``variances`` are (..., D). Returns
    (N, ...).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lead = means.shape[:-1]
    mu = means.reshape(-1, means.shape[-1])
    var = variances.reshape(-1, variances.shape[-1])
    prec = 1.0 / var
    # expanded Mahalanobis form keeps this a pair of matmuls
    maha = (
        (x * x) @ prec.T
        - 2.0 * x @ (mu * prec).T
        + np.sum(mu * mu * prec, axis=1)[None, :]
    )
    maha = np.maximum(maha, 0.0)
    log_det = np.sum(np.log(var), axis=1)
    out = -0.5 * (maha + log_det[None, :] + x.shape[1] * LOG_2PI)
    return out.reshape((x.shape[0],) + lead)


def _component_log_joint(gmm: ClassGmm, f) -> np.ndarray:
    return log_gaussian_diag(f, gmm.means, gmm.variances) + np.log(gmm.weights)[None, :]


def log_class_conditional(gmm: ClassGmm, f):
    """log p(f | c) for one embedding (scalar) or a stack (vector)."""
    f = np.asarray(f, dtype=np.float64)
    out = lse(_component_log_joint(gmm, f), axis=1)
    return float(out[0]) if f.ndim == 1 else out


def component_posterior(gmm: ClassGmm, f) -> np.ndarray:
    """p(m | f, c), shape (M,) for one embedding or (N, M) for a stack."""
    f = np.asarray(f, dtype=np.float64)
    lj = _component_log_joint(gmm, f)
    post = np.exp(lj - lse(lj, axis=1, keepdims=True))
    return post[0] if f.ndim == 1 else post


def sinkhorn_e_step(gmm: ClassGmm, embeddings, iters: int = 10, eps: float = 0.05,
                    log_likelihood: Optional[np.ndarray] = None) -> np.ndarray:
    """Entropic-transport responsibilities between N embeddings and M components.

    Returns the (N, M) transport plan whose rows sum to 1/N and whose columns
    sum to the mixture weights. Multiply by N for per-pixel responsibilities.
    """
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = x.shape[0]
    if n < 1:
        raise ValueError("need at least one embedding")
    if log_likelihood is None:
        log_likelihood = log_gaussian_diag(x, gmm.means, gmm.variances)
    if not np.all(np.isfinite(log_likelihood)):
        raise NumericalInstability("non-finite log-likelihoods in Sinkhorn E-step")
    kern = log_likelihood / eps
    log_a = np.full(n, -np.log(n))
    log_b = np.log(gmm.weights)
    log_u = np.zeros(n)
    log_v = np.zeros(gmm.n_components)
    for _ in range(max(int(iters), 1)):
        log_u = log_a - lse(kern + log_v[None, :], axis=1)
        log_v = log_b - lse(kern + log_u[:, None], axis=0)
    plan = np.exp(log_u[:, None] + kern + log_v[None, :])
    if not np.all(np.isfinite(plan)):
        raise NumericalInstability("Sinkhorn plan became non-finite")
    return round_to_marginals(plan, np.exp(log_a), gmm.weights)


def round_to_marginals(plan, r, c) -> np.ndarray:
    """Project an approximate transport plan onto {P >= 0 : P1 = r, P'1 = c}.

    Rounding step of Altschuler, Weed and Rigollet (2017): shrink rows and
    columns that overshoot, then spread the remaining deficit as a rank-one
    correction. A few fixed Sinkhorn sweeps can leave the row marginals far
    off when the log-likelihoods span many nats; this makes the plan exactly
    feasible up to rounding.
    """
    p = np.asarray(plan, dtype=np.float64)
    rs = p.sum(axis=1)
    p = p * np.minimum(1.0, np.divide(r, rs, out=np.ones_like(rs), where=rs > 0))[:, None]
    cs = p.sum(axis=0)
    p = p * np.minimum(1.0, np.divide(c, cs, out=np.ones_like(cs), where=cs > 0))[None, :]
    er = np.maximum(r - p.sum(axis=1), 0.0)
    ec = np.maximum(c - p.sum(axis=0), 0.0)
    total = ec.sum()
    if total > 0:
        p = p + np.outer(er, ec) / total
    return p


def momentum_m_step(gmm: ClassGmm, embeddings, responsibilities, lambda_ema: float,
                    var_floor: float = 1e-4, min_mass: float = 1e-12) -> ClassGmm:
    """Weighted EM M-step blended into the current parameters with momentum.

    ``responsibilities`` may be a transport plan or per-pixel responsibilities;
    rows are rescaled to sum to one before the batch estimates are formed.
    """
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    r = np.asarray(responsibilities, dtype=np.float64)
    row = r.sum(axis=1, keepdims=True)
    r = np.divide(r, row, out=np.zeros_like(r), where=row > 0)
    mass = r.sum(axis=0)  # (M,)
    live = mass > min_mass

    new = gmm.copy()
    lam = lambda_ema
    safe = np.where(live, mass, 1.0)
    mu_hat = (r.T @ x) / safe[:, None]
    var_hat = (r.T @ (x * x)) / safe[:, None] - mu_hat**2
    var_hat = np.maximum(var_hat, 0.0)
    pi_hat = mass / mass.sum() if mass.sum() > 0 else gmm.weights

    new.means[live] = lam * gmm.means[live] + (1 - lam) * mu_hat[live]
    new.variances[live] = lam * gmm.variances[live] + (1 - lam) * var_hat[live]
    new.variances = np.maximum(new.variances, var_floor)
    w = gmm.weights.copy()
    w[live] = lam * gmm.weights[live] + (1 - lam) * pi_hat[live]
    new.weights = w / w.sum()
    return new


def joint_log_table(bank: "GmmBank", f) -> np.ndarray:
    """log(π_{c,m} N(f; μ_{c,m}, Σ_{c,m})) for every embedding, shape (N, C, M)."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    return log_gaussian_diag(f, bank.means, bank.variances) + np.log(bank.weights)[None]


def joint_class_component_posterior(bank: "GmmBank", f, class_priors=None) -> np.ndarray:
    """p(c, m | f) with the given class priors (uniform when omitted).

    Shape (C, M) for one embedding or (N, C, M) for a stack.
    """
    f = np.asarray(f, dtype=np.float64)
    table = joint_log_table(bank, f)
    if class_priors is not None:
        pri = np.asarray(class_priors, dtype=np.float64)
        table = table + np.log(pri)[None, :, None]
    n = table.shape[0]
    flat = table.reshape(n, -1)
    post = np.exp(flat - lse(flat, axis=1, keepdims=True)).reshape(table.shape)
    return post[0] if f.ndim == 1 else post


class FifoQueue:
    """Fixed-capacity ring buffer of embeddings; oldest entries are evicted first."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = int(capacity)
        self.buf = np.zeros((self.capacity, dim))
        self.head = 0  # next write slot
        self.count = 0

    def __len__(self):
        return self.count

    def push(self, x) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if len(x) == 0:
            return
        if len(x) > self.capacity:
            x = x[-self.capacity:]
        idx = (self.head + np.arange(len(x))) % self.capacity
        self.buf[idx] = x
        self.head = int((self.head + len(x)) % self.capacity)
        self.count = min(self.capacity, self.count + len(x))

    def contents(self) -> np.ndarray:
        """Entries in insertion order, oldest first."""
        if self.count < self.capacity:
            return self.buf[: self.count].copy()
        return np.concatenate([self.buf[self.head:], self.buf[: self.head]])

    def mean(self) -> np.ndarray:
        return self.contents().mean(axis=0)

    def state(self) -> dict:
        return {"capacity": self.capacity, "buf": self.buf.copy(), "head": self.head, "count": self.count}

    @classmethod
    def from_state(cls, st: dict) -> "FifoQueue":
        q = cls(st["capacity"], st["buf"].shape[1])
        q.buf = np.array(st["buf"], dtype=np.float64)
        q.head = int(st["head"])
        q.count = int(st["count"])
        return q


def kmeanspp_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centre drawn proportional to squared distance."""
    centres = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centres.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centres)


class GmmBank:
    """One diagonal GMM and one embedding queue per class.

    Parameters are stored stacked, ``means[c, m]`` etc., so the density of a
    whole batch against every component is one vectorized call.
    """

    def __init__(self, n_classes: int, n_components: int, dim: int, capacity: int = 32768,
                 var_floor: float = 1e-4, seed: int = 0):
        self.C, self.M, self.D = n_classes, n_components, dim
        self.var_floor = var_floor
        self.weights = np.full((n_classes, n_components), 1.0 / n_components)
        self.means = np.zeros((n_classes, n_components, dim))
        self.variances = np.ones((n_classes, n_components, dim))
        self.initialized = np.zeros(n_classes, dtype=bool)
        self.starved = np.zeros((n_classes, n_components), dtype=np.int64)
        self.queues = [FifoQueue(capacity, dim) for _ in range(n_classes)]
        self.rng = np.random.default_rng(seed)

    @classmethod
    def from_config(cls, cfg) -> "GmmBank":
        return cls(cfg.C, cfg.M, cfg.D, cfg.bank_capacity, cfg.var_floor, seed=cfg.seed + 7919)

    @property
    def ready(self) -> bool:
        return bool(np.all(self.initialized))

    def gmm(self, c: int) -> ClassGmm:
        return ClassGmm(c, self.weights[c].copy(), self.means[c].copy(), self.variances[c].copy())

    def set_gmm(self, g: ClassGmm) -> None:
        self.weights[g.cls] = g.weights
        self.means[g.cls] = g.means
        self.variances[g.cls] = g.variances

    def initialize_class(self, c: int) -> None:
        x = self.queues[c].contents()
        means = kmeanspp_seed(x, self.M, self.rng)
        scale = max(float(np.mean(np.var(x, axis=0))), self.var_floor)
        self.means[c] = means
        self.variances[c] = scale
        self.weights[c] = 1.0 / self.M
        self.initialized[c] = True

    def update_class(self, c: int, lambda_ema: float, iters: int, eps: float,
                     starve_limit: int = 100) -> None:
        """One Sinkhorn E-step and momentum M-step over class ``c``'s queue."""
        x = self.queues[c].contents()
        if len(x) == 0:
            return
        if not self.initialized[c]:
            if len(x) < self.M:
                return
            self.initialize_class(c)
        g = self.gmm(c)
        ll = log_gaussian_diag(x, g.means, g.variances)
        plan = sinkhorn_e_step(g, x, iters, eps, log_likelihood=ll)
        resp_mass = plan.sum(axis=0) * len(x)
        self.set_gmm(momentum_m_step(g, x, plan, lambda_ema, self.var_floor))

        starving = resp_mass < 1e-6
        self.starved[c] = np.where(starving, self.starved[c] + 1, 0)
        for m in np.flatnonzero(self.starved[c] >= starve_limit):
            mix = lse(ll + np.log(g.weights)[None, :], axis=1)
            worst = int(np.argmin(mix))
            self.means[c, m] = x[worst]
            self.variances[c, m] = np.mean(self.variances[c], axis=0)
            self.starved[c, m] = 0

    def snapshot(self) -> dict:
        return {
            "weights": self.weights.copy(),
            "means": self.means.copy(),
            "variances": self.variances.copy(),
            "initialized": self.initialized.copy(),
            "starved": self.starved.copy(),
            "queues": [q.state() for q in self.queues],
            "rng": self.rng.bit_generator.state,
        }

    def equals(self, other: "GmmBank") -> bool:
        if not all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("weights", "means", "variances", "initialized", "starved")
        ):
            return False
        return all(
            np.array_equal(a.contents(), b.contents()) for a, b in zip(self.queues, other.queues)
        )


def gated_update(bank: GmmBank, embeddings, labels, predictions, cfg) -> GmmBank:
    """Push gate-passing embeddings into the class queues, then refit.

    A pixel passes when the classifier's argmax equals its observed label.
    At most ``cfg.bank_push_per_class`` pixels per class are pushed, in batch
    order. Mutates and returns ``bank``.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    passed = (labels >= 0) & (labels == predictions)
    for c in range(bank.C):
        idx = np.flatnonzero(passed & (labels == c))[: cfg.bank_push_per_class]
        if len(idx):
            bank.queues[c].push(embeddings[idx])
    for c in range(bank.C):
        if len(bank.queues[c]):
            bank.update_class(c, cfg.lambda_ema, cfg.sinkhorn_iters, cfg.sinkhorn_eps,
                              cfg.starve_limit)
    return bank


def pushed_indices(labels, predictions, n_classes: int, per_class: int) -> List[np.ndarray]:
    """Indices :func:`gated_update` would push, per class."""
    labels = np.asarray(labels)
    passed = (labels >= 0) & (labels == np.asarray(predictions))
    return [np.flatnonzero(passed & (labels == c))[:per_class] for c in range(n_classes)]
