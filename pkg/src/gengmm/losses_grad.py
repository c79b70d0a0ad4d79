"""Loss terms with closed-form gradients, plus a central-difference checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from . import model as mdl


def contrastive_batch(f, prototypes, positive, alpha, tau: float):
    """Weighted InfoNCE of each embedding against its C prototypes.

    Parameters
    ----------
    f : (N, D) embeddings
    prototypes : (N, K, D) candidate prototypes per embedding
    positive : (N,) index of the positive slot
    alpha : (N,) per-pixel weights
    tau : temperature, applied inside every exponent

    Returns
    -------
    values : (N,) per-pixel losses
    grad : (N, D) gradient of each value wrt its embedding
    """
    f = np.atleast_2d(f)
    n = len(f)
    logits = np.einsum("nd,nkd->nk", f, prototypes) / tau
    lse = logsumexp(logits, axis=1)
    rows = np.arange(n)
    alpha = np.asarray(alpha, dtype=np.float64)
    values = alpha * (lse - logits[rows, positive])
    p = np.exp(logits - lse[:, None])
    p[rows, positive] -= 1.0
    grad = (alpha / tau)[:, None] * np.einsum("nk,nkd->nd", p, prototypes)
    return values, grad


def contrastive_loss(f, selection, tau: float):
    """Single-pixel loss value and gradient for a :class:`PrototypeSelection`."""
    protos = selection.prototypes()[None]
    v, g = contrastive_batch(np.asarray(f, dtype=np.float64)[None], protos, np.array([0]),
                             np.array([selection.alpha]), tau)
    return float(v[0]), g[0]


def ce_labeled(logits, labels):
    """Mean cross-entropy over pixels with ``labels >= 0``."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels)
    mask = labels >= 0
    grad = np.zeros_like(logits)
    count = int(mask.sum())
    if count == 0:
        return 0.0, grad
    lp = log_softmax(logits[mask], axis=1)
    y = labels[mask]
    value = -lp[np.arange(count), y].mean()
    g = np.exp(lp)
    g[np.arange(count), y] -= 1.0
    grad[mask] = g / count
    return float(value), grad


def confidence_weights(confidences, scene_ids, beta: float) -> np.ndarray:
    """Per-pixel w: fraction of the pixel's scene with confidence above beta."""
    conf = np.asarray(confidences)
    sid = np.asarray(scene_ids)
    w = np.empty(len(conf))
    for s in np.unique(sid):
        m = sid == s
        w[m] = np.mean(conf[m] > beta)
    return w


def ce_selftrain(logits, pseudo_labels, confidences, beta: float, scene_ids=None,
                 alpha_override=None):
    """Weighted self-training cross-entropy.

    Returns ``(value, grad, weights)``. Weights are the per-scene w unless
    ``alpha_override`` supplies per-pixel weights.
    """
    logits = np.atleast_2d(logits)
    n = len(logits)
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad, np.zeros(0)
    if scene_ids is None:
        scene_ids = np.zeros(n, dtype=np.int64)
    if alpha_override is not None:
        weights = np.asarray(alpha_override, dtype=np.float64)
    else:
        weights = confidence_weights(confidences, scene_ids, beta)
    y = np.asarray(pseudo_labels)
    lp = log_softmax(logits, axis=1)
    rows = np.arange(n)
    value = float(np.mean(weights * -lp[rows, y]))
    g = np.exp(lp)
    g[rows, y] -= 1.0
    grad = g * (weights / n)[:, None]
    return value, grad, weights


@dataclass
class LossInputs:
    """Everything one optimization step needs, with selections frozen.

    ``labels`` marks pixels in the labeled cross-entropy (-1 = not included).
    ``pseudo`` marks pixels in the self-training term; their weights are given
    directly in ``st_weight``. ``cl_index`` picks the rows that carry a
    contrastive term, aligned with ``protos``/``positive``/``alpha``.
    """

    x: np.ndarray
    labels: np.ndarray
    pseudo: np.ndarray
    st_weight: np.ndarray
    cl_index: np.ndarray
    protos: np.ndarray
    positive: np.ndarray
    alpha: np.ndarray


@dataclass
class LossReport:
    l_contrastive: float
    l_ce_labeled: float
    l_ce_unlabeled: float
    total: float
    alpha: np.ndarray
    w: np.ndarray
    grads: Dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        for v in (self.l_contrastive, self.l_ce_labeled, self.l_ce_unlabeled):
            if not np.isfinite(v) or v < -1e-12:
                raise FloatingPointError(f"loss term out of range: {v}")


def total_loss(params, inputs: LossInputs, tau: float, lambda_cl: float = 1.0) -> LossReport:
    """L = CE_labeled + CE_selftrain + lambda_cl * mean(contrastive)."""
    fw = mdl.forward(params, inputs.x)
    l_l, g_l = ce_labeled(fw.logits, inputs.labels)

    u = np.flatnonzero(inputs.pseudo >= 0)
    dlogits = g_l
    l_u = 0.0
    if len(u):
        l_u, g_u, _ = ce_selftrain(fw.logits[u], inputs.pseudo[u], None, 1.0,
                                   alpha_override=inputs.st_weight[u])
        dlogits = dlogits.copy()
        dlogits[u] += g_u

    df = None
    l_cl = 0.0
    k = inputs.cl_index
    if len(k) and lambda_cl != 0:
        vals, gf = contrastive_batch(fw.f[k], inputs.protos, inputs.positive, inputs.alpha, tau)
        l_cl = float(vals.mean())
        df = np.zeros_like(fw.f)
        np.add.at(df, k, gf * (lambda_cl / len(k)))
    elif len(k):
        l_cl = float(contrastive_batch(fw.f[k], inputs.protos, inputs.positive, inputs.alpha, tau)[0].mean())

    grads = mdl.backward(params, fw, dlogits=dlogits, df=df)
    total = l_l + l_u + lambda_cl * l_cl
    return LossReport(l_cl, l_l, l_u, total, inputs.alpha, inputs.st_weight[u] if len(u) else np.zeros(0), grads)


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = fn(x)
        x[i] = orig - step
        lo = fn(x)
        x[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
