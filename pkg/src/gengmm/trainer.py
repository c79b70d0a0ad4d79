"""Teacher-student training loop over labeled-source, unlabeled-source and
target streams.

Everything that decides a training target (gate predictions, pseudo-labels,
prototype choices, α and w weights) is computed from the teacher; only the
loss and its gradient touch the student.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from . import model as mdl
from .core_types import LABELED_KINDS, WEAK_KINDS, GenGmmError, LabelKind, RunConfig, Scene
from .gmm_density import GmmBank, gated_update, joint_log_table
from .losses_grad import LossInputs, confidence_weights, total_loss
from .prototype_select import select_batch
from .synth_bench import evaluate
from .target_adapt import (
    TargetState,
    fit_scene_gmm,
    pseudo_label_scores,
    scene_alpha_batch,
    source_alpha,
    update_priors,
    update_target_bank,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("iter", "l_ce_l", "l_ce_u", "l_cl", "mean_alpha", "mean_w", "target_miou")


class DivergenceError(GenGmmError):
    """Raised when a loss turns non-finite; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class PixelPool:
    raw: np.ndarray
    labels: np.ndarray


def labeled_pool(scenes: Sequence[Scene]) -> PixelPool:
    raws, labs = [], []
    for s in scenes:
        m = np.isin(s.label_kind.ravel(), [int(k) for k in LABELED_KINDS])
        if m.any():
            raws.append(s.flat_features()[m])
            labs.append(s.label_class.ravel()[m].astype(np.int64))
    if not raws:
        return PixelPool(np.zeros((0, scenes[0].raw_dim) if scenes else (0, 0)), np.zeros(0, np.int64))
    return PixelPool(np.concatenate(raws).astype(np.float64), np.concatenate(labs))


def class_balanced_sample(labels, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` pool indices with equal expected counts per present class.

    Each pixel's sampling probability is inversely proportional to its class
    frequency; absent classes simply get no mass.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot sample from an empty pool")
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    p = 1.0 / counts[inverse]
    p /= p.sum()
    return rng.choice(len(labels), size=size, replace=True, p=p)


@dataclass
class Streams:
    source: List[Scene]
    target: List[Scene]
    s_labeled: np.ndarray  # indices of source scenes with any label
    s_unlabeled: np.ndarray
    t_weak: np.ndarray  # indices of target scenes with weak labels
    t_unlabeled: np.ndarray

    @classmethod
    def from_scenes(cls, source, target) -> "Streams":
        lab = np.array([np.any(s.label_kind != LabelKind.UNLABELED) for s in source], dtype=bool)
        weak = np.array([np.isin(s.label_kind, [int(k) for k in WEAK_KINDS]).any() for s in target], dtype=bool)
        return cls(list(source), list(target), np.flatnonzero(lab), np.flatnonzero(~lab),
                   np.flatnonzero(weak), np.flatnonzero(~weak))


@dataclass
class TrainResult:
    pair: mdl.TeacherStudent
    initial: Dict[str, np.ndarray]
    bank: GmmBank
    state: TargetState
    trace: List[dict]
    branches: List[tuple]
    rng: np.random.Generator
    config: RunConfig
    final_eval: Optional[dict] = None


def _scene_batch(scenes, ids, rng, per_scene):
    """Full-scene arrays for the teacher plus a per-scene pixel subsample for the student."""
    raw, kind, cls, sid, sub = [], [], [], [], []
    offset = 0
    for i in ids:
        s = scenes[i]
        n = s.label_kind.size
        raw.append(s.flat_features().astype(np.float64))
        kind.append(s.label_kind.ravel())
        cls.append(s.label_class.ravel().astype(np.int64))
        sid.append(np.full(n, i))
        k = min(per_scene, n)
        sub.append(offset + np.sort(rng.choice(n, size=k, replace=False)))
        offset += n
    return (np.concatenate(raw), np.concatenate(kind), np.concatenate(cls),
            np.concatenate(sid), np.concatenate(sub))


def _finite_or_raise(it, what, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite {what} at iteration {it}", {"iteration": it, "where": what})


def _teacher_forward(teacher, x, it) -> mdl.Forward:
    """Teacher pass that treats non-finite outputs or a collapsed (zero) projection as divergence."""
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        tf = mdl.forward(teacher, x)
    _finite_or_raise(it, "teacher output", tf.logits, tf.f)
    if np.any(tf.z.any(axis=1) == 0):
        raise DivergenceError(f"zero embedding at iteration {it}", {"iteration": it, "where": "projection"})
    return tf


class _Collector:
    """Accumulates per-pixel loss roles for one optimization step."""

    def __init__(self, C):
        self.C = C
        self.x, self.labels, self.pseudo, self.stw = [], [], [], []
        self.cl_rows, self.protos, self.pos, self.alpha = [], [], [], []
        self.n = 0

    def add(self, x, labels=None, pseudo=None, stw=None, cl=None):
        n = len(x)
        self.x.append(x)
        self.labels.append(np.full(n, -1) if labels is None else labels)
        self.pseudo.append(np.full(n, -1) if pseudo is None else pseudo)
        self.stw.append(np.zeros(n) if stw is None else stw)
        if cl is not None:
            rows, protos, pos, alpha = cl
            self.cl_rows.append(self.n + rows)
            self.protos.append(protos)
            self.pos.append(pos)
            self.alpha.append(alpha)
        self.n += n

    def build(self, D) -> LossInputs:
        cat = np.concatenate
        if self.cl_rows:
            cl = (cat(self.cl_rows), cat(self.protos), cat(self.pos), cat(self.alpha))
        else:
            cl = (np.zeros(0, np.int64), np.zeros((0, self.C, D)), np.zeros(0, np.int64), np.zeros(0))
        return LossInputs(cat(self.x), cat(self.labels), cat(self.pseudo), cat(self.stw), *cl)


def train(cfg: RunConfig, source: Sequence[Scene], target: Sequence[Scene],
          heldout: Optional[Sequence[Scene]] = None, observer=None) -> TrainResult:
    """Run ``cfg.iterations`` steps; returns the trained pair and the metrics trace.

    ``observer``, if given, is called as ``observer(event, **info)`` at the
    branch and pseudo-label points; tests use it to audit data flow.
    """
    streams = Streams.from_scenes(source, target)
    raw_dim = source[0].raw_dim
    init_rng = np.random.default_rng([cfg.seed, 1])
    rng = np.random.default_rng([cfg.seed, 2])
    params = mdl.init_params(raw_dim, cfg.hidden_dim, cfg.D, cfg.C, init_rng)
    initial = mdl.copy_params(params)
    pair = mdl.TeacherStudent(params)
    opt = mdl.SgdMomentum(pair.student, cfg.lr, cfg.momentum)
    bank = GmmBank.from_config(cfg)
    state = TargetState.from_config(cfg)
    pool = labeled_pool([source[i] for i in streams.s_labeled])
    trace, branches = [], []
    notify = observer or (lambda event, **kw: None)
    if len(pool.labels) == 0 and cfg.iterations > 0:
        raise GenGmmError("scenario has no labeled source pixels")

    for it in range(1, cfg.iterations + 1):
        teacher = pair.teacher
        use_cl = cfg.use_gmm_cl and cfg.lambda_cl != 0
        st_on = cfg.use_unlabeled and it > cfg.selftrain_warmup
        cl_on = use_cl and it > cfg.warmup_iters and bank.ready
        col = _Collector(cfg.C)
        alphas, ws = [], []

        # labeled source
        idx = class_balanced_sample(pool.labels, cfg.labeled_batch, rng)
        x_l, y_l = pool.raw[idx], pool.labels[idx]
        tf = _teacher_forward(teacher, x_l, it)
        t_pred = np.argmax(tf.logits, axis=1)
        notify("teacher_predictions", branch="labeled_source", predictions=t_pred)
        if use_cl:
            gated_update(bank, tf.f, y_l, t_pred, cfg)
        cl = None
        if cl_on:
            if cfg.noisy_source:
                sel = select_batch(bank, tf.f, alpha_sigma=cfg.alpha_sigma)
            else:
                sel = select_batch(bank, tf.f, labels=y_l)
            cl = (np.arange(len(x_l)), sel.prototypes, sel.positive, sel.alpha)
            alphas.append(sel.alpha)
        col.add(x_l, labels=y_l, cl=cl)
        branches.append((it, "labeled_source"))

        # unlabeled source
        if len(streams.s_unlabeled) and (st_on or cl_on):
            ids = rng.choice(streams.s_unlabeled, size=min(cfg.scenes_per_batch, len(streams.s_unlabeled)),
                             replace=False)
            raw, _, _, sid, sub = _scene_batch(streams.source, ids, rng, cfg.pixels_per_scene)
            tf = _teacher_forward(teacher, raw, it)
            prob = softmax(tf.logits, axis=1)
            pseudo, conf = prob.argmax(axis=1), prob.max(axis=1)
            notify("teacher_predictions", branch="unlabeled_source", predictions=pseudo)
            pl = stw = None
            if st_on:
                w = confidence_weights(conf, sid, cfg.beta)
                pl, stw = pseudo[sub], w[sub]
                ws.append(stw)
            cl = None
            if cl_on:
                sel = select_batch(bank, tf.f[sub], alpha_sigma=cfg.alpha_sigma)
                cl = (np.arange(len(sub)), sel.prototypes, sel.positive, sel.alpha)
                alphas.append(sel.alpha)
            col.add(raw[sub], pseudo=pl, stw=stw, cl=cl)
            branches.append((it, "unlabeled_source"))

        # target
        ids = rng.choice(len(streams.target), size=min(cfg.scenes_per_batch, len(streams.target)),
                         replace=False)
        raw, kind, cls, sid, sub = _scene_batch(streams.target, ids, rng, cfg.pixels_per_scene)
        weak = np.where(np.isin(kind, [int(k) for k in WEAK_KINDS]), cls, -1)
        tf = _teacher_forward(teacher, raw, it)
        prob = softmax(tf.logits, axis=1)
        pseudo, conf = prob.argmax(axis=1), prob.max(axis=1)
        notify("teacher_predictions", branch="target", predictions=pseudo)
        update_priors(state, y_l, pseudo[conf > cfg.beta], cfg.lambda_ema)

        gmm_ready = use_cl and bank.ready
        if gmm_ready:
            scores = pseudo_label_scores(bank, state, tf.f)
            yhat = np.argmax(scores, axis=1)
            notify("target_pseudo_labels", embeddings=tf.f, labels=yhat)
        else:
            scores = prob
            yhat = pseudo.copy()
        yhat = np.where(weak >= 0, weak, yhat)
        if use_cl:
            update_target_bank(state, tf.f, yhat, cfg.k_top, cfg.lambda_ema)

        # per-pixel alpha from the scene GMM where weak labels exist, else 1
        alpha_t = np.ones(len(raw))
        has_weak = np.zeros(len(raw), dtype=bool)
        for s in ids:
            m = sid == s
            if not np.any(weak[m] >= 0):
                continue
            has_weak[m] = True
            if gmm_ready:
                if cfg.scene_sigma == "soft":
                    p = scores[m] / scores[m].sum(axis=1, keepdims=True)
                    p[weak[m] >= 0] = np.eye(cfg.C)[weak[m][weak[m] >= 0]]
                else:
                    p = yhat[m]
                sg = fit_scene_gmm(tf.f[m], weak[m], p, cfg.var_floor, cfg.scene_sigma)
                fb = source_alpha(bank, tf.f[m], yhat[m], cfg.alpha_sigma)
                alpha_t[m] = scene_alpha_batch(sg, tf.f[m], yhat[m], fb)
        branches.append((it, "target_weak" if has_weak.any() else "target_unlabeled"))

        labels_t = weak[sub]
        unl = labels_t < 0
        pl = stw = None
        if st_on:
            weight = confidence_weights(conf, sid, cfg.beta)
            if cfg.selftrain_weight == "alpha" and gmm_ready:
                weight = np.where(has_weak, alpha_t, weight)
            pl = np.where(unl, pseudo[sub], -1)
            stw = np.where(unl, weight[sub], 0.0)
            ws.append(stw[unl])
        cl = None
        if cl_on:
            sel = select_batch(bank, tf.f[sub], labels=yhat[sub])
            cl = (np.arange(len(sub)), sel.prototypes, sel.positive, alpha_t[sub])
            alphas.append(alpha_t[sub])
        col.add(raw[sub], labels=labels_t, pseudo=pl, stw=stw, cl=cl)

        inputs = col.build(cfg.D)
        try:
            rep = total_loss(pair.student, inputs, cfg.tau, cfg.lambda_cl if cl_on else 0.0)
        except FloatingPointError as exc:
            raise DivergenceError(str(exc), {"iteration": it}) from exc
        if not np.isfinite(rep.total) or not all(np.all(np.isfinite(g)) for g in rep.grads.values()):
            raise DivergenceError(f"non-finite loss at iteration {it}",
                                  {"iteration": it, "l_ce_l": rep.l_ce_labeled,
                                   "l_ce_u": rep.l_ce_unlabeled, "l_cl": rep.l_contrastive})
        opt.step(pair.student, rep.grads)
        _finite_or_raise(it, "student parameters", *pair.student.values())
        mdl.teacher_update(pair, cfg.lambda_teacher)

        if it % cfg.eval_interval == 0 or it == cfg.iterations:
            miou = evaluate(pair.teacher, heldout, cfg.C).miou if heldout else float("nan")
            row = {
                "iter": it,
                "l_ce_l": rep.l_ce_labeled,
                "l_ce_u": rep.l_ce_unlabeled,
                "l_cl": rep.l_contrastive,
                "mean_alpha": float(np.mean(np.concatenate(alphas))) if alphas else float("nan"),
                "mean_w": float(np.mean(np.concatenate(ws))) if ws and len(np.concatenate(ws)) else float("nan"),
                "target_miou": miou,
                "delta_target": state.delta_target.tolist(),
                "delta_source": state.delta_source.tolist(),
            }
            trace.append(row)
            log.info("iter %d  ce_l %.4f  ce_u %.4f  cl %.4f  miou %.4f", it, row["l_ce_l"],
                     row["l_ce_u"], row["l_cl"], miou)

    result = TrainResult(pair, initial, bank, state, trace, branches, rng, cfg)
    if heldout:
        result.final_eval = evaluate(pair.teacher, heldout, cfg.C).to_dict()
    return result

