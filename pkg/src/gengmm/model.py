"""Small numpy model: ReLU encoder, two-layer projection head with L2
normalization, and a linear classification head on the encoder output.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

Params = Dict[str, np.ndarray]

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "Wc", "bc")


def init_params(in_dim: int, hidden: int, dim: int, n_classes: int, rng: np.random.Generator) -> Params:
    def he(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))

    return {
        "W1": he(in_dim, hidden),
        "b1": np.zeros(hidden),
        "W2": he(hidden, dim),
        "b2": np.zeros(dim),
        "W3": he(dim, dim),
        "b3": np.zeros(dim),
        "Wc": rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, n_classes)),
        "bc": np.zeros(n_classes),
    }


def copy_params(p: Params) -> Params:
    return {k: v.copy() for k, v in p.items()}


def params_equal(a: Params, b: Params) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@dataclass
class Forward:
    x: np.ndarray
    a1: np.ndarray  # encoder pre-activation
    h: np.ndarray  # encoder output
    a2: np.ndarray
    g: np.ndarray
    z: np.ndarray  # projection before normalization
    znorm: np.ndarray
    f: np.ndarray  # unit-norm embedding
    logits: np.ndarray


def forward(p: Params, x: np.ndarray) -> Forward:
    a1 = x @ p["W1"] + p["b1"]
    h = np.maximum(a1, 0.0)
    a2 = h @ p["W2"] + p["b2"]
    g = np.maximum(a2, 0.0)
    z = g @ p["W3"] + p["b3"]
    zn = np.linalg.norm(z, axis=1, keepdims=True)
    zn = np.maximum(zn, 1e-12)
    f = z / zn
    logits = h @ p["Wc"] + p["bc"]
    return Forward(x, a1, h, a2, g, z, zn, f, logits)


def embed(p: Params, x: np.ndarray) -> np.ndarray:
    return forward(p, x).f


def predict(p: Params, x: np.ndarray) -> np.ndarray:
    h = np.maximum(x @ p["W1"] + p["b1"], 0.0)
    return np.argmax(h @ p["Wc"] + p["bc"], axis=1)


def backward(p: Params, fw: Forward, dlogits=None, df=None) -> Params:
    """Gradients of a scalar loss given its gradients wrt logits and embeddings."""
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dh = np.zeros_like(fw.h)
    if dlogits is not None:
        grads["Wc"] = fw.h.T @ dlogits
        grads["bc"] = dlogits.sum(axis=0)
        dh += dlogits @ p["Wc"].T
    if df is not None:
        # d(z/|z|) = (df - f (f . df)) / |z|
        dz = (df - fw.f * np.sum(fw.f * df, axis=1, keepdims=True)) / fw.znorm
        grads["W3"] = fw.g.T @ dz
        grads["b3"] = dz.sum(axis=0)
        dg = dz @ p["W3"].T
        da2 = dg * (fw.a2 > 0)
        grads["W2"] = fw.h.T @ da2
        grads["b2"] = da2.sum(axis=0)
        dh += da2 @ p["W2"].T
    da1 = dh * (fw.a1 > 0)
    grads["W1"] = fw.x.T @ da1
    grads["b1"] = da1.sum(axis=0)
    return grads


class TeacherStudent:
    def __init__(self, student: Params, teacher: Params = None):
        self.student = student
        self.teacher = copy_params(student) if teacher is None else teacher


def teacher_update(pair: TeacherStudent, lambda_teacher: float) -> TeacherStudent:
    """teacher <- λ teacher + (1 - λ) student, in place."""
    for k, s in pair.student.items():
        t = pair.teacher[k]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}")
        t *= lambda_teacher
        t += (1.0 - lambda_teacher) * s
    return pair


class SgdMomentum:
    def __init__(self, params: Params, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params) -> None:
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v += g
            params[k] -= self.lr * v
