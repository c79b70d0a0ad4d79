"""Domain types shared across the package.

Scenes store labels as two parallel arrays (a kind code and a class id) so
that whole grids can be processed with numpy; :class:`LabelState` is the
per-pixel view of the same information.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, List, Optional, Sequence

import numpy as np


class GenGmmError(Exception):
    """Base class for package errors."""


class DegenerateFeature(GenGmmError):
    """Raised when a zero-norm vector is normalized."""


class NumericalInstability(GenGmmError):
    """Raised when non-finite values reach a numerical routine."""


class SpecError(GenGmmError):
    """Raised for infeasible scenario specifications."""


class ConfigError(GenGmmError):
    """Raised for malformed configuration."""


class LabelKind(enum.IntEnum):
    UNLABELED = 0
    FULL = 1
    POINT = 2
    COARSE = 3
    NOISY = 4


# kinds whose class can be used as (possibly noisy) supervision
LABELED_KINDS = (LabelKind.FULL, LabelKind.POINT, LabelKind.COARSE, LabelKind.NOISY)
WEAK_KINDS = (LabelKind.POINT, LabelKind.COARSE)


class Domain(enum.IntEnum):
    SOURCE = 0
    TARGET = 1


@dataclass(frozen=True)
class LabelState:
    kind: LabelKind
    cls: int = -1

    def __post_init__(self):
        if self.kind == LabelKind.UNLABELED:
            if self.cls != -1:
                raise ValueError("unlabeled pixels carry no class")
        elif self.cls < 0:
            raise ValueError(f"{self.kind.name} label needs a class id")

    @classmethod
    def full(cls, c: int) -> "LabelState":
        return cls(LabelKind.FULL, int(c))

    @classmethod
    def point(cls, c: int) -> "LabelState":
        return cls(LabelKind.POINT, int(c))

    @classmethod
    def coarse(cls, c: int) -> "LabelState":
        return cls(LabelKind.COARSE, int(c))

    @classmethod
    def noisy(cls, c: int) -> "LabelState":
        return cls(LabelKind.NOISY, int(c))

    @classmethod
    def unlabeled(cls) -> "LabelState":
        return cls(LabelKind.UNLABELED)

    @property
    def is_labeled(self) -> bool:
        return self.kind != LabelKind.UNLABELED


def normalize(raw, eps: float = 0.0) -> np.ndarray:
    """Project ``raw`` onto the unit sphere.

    Works on a single vector or on the last axis of a stack of vectors.
    Any zero-norm row raises :class:`DegenerateFeature`.
    """
    raw = np.asarray(raw, dtype=np.float64)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(norm <= eps) or not np.all(np.isfinite(norm)):
        raise DegenerateFeature("cannot normalize a zero-norm or non-finite vector")
    return raw / norm


@dataclass(frozen=True, eq=False)
class Scene:
    """One synthetic image: an H x W grid of raw features and labels.

    ``true_label`` is hidden ground truth. Training code must never read it;
    only :mod:`gengmm.synth_bench` evaluation does.
    """

    features: np.ndarray  # (H, W, R) float32
    label_kind: np.ndarray  # (H, W) uint8, LabelKind codes
    label_class: np.ndarray  # (H, W) int16, -1 where unlabeled
    true_label: np.ndarray  # (H, W) uint16
    domain: Domain

    def __post_init__(self):
        h, w = self.label_kind.shape
        if h * w == 0:
            raise ValueError("scene grid must be non-empty")
        if self.features.shape[:2] != (h, w) or self.true_label.shape != (h, w):
            raise ValueError("scene arrays disagree on grid shape")
        if self.label_class.shape != (h, w):
            raise ValueError("scene arrays disagree on grid shape")
        unl = self.label_kind == LabelKind.UNLABELED
        if np.any(self.label_class[unl] != -1) or np.any(self.label_class[~unl] < 0):
            raise ValueError("label classes inconsistent with label kinds")
        for a in (self.features, self.label_kind, self.label_class, self.true_label):
            a.setflags(write=False)

    @property
    def shape(self):
        return self.label_kind.shape

    @property
    def raw_dim(self) -> int:
        return self.features.shape[-1]

    def label_at(self, i: int, j: int) -> LabelState:
        kind = LabelKind(int(self.label_kind[i, j]))
        if kind == LabelKind.UNLABELED:
            return LabelState.unlabeled()
        return LabelState(kind, int(self.label_class[i, j]))

    def flat_features(self) -> np.ndarray:
        return self.features.reshape(-1, self.raw_dim)

    def with_true_labels(self, true_label: np.ndarray) -> "Scene":
        return dataclasses.replace(self, true_label=np.asarray(true_label, dtype=np.uint16))

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.domain == other.domain
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.label_kind, other.label_kind)
            and np.array_equal(self.label_class, other.label_class)
            and np.array_equal(self.true_label, other.true_label)
        )


@dataclass
class Batch:
    """A flat set of pixels drawn from one domain."""

    raw: np.ndarray  # (N, R) raw inputs
    label_kind: np.ndarray  # (N,)
    label_class: np.ndarray  # (N,)
    scene_id: np.ndarray  # (N,)
    domain: Domain

    def __post_init__(self):
        if len(self.raw) == 0:
            raise ValueError("batch must be non-empty")
        n = len(self.raw)
        if not (len(self.label_kind) == len(self.label_class) == len(self.scene_id) == n):
            raise ValueError("batch arrays disagree on length")

    def __len__(self):
        return len(self.raw)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.label_kind != LabelKind.UNLABELED

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene], scene_ids: Iterable[int]) -> "Batch":
        scene_ids = list(scene_ids)
        parts = [scenes[i] for i in scene_ids]
        raw = np.concatenate([s.flat_features() for s in parts]).astype(np.float64)
        kind = np.concatenate([s.label_kind.ravel() for s in parts])
        klass = np.concatenate([s.label_class.ravel() for s in parts]).astype(np.int64)
        sid = np.concatenate([np.full(s.label_kind.size, i) for s, i in zip(parts, scene_ids)])
        domains = {s.domain for s in parts}
        if len(domains) != 1:
            raise ValueError("all scenes in a batch must share a domain")
        return cls(raw, kind, klass, sid, domains.pop())


@dataclass
class RunConfig:
    """Every knob of a training run, including the method's hyperparameters."""

    C: int = 4
    D: int = 64
    M: int = 3
    tau: float = 0.1
    beta: float = 0.968
    lambda_ema: float = 0.9
    lambda_teacher: float = 0.999
    sinkhorn_iters: int = 10
    sinkhorn_eps: float = 0.05
    var_floor: float = 1e-4
    prior_floor: float = 1e-6
    bank_capacity: int = 32768
    bank_push_per_class: int = 100
    k_top: int = 10
    starve_limit: int = 100
    seed: int = 0
    # model / optimization
    hidden_dim: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    iterations: int = 600
    warmup_iters: int = 200
    selftrain_warmup: int = 0
    lambda_cl: float = 1.0
    labeled_batch: int = 512
    scenes_per_batch: int = 2
    pixels_per_scene: int = 256
    eval_interval: int = 100
    # method toggles
    use_unlabeled: bool = True
    use_gmm_cl: bool = True
    selftrain_weight: str = "alpha"  # "alpha" or "w" for weak-target scenes
    alpha_sigma: str = "trace"  # "trace" or "mean" reduction of the diagonal variances
    scene_sigma: str = "hard"  # "hard" or "soft" reading of the pseudo-label indicator
    noisy_source: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.C < 1 or self.D < 2 or self.M < 1:
            raise ConfigError("need C >= 1, D >= 2, M >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not 0 <= self.beta <= 1:
            raise ConfigError("beta must lie in [0, 1]")
        for name in ("lambda_ema", "lambda_teacher"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.bank_capacity < 1 or self.bank_push_per_class < 1 or self.k_top < 1:
            raise ConfigError("bank sizes must be positive")
        if self.selftrain_weight not in ("alpha", "w"):
            raise ConfigError("selftrain_weight must be 'alpha' or 'w'")
        if self.alpha_sigma not in ("trace", "mean"):
            raise ConfigError("alpha_sigma must be 'trace' or 'mean'")
        if self.scene_sigma not in ("hard", "soft"):
            raise ConfigError("scene_sigma must be 'hard' or 'soft'")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# binary container
#
# scene set layout (all little-endian):
#   magic b"GGMM", version u32, C u32, R u32, H u32, W u32, n_scenes u32
#   per scene: domain u8, features f32[H*W*R], label kinds u8[H*W],
#              label classes u16[H*W] (0xFFFF = none), true labels u16[H*W]
# --------------------------------------------------------------------------

SCENE_MAGIC = b"GGMM"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4s6I")
_NO_CLASS = 0xFFFF


def write_scenes(fh: BinaryIO, scenes: Sequence[Scene], n_classes: int) -> None:
    if not scenes:
        raise ValueError("nothing to write")
    h, w = scenes[0].shape
    r = scenes[0].raw_dim
    fh.write(_HEADER.pack(SCENE_MAGIC, CONTAINER_VERSION, n_classes, r, h, w, len(scenes)))
    for s in scenes:
        if s.shape != (h, w) or s.raw_dim != r:
            raise ValueError("all scenes in a set must share grid and raw dimension")
        fh.write(struct.pack("<B", int(s.domain)))
        fh.write(np.ascontiguousarray(s.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(s.label_kind, dtype="u1").tobytes())
        cls = np.where(s.label_class < 0, _NO_CLASS, s.label_class).astype("<u2")
        fh.write(cls.tobytes())
        fh.write(np.ascontiguousarray(s.true_label, dtype="<u2").tobytes())


def read_scenes(fh: BinaryIO):
    """Read a scene set. Returns ``(scenes, n_classes)``."""
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated scene container header")
    magic, version, n_classes, r, h, w, n = _HEADER.unpack(head)
    if magic != SCENE_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    hw = h * w
    scenes = []
    for _ in range(n):
        (dom,) = struct.unpack("<B", fh.read(1))
        feats = np.frombuffer(fh.read(4 * hw * r), dtype="<f4").reshape(h, w, r).astype(np.float32)
        kind = np.frombuffer(fh.read(hw), dtype="u1").reshape(h, w).copy()
        cls = np.frombuffer(fh.read(2 * hw), dtype="<u2").reshape(h, w)
        cls = np.where(cls == _NO_CLASS, -1, cls).astype(np.int16)
        true = np.frombuffer(fh.read(2 * hw), dtype="<u2").reshape(h, w).astype(np.uint16)
        scenes.append(Scene(feats, kind, cls, true, Domain(dom)))
    return scenes, n_classes


def save_dataset(path, source: List[Scene], target: List[Scene], heldout: List[Scene],
                 n_classes: int, config: Optional[RunConfig] = None,
                 scenario: Optional[dict] = None) -> None:
    """Write the three scene splits as one container plus a JSON sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        write_scenes(fh, list(source) + list(target) + list(heldout), n_classes)
    sidecar = {
        "splits": {"source": len(source), "target": len(target), "heldout": len(heldout)},
        "n_classes": n_classes,
    }
    if config is not None:
        sidecar["run_config"] = config.to_dict()
    if scenario is not None:
        sidecar["scenario"] = scenario
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_dataset(path):
    """Returns ``(source, target, heldout, n_classes)``."""
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    with open(path, "rb") as fh:
        scenes, n_classes = read_scenes(fh)
    sp = meta["splits"]
    a, b = sp["source"], sp["source"] + sp["target"]
    return scenes[:a], scenes[a:b], scenes[b:], n_classes
