"""Synthetic teacher–student regression data.

All randomness flows through counter-based Philox generators keyed by
the user-supplied seeds, so a dataset is fully determined by
``(n, d, seed, teacher)`` independently of platform, thread count or
call order.  Inputs are i.i.d. standard Gaussians; targets come from
one of three teacher families:

``linear_cnn``
    y(x) = sum_i a*_i (w* . x_i) over non-overlapping patches x_i, with
    a* ~ N(0, 1/N) per entry and w* ~ N(0, 1/S) per entry.  With
    ``normalized=True`` the drawn vectors are rescaled to unit norm,
    which removes teacher-norm scatter between seeds.

``fcn_teacher``
    A small fully connected erf network with 1/fan-in weight variances.

``cnn_teacher``
    A two-layer erf CNN with ``teacher_channels`` channels (default 1)
    and 1/fan-in variances.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import Any

import numpy as np
from scipy.special import erf

TEACHER_KINDS = ("linear_cnn", "fcn_teacher", "cnn_teacher")


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def gaussian_inputs(n: int, d: int, seed: int) -> np.ndarray:
    """n i.i.d. standard-Gaussian input vectors of dimension d."""
    if n <= 0 or d <= 0:
        raise ValueError("n and d must be positive")
    return _generator(seed).standard_normal((n, d))


@dataclasses.dataclass(frozen=True)
class TeacherSpec:
    """Description of the target-generating function.

    ``window`` is the patch size for the convolutional kinds; the pixel
    count is inferred from the input dimension.  ``hidden`` sets the
    widths of the fcn teacher.  ``seed`` keys an independent Philox
    stream, so the teacher draw does not interact with the input draw.
    """

    kind: str = "linear_cnn"
    seed: int = 0
    window: int | None = None
    normalized: bool = False
    hidden: tuple[int, ...] = (32,)
    teacher_channels: int = 1

    def __post_init__(self):
        if self.kind not in TEACHER_KINDS:
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        if self.kind in ("linear_cnn", "cnn_teacher") and self.window is None:
            raise ValueError(f"{self.kind} requires a window size")


@dataclasses.dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    meta: dict[str, Any]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def digest(self) -> str:
        """Stable 16-hex-digit fingerprint of the realised (X, y)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<f8").tobytes())
        h.update(json.dumps(self.X.shape).encode())
        return h.hexdigest()[:16]


def _patches(X: np.ndarray, window: int) -> np.ndarray:
    n, d = X.shape
    if d % window:
        raise ValueError(f"input dimension {d} not divisible by window {window}")
    return X.reshape(n, d // window, window)


def _linear_cnn_target(X, spec: TeacherSpec):
    patches = _patches(X, spec.window)
    pixels, window = patches.shape[1], patches.shape[2]
    rng = _generator(spec.seed)
    a = rng.standard_normal(pixels) / np.sqrt(pixels)
    w = rng.standard_normal(window) / np.sqrt(window)
    if spec.normalized:
        a = a / np.linalg.norm(a)
        w = w / np.linalg.norm(w)
    y = np.einsum("npw,w,p->n", patches, w, a)
    meta = {"a_norm_sq": float(a @ a), "w_norm_sq": float(w @ w),
            "teacher_a": a, "teacher_w": w}
    return y, meta


def _fcn_target(X, spec: TeacherSpec):
    rng = _generator(spec.seed)
    h = X
    for width in spec.hidden:
        W = rng.standard_normal((h.shape[1], width)) / np.sqrt(h.shape[1])
        h = erf(h @ W)
    v = rng.standard_normal(h.shape[1]) / np.sqrt(h.shape[1])
    return h @ v, {}


def _cnn_target(X, spec: TeacherSpec):
    patches = _patches(X, spec.window)
    pixels, window = patches.shape[1], patches.shape[2]
    C = spec.teacher_channels
    rng = _generator(spec.seed)
    w = rng.standard_normal((C, window)) / np.sqrt(window)
    a = rng.standard_normal((pixels, C)) / np.sqrt(pixels * C)
    hidden = erf(np.einsum("npw,cw->npc", patches, w))
    return np.einsum("npc,pc->n", hidden, a), {}


def make_target(X: np.ndarray, teacher: TeacherSpec) -> tuple[np.ndarray, dict]:
    """Evaluate a teacher on the inputs; returns (y, teacher_meta)."""
    X = np.asarray(X, dtype=float)
    if teacher.kind == "linear_cnn":
        return _linear_cnn_target(X, teacher)
    if teacher.kind == "fcn_teacher":
        return _fcn_target(X, teacher)
    return _cnn_target(X, teacher)


def make_dataset(n: int, d: int, seed: int, teacher: TeacherSpec) -> Dataset:
    """Draw inputs and evaluate the teacher in one call."""
    X = gaussian_inputs(n, d, seed)
    y, teacher_meta = make_target(X, teacher)
    meta = {"n": n, "d": d, "seed": int(seed),
            "teacher": dataclasses.asdict(teacher)} | teacher_meta
    return Dataset(X=X, y=y, meta=meta)
