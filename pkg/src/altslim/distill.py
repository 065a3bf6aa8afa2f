"""Feature-aligned distillation: losses, loss weights, Adam and the plateau rule."""

from __future__ import annotations

import hashlib
import json
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .encoder import Encoder, TapSet, _forward
from .errors import InvalidConfig, InvalidShape, NumericOverflow
from .tensor import Tensor

BOTTLENECK_ALIGN = "bottleneck_align"
EMBEDDING_ALIGN = "embedding_align"
FINAL_ALIGN = "final_align"
PHASES = (BOTTLENECK_ALIGN, EMBEDDING_ALIGN, FINAL_ALIGN)
ALPHA_MODES = ("dynamic", "constant_half")


@dataclass(frozen=True)
class AlignConfig:
    phase: str = BOTTLENECK_ALIGN
    alpha_mode: str = "dynamic"
    N: int = 10
    epochs: int = 10
    batch_size: int = 4
    lr0: float = 1e-4
    patience: int = 4
    seed: int = 0
    intermediate: bool = True

    def __post_init__(self):
        if self.phase not in PHASES:
            raise InvalidConfig(f"unknown phase {self.phase!r}")
        if self.alpha_mode not in ALPHA_MODES:
            raise InvalidConfig(f"unknown alpha mode {self.alpha_mode!r}")
        if self.N < 1 or self.epochs < 0 or self.batch_size < 1 or not self.lr0 > 0:
            raise InvalidConfig("need N >= 1, epochs >= 0, batch_size >= 1 and lr0 > 0")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainLog:
    phase: str
    config_digest: str
    records: list = field(default_factory=list)
    wall_clock: float = 0.0

    def column(self, key) -> list:
        return [r[key] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"phase": self.phase, **r}) + "\n" for r in self.records)


def alpha_schedule(phase: str, n: int, N: int, mode: str = "dynamic") -> float:
    """Weight of the intermediate-feature term at epoch ``n`` (0-based)."""
    if n < 0:
        raise ValueError("epoch index must be >= 0")
    if phase == FINAL_ALIGN or n >= N:
        return 0.0
    if mode == "constant_half" or phase == BOTTLENECK_ALIGN:
        return 0.5
    return (N - n - 1) / N


def _feature_mse(student, teacher, what):
    if len(student) != len(teacher):
        raise InvalidShape(f"{what}: {len(student)} student features vs {len(teacher)} teacher features")
    terms = []
    for s, t in zip(student, teacher):
        if s.shape != t.shape:
            raise InvalidShape(f"{what} shape mismatch {s.shape} vs {t.shape}; wrong phase order?")
        terms.append(T.mse(s, t))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.scale(total, 1.0 / len(terms))


def _combine(weighted):
    """Sum ``(weight, thunk)`` terms, never building a term whose weight is zero."""
    total = None
    for w, make in weighted:
        if w == 0:
            continue
        term = T.scale(make(), w)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("all loss weights are zero")
    return total


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x))


def bottleneck_align_loss(student_taps: TapSet, teacher_taps: TapSet, alpha: float) -> Tensor:
    """``alpha * MSE(H) + (1 - alpha) * MSE(t)``; H averages every per-block qkv and mlp MSE."""
    flat_s = [f for pair in student_taps.H for f in pair]
    flat_t = None
    if teacher_taps.H is not None:
        flat_t = [_as_tensor(f) for pair in teacher_taps.H for f in pair]
        for s, t in zip(flat_s, flat_t):
            if s.shape != t.shape:
                raise InvalidShape(
                    f"bottleneck feature shape mismatch {s.shape} vs {t.shape}; wrong phase order?")
    elif alpha > 0:
        raise InvalidShape("teacher bottleneck features are required when alpha > 0")
    return _combine([
        (alpha, lambda: _feature_mse(flat_s, flat_t, "H")),
        (1.0 - alpha, lambda: T.mse(student_taps.t, _as_tensor(teacher_taps.t))),
    ])


def embedding_align_loss(v2_taps: TapSet, v1_taps: TapSet, v0_t, alpha: float) -> Tensor:
    """``alpha * (MSE(E_v1, E_v2) + MSE(t_v1, t_v2)) + (1 - alpha) * MSE(t_v0, t_v2)``."""
    E1 = None
    if v1_taps.E is not None:
        E1 = [_as_tensor(e) for e in v1_taps.E]
        for s, t in zip(v2_taps.E, E1):
            if s.shape != t.shape:
                raise InvalidShape(
                    f"block output shape mismatch {s.shape} vs {t.shape}; wrong phase order?")
    elif alpha > 0:
        raise InvalidShape("teacher block outputs are required when alpha > 0")
    return _combine([
        (alpha, lambda: T.add(_feature_mse(v2_taps.E, E1, "E"),
                              T.mse(v2_taps.t, _as_tensor(v1_taps.t)))),
        (1.0 - alpha, lambda: T.mse(v2_taps.t, _as_tensor(v0_t))),
    ])


def final_embedding_loss(student_taps: TapSet, v0_t) -> Tensor:
    return T.mse(student_taps.t, _as_tensor(v0_t))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  Returns ``(new_weights, state)``."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericOverflow(f"non-finite gradient for {k}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    out = {}
    for k, w in weights.items():
        g = grads[k]
        dt = w.dtype.type
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - beta1) * g if m is None else dt(beta1) * m + dt(1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else dt(beta2) * v + dt(1.0 - beta2) * g * g
        m = m.astype(w.dtype, copy=False)
        v = v.astype(w.dtype, copy=False)
        state.m[k], state.v[k] = m, v
        out[k] = (w - dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))).astype(w.dtype)
    return out, state


def plateau_fired(history, patience: int) -> bool:
    """True when the last epoch of ``history`` completes a plateau of ``patience`` epochs."""
    best = math.inf
    wait = 0
    fired = False
    for value in history:
        fired = False
        if value < best:
            best = value
            wait = 0
        else:
            wait += 1
            if wait >= patience:
                fired = True
                wait = 0
    return fired


def plateau_scheduler(history, lr: float, patience: int = 4) -> float:
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    return lr / 2 if plateau_fired(history, patience) else lr


# ---------------------------------------------------------------------------
# frozen-teacher feature cache; teachers never change during a run, so their
# taps are computed once per (weights, images) pair

_CACHE: OrderedDict = OrderedDict()
_CACHE_SIZE = 6


def _images_key(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest()


def teacher_features(encoder: Encoder, images: np.ndarray, want: str, key: str | None = None,
                     chunk: int = 64):
    """Precomputed ``t``, ``H`` or ``E`` taps of a frozen encoder as numpy arrays."""
    cache_key = (encoder.digest(), key or _images_key(images), want)
    if cache_key in _CACHE:
        _CACHE.move_to_end(cache_key)
        return _CACHE[cache_key]
    model = encoder.frozen()
    parts = []
    for i in range(0, len(images), chunk):
        x = Tensor._wrap(np.ascontiguousarray(images[i:i + chunk], dtype=T.default_dtype()))
        taps = _forward(model, x)
        if want == "t":
            parts.append(taps.t.data)
        elif want == "H":
            parts.append([f.data for pair in taps.H for f in pair])
        else:
            parts.append([e.data for e in taps.E])
    if want == "t":
        value = np.concatenate(parts)
    else:
        value = [np.concatenate([p[j] for p in parts]) for j in range(len(parts[0]))]
    _CACHE[cache_key] = value
    while len(_CACHE) > _CACHE_SIZE:
        _CACHE.popitem(last=False)
    return value


def clear_feature_cache() -> None:
    _CACHE.clear()


def fidelity_mse(student: Encoder, images: np.ndarray, reference_t: np.ndarray) -> float:
    from .encoder import embed

    t = embed(student, images)
    diff = t.astype(np.float64) - reference_t.astype(np.float64)
    return float(np.mean(diff * diff))


def _check_phase_shapes(student: Encoder, teachers: dict, phase: str) -> None:
    v0 = teachers["v0"]
    if student.config.out_dim != v0.config.out_dim:
        raise InvalidShape("student and teacher disagree on out_dim")
    if phase == BOTTLENECK_ALIGN:
        if student.head_dims != v0.head_dims or student.mlp_dims != v0.mlp_dims:
            raise InvalidShape("bottleneck aligning needs bottleneck widths identical to v0")
    elif phase == EMBEDDING_ALIGN:
        v1 = teachers.get("v1")
        if v1 is None:
            raise InvalidConfig("embedding aligning needs teacher v1")
        if student.embed_dim != v1.embed_dim:
            raise InvalidShape("embedding aligning needs an embedding width identical to v1")


def run_alignment(student: Encoder, teachers: dict, data, config: AlignConfig):
    """Distil ``student`` against frozen ``teachers`` (keys ``v0`` and optionally ``v1``).

    ``data`` needs ``train_images`` and ``val_images`` arrays.  Validation
    fidelity is MSE between the student's and v0's final embeddings on the
    held-out images.  Returns ``(trained_student, TrainLog)``.
    """
    _check_phase_shapes(student, teachers, config.phase)
    log = TrainLog(config.phase, config.digest())
    if config.epochs == 0:
        return student, log
    start = time.perf_counter()
    phase = config.phase
    train = data.train_images
    val = data.val_images
    v0 = teachers["v0"]
    uses_features = config.intermediate and phase != FINAL_ALIGN and any(
        alpha_schedule(phase, n, config.N, config.alpha_mode) > 0 for n in range(config.epochs))

    train_key = getattr(data, "train_key", None)
    v0_t = teacher_features(v0, train, "t", train_key)
    val_ref = teacher_features(v0, val, "t", getattr(data, "val_key", None))
    v0_H = teacher_features(v0, train, "H", train_key) if uses_features and phase == BOTTLENECK_ALIGN else None
    v1_t = v1_E = None
    if phase == EMBEDDING_ALIGN:
        v1 = teachers["v1"]
        v1_t = teacher_features(v1, train, "t", train_key)
        if uses_features:
            v1_E = teacher_features(v1, train, "E", train_key)

    rng = np.random.default_rng(config.seed)
    model = student.trainable()
    state = AdamState()
    lr = config.lr0
    history = []
    dtype = T.default_dtype()
    n_train = len(train)
    for epoch in range(config.epochs):
        alpha = alpha_schedule(phase, epoch, config.N, config.alpha_mode) if config.intermediate else 0.0
        order = rng.permutation(n_train)
        losses = []
        for i in range(0, n_train, config.batch_size):
            idx = np.sort(order[i:i + config.batch_size])
            x = Tensor._wrap(np.ascontiguousarray(train[idx], dtype=dtype))
            taps = _forward(model, x)
            if phase == BOTTLENECK_ALIGN:
                H = None
                if alpha > 0:
                    H = [(v0_H[2 * b][idx], v0_H[2 * b + 1][idx]) for b in range(len(v0_H) // 2)]
                loss = bottleneck_align_loss(taps, TapSet(None, H, v0_t[idx]), alpha)
            elif phase == EMBEDDING_ALIGN:
                E = [e[idx] for e in v1_E] if alpha > 0 else None
                loss = embedding_align_loss(taps, TapSet(E, None, v1_t[idx]), v0_t[idx], alpha)
            else:
                loss = final_embedding_loss(taps, v0_t[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericOverflow(f"non-finite loss at epoch {epoch}")
            T.backward(loss)
            try:
                arrays, state = adam_step(model.arrays(), model.grads(), state, lr)
            except NumericOverflow as exc:
                raise NumericOverflow(f"epoch {epoch}: {exc}") from exc
            model = model.with_arrays(arrays, requires_grad=True)
            losses.append(value)
        val_mse = fidelity_mse(model, val, val_ref)
        history.append(val_mse)
        log.records.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                            "val_fidelity": val_mse, "lr": lr, "alpha": alpha})
        lr = plateau_scheduler(history, lr, config.patience)
    log.wall_clock = time.perf_counter() - start
    return model.frozen(), log
