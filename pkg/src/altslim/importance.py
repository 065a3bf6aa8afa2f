"""Group importance scoring, per-layer normalisation and plan selection."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .depgraph import (ATTN, EMBEDDING, MLP, DepGraph, build_dependency_graph,
                       bottleneck_groups, embedding_groups, make_plan, member_slices)
from .encoder import Encoder, _forward
from .errors import InvalidInput, InvalidMode, InvalidRatio, InvalidTargets
from .tensor import Tensor

CRITERIA = ("random", "magnitude", "taylor", "hessian_surrogate", "disturbed_taylor")
SCHEMES = ("sum", "mean", "max", "standardization", "gaussian")
_SCHEME_ALIASES = {"std": "standardization", "gauss": "gaussian"}


@dataclass(frozen=True)
class Criterion:
    kind: str = "disturbed_taylor"
    sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ValueError(f"unknown criterion {self.kind!r}; choose from {CRITERIA}")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class Targets:
    """Scoring targets tagged with their role.

    ``labels`` are hard proxy-task targets; ``embeddings`` are teacher
    outputs ``t`` that the disturbed criterion perturbs.
    """

    values: np.ndarray
    role: str

    @classmethod
    def labels(cls, values) -> "Targets":
        return cls(np.asarray(values), "labels")

    @classmethod
    def embeddings(cls, values) -> "Targets":
        return cls(np.asarray(values), "embeddings")


_ROLE_FOR = {"taylor": "labels", "hessian_surrogate": "labels", "disturbed_taylor": "embeddings"}


@dataclass
class ImportanceReport:
    graph: DepGraph
    group_scores: dict
    criterion: Criterion | None = None
    param_scores: dict = field(default_factory=dict, repr=False)
    data_digest: str = ""

    def scores_for(self, groups) -> np.ndarray:
        return np.array([self.group_scores[g.id] for g in groups], dtype=np.float64)

    def records(self, scheme: str = "gaussian") -> list:
        """``(id, raw, normalized)`` rows; each layer is normalised on its own."""
        rows = []
        for layer in layer_partition(self.graph):
            raw = self.scores_for(layer)
            norm = normalize_scores([raw], scheme)[0]
            rows += [{"id": g.id, "raw": float(r), "normalized": float(n)}
                     for g, r, n in zip(layer, raw, norm)]
        return rows

    def to_json(self, scheme: str = "gaussian") -> str:
        return json.dumps({
            "criterion": None if self.criterion is None else vars(self.criterion),
            "data_digest": self.data_digest,
            "scheme": scheme,
            "groups": self.records(scheme),
        }, indent=1)


def perturb_targets(t, sigma: float, seed: int) -> Tensor:
    """``t`` plus elementwise Gaussian noise of standard deviation ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=T.default_dtype())
    if sigma == 0:
        return Tensor._wrap(data.copy())
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=data.shape)
    return Tensor._wrap((data + noise).astype(data.dtype))


def _data_digest(batch, targets) -> str:
    h = hashlib.sha256(np.ascontiguousarray(batch).tobytes())
    if targets is not None:
        h.update(targets.role.encode())
        h.update(np.ascontiguousarray(targets.values).tobytes())
    return h.hexdigest()[:16]


def taylor_scores(weights: dict, grads: dict) -> dict:
    """Elementwise ``|g * w|`` in float64."""
    return {k: np.abs(np.asarray(grads[k], dtype=np.float64) * np.asarray(w, dtype=np.float64))
            for k, w in weights.items()}


def _gradients(encoder: Encoder, batch: np.ndarray, target_values: np.ndarray, chunk: int) -> dict:
    """Gradients of the full-batch mean MSE between ``t`` and ``target_values``."""
    model = encoder.trainable()
    n = len(batch)
    dtype = T.default_dtype()
    for i in range(0, n, chunk):
        x = Tensor._wrap(np.ascontiguousarray(batch[i:i + chunk], dtype=dtype))
        y = Tensor._wrap(np.ascontiguousarray(target_values[i:i + chunk], dtype=dtype))
        t = _forward(model, x).t
        if t.shape != y.shape:
            raise InvalidTargets(f"targets shape {y.shape} does not match output {t.shape}")
        loss = T.scale(T.mse(t, y), x.shape[0] / n)
        T.backward(loss)
    return model.grads()


def parameter_importance(encoder: Encoder, batch, targets: Targets | None,
                         criterion: Criterion, chunk: int = 16) -> ImportanceReport:
    batch = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if batch.ndim != 4 or len(batch) == 0:
        raise InvalidInput("scoring needs a non-empty [B, C, H, W] batch")
    kind = criterion.kind
    role = _ROLE_FOR.get(kind)
    if role is not None:
        if targets is None or targets.role != role:
            got = None if targets is None else targets.role
            raise InvalidTargets(f"criterion {kind} needs {role} targets, got {got}")
        if len(targets.values) != len(batch):
            raise InvalidTargets("targets and batch differ in length")

    weights = encoder.arrays()
    if kind == "random":
        rng = np.random.default_rng(criterion.seed)
        scores = {k: rng.uniform(0.0, 1.0, size=w.shape) for k, w in weights.items()}
    elif kind == "magnitude":
        scores = {k: np.square(w.astype(np.float64)) for k, w in weights.items()}
    else:
        values = targets.values
        if kind == "disturbed_taylor":
            values = perturb_targets(values, criterion.sigma, criterion.seed).data
        grads = _gradients(encoder, batch, values, chunk)
        scores = taylor_scores(weights, grads)
        if kind == "hessian_surrogate":
            scores = {k: np.square(v) for k, v in scores.items()}

    graph = build_dependency_graph(encoder)
    return ImportanceReport(graph, aggregate_group_scores(graph, scores), criterion, scores,
                            _data_digest(batch, targets))


def aggregate_group_scores(graph: DepGraph, param_scores: dict) -> dict:
    """Group score = sum of the scores of every parameter the group owns."""
    reduced = {}

    def vec(name, axis):
        key = (name, axis)
        if key not in reduced:
            s = param_scores[name]
            other = tuple(i for i in range(s.ndim) if i != axis)
            reduced[key] = s.sum(axis=other) if other else s
        return reduced[key]

    out = {}
    for g in graph.groups:
        total = 0.0
        for member in g.members:
            for name, axis, idx in member_slices(member):
                total += float(vec(name, axis)[idx])
        out[g.id] = total
    return out


def normalize_scores(group_scores, scheme: str) -> list:
    """Normalise each layer's group scores independently."""
    scheme = _SCHEME_ALIASES.get(scheme, scheme)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown normalisation {scheme!r}; choose from {SCHEMES}")
    out = []
    for layer in group_scores:
        s = np.asarray(layer, dtype=np.float64)
        if s.size == 0:
            raise ValueError("cannot normalise an empty layer")
        if scheme == "sum":
            out.append(_safe_div(s, s.sum()))
        elif scheme == "mean":
            out.append(_safe_div(s, s.sum() / s.size))
        elif scheme == "max":
            out.append(_safe_div(s, s.max()))
        elif scheme == "standardization":
            out.append((s - s.max()) / (s.max() - s.min() + 1e-8))
        else:
            out.append((s - s.mean()) / (s.std() + 1e-8))
    return out


def _safe_div(s, denom):
    if denom == 0:
        return np.zeros_like(s)
    return s / denom


def layer_partition(graph: DepGraph) -> list:
    """Groups split into layers: the embedding family, then attn and mlp per block."""
    layers = [embedding_groups(graph)]
    for b in range(graph.dims.blocks):
        bn = [g for g in bottleneck_groups(graph) if g.block == b]
        layers.append([g for g in bn if g.kind == ATTN])
        layers.append([g for g in bn if g.kind == MLP])
    return [layer for layer in layers if layer]


def _ranked(groups, scores):
    order = sorted(range(len(groups)), key=lambda i: (scores[i], groups[i].sort_key))
    return [groups[i] for i in order]


def _greedy_remove(ranked, quota, head_left, mlp_left, removed):
    taken = 0
    for g in ranked:
        if taken >= quota:
            break
        if g.kind == ATTN:
            if head_left[(g.block, g.head)] <= 1:
                continue
            head_left[(g.block, g.head)] -= 1
        else:
            if mlp_left[g.block] <= 1:
                continue
            mlp_left[g.block] -= 1
        removed.append(g.id)
        taken += 1
    return taken


def select_pruning_plan(report: ImportanceReport, target: str, ratio: float,
                        mode: str = "local", scheme: str | None = None):
    """Choose the groups to remove at ``ratio``.

    Embedding plans are always local: the ``floor(ratio * d)`` lowest
    channels go.  Bottleneck plans take the lowest-ranked groups per layer
    (local) or across all normalised layers (global), skipping any group whose
    removal would empty a head or an MLP.
    """
    if not (0.0 <= ratio < 1.0) or math.isnan(ratio):
        raise InvalidRatio(f"ratio must lie in [0, 1), got {ratio}")
    if mode not in ("local", "global"):
        raise InvalidMode(f"unknown mode {mode!r}")
    graph = report.graph

    if target == EMBEDDING:
        if mode != "local":
            raise InvalidMode("embedding pruning must be local to stay uniform across blocks")
        groups = embedding_groups(graph)
        k = math.floor(ratio * len(groups))
        ranked = _ranked(groups, report.scores_for(groups))
        return make_plan(graph, EMBEDDING, [g.id for g in ranked[:k]])

    if target != "bottleneck":
        raise InvalidMode(f"unknown target {target!r}")
    dims = graph.dims
    head_left = {(b, h): w for b, hd in enumerate(dims.head_dims) for h, w in enumerate(hd)}
    mlp_left = dict(enumerate(dims.mlp_dims))
    layers = [layer for layer in layer_partition(graph) if layer[0].kind != EMBEDDING]
    removed = []
    if mode == "local":
        for layer in layers:
            quota = math.floor(ratio * len(layer))
            _greedy_remove(_ranked(layer, report.scores_for(layer)), quota,
                           head_left, mlp_left, removed)
    else:
        if scheme is None:
            raise InvalidMode("global bottleneck pruning needs a normalisation scheme")
        normed = normalize_scores([report.scores_for(layer) for layer in layers], scheme)
        groups = [g for layer in layers for g in layer]
        scores = np.concatenate(normed)
        quota = math.floor(ratio * len(groups))
        _greedy_remove(_ranked(groups, scores), quota, head_left, mlp_left, removed)
    return make_plan(graph, "bottleneck", removed)


def report_from_scores(graph: DepGraph, group_scores: dict) -> ImportanceReport:
    return ImportanceReport(graph, dict(group_scores))
