"""Physical removal of channel groups, plus a zero-mask oracle for bottleneck plans."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .depgraph import EMBEDDING, build_dependency_graph, member_slices, validate_plan
from .encoder import Encoder, TapSet, _forward, param_shapes
from .errors import OracleUnavailable, PlanRejected
from .tensor import Tensor


def _removed_slices(graph, plan) -> dict:
    """``param -> axis -> sorted indices`` scheduled for deletion."""
    out = defaultdict(lambda: defaultdict(set))
    for gid in plan.remove:
        for member in graph[gid].members:
            for name, axis, idx in member_slices(member):
                out[name][axis].add(idx)
    return out


def apply_plan(encoder: Encoder, plan) -> Encoder:
    """Return a new encoder with every member slice of the plan's groups deleted."""
    graph = build_dependency_graph(encoder)
    violations = validate_plan(graph, plan)
    if violations:
        raise PlanRejected(violations)
    removed = _removed_slices(graph, plan)
    arrays = {}
    for name, p in encoder.params.items():
        arr = p.data
        for axis, idx in removed.get(name, {}).items():
            arr = np.delete(arr, sorted(idx), axis=axis)
        arrays[name] = arr if arr is p.data else np.ascontiguousarray(arr)

    expected = param_shapes(encoder.config, plan.dims)
    bad = [n for n, s in expected.items() if arrays[n].shape != s]
    if bad:
        raise PlanRejected([f"surgery produced unexpected shape for {n}" for n in bad])
    return encoder.with_arrays(arrays, requires_grad=False, dims=plan.dims)


@dataclass
class MaskedEncoder:
    base: Encoder
    masks: dict
    scale_dims: tuple
    keep_qkv: list
    keep_mlp: list

    def forward(self, batch: Tensor) -> TapSet:
        return _forward(self.base, batch, masks=self.masks, scale_dims=self.scale_dims)

    def retained_taps(self, taps: TapSet) -> TapSet:
        """Drop the masked bottleneck columns so taps line up with the pruned encoder."""
        H = [(Tensor._wrap(qkv.data[..., kq]), Tensor._wrap(m.data[..., km]))
             for (qkv, m), kq, km in zip(taps.H, self.keep_qkv, self.keep_mlp)]
        return TapSet(taps.E, H, taps.t)


def zero_mask_oracle(encoder: Encoder, plan) -> MaskedEncoder:
    if plan.target == EMBEDDING:
        raise OracleUnavailable(
            "embedding plans change layer-norm statistics; masking is not equivalent to pruning")
    graph = build_dependency_graph(encoder)
    violations = validate_plan(graph, plan)
    if violations:
        raise PlanRejected(violations)
    removed = _removed_slices(graph, plan)
    masks = {}
    for name, axes in removed.items():
        p = encoder.params[name]
        mask = np.ones(p.shape, dtype=p.dtype)
        for axis, idx in axes.items():
            sl = [slice(None)] * mask.ndim
            sl[axis] = sorted(idx)
            mask[tuple(sl)] = 0
        masks[name] = Tensor._wrap(mask)
    keep_qkv, keep_mlp = [], []
    for b in range(encoder.blocks):
        a3 = 3 * sum(encoder.head_dims[b])
        gone = removed.get(f"blocks.{b}.qkv.bias", {}).get(0, set())
        keep_qkv.append(np.array([i for i in range(a3) if i not in gone], dtype=int))
        gone = removed.get(f"blocks.{b}.fc1.bias", {}).get(0, set())
        keep_mlp.append(np.array([i for i in range(encoder.mlp_dims[b]) if i not in gone], dtype=int))
    return MaskedEncoder(encoder, masks, plan.dims.head_dims, keep_qkv, keep_mlp)
