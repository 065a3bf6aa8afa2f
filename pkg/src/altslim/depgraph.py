"""Coupled channel groups of the encoder and pruning-plan validation.

Three group kinds exist:

* ``embedding`` -- one per residual-stream channel.  Residual additions tie
  the channel together across the patch embedding, positional embedding,
  every block and the neck input, so it is a single global group.
* ``attn_bottleneck`` -- one per (block, head, within-head index): the q, k
  and v output channels plus the matching projection input row.
* ``mlp_bottleneck`` -- one per (block, hidden channel): the fc1 output
  channel and the fc2 input row.

A member is ``(layer, part, index)``.  For linear layers ``part`` is ``"out"``
(weight column plus bias entry) or ``"in"`` (weight row); layer norms expose
``"gain"`` and ``"bias"``; the positional embedding exposes ``"col"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .encoder import DimTable, Encoder

EMBEDDING = "embedding"
ATTN = "attn_bottleneck"
MLP = "mlp_bottleneck"
BOTTLENECK_KINDS = (ATTN, MLP)


@dataclass(frozen=True)
class PruneGroup:
    id: str
    kind: str
    block: object
    head: int | None
    channel: int
    members: tuple

    @property
    def sort_key(self):
        block = -1 if self.block == "all" else self.block
        kind_rank = {EMBEDDING: 0, ATTN: 1, MLP: 2}[self.kind]
        head = -1 if self.head is None else self.head
        return (block, kind_rank, head, self.channel)


def group_id(kind, block=None, head=None, channel=0) -> str:
    if kind == EMBEDDING:
        return f"emb:{channel}"
    if kind == ATTN:
        return f"attn:{block}:{head}:{channel}"
    return f"mlp:{block}:{channel}"


def _embedding_members(c: int, blocks: int) -> tuple:
    mem = [("patch_embed", "out", c), ("pos_embed", "col", c)]
    for b in range(blocks):
        p = f"blocks.{b}."
        mem += [
            (p + "ln1", "gain", c), (p + "ln1", "bias", c),
            (p + "qkv", "in", c), (p + "proj", "out", c),
            (p + "ln2", "gain", c), (p + "ln2", "bias", c),
            (p + "fc1", "in", c), (p + "fc2", "out", c),
        ]
    mem += [("norm", "gain", c), ("norm", "bias", c), ("neck", "in", c)]
    return tuple(mem)


def _attn_members(block: int, head_dims: tuple, head: int, c: int) -> tuple:
    a = sum(head_dims)
    off = sum(head_dims[:head]) + c
    p = f"blocks.{block}."
    return ((p + "qkv", "out", off), (p + "qkv", "out", a + off),
            (p + "qkv", "out", 2 * a + off), (p + "proj", "in", off))


def _mlp_members(block: int, j: int) -> tuple:
    p = f"blocks.{block}."
    return ((p + "fc1", "out", j), (p + "fc2", "in", j))


@dataclass(frozen=True)
class DepGraph:
    dims: DimTable
    groups: tuple = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {g.id: g for g in self.groups})

    def __getitem__(self, gid: str) -> PruneGroup:
        return self._by_id[gid]

    def __contains__(self, gid) -> bool:
        return gid in self._by_id

    def __len__(self):
        return len(self.groups)


def build_dependency_graph(encoder_or_dims) -> DepGraph:
    dims = encoder_or_dims.dims() if isinstance(encoder_or_dims, Encoder) else encoder_or_dims
    d = dims.embed_dim
    groups = [PruneGroup(group_id(EMBEDDING, channel=c), EMBEDDING, "all", None, c,
                         _embedding_members(c, dims.blocks)) for c in range(d)]
    for b in range(dims.blocks):
        hd = dims.head_dims[b]
        for h, width in enumerate(hd):
            for c in range(width):
                groups.append(PruneGroup(group_id(ATTN, b, h, c), ATTN, b, h, c,
                                         _attn_members(b, hd, h, c)))
        for j in range(dims.mlp_dims[b]):
            groups.append(PruneGroup(group_id(MLP, b, channel=j), MLP, b, None, j,
                                     _mlp_members(b, j)))
    groups.sort(key=lambda g: g.sort_key)
    return DepGraph(dims, tuple(groups))


def embedding_groups(graph: DepGraph) -> list:
    return [g for g in graph.groups if g.kind == EMBEDDING]


def bottleneck_groups(graph: DepGraph) -> list:
    return [g for g in graph.groups if g.kind in BOTTLENECK_KINDS]


def member_slices(member) -> list:
    """Expand a member to ``(param_name, axis, index)`` slices of concrete arrays."""
    layer, part, idx = member
    if part == "out":
        return [(layer + ".weight", 1, idx), (layer + ".bias", 0, idx)]
    if part == "in":
        return [(layer + ".weight", 0, idx)]
    if part == "col":
        return [(layer, 1, idx)]
    return [(f"{layer}.{part}", 0, idx)]


def prunable_slices(dims: DimTable) -> set:
    """Every ``(param, axis, index)`` slice that some group must own."""
    d = dims.embed_dim
    out = set()

    def add(name, axis, n):
        out.update((name, axis, i) for i in range(n))

    add("patch_embed.weight", 1, d)
    add("patch_embed.bias", 0, d)
    add("pos_embed", 1, d)
    for b in range(dims.blocks):
        p = f"blocks.{b}."
        a3 = 3 * sum(dims.head_dims[b])
        m = dims.mlp_dims[b]
        for n in ("ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias", "proj.bias", "fc2.bias"):
            add(p + n, 0, d)
        add(p + "qkv.weight", 0, d)
        add(p + "qkv.weight", 1, a3)
        add(p + "qkv.bias", 0, a3)
        add(p + "proj.weight", 0, a3 // 3)
        add(p + "proj.weight", 1, d)
        add(p + "fc1.weight", 0, d)
        add(p + "fc1.weight", 1, m)
        add(p + "fc1.bias", 0, m)
        add(p + "fc2.weight", 0, m)
        add(p + "fc2.weight", 1, d)
    add("norm.gain", 0, d)
    add("norm.bias", 0, d)
    add("neck.weight", 0, d)
    return out


@dataclass(frozen=True)
class PruningPlan:
    target: str
    remove: frozenset
    dims: DimTable

    def to_json(self) -> str:
        return json.dumps({"target": self.target, "remove": sorted(self.remove),
                           "dims": self.dims.to_dict()}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        d = json.loads(text)
        return cls(d["target"], frozenset(d["remove"]), DimTable.from_dict(d["dims"]))


def resulting_dims(graph: DepGraph, remove) -> DimTable:
    """Dimension table obtained by removing ``remove`` (ids must exist in ``graph``)."""
    dims = graph.dims
    n_emb = 0
    heads = [list(h) for h in dims.head_dims]
    mlps = list(dims.mlp_dims)
    for gid in remove:
        g = graph[gid]
        if g.kind == EMBEDDING:
            n_emb += 1
        elif g.kind == ATTN:
            heads[g.block][g.head] -= 1
        else:
            mlps[g.block] -= 1
    return DimTable.uniform(dims.embed_dim - n_emb, heads, mlps, dims.out_dim)


def make_plan(graph: DepGraph, target: str, remove) -> PruningPlan:
    remove = frozenset(remove)
    known = [g for g in remove if g in graph]
    return PruningPlan(target, remove, resulting_dims(graph, known))


def validate_plan(graph: DepGraph, plan: PruningPlan) -> list:
    """Return the list of violations; an empty list means the plan is valid."""
    violations = []
    if plan.target not in (EMBEDDING, "bottleneck"):
        return [f"unknown plan target {plan.target!r}"]
    unknown = sorted(g for g in plan.remove if g not in graph)
    for gid in unknown:
        violations.append(f"unknown group {gid}")
    known = [graph[g] for g in plan.remove if g in graph]
    for g in known:
        if (plan.target == EMBEDDING) != (g.kind == EMBEDDING):
            violations.append(f"group kind does not match plan target: {g.id}")

    if len(set(plan.dims.embed_dims)) != 1 or len(plan.dims.embed_dims) != graph.dims.blocks:
        violations.append("non-uniform embedding removal")
    if plan.dims.out_dim != graph.dims.out_dim:
        violations.append("plan touches out_dim")

    expected = resulting_dims(graph, [g.id for g in known])
    if not violations and plan.dims != expected:
        violations.append("dimension table does not match removed groups")
    if expected.embed_dims[0] < 1:
        violations.append("embedding dimension would be empty")
    for b, hd in enumerate(expected.head_dims):
        for h, width in enumerate(hd):
            if width < 1:
                violations.append(f"empty head: block {b} head {h}")
        if expected.mlp_dims[b] < 1:
            violations.append(f"empty mlp: block {b}")
    return violations
