"""ViT-style image encoder with per-block feature taps.

Weights are stored ``[in, out]`` so every linear layer is ``x @ W + b``.
The qkv projection output is laid out as ``[q_h0 .. q_hn | k_h0 .. k_hn |
v_h0 .. v_hn]``; heads may have different widths once bottleneck pruning has
run, which is why the per-block head widths live on the encoder rather than
in the config.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidConfig, InvalidShape
from .tensor import Tensor

LN_EPS = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    blocks: int = 4
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    out_dim: int = 64
    seed: int = 0
    gelu: str = "tanh"

    def validate(self) -> None:
        problems = []
        if min(self.image_size, self.patch_size, self.in_channels, self.embed_dim,
               self.heads, self.out_dim) < 1:
            problems.append("all sizes must be positive")
        elif self.image_size % self.patch_size:
            problems.append(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.heads >= 1 and self.embed_dim % self.heads:
            problems.append(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.blocks < 1:
            problems.append("need at least one block")
        if self.mlp_ratio * self.embed_dim < self.heads:
            problems.append("mlp_ratio * embed_dim must be >= heads")
        if self.gelu not in ("tanh", "exact"):
            problems.append(f"unknown gelu variant {self.gelu!r}")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class DimTable:
    """Current widths of every prunable structure.

    ``embed_dims`` is per block so that a (malformed) non-uniform table is
    representable and can be rejected by plan validation.
    """

    embed_dims: tuple
    head_dims: tuple
    mlp_dims: tuple
    out_dim: int

    @property
    def blocks(self) -> int:
        return len(self.head_dims)

    @property
    def embed_dim(self) -> int:
        if len(set(self.embed_dims)) != 1:
            raise InvalidShape(f"non-uniform embedding dims {self.embed_dims}")
        return self.embed_dims[0]

    def attn_dims(self) -> tuple:
        return tuple(sum(h) for h in self.head_dims)

    def to_dict(self) -> dict:
        return {
            "embed_dims": list(self.embed_dims),
            "head_dims": [list(h) for h in self.head_dims],
            "mlp_dims": list(self.mlp_dims),
            "out_dim": self.out_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DimTable":
        return cls(tuple(d["embed_dims"]), tuple(tuple(h) for h in d["head_dims"]),
                   tuple(d["mlp_dims"]), int(d["out_dim"]))

    @classmethod
    def uniform(cls, embed_dim, head_dims, mlp_dims, out_dim) -> "DimTable":
        return cls((embed_dim,) * len(head_dims), tuple(tuple(h) for h in head_dims),
                   tuple(mlp_dims), out_dim)


def param_shapes(config: EncoderConfig, dims: DimTable) -> dict:
    """Ordered ``name -> shape`` for an encoder with the given widths."""
    d = dims.embed_dim
    shapes = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.num_patches, d),
    }
    for b in range(dims.blocks):
        a = sum(dims.head_dims[b])
        m = dims.mlp_dims[b]
        p = f"blocks.{b}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "qkv.weight": (d, 3 * a), p + "qkv.bias": (3 * a,),
            p + "proj.weight": (a, d), p + "proj.bias": (d,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "fc1.weight": (d, m), p + "fc1.bias": (m,),
            p + "fc2.weight": (m, d), p + "fc2.bias": (d,),
        })
    shapes.update({
        "norm.gain": (d,), "norm.bias": (d,),
        "neck.weight": (d, dims.out_dim), "neck.bias": (dims.out_dim,),
    })
    return shapes


@dataclass
class Encoder:
    config: EncoderConfig
    head_dims: tuple
    mlp_dims: tuple
    params: dict = field(repr=False)

    @property
    def embed_dim(self) -> int:
        return self.params["pos_embed"].shape[1]

    @property
    def blocks(self) -> int:
        return len(self.head_dims)

    def dims(self) -> DimTable:
        return DimTable.uniform(self.embed_dim, self.head_dims, self.mlp_dims, self.config.out_dim)

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def with_arrays(self, arrays: dict, requires_grad: bool = False, dims: DimTable | None = None) -> "Encoder":
        dims = dims or self.dims()
        names = list(param_shapes(self.config, dims))
        params = {k: Tensor._wrap(np.ascontiguousarray(arrays[k]), requires_grad) for k in names}
        return Encoder(self.config, dims.head_dims, dims.mlp_dims, params)

    def trainable(self) -> "Encoder":
        """A copy whose parameters are fresh leaves that accumulate gradients."""
        return self.with_arrays(self.arrays(), requires_grad=True)

    def frozen(self) -> "Encoder":
        return self.with_arrays(self.arrays(), requires_grad=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in self.params.items()}

    def weight_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(v.data).tobytes() for v in self.params.values())

    def digest(self) -> str:
        return hashlib.sha256(self.weight_bytes()).hexdigest()


def build_encoder(config: EncoderConfig) -> Encoder:
    config.validate()
    dh = config.embed_dim // config.heads
    dims = DimTable.uniform(config.embed_dim, [(dh,) * config.heads] * config.blocks,
                            [config.mlp_dim] * config.blocks, config.out_dim)
    rng = np.random.default_rng(config.seed)
    dtype = T.default_dtype()
    arrays = {}
    for name, shape in param_shapes(config, dims).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name == "pos_embed":
            arr = rng.uniform(-0.02, 0.02, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        arrays[name] = arr.astype(dtype)
    return Encoder(config, dims.head_dims, dims.mlp_dims,
                   {k: Tensor._wrap(v) for k, v in arrays.items()})


@dataclass
class TapSet:
    """Block outputs ``E``, bottleneck features ``H`` and the final embedding ``t``."""

    E: list
    H: list
    t: Tensor


def patchify(batch: Tensor, config: EncoderConfig) -> Tensor:
    if batch.ndim != 4 or batch.shape[1:] != (config.in_channels, config.image_size, config.image_size):
        raise InvalidShape(
            f"expected batch [B, {config.in_channels}, {config.image_size}, {config.image_size}], "
            f"got {batch.shape}")
    if batch.shape[0] < 1:
        raise InvalidShape("empty batch")
    b = batch.shape[0]
    p = config.patch_size
    g = config.image_size // p
    x = T.reshape(batch, (b, config.in_channels, g, p, g, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, g * g, config.patch_dim))


def _linear(x, params, name, masks):
    w = params[name + ".weight"]
    bias = params[name + ".bias"]
    if masks is not None:
        if name + ".weight" in masks:
            w = T.mul(w, masks[name + ".weight"])
        if name + ".bias" in masks:
            bias = T.mul(bias, masks[name + ".bias"])
    return T.add(T.matmul(x, w), bias)


def _forward(encoder: Encoder, batch: Tensor, masks=None, scale_dims=None) -> TapSet:
    cfg = encoder.config
    P = encoder.params
    x = patchify(batch, cfg)
    x = T.add(_linear(x, P, "patch_embed", masks), P["pos_embed"])
    E, H = [], []
    for b in range(encoder.blocks):
        pre = f"blocks.{b}."
        hd = list(encoder.head_dims[b])
        nh = len(hd)
        h = T.layernorm(x, P[pre + "ln1.gain"], P[pre + "ln1.bias"], LN_EPS)
        qkv = _linear(h, P, pre + "qkv", masks)
        pieces = T.split(qkv, hd * 3, axis=-1)
        outs = []
        for i in range(nh):
            q, k, v = pieces[i], pieces[nh + i], pieces[2 * nh + i]
            kept = hd[i] if scale_dims is None else scale_dims[b][i]
            s = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(kept))
            outs.append(T.matmul(T.softmax(s), v))
        o = outs[0] if nh == 1 else T.concat(outs, axis=-1)
        x = T.add(x, _linear(o, P, pre + "proj", masks))
        h2 = T.layernorm(x, P[pre + "ln2.gain"], P[pre + "ln2.bias"], LN_EPS)
        m = T.gelu(_linear(h2, P, pre + "fc1", masks), cfg.gelu)
        x = T.add(x, _linear(m, P, pre + "fc2", masks))
        E.append(x)
        H.append((qkv, m))
    x = T.layernorm(x, P["norm.gain"], P["norm.bias"], LN_EPS)
    t = _linear(x, P, "neck", masks)
    return TapSet(E, H, t)


def forward_with_taps(encoder: Encoder, batch: Tensor) -> TapSet:
    return _forward(encoder, batch)


def embed(encoder: Encoder, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Final embeddings ``t`` for a stack of images, computed without a tape."""
    frozen = encoder.frozen() if any(p.requires_grad for p in encoder.params.values()) else encoder
    chunks = []
    for i in range(0, len(images), batch_size):
        chunk = Tensor._wrap(np.ascontiguousarray(images[i:i + batch_size], dtype=T.default_dtype()))
        chunks.append(_forward(frozen, chunk).t.data)
    return np.concatenate(chunks, axis=0)


def closed_form_counts(config: EncoderConfig, dims: DimTable, num_patches: int | None = None) -> tuple:
    """Params and MACs computed purely from a dimension table."""
    L = config.num_patches if num_patches is None else num_patches
    d = dims.embed_dim
    pd = config.patch_dim
    out = dims.out_dim
    params = pd * d + d + config.num_patches * d
    macs = L * pd * d
    for b in range(dims.blocks):
        a = sum(dims.head_dims[b])
        m = dims.mlp_dims[b]
        params += 2 * d + (d * 3 * a + 3 * a) + (a * d + d) + 2 * d + (d * m + m) + (m * d + d)
        macs += L * d * 3 * a + 2 * L * L * a + L * a * d + L * d * m + L * m * d
    params += 2 * d + d * out + out
    macs += L * d * out
    return params, macs


def linear_counts(d_in: int, d_out: int, tokens: int, bias: bool = True) -> tuple:
    """``(params, macs)`` of one dense layer applied to ``tokens`` rows."""
    return d_in * d_out + (d_out if bias else 0), tokens * d_in * d_out


def count_params_macs(encoder: Encoder, num_patches: int | None = None) -> tuple:
    """Exact parameter element count and per-forward multiply-accumulates.

    MACs follow the linear-layer convention ``L * d_in * d_out`` and add
    ``L^2 * d_head`` for each of the score and value contractions per head.
    Normalisations and bias adds are excluded.
    """
    cfg = encoder.config
    L = cfg.num_patches if num_patches is None else num_patches
    P = encoder.params
    params = sum(int(p.size) for p in P.values())
    macs = 0
    for name, p in P.items():
        if name.endswith(".weight"):
            macs += linear_counts(*p.shape, L)[1]
    for hd in encoder.head_dims:
        for dh in hd:
            macs += 2 * L * L * dh
    return params, macs
