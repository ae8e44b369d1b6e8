"""Differentiable operator set used by the mask heads, on top of torch autograd.

Covers attention with an additive bias, the three convolution shapes the heads
need, pre-norm residual decoder blocks, a central finite-difference gradient
checker and the flat float32 checkpoint format.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import FormatVersionMismatch, NonFiniteGradient, ParseError, ShapeError

# Stands in for -inf before the softmax; exp(-1e9) underflows to exactly 0.
NEG_INF = -1e9


def check_finite(x: Tensor, where: str) -> Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {where}")
    return x


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias: Optional[Tensor] = None,
                         scale: bool = True, return_weights: bool = False):
    """``softmax(bias + q k^T / sqrt(d)) v`` over the last two dims.

    ``q`` is ``[..., n_q, d]``, ``k`` and ``v`` are ``[..., n_k, d]`` and ``[..., n_k, d_v]``;
    ``bias`` broadcasts against ``[..., n_q, n_k]``.  With ``scale=False`` the
    logits are the raw dot products.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    logits = q @ k.transpose(-1, -2)
    if scale:
        logits = logits / math.sqrt(q.shape[-1])
    if bias is not None:
        try:
            torch.broadcast_shapes(bias.shape, logits.shape)
        except RuntimeError as exc:
            raise ShapeError(f"bias {tuple(bias.shape)} does not fit logits {tuple(logits.shape)}") from exc
        logits = logits + bias
    weights = torch.softmax(logits, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


# -- convolutions ----------------------------------------------------------------------

CONV_KINDS = ("3x3", "1x1", "up2x2")


def conv_block(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, kind: str = "3x3") -> Tensor:
    """Stride-1 3x3 (zero pad 1), stride-1 1x1, or stride-2 2x2 transposed conv.

    ``weight`` follows torch layout: ``[out, in, kh, kw]`` for the forward
    convolutions and ``[in, out, 2, 2]`` for the transposed one.
    """
    if x.dim() not in (3, 4):
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {tuple(x.shape)}")
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if kind == "up2x2":
        if weight.shape[0] != x.shape[1] or weight.shape[2:] != (2, 2):
            raise ShapeError(f"transposed weight {tuple(weight.shape)} vs input {tuple(x.shape)}")
        y = F.conv_transpose2d(x, weight, bias, stride=2)
    elif kind in ("3x3", "1x1"):
        size = 3 if kind == "3x3" else 1
        if weight.shape[1] != x.shape[1] or weight.shape[2:] != (size, size):
            raise ShapeError(f"{kind} weight {tuple(weight.shape)} vs input {tuple(x.shape)}")
        y = F.conv2d(x, weight, bias, stride=1, padding=size // 2)
    else:
        raise ValueError(f"unknown conv kind {kind!r}; expected one of {CONV_KINDS}")
    return y.squeeze(0) if squeeze else y


class Conv(nn.Module):
    """Module wrapper around :func:`conv_block`."""

    def __init__(self, cin: int, cout: int, kind: str = "3x3", bias: bool = True):
        super().__init__()
        self.kind = kind
        if kind == "up2x2":
            shape = (cin, cout, 2, 2)
            fan_in = cout * 4
        else:
            size = 3 if kind == "3x3" else 1
            shape = (cout, cin, size, size)
            fan_in = cin * size * size
        self.weight = nn.Parameter(torch.empty(shape))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            bound = 1 / math.sqrt(fan_in)
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: Tensor) -> Tensor:
        return conv_block(x, self.weight, self.bias, self.kind)


# -- attention blocks ------------------------------------------------------------------

class Attention(nn.Module):
    """Multi-head attention with separate query/key/value/output projections."""

    def __init__(self, dim: int, heads: int = 1, scale: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = scale
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.last_weights: Optional[Tensor] = None
        self.keep_weights = False

    def forward(self, query: Tensor, key: Tensor, value: Optional[Tensor] = None,
                bias: Optional[Tensor] = None) -> Tensor:
        value = key if value is None else value
        q, k, v = self.q_proj(query), self.k_proj(key), self.v_proj(value)
        if self.heads > 1:
            q, k, v = (self._split(t) for t in (q, k, v))
            if bias is not None:
                bias = bias.unsqueeze(-3)
        out, weights = scaled_dot_attention(q, k, v, bias, scale=self.scale, return_weights=True)
        if self.heads > 1:
            out = out.transpose(-2, -3).flatten(-2)
            weights = weights.mean(dim=-3)
        if self.keep_weights:
            self.last_weights = weights.detach()
        return self.out_proj(out)

    def _split(self, t: Tensor) -> Tensor:
        *lead, n, d = t.shape
        return t.view(*lead, n, self.heads, d // self.heads).transpose(-2, -3)


@dataclass
class BlockOptions:
    heads: int = 1
    attn_scale: bool = True
    pre_norm: bool = True
    residual: bool = True
    ffn: bool = True
    ffn_mult: int = 2


class AttentionBlock(nn.Module):
    """``x + Attn(norm(x), memory)``; self-attention when ``memory`` is None."""

    def __init__(self, dim: int, opts: BlockOptions):
        super().__init__()
        self.opts = opts
        self.attn = Attention(dim, opts.heads, opts.attn_scale)
        self.norm = nn.LayerNorm(dim) if opts.pre_norm else nn.Identity()

    def forward(self, x: Tensor, memory: Optional[Tensor] = None,
                bias: Optional[Tensor] = None) -> Tensor:
        h = self.norm(x)
        kv = h if memory is None else memory
        out = self.attn(h, kv, kv, bias)
        return x + out if self.opts.residual else out


class FFNBlock(nn.Module):
    def __init__(self, dim: int, opts: BlockOptions):
        super().__init__()
        self.opts = opts
        self.norm = nn.LayerNorm(dim) if opts.pre_norm else nn.Identity()
        self.fc1 = nn.Linear(dim, dim * opts.ffn_mult)
        self.fc2 = nn.Linear(dim * opts.ffn_mult, dim)

    def forward(self, x: Tensor) -> Tensor:
        out = self.fc2(F.relu(self.fc1(self.norm(x))))
        return x + out if self.opts.residual else out


def mlp(dims: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


# -- gradient checking -----------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(scalar_fn: Callable[[], Tensor], params: Iterable[Tensor] | dict[str, Tensor],
               epsilon: float = 1e-5, tolerance: float = 1e-3, max_per_param: int | None = None,
               seed: int = 0) -> GradCheckResult:
    """Compare autograd gradients of ``scalar_fn()`` with central differences.

    Per element the error is ``|a - f| / max(|a|, |f|, 1e-8)``.  ``params`` are
    perturbed in place and restored.  ``max_per_param`` subsamples elements
    of large tensors.
    """
    named = dict(params) if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    tensors = list(named.values())
    loss = scalar_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    for (name, p), g in zip(named.items(), grads):
        analytic = torch.zeros_like(p) if g is None else g.detach()
        if not torch.isfinite(analytic).all():
            raise NonFiniteGradient(f"analytic gradient of {name} is not finite")
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_per_param is not None and idx.size > max_per_param:
            idx = rng.choice(idx, size=max_per_param, replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + epsilon
                plus = scalar_fn().item()
                flat[i] = orig - epsilon
                minus = scalar_fn().item()
                flat[i] = orig
            fd = (plus - minus) / (2 * epsilon)
            if not math.isfinite(fd):
                raise NonFiniteGradient(f"finite difference for {name}[{i}] is not finite")
            a = analytic.view(-1)[i].item()
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}] analytic={a:.3e} fd={fd:.3e}"
    return GradCheckResult(worst, tolerance, checked, worst_name)


# -- checkpoints -----------------------------------------------------------------------

CKPT_MAGIC = b"SFCKPT\x00\x01"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict, meta: dict | None = None,
                    codebooks: dict[int, np.ndarray] | None = None) -> None:
    """Write a flat ``name -> float32 tensor`` map plus optional codebook blocks.

    Layout (all little-endian): magic, u32 version, u32 meta length + JSON meta,
    u32 tensor count, then per tensor u16 name length, UTF-8 name, u8 ndim,
    u32 dims, float32 payload; finally u32 codebook count and per codebook
    u32 category, u32 K, u32 v, float32 K*v payload.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    codebooks = codebooks or {}
    chunks.append(struct.pack("<I", len(codebooks)))
    for cat in sorted(codebooks):
        cb = codebooks[cat]
        if isinstance(cb, Tensor):
            cb = cb.detach().cpu().numpy()
        cb = np.ascontiguousarray(cb, dtype="<f4")
        chunks.append(struct.pack("<III", cat, *cb.shape))
        chunks.append(cb.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict[int, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ParseError(f"{path} is not a checkpoint")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ParseError(f"truncated checkpoint {path}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    def take_floats(count):
        nonlocal pos
        end = pos + 4 * count
        if end > len(data):
            raise ParseError(f"truncated checkpoint {path}")
        arr = np.frombuffer(data[pos:end], dtype="<f4").copy()
        pos = end
        return arr

    version, meta_len = take("<II")
    if version != CKPT_VERSION:
        raise FormatVersionMismatch(f"checkpoint version {version}")
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        tensors[name] = take_floats(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    (ncb,) = take("<I")
    codebooks = {}
    for _ in range(ncb):
        cat, k, v = take("<III")
        codebooks[cat] = take_floats(k * v).reshape(k, v)
    return tensors, meta, codebooks


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
