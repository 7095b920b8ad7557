"""Differentiable primitives used by the policy network.

All functions take and return :class:`torch.Tensor`; gradients come from
torch's reverse-mode engine. Shape and support problems raise the errors in
:mod:`cnntsp.errors` instead of torch's generic ones.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

import numpy as np
import torch

from .errors import (
    CheckpointError,
    DegenerateStatistics,
    EmptySupportError,
    InvalidArgument,
    ShapeError,
)

Tensor = torch.Tensor

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


def init_uniform_(w: Tensor, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        w.uniform_(-bound, bound)
    return w


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w + b`` along the last axis; ``w`` is ``(p, q)``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {tuple(x.shape)} incompatible with weight {tuple(w.shape)}")
    y = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {tuple(b.shape)} incompatible with weight {tuple(w.shape)}")
        y = y + b
    return y


def _check_support(x: Tensor, axis: int) -> None:
    if x.numel() and bool(torch.isneginf(x).all(dim=axis).any()):
        raise EmptySupportError("softmax: every entry along the axis is -inf")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; ``-inf`` entries get exactly zero mass."""
    _check_support(x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_support(x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - torch.logsumexp(shifted, dim=axis, keepdim=True)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return torch.relu(x)
    if kind == "tanh":
        return torch.tanh(x)
    raise InvalidArgument(f"unknown activation {kind!r}")


class BatchNormState(torch.nn.Module):
    """Learnable scale/shift plus running statistics for one feature width."""

    def __init__(self, d: int, momentum: float = BN_MOMENTUM, eps: float = NORM_EPS):
        super().__init__()
        self.d = d
        self.momentum = momentum
        self.eps = eps
        self.weight = torch.nn.Parameter(torch.ones(d))
        self.bias = torch.nn.Parameter(torch.zeros(d))
        self.register_buffer("running_mean", torch.zeros(d))
        self.register_buffer("running_var", torch.ones(d))


def normalize_batch(x: Tensor, state: BatchNormState, mode: str = "train",
                    update_stats: bool = True) -> Tensor:
    """Batch normalization over every axis but the last (features).

    ``train`` normalizes with the statistics of ``x`` and, unless
    ``update_stats`` is false, moves the running estimates toward them;
    ``infer`` uses the running estimates only.
    """
    if x.shape[-1] != state.d:
        raise ShapeError(f"normalize_batch: feature width {x.shape[-1]} != state width {state.d}")
    flat = x.reshape(-1, state.d)
    if mode == "train":
        count = flat.shape[0]
        if count < 2:
            raise DegenerateStatistics("normalize_batch: need more than one row in train mode")
        mean = flat.mean(dim=0)
        var = flat.var(dim=0, unbiased=False)
        if update_stats:
            with torch.no_grad():
                m = state.momentum
                state.running_mean.mul_(1 - m).add_(m * mean.detach())
                state.running_var.mul_(1 - m).add_(m * var.detach() * count / (count - 1))
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise InvalidArgument(f"unknown mode {mode!r}")
    y = (flat - mean) / torch.sqrt(var + state.eps)
    return (y * state.weight + state.bias).reshape(x.shape)


def normalize_layer(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
                    eps: float = NORM_EPS) -> Tensor:
    if x.shape[-1] < 2:
        raise ShapeError("normalize_layer: need at least 2 features")
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def conv_valid(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid 1-D cross-correlation along the window axis.

    ``x`` is ``(..., w, c_in)``, ``kernel`` is ``(kappa, c_in, c_out)``;
    the result is ``(..., w - kappa + 1, c_out)``.
    """
    kappa, c_in, c_out = kernel.shape
    w = x.shape[-2]
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv_valid: input channels {x.shape[-1]} != kernel channels {c_in}")
    if w < kappa:
        raise ShapeError(f"conv_valid: window {w} shorter than kernel {kappa}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv_valid: bias {tuple(bias.shape)} != ({c_out},)")
    windows = x.unfold(-2, kappa, 1)  # (..., w-kappa+1, c_in, kappa)
    return torch.einsum("...oik,kic->...oc", windows, kernel) + bias


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    return x.reshape(*lead, t, heads, d // heads).transpose(-3, -2)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    return x.transpose(-3, -2).reshape(*lead, t, h * dk)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[Tensor], heads: int,
                     out_weight: Optional[Tensor] = None, scale: Optional[float] = None) -> Tensor:
    """Multi-head scaled dot-product attention with a 0/1 key mask.

    ``q`` is ``(..., tq, d)``, ``k``/``v`` are ``(..., tk, d)``. ``mask`` is
    broadcastable to ``(..., tq, tk)``; zero entries get ``-inf`` logits so
    they receive exactly zero weight. Heads are concatenated and, when
    ``out_weight`` is given, projected by it.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"masked_attention: Q {tuple(q.shape)}, K {tuple(k.shape)}, V {tuple(v.shape)}")
    dk = q.shape[-1] // heads
    if scale is None:
        scale = 1.0 / math.sqrt(dk)
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = scale * (qh @ kh.transpose(-1, -2))  # (..., h, tq, tk)
    if mask is not None:
        mask = mask.to(torch.bool)
        if mask.shape[-1] != k.shape[-2]:
            raise ShapeError(f"masked_attention: mask length {mask.shape[-1]} != key count {k.shape[-2]}")
        if not bool(mask.any(dim=-1).all()):
            raise EmptySupportError("masked_attention: a query has no unmasked key")
        logits = logits.masked_fill(~mask.unsqueeze(-3), float("-inf"))
    out = merge_heads(softmax(logits, axis=-1) @ vh)
    if out_weight is not None:
        out = linear(out, out_weight)
    return out


def grad(loss: Tensor, params: Mapping[str, Tensor], retain_graph: bool = False) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every named parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.numel() != 1:
        raise InvalidArgument(f"grad needs a scalar loss, got shape {tuple(loss.shape)}")
    names = [n for n, p in params.items() if p.requires_grad]
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, retain_graph=retain_graph, allow_unused=True)
    out = {}
    for name, p, g in zip(names, tensors, grads):
        out[name] = torch.zeros_like(p) if g is None else g
    return out


def finite_difference_grad(fn: Callable[[], float], param: Tensor, h: float = 1e-4,
                           index: Optional[Iterable] = None) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. each entry of ``param`` (in place, restored)."""
    flat = param.data.view(-1)
    out = np.zeros(flat.numel())
    entries = range(flat.numel()) if index is None else index
    for i in entries:
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn())
        flat[i] = orig - h
        down = float(fn())
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out.reshape(tuple(param.shape))


def relative_error(a, b, floor: float = 1e-12) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm; zero when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"CNNTSPCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sII")  # magic, format version, manifest byte length


@dataclass
class Checkpoint:
    tensors: dict
    config: dict
    extra: dict


def save_checkpoint(path, tensors: Mapping[str, Tensor], config: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Write a manifest plus flat little-endian float32 arrays.

    Layout: ``magic | u32 version | u32 manifest_len | manifest JSON | data``.
    Manifest offsets are relative to the start of the data block.
    """
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({
        "format": CHECKPOINT_VERSION,
        "dtype": "float32-le",
        "config": config or {},
        "extra": extra or {},
        "tensors": entries,
    }, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _HEADER.size + mlen
    manifest = json.loads(data[_HEADER.size:start])
    tensors = {}
    for e in manifest["tensors"]:
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(data[lo:hi], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return Checkpoint(tensors, manifest.get("config", {}), manifest.get("extra", {}))
