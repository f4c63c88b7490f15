"""Convolutions, the ConvLSTM cell, Adam, gradient checks and checkpoint IO.

Reverse-mode gradients come from torch autograd; everything that carries a
modelling choice (gate layout, initialization, optimizer update) is written
out here.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

GATES = ("i", "f", "o", "g")


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def _same_pad(k: int) -> int:
    if k % 2 != 1:
        raise ShapeError(f"kernel sizes must be odd, got {k}")
    return k // 2


def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.dim() == ndim:
        return x.unsqueeze(0), True
    if x.dim() == ndim + 1:
        return x, False
    raise ShapeError(f"expected {ndim}D or {ndim + 1}D input, got shape {tuple(x.shape)}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """Cross-correlation of [C_in, H, W] (or batched [N, C_in, H, W]) input."""
    x, squeeze = _batched(x, 3)
    if kernel.dim() != 4 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel {tuple(kernel.shape)} does not match input channels {x.shape[1]}")
    if pad is None:
        pad = _same_pad(kernel.shape[2])
        _same_pad(kernel.shape[3])
    y = F.conv2d(x, kernel, bias, stride=stride, padding=pad)
    return y[0] if squeeze else y


def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: Sequence[int] = (1, 1, 1), pad: Optional[Sequence[int]] = None) -> Tensor:
    """[C_in, L, H, W] (or batched) input; ``stride[0]`` downsamples time."""
    x, squeeze = _batched(x, 4)
    if kernel.dim() != 5 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel {tuple(kernel.shape)} does not match input channels {x.shape[1]}")
    if pad is None:
        pad = tuple(_same_pad(k) for k in kernel.shape[2:])
    y = F.conv3d(x, kernel, bias, stride=tuple(stride), padding=tuple(pad))
    return y[0] if squeeze else y


def uniform_init(shape: Sequence[int], fan_in: int, generator: torch.Generator) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return (torch.rand(tuple(shape), generator=generator, dtype=torch.float64) * 2 - 1) * bound


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, generator: torch.Generator, stride: int = 1):
        super().__init__()
        fan_in = c_in * k * k
        self.weight = nn.Parameter(uniform_init((c_out, c_in, k, k), fan_in, generator))
        self.bias = nn.Parameter(uniform_init((c_out,), fan_in, generator))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride)


class Conv3d(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, generator: torch.Generator,
                 t_stride: int = 1):
        super().__init__()
        fan_in = c_in * k**3
        self.weight = nn.Parameter(uniform_init((c_out, c_in, k, k, k), fan_in, generator))
        self.bias = nn.Parameter(uniform_init((c_out,), fan_in, generator))
        self.stride = (t_stride, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride)


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError(f"hidden {tuple(self.h.shape)} and cell {tuple(self.c.shape)} differ")

    @classmethod
    def zeros(cls, batch: int, hidden: int, rows: int, cols: int, like: Tensor) -> "ConvLSTMState":
        z = like.new_zeros((batch, hidden, rows, cols))
        return cls(z, z.clone())


def convlstm_step(x: Tensor, state: ConvLSTMState, w_x: Tensor, w_h: Tensor,
                  bias: Tensor) -> ConvLSTMState:
    """One ConvLSTM update without peepholes.

    Kernels stack the four gates along the output axis in (i, f, o, g) order:
    ``w_x`` is [4*hid, C_in, k, k], ``w_h`` is [4*hid, hid, k, k].
    """
    hid = state.h.shape[-3]
    if w_x.shape[0] != 4 * hid or w_h.shape[:2] != (4 * hid, hid):
        raise ShapeError(f"gate kernels {tuple(w_x.shape)}/{tuple(w_h.shape)} "
                         f"do not match hidden size {hid}")
    if x.shape[-2:] != state.h.shape[-2:]:
        raise ShapeError(f"input grid {tuple(x.shape[-2:])} != state grid {tuple(state.h.shape[-2:])}")
    # one convolution over [x, h] is cheaper than two and mathematically identical
    z = conv2d(torch.cat([x, state.h], dim=-3), torch.cat([w_x, w_h], dim=1), bias)
    i, f, o, g = torch.chunk(z, 4, dim=-3)
    i, f, o, g = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o), torch.tanh(g)
    c = f * state.c + i * g
    return ConvLSTMState(o * torch.tanh(c), c)


class ConvLSTMCell(nn.Module):
    def __init__(self, c_in: int, hidden: int, k: int, generator: torch.Generator):
        super().__init__()
        fan_in = (c_in + hidden) * k * k
        self.hidden = hidden
        self.w_x = nn.Parameter(uniform_init((4 * hidden, c_in, k, k), fan_in, generator))
        self.w_h = nn.Parameter(uniform_init((4 * hidden, hidden, k, k), fan_in, generator))
        self.bias = nn.Parameter(uniform_init((4 * hidden,), fan_in, generator))

    def forward(self, x: Tensor, state: ConvLSTMState) -> ConvLSTMState:
        return convlstm_step(x, state, self.w_x, self.w_h, self.bias)


@dataclass
class ParamStore:
    """Named parameters plus Adam moment buffers."""

    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, torch.zeros_like(p, requires_grad=False))
            self.v.setdefault(name, torch.zeros_like(p, requires_grad=False))

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls(dict(module.named_parameters()))

    def grads(self) -> dict:
        return {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                for n, p in self.params.items()}


@torch.no_grad()
def adam_step(store: ParamStore, grads: Mapping[str, Tensor], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Bias-corrected Adam update, in place on ``store``."""
    for name, g in grads.items():
        if g.shape != store.params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    for name, g in grads.items():
        p, m, v = store.params[name], store.m[name], store.v[name]
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return store


def grad_check(closure: Callable[[], Tensor], params: Sequence[Tensor], tol: float = 1e-4,
               n_samples: int = 20, seed: int = 0, abs_floor: float = 1e-7) -> float:
    """Max relative error between autograd and central differences.

    ``closure`` must return a scalar and read ``params`` (float64 leaf
    tensors with requires_grad). Up to ``n_samples`` coordinates per tensor
    are probed. ``tol`` is not enforced here; callers compare.
    """
    for p in params:
        p.grad = None
    loss = closure()
    analytic = torch.autograd.grad(loss, list(params), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            idx = rng.choice(n, size=min(n, n_samples), replace=False)
            for j in idx:
                orig = flat[j].item()
                h = 1e-5 * max(1.0, abs(orig))
                flat[j] = orig + h
                fp = closure().item()
                flat[j] = orig - h
                fm = closure().item()
                flat[j] = orig
                num = (fp - fm) / (2 * h)
                ana = gflat[j].item()
                err = abs(num - ana) / max(abs(num), abs(ana), abs_floor)
                worst = max(worst, err)
    return worst


# --- checkpoint container ------------------------------------------------
# layout: b"WPCK" | uint32 LE header length | header JSON | packed LE float32 data
MAGIC = b"WPCK"


def save_tensors(path, tensors: Mapping[str, Tensor], meta: Optional[dict] = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4").copy(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(header)) + header)
        for b in blobs:
            fh.write(b)


def load_tensors(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    base = 8 + n
    out = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out, header["meta"]
