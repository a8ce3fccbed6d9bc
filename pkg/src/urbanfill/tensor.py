"""Dense tensors with tape-based reverse-mode differentiation.

Arrays use the (batch, channel, T, H, W) layout.  Convolutions internally work
channels-last and reduce over kernel offsets with plain matrix products, which
keeps every reduction in a fixed order so results are bit-reproducible.

Usage::

    with Tape() as tape:
        y = conv3d(x, w, b, stride=(1, 1, 1), padding=(0, 1, 1))
        loss = mean(y)
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, ShapeError

# im2col is used below this input channel count, shifted matmuls above it
_IM2COL_MAX_CHANNELS = 8


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- tape ------------------------------------------------------------------

@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Records differentiable ops executed while it is the active tape."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.records)

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. ``wrt``; zeros where unreachable."""
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        keep = {id(t) for t in wrt}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            key = id(rec.out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> None:
        """Populate ``.grad`` on ``params`` (default: every leaf seen by the tape)."""
        if params is None:
            produced = {id(r.out) for r in self.records}
            seen: dict[int, Tensor] = {}
            for rec in self.records:
                for inp in rec.inputs:
                    if inp.requires_grad and id(inp) not in produced:
                        seen.setdefault(id(inp), inp)
            params = list(seen.values())
        for p, g in zip(params, self.gradients(loss, params)):
            p.grad = g


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].records.append(_Record(out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.dtype.type(c))
    return _record(out, (a,), lambda g: (g * g.dtype.type(c),))


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def total(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(dtype=a.dtype)))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, a.dtype.type(0)))
    return _record(out, (a,), lambda g: (np.where(pos, g, g.dtype.type(0)),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    s = a.dtype.type(slope)
    out = Tensor(np.where(pos, a.data, a.data * s))
    return _record(out, (a,), lambda g: (np.where(pos, g, g * s),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return _record(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# -- convolution -----------------------------------------------------------

def conv_output_shape(in_shape, kernel, stride, padding) -> tuple[int, ...]:
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(in_shape, kernel, stride, padding))


def _pad_channels_last(x: np.ndarray, padding) -> np.ndarray:
    B, C, T, H, W = x.shape
    pt, ph, pw = padding
    xp = np.zeros((B, T + 2 * pt, H + 2 * ph, W + 2 * pw, C), dtype=x.dtype)
    xp[:, pt:pt + T, ph:ph + H, pw:pw + W, :] = x.transpose(0, 2, 3, 4, 1)
    return xp


def _offset_slices(kernel, stride, out_shape):
    kt, kh, kw = kernel
    st, sh, sw = stride
    To, Ho, Wo = out_shape
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                yield (a, b, c), (slice(None), slice(a, a + st * (To - 1) + 1, st),
                                  slice(b, b + sh * (Ho - 1) + 1, sh),
                                  slice(c, c + sw * (Wo - 1) + 1, sw))


def _im2col(xp, kernel, stride, out_shape):
    B = xp.shape[0]
    C = xp.shape[-1]
    kt, kh, kw = kernel
    cols = np.empty((B,) + tuple(out_shape) + (kt, kh, kw, C), dtype=xp.dtype)
    for (a, b, c), sl in _offset_slices(kernel, stride, out_shape):
        cols[..., a, b, c, :] = xp[sl]
    return cols.reshape(-1, kt * kh * kw * C)


def _check_conv(x_shape, w_shape, kernel_stride_padding):
    stride, padding = kernel_stride_padding
    if len(x_shape) != 5 or len(w_shape) != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[1]:
        raise ShapeError(f"input has {x_shape[1]} channels, weight expects {w_shape[1]}")
    out = conv_output_shape(x_shape[2:], w_shape[2:], stride, padding)
    if any(n <= 0 for n in out):
        raise ShapeError(f"nonpositive conv output {out} for input {x_shape[2:]}, kernel {w_shape[2:]}")
    return out


def conv3d_array(x: np.ndarray, w: np.ndarray, stride=(1, 1, 1), padding=(0, 0, 0)) -> np.ndarray:
    """Cross-correlation forward on raw arrays; returns (B, O, To, Ho, Wo)."""
    out_shape = _check_conv(x.shape, w.shape, (stride, padding))
    B, C = x.shape[:2]
    O = w.shape[0]
    kernel = w.shape[2:]
    xp = _pad_channels_last(x, padding)
    wl = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))  # kt, kh, kw, C, O
    if _use_flat_shift(C, stride):
        xf = xp.reshape(-1, C)
        out = np.zeros((xf.shape[0], O), dtype=np.result_type(x, w))
        for (a, b, c), off, n in _flat_offsets(xp.shape, kernel):
            out[:n] += xf[off:off + n] @ wl[a, b, c]
        To, Ho, Wo = out_shape
        out = out.reshape(xp.shape[:4] + (O,))[:, :To, :Ho, :Wo]
    else:
        cols = _im2col(xp, kernel, stride, out_shape)
        out = (cols @ wl.reshape(-1, O)).reshape((B,) + out_shape + (O,))
    return out.transpose(0, 4, 1, 2, 3)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS is slow for rank-1 products; broadcasting is exact and fast there
    if a.shape[1] == 1:
        return a * b
    return a @ b


def _use_flat_shift(C: int, stride) -> bool:
    return tuple(stride) == (1, 1, 1) and C >= _IM2COL_MAX_CHANNELS


def _flat_offsets(padded_shape, kernel):
    # Stride-1 windows read contiguous row ranges of the flattened padded grid;
    # rows whose window wraps past an edge only feed discarded outputs.
    _, _, Hp, Wp, _ = padded_shape
    total_rows = int(np.prod(padded_shape[:4]))
    kt, kh, kw = kernel
    last = (kt - 1) * Hp * Wp + (kh - 1) * Wp + (kw - 1)
    n = total_rows - last
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                yield (a, b, c), a * Hp * Wp + b * Wp + c, n


def _conv_backward(g, x, w, stride, padding, need_x, need_w):
    B, C, T, H, W = x.shape
    O = w.shape[0]
    kernel = tuple(w.shape[2:])
    out_shape = g.shape[2:]
    To, Ho, Wo = out_shape
    wl = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
    pt, ph, pw = padding
    padded = (B, T + 2 * pt, H + 2 * ph, W + 2 * pw, C)
    gw = gx = None
    if _use_flat_shift(C, stride):
        gfull = np.zeros(padded[:4] + (O,), dtype=g.dtype)
        gfull[:, :To, :Ho, :Wo] = g.transpose(0, 2, 3, 4, 1)
        gf = gfull.reshape(-1, O)
        xf = _pad_channels_last(x, padding).reshape(-1, C) if need_w else None
        gwl = np.empty(kernel + (C, O), dtype=g.dtype) if need_w else None
        gxf = np.zeros((gf.shape[0], C), dtype=g.dtype) if need_x else None
        for (a, b, c), off, n in _flat_offsets(padded, kernel):
            if need_w:
                gwl[a, b, c] = xf[off:off + n].T @ gf[:n]
            if need_x:
                gxf[off:off + n] += _mm(gf[:n], wl[a, b, c].T)
        if need_w:
            gw = gwl.transpose(4, 3, 0, 1, 2)
        if need_x:
            gxp = gxf.reshape(padded)
    else:
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, O)
        if need_w:
            cols = _im2col(_pad_channels_last(x, padding), kernel, stride, out_shape)
            gw = (cols.T @ g2).reshape(kernel + (C, O)).transpose(4, 3, 0, 1, 2)
        if need_x:
            gcols = _mm(g2, wl.reshape(-1, O).T).reshape((B,) + tuple(out_shape) + kernel + (C,))
            gxp = np.zeros(padded, dtype=g.dtype)
            for (a, b, c), sl in _offset_slices(kernel, stride, out_shape):
                gxp[sl] += gcols[..., a, b, c, :]
    if need_x:
        gx = gxp[:, pt:pt + T, ph:ph + H, pw:pw + W, :].transpose(0, 4, 1, 2, 3)
    return gx, gw


def box_sum(x: np.ndarray, kernel, stride=(1, 1, 1), padding=(0, 0, 0), pad_value: float = 0.0) -> np.ndarray:
    """Windowed sums of a (B, 1, T, H, W) array; same geometry as conv3d with an all-ones kernel.

    Padded positions hold ``pad_value``.
    """
    out_shape = conv_output_shape(x.shape[2:], kernel, stride, padding)
    if any(n <= 0 for n in out_shape):
        raise ShapeError(f"nonpositive window output {out_shape}")
    pad = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    acc = np.pad(x, pad, constant_values=pad_value)
    for axis, (k, s, n) in enumerate(zip(kernel, stride, out_shape), start=2):
        parts = []
        for i in range(k):
            idx = [slice(None)] * acc.ndim
            idx[axis] = slice(i, i + s * (n - 1) + 1, s)
            parts.append(acc[tuple(idx)])
        summed = parts[0].copy()
        for p in parts[1:]:
            summed += p
        acc = summed
    return acc


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3-D cross-correlation with zero padding.

    Output size per axis is ``floor((n + 2p - k) / s) + 1``.
    """
    stride, padding = tuple(stride), tuple(padding)
    data = conv3d_array(x.data, weight.data, stride, padding)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")
        data = data + bias.data.reshape(1, -1, 1, 1, 1)
    out = Tensor(data)

    def backward(g):
        gx, gw = _conv_backward(g, x.data, weight.data, stride, padding,
                                x.requires_grad, weight.requires_grad)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, backward)


# -- resizing --------------------------------------------------------------

def nearest_indices(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst, dtype=np.int64) * src) // dst


def _take_adjoint(g: np.ndarray, idx: np.ndarray, src: int, axis: int) -> np.ndarray:
    dst = idx.shape[0]
    if dst % src == 0:
        shape = g.shape[:axis] + (src, dst // src) + g.shape[axis + 1:]
        return g.reshape(shape).sum(axis=axis + 1)
    if dst >= src:
        # idx is nondecreasing and hits every source index
        starts = np.searchsorted(idx, np.arange(src))
        return np.add.reduceat(g, starts, axis=axis)
    onehot = np.zeros((dst, src), dtype=g.dtype)
    onehot[np.arange(dst), idx] = 1
    moved = np.moveaxis(g, axis, -1) @ onehot
    return np.moveaxis(moved, -1, axis)


def upsample_nearest_to(x: Tensor, target: tuple[int, int, int]) -> Tensor:
    """Nearest-neighbour resize of the trailing (T, H, W) axes to ``target``."""
    target = tuple(int(n) for n in target)
    if any(n < 1 for n in target):
        raise ShapeError(f"target dims must be >= 1, got {target}")
    src = x.shape[2:]
    if src == target:
        out = Tensor(x.data)
        return _record(out, (x,), lambda g: (g,))
    idxs = [nearest_indices(s, d) for s, d in zip(src, target)]
    data = x.data
    for axis, idx in enumerate(idxs, start=2):
        data = np.take(data, idx, axis=axis)
    out = Tensor(data)

    def backward(g):
        for axis in (4, 3, 2):
            g = _take_adjoint(g, idxs[axis - 2], src[axis - 2], axis)
        return (g,)

    return _record(out, (x,), backward)


# -- normalisation ---------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over (B, T, H, W).

    In training mode the running statistics are updated in place (unbiased
    variance); in eval mode they are used for normalisation.
    """
    axes = (0, 2, 3, 4)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm parameters must have shape ({C},)")
    view = (1, C, 1, 1, 1)
    dt = x.dtype.type
    if training:
        n = x.data.size // C
        mu = x.data.mean(axis=axes, dtype=x.dtype)
        centered = x.data - mu.reshape(view)
        var = (centered * centered).mean(axis=axes, dtype=x.dtype)
        inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
        xhat = centered * inv_std.reshape(view)
        m = dt(momentum)
        running_mean *= 1 - m
        running_mean += m * mu.astype(running_mean.dtype)
        unbiased = var * (n / max(n - 1, 1))
        running_var *= 1 - m
        running_var += m * unbiased.astype(running_var.dtype)
    else:
        n = None
        inv_std = (1.0 / np.sqrt(running_var.astype(x.dtype) + dt(eps))).astype(x.dtype)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(view)) * inv_std.reshape(view)
    out = Tensor(xhat * gamma.data.reshape(view) + beta.data.reshape(view))

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(view)
            if training:
                s1 = dxhat.mean(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (dxhat - s1 - xhat * s2) * inv_std.reshape(view)
            else:
                gx = dxhat * inv_std.reshape(view)
        return gx, gg, gb

    return _record(out, (x, gamma, beta), backward)


# -- parameters and optimiser ----------------------------------------------

def kaiming_uniform(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ParamStore:
    """Named trainable tensors, non-trainable buffers and Adam state."""

    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise ContractError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.array(value)
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def to_entries(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, t in self.params.items():
            out[name] = t.data
        for name, b in self.buffers.items():
            out["buf/" + name] = b
        for name in self.params:
            if name in self.m:
                out["adam.m/" + name] = self.m[name]
                out["adam.v/" + name] = self.v[name]
        out["adam.step"] = np.array([self.step], dtype=np.float32)
        return out

    def load_entries(self, entries: Mapping[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in entries:
                raise ContractError(f"checkpoint lacks parameter {name!r}")
            if entries[name].shape != t.shape:
                raise ContractError(f"shape mismatch for {name!r}: {entries[name].shape} vs {t.shape}")
            t.data = np.array(entries[name], dtype=t.dtype)
        for name in self.buffers:
            key = "buf/" + name
            if key not in entries:
                raise ContractError(f"checkpoint lacks buffer {name!r}")
            self.buffers[name][...] = entries[key]
        self.m.clear()
        self.v.clear()
        for name in self.params:
            if "adam.m/" + name in entries:
                self.m[name] = np.array(entries["adam.m/" + name], dtype=np.float32)
                self.v[name] = np.array(entries["adam.v/" + name], dtype=np.float32)
        self.step = int(entries["adam.step"][0]) if "adam.step" in entries else 0


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update, applied in parameter insertion order."""
    missing = [n for n in store.params if n not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters: {', '.join(missing)}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match {name!r} {p.shape}")
        dt = p.dtype.type
        m = store.m.setdefault(name, np.zeros_like(p.data))
        v = store.v.setdefault(name, np.zeros_like(p.data))
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        p.data = p.data - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
    return store


# -- finite-difference checking --------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    offenders: list = field(default_factory=list)  # (input index, flat index, analytic, numeric, rel)

    def __str__(self):
        status = "ok" if self.passed else f"FAILED ({len(self.offenders)} offenders)"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} over {self.n_checked} coords"


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence, rel_tol: float = 1e-4,
                   step: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    Inputs are promoted to float64.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    tensors = [Tensor(np.array(as_tensor(x).data, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*tensors)
    analytic = tape.gradients(out, tensors)

    max_rel = 0.0
    offenders = []
    n = 0
    for i, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(fn(*tensors).data)
            flat[j] = orig - step
            fm = float(fn(*tensors).data)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic[i].reshape(-1)[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
            n += 1
            if rel > rel_tol:
                offenders.append((i, j, a, numeric, rel))
    return GradCheckReport(not offenders, max_rel, n, offenders)
