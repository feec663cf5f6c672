"""Small reverse-mode autodiff substrate on top of numpy (float64 throughout).

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a closure that pushes the output gradient back to them.  Calling
:func:`reverse_gradients` walks the recorded graph in reverse topological
order.  Parameters live in a :class:`ParamStore`; their ``grad`` arrays
accumulate until :meth:`ParamStore.zero_grad` is called.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
LEAKY_SLOPE = 0.1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the graph (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / b.data**2, b.shape))

    return _make(a.data / b.data, (a, b), back)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: x._accum(2.0 * g * x.data))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: x._accum(g * out))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: x._accum(g / x.data))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: x._accum(g * (1.0 - out * out)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: x._accum(g * out * (1.0 - out)))


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _make(out, (x,), lambda g: x._accum(np.where(pos, g, slope * g)))


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return _make(np.where(mask, a.data, b.data), (a, b), back)


# ---------------------------------------------------------------- reductions / shape


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _make(np.sum(x.data, axis=axis), (x,), back)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(x.shape)))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: x._accum(np.transpose(g, inv)))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def back(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        x._accum(full)

    return _make(x.data[idx], (x,), back)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def back(g):
        for x, piece in zip(xs, np.split(g, splits, axis=ax)):
            if x.requires_grad:
                x._accum(piece)

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, back)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def back(g):
        for i, x in enumerate(xs):
            if x.requires_grad:
                x._accum(np.take(g, i, axis=axis))

    return _make(np.stack([x.data for x in xs], axis=axis), xs, back)


def take_rows(source, index: np.ndarray) -> Tensor:
    """Gather rows ``source[index]`` (used to scatter agents into grids)."""
    source = as_tensor(source)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        full = np.zeros(source.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        source._accum(full)

    return _make(source.data[index], (source,), back)


# ---------------------------------------------------------------- layers


def linear_apply(x, weights, bias) -> Tensor:
    """``weights @ x + bias`` over the last axis of ``x``."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise DimensionError(
            f"linear_apply: x has {x.shape[-1]} features but weights are {weights.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise DimensionError(
            f"linear_apply: bias shape {bias.shape} does not match weights rows {weights.shape[0]}"
        )
    xd = x.data
    out = xd @ weights.data.T + bias.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accum(g @ weights.data)
        if weights.requires_grad:
            weights._accum(g2.T @ xd.reshape(-1, xd.shape[-1]))
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))

    return _make(out, (x, weights, bias), back)


@dataclass
class RecurrentState:
    hidden: Tensor
    cell: Tensor


def lstm_cell_step(
    x, state: RecurrentState, w_ih: Tensor, w_hh: Tensor, bias: Tensor
) -> RecurrentState:
    """One LSTM step with gate order (input, forget, candidate, output).

    ``w_ih`` is ``(4H, in)``, ``w_hh`` is ``(4H, H)`` and ``bias`` is ``(4H,)``.
    Works on a single vector or a batch of row vectors.
    """
    x = as_tensor(x)
    h, c = as_tensor(state.hidden), as_tensor(state.cell)
    hid = w_hh.shape[1]
    if w_ih.shape[0] != 4 * hid or w_hh.shape[0] != 4 * hid or bias.shape != (4 * hid,):
        raise DimensionError(f"lstm_cell_step: inconsistent gate shapes {w_ih.shape}, {w_hh.shape}")
    if x.shape[-1] != w_ih.shape[1]:
        raise DimensionError(f"lstm_cell_step: input size {x.shape[-1]} != {w_ih.shape[1]}")
    if h.shape[-1] != hid or c.shape != h.shape:
        raise DimensionError(f"lstm_cell_step: state sizes {h.shape}/{c.shape} != hidden {hid}")

    z = x.data @ w_ih.data.T + h.data @ w_hh.data.T + bias.data
    i = _sigmoid(z[..., :hid])
    f = _sigmoid(z[..., hid : 2 * hid])
    gg = np.tanh(z[..., 2 * hid : 3 * hid])
    o = _sigmoid(z[..., 3 * hid :])
    c_new = f * c.data + i * gg
    th = np.tanh(c_new)
    h_new = o * th

    def back(g):
        gh, gc = g[..., :hid], g[..., hid:]
        dc = gc + gh * o * (1.0 - th * th)
        dz = np.concatenate(
            [
                dc * gg * i * (1.0 - i),
                dc * c.data * f * (1.0 - f),
                dc * i * (1.0 - gg * gg),
                gh * th * o * (1.0 - o),
            ],
            axis=-1,
        )
        dz2 = dz.reshape(-1, 4 * hid)
        if x.requires_grad:
            x._accum(dz @ w_ih.data)
        if h.requires_grad:
            h._accum(dz @ w_hh.data)
        if c.requires_grad:
            c._accum(dc * f)
        if w_ih.requires_grad:
            w_ih._accum(dz2.T @ x.data.reshape(-1, x.shape[-1]))
        if w_hh.requires_grad:
            w_hh._accum(dz2.T @ h.data.reshape(-1, hid))
        if bias.requires_grad:
            bias._accum(dz2.sum(axis=0))

    hc = _make(np.concatenate([h_new, c_new], axis=-1), (x, h, c, w_ih, w_hh, bias), back)
    return RecurrentState(hidden=hc[..., :hid], cell=hc[..., hid:])


def conv2d_apply(inp, kernels, bias) -> Tensor:
    """Valid, stride-1 cross-correlation.

    ``inp`` is ``(C, H, W)`` or ``(N, C, H, W)``; ``kernels`` is ``(O, C, Kh, Kw)``.
    """
    inp, kernels, bias = as_tensor(inp), as_tensor(kernels), as_tensor(bias)
    single = inp.ndim == 3
    x = inp.data[None] if single else inp.data
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d_apply: bad ranks {inp.shape}, {kernels.shape}")
    n, c, hgt, wid = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"conv2d_apply: input has {c} channels, kernels expect {kc}")
    if kh > hgt or kw > wid:
        raise DimensionError(f"conv2d_apply: kernel {kh}x{kw} larger than input {hgt}x{wid}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d_apply: bias shape {bias.shape} != ({o},)")
    ho, wo = hgt - kh + 1, wid - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    out = np.tensordot(win, kernels.data, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, o
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def back(g):
        g4 = g[None] if single else g
        if kernels.requires_grad:
            kernels._accum(np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3])))
        if bias.requires_grad:
            bias._accum(g4.sum(axis=(0, 2, 3)))
        if inp.requires_grad:
            gx = np.zeros_like(x)
            for a in range(kh):
                for b in range(kw):
                    gx[:, :, a : a + ho, b : b + wo] += np.tensordot(
                        g4, kernels.data[:, :, a, b], axes=([1], [0])
                    ).transpose(0, 3, 1, 2)
            inp._accum(gx[0] if single else gx)

    return _make(out[0] if single else out, (inp, kernels, bias), back)


def maxpool2d_apply(inp, window: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling; extents must divide evenly."""
    inp = as_tensor(inp)
    ph, pw = window
    single = inp.ndim == 3
    x = inp.data[None] if single else inp.data
    n, c, hgt, wid = x.shape
    if hgt % ph or wid % pw:
        raise DimensionError(f"maxpool2d_apply: {hgt}x{wid} not divisible by window {ph}x{pw}")
    ho, wo = hgt // ph, wid // pw
    blocks = x.reshape(n, c, ho, ph, wo, pw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, ph * pw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        g4 = g[None] if single else g
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g4[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hgt, wid)
        inp._accum(gx[0] if single else gx)

    return _make(out[0] if single else out, (inp,), back)


# ---------------------------------------------------------------- backprop


def reverse_gradients(loss: Tensor, params: "ParamStore | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    ``params`` is accepted for symmetry with the store API; parameters that the
    loss does not depend on simply keep their current gradient.
    """
    if loss.data.size != 1:
        raise DimensionError(f"reverse_gradients needs a scalar loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    loss._accum(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is None:
            continue  # leaf: keeps its accumulated gradient
        g = node.grad
        node.grad = None
        if g is not None:
            node._backward(g)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameter tensors, each with a same-shaped gradient slot."""

    def __init__(self, seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, shape: tuple[int, ...], fan_in: int | None = None) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        fan = fan_in if fan_in is not None else (shape[-1] if len(shape) > 1 else shape[0])
        bound = 1.0 / np.sqrt(max(fan, 1))
        t = Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
        t.grad = np.zeros(shape, dtype=DTYPE)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {n: p.grad for n, p in self._params.items()}

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, p in self._params.items():
            arr = np.asarray(state[n], dtype=DTYPE)
            if arr.shape != p.data.shape:
                raise DimensionError(f"{n}: stored shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def fill(self, value: float, prefix: str = "") -> None:
        """Overwrite every parameter under ``prefix`` with ``value``."""
        for n in self.names(prefix):
            self._params[n].data = np.full_like(self._params[n].data, value)


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int):
        self.W = store.add(f"{name}.W", (n_out, n_in), fan_in=n_in)
        self.b = store.add(f"{name}.b", (n_out,), fan_in=n_in)

    def __call__(self, x) -> Tensor:
        return linear_apply(x, self.W, self.b)


class LSTMCell:
    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: int):
        self.hidden = hidden
        self.W_ih = store.add(f"{name}.W_ih", (4 * hidden, n_in), fan_in=hidden)
        self.W_hh = store.add(f"{name}.W_hh", (4 * hidden, hidden), fan_in=hidden)
        self.b = store.add(f"{name}.b", (4 * hidden,), fan_in=hidden)

    def zero_state(self, batch: int) -> RecurrentState:
        z = Tensor(np.zeros((batch, self.hidden)))
        return RecurrentState(z, z)

    def __call__(self, x, state: RecurrentState) -> RecurrentState:
        return lstm_cell_step(x, state, self.W_ih, self.W_hh, self.b)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, kernel: tuple[int, int]):
        kh, kw = kernel
        fan = c_in * kh * kw
        self.K = store.add(f"{name}.K", (c_out, c_in, kh, kw), fan_in=fan)
        self.b = store.add(f"{name}.b", (c_out,), fan_in=fan)

    def __call__(self, x) -> Tensor:
        return conv2d_apply(x, self.K, self.b)


class Adam:
    """Adaptive-moment optimizer with global-norm gradient clipping."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 10.0):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in self.store.items())))

    def step(self) -> float:
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, p in self.store.items():
            g = p.grad * scale
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def finite_difference(fn: Callable[[], float], param: Tensor, index: tuple, step: float = 1e-5) -> float:
    """Central difference of ``fn`` with respect to one parameter entry."""
    orig = param.data[index]
    param.data[index] = orig + step
    up = fn()
    param.data[index] = orig - step
    down = fn()
    param.data[index] = orig
    return (up - down) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
