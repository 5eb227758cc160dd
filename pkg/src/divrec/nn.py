"""Small numpy network stack with hand-written backpropagation and Adam.

Modules share one protocol::

    y, cache = module.forward(x)
    gx, grads = module.backward(cache, gy)

``grads`` lines up with ``module.params()``. Every tensor carries a leading
batch dimension; single samples are batches of one. Composite modules are
:class:`Sequential` (chain) and :class:`Branches` (one sub-module per input,
outputs concatenated on the last axis).
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import pathlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = "divrec-nn"
CHECKPOINT_VERSION = 1


class StaleTapeError(RuntimeError):
    pass


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Module:
    kind = "module"

    def params(self) -> list:
        return []

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, gy):
        raise NotImplementedError


class Dense(Module):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, init: str = "kaiming", rng=None):
        rng = np.random.default_rng() if rng is None else rng
        if init == "kaiming":
            bound = np.sqrt(6.0 / n_in)
        elif init == "xavier":
            bound = np.sqrt(6.0 / (n_in + n_out))
        elif init == "zeros":
            bound = 0.0
        else:
            raise ValueError(f"unknown init {init!r}")
        self.n_in, self.n_out, self.init = n_in, n_out, init
        self.W = _uniform(rng, bound, (n_in, n_out))
        self.b = np.zeros(n_out)

    def params(self):
        return [self.W, self.b]

    def spec(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out, "init": self.init}

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"dense expects {self.n_in} inputs, got shape {x.shape}")
        return x @ self.W + self.b, x

    def backward(self, x, gy):
        return gy @ self.W.T, [x.T @ gy, gy.sum(axis=0)]


class Conv2D(Module):
    """Valid-padding, stride-1 convolution on ``(batch, channels, height, width)``."""

    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, kh: int, kw: int, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.c_in, self.c_out, self.kh, self.kw = c_in, c_out, kh, kw
        self.W = _uniform(rng, np.sqrt(6.0 / (c_in * kh * kw)), (c_out, c_in, kh, kw))
        self.b = np.zeros(c_out)

    def params(self):
        return [self.W, self.b]

    def spec(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out,
                "kh": self.kh, "kw": self.kw}

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in or x.shape[2] < self.kh or x.shape[3] < self.kw:
            raise ValueError(f"conv2d({self.c_in},{self.kh}x{self.kw}) cannot take shape {x.shape}")
        b, ho, wo = x.shape[0], x.shape[2] - self.kh + 1, x.shape[3] - self.kw + 1
        # im2col: rows are (b, h, w) output positions, columns (c, i, j) taps
        win = sliding_window_view(x, (self.kh, self.kw), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, -1)
        y = cols @ self.W.reshape(self.c_out, -1).T + self.b
        return y.reshape(b, ho, wo, self.c_out).transpose(0, 3, 1, 2), (x.shape, cols)

    def backward(self, cache, gy):
        shape, cols = cache
        b, _, ho, wo = gy.shape
        g = gy.transpose(0, 2, 3, 1).reshape(b * ho * wo, self.c_out)
        gW = (g.T @ cols).reshape(self.W.shape)
        gb = g.sum(axis=0)
        gcols = (g @ self.W.reshape(self.c_out, -1)).reshape(b, ho, wo, self.c_in, self.kh, self.kw)
        gx = np.zeros(shape)
        for i in range(self.kh):
            for j in range(self.kw):
                gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, [gW, gb]


class ReLU(Module):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, gy):
        return gy * mask, []


class Tanh(Module):
    kind = "tanh"

    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, y, gy):
        return gy * (1.0 - y * y), []


class Flatten(Module):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, gy):
        return gy.reshape(shape), []


class Sequential(Module):
    kind = "sequential"

    def __init__(self, layers=()):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def spec(self):
        return {"kind": self.kind, "layers": [layer.spec() for layer in self.layers]}

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, gy):
        grads = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            gy, g = layer.backward(cache, gy)
            grads[:0] = g
        return gy, grads


class Branches(Module):
    """Applies ``branches[i]`` to ``x[i]`` and concatenates the outputs."""

    kind = "concat"

    def __init__(self, branches):
        self.branches = list(branches)

    def params(self):
        return [p for b in self.branches for p in b.params()]

    def spec(self):
        return {"kind": self.kind, "branches": [b.spec() for b in self.branches]}

    def forward(self, xs):
        if len(xs) != len(self.branches):
            raise ValueError(f"concat expects {len(self.branches)} inputs, got {len(xs)}")
        outs, caches = [], []
        for branch, x in zip(self.branches, xs):
            y, cache = branch.forward(x)
            outs.append(y)
            caches.append(cache)
        widths = [o.shape[-1] for o in outs]
        return np.concatenate(outs, axis=-1), (caches, widths)

    def backward(self, cache, gy):
        caches, widths = cache
        pieces = np.split(gy, np.cumsum(widths)[:-1], axis=-1)
        gxs, grads = [], []
        for branch, c, g in zip(self.branches, caches, pieces):
            gx, gp = branch.backward(c, g)
            gxs.append(gx)
            grads.extend(gp)
        return tuple(gxs), grads


_SIMPLE = {cls.kind: cls for cls in (ReLU, Tanh, Flatten)}


def build_module(spec: dict, rng=None) -> Module:
    kind = spec["kind"]
    if kind == "dense":
        return Dense(spec["n_in"], spec["n_out"], spec.get("init", "kaiming"), rng)
    if kind == "conv2d":
        return Conv2D(spec["c_in"], spec["c_out"], spec["kh"], spec["kw"], rng)
    if kind == "sequential":
        return Sequential([build_module(s, rng) for s in spec["layers"]])
    if kind == "concat":
        return Branches([build_module(s, rng) for s in spec["branches"]])
    if kind in _SIMPLE:
        return _SIMPLE[kind]()
    raise ValueError(f"unknown layer kind {kind!r}")


@dataclasses.dataclass
class Tape:
    owner: int
    version: int
    cache: object


class Network:
    """A root module plus a version counter that invalidates old tapes.

    Anything that mutates parameters in place (optimizers, soft updates,
    :meth:`load_params`) must call :meth:`touch`.
    """

    def __init__(self, root: Module):
        self.root = root
        self.version = 0

    @property
    def params(self) -> list:
        return self.root.params()

    @property
    def total_params(self) -> int:
        return sum(p.size for p in self.params)

    def touch(self) -> None:
        self.version += 1

    def forward(self, x):
        y, cache = self.root.forward(x)
        return y, Tape(id(self), self.version, cache)

    def __call__(self, x):
        return self.root.forward(x)[0]

    def backward(self, tape: Tape, gy):
        """Returns ``(param_grads, input_grad)``."""
        if tape.owner != id(self) or tape.version != self.version:
            raise StaleTapeError("tape does not belong to the current parameters")
        gx, grads = self.root.backward(tape.cache, gy)
        return grads, gx

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.params:
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        self.touch()

    def load_params(self, arrays) -> None:
        params = self.params
        if len(arrays) != len(params):
            raise ValueError("parameter count mismatch")
        for p, a in zip(params, arrays):
            if p.shape != np.shape(a):
                raise ValueError(f"shape mismatch {p.shape} vs {np.shape(a)}")
            p[...] = a
        self.touch()

    def copy(self) -> "Network":
        clone = Network(build_module(self.root.spec(), np.random.default_rng(0)))
        clone.load_params([p.copy() for p in self.params])
        return clone


@dataclasses.dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_network(cls, net: Network, learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in net.params],
                   [np.zeros_like(p) for p in net.params], 0, learning_rate, **kw)


def adam_step(net: Network, grads, state: AdamState) -> bool:
    """Bias-corrected Adam update in place. Non-finite gradients skip the step."""
    params = net.params
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    net.touch()
    return True


def soft_update(online: Network, target: Network, tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target``, element-wise."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    src, dst = online.params, target.params
    if len(src) != len(dst) or any(a.shape != b.shape for a, b in zip(src, dst)):
        raise ValueError("online and target shapes differ")
    if tau == 0.0:
        return
    for a, b in zip(src, dst):
        if tau == 1.0:
            b[...] = a
        else:
            b *= 1.0 - tau
            b += tau * a
    target.touch()


# ---------------------------------------------------------------------------
# checkpoints
#
# A JSON header line ``{"format", "version", "networks": {name: {"spec",
# "shapes", "total_params"}}}`` followed by the raw little-endian float64
# parameters of each network in header order.


def dumps_networks(nets: dict, extra: dict | None = None) -> bytes:
    header = {"format": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION,
              "extra": extra or {}, "networks": {}}
    body = io.BytesIO()
    for name, net in nets.items():
        header["networks"][name] = {
            "spec": net.root.spec(),
            "shapes": [list(p.shape) for p in net.params],
            "total_params": net.total_params,
        }
        for p in net.params:
            body.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return json.dumps(header, sort_keys=True).encode() + b"\n" + body.getvalue()


def loads_networks(blob: bytes) -> tuple[dict, dict]:
    head, _, body = blob.partition(b"\n")
    header = json.loads(head)
    if header.get("format") != CHECKPOINT_MAGIC or header.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a version 1 network checkpoint")
    flat = np.frombuffer(body, dtype="<f8")
    offset, nets = 0, {}
    for name, meta in header["networks"].items():
        net = Network(build_module(meta["spec"], np.random.default_rng(0)))
        if net.total_params != meta["total_params"]:
            raise ValueError(f"{name}: declared {meta['total_params']} params, spec has {net.total_params}")
        arrays = []
        for shape in meta["shapes"]:
            size = int(np.prod(shape))
            if offset + size > flat.size:
                raise ValueError("truncated network checkpoint")
            arrays.append(flat[offset:offset + size].reshape(shape))
            offset += size
        net.load_params(arrays)
        net.version = 0
        nets[name] = net
    if offset != flat.size:
        raise ValueError("trailing data in network checkpoint")
    return nets, header["extra"]


def save_networks(path, nets: dict, extra: dict | None = None) -> None:
    path = pathlib.Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_networks(nets, extra))
    os.replace(tmp, path)


def load_networks(path) -> tuple[dict, dict]:
    return loads_networks(pathlib.Path(path).read_bytes())
