"""Layer vocabulary for the discriminator and generator stacks.

Tensors are channel-last: (batch, height, width, channels) for images and
(batch, features) for flat activations.  Shapes passed to layer methods
exclude the batch axis.

Each layer is a small frozen dataclass holding its hyper-parameters only;
weights live in a per-layer dict owned by :class:`susygan.nn.network.ParamStore`.
``forward`` returns ``(output, cache)`` and ``backward`` consumes that cache.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import ClassVar

import numpy as np

from ..errors import ContractError, SpecError


class Layer:
    kind: ClassVar[str] = ""
    trainable: ClassVar[tuple[str, ...]] = ()

    def validate(self):
        pass

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def param_shapes(self, in_shape: tuple) -> dict[str, tuple]:
        return {}

    def init(self, in_shape, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        return {}

    def forward(self, params, x, train: bool, rng):
        raise NotImplementedError

    def backward(self, params, cache, g, param_grads: bool = True):
        raise NotImplementedError

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        d.update({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()})
        return d


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass(frozen=True)
class Input(Layer):
    kind: ClassVar[str] = "Input"
    shape: tuple

    def validate(self):
        if not self.shape or any(int(s) != s or s < 1 for s in self.shape):
            raise SpecError(f"invalid input shape {self.shape}")

    def output_shape(self, in_shape):
        return tuple(self.shape)

    def forward(self, params, x, train, rng):
        return x, None

    def backward(self, params, cache, g, param_grads=True):
        return g, {}


def _same_pad(k: int) -> tuple[int, int]:
    # Even kernels get the extra row/column on the trailing edge.
    lead = (k - 1) // 2
    return lead, k - 1 - lead


@dataclass(frozen=True)
class Conv2D(Layer):
    """Stride-1 convolution with zero "same" padding; kernel stored as (k, k, c_in, f)."""

    kind: ClassVar[str] = "Conv2D"
    trainable: ClassVar[tuple[str, ...]] = ("kernel", "bias")
    filters: int
    kernel: int
    stride: int = 1

    def validate(self):
        if self.filters < 1 or self.kernel < 1:
            raise SpecError(f"Conv2D needs filters >= 1 and kernel >= 1, got {self}")
        if self.stride != 1:
            raise SpecError("only stride-1 convolutions are supported")

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"Conv2D expects (h, w, c) input, got {in_shape}")
        return (in_shape[0], in_shape[1], self.filters)

    def param_shapes(self, in_shape):
        k = self.kernel
        return {"kernel": (k, k, in_shape[-1], self.filters), "bias": (self.filters,)}

    def init(self, in_shape, rng, dtype):
        k, c = self.kernel, in_shape[-1]
        w = _glorot(rng, (k, k, c, self.filters), k * k * c, k * k * self.filters, dtype)
        return {"kernel": w, "bias": np.zeros(self.filters, dtype=dtype)}

    # The padded batch is flattened to rows of channels; tap (di, dj) is then a
    # constant row offset di*wp + dj, so each tap is one contiguous GEMM.
    # Rows belonging to padding positions are computed and discarded.
    def _offsets(self, wp):
        k = self.kernel
        return [di * wp + dj for di in range(k) for dj in range(k)]

    def forward(self, params, x, train, rng):
        k, f = self.kernel, self.filters
        b, h, wd, c = x.shape
        lead, trail = _same_pad(k)
        xp = np.pad(x, ((0, 0), (lead, trail), (lead, trail), (0, 0)))
        hp, wp = h + k - 1, wd + k - 1
        rows = xp.reshape(-1, c)
        offs = self._offsets(wp)
        m = len(rows) - offs[-1]
        w = params["kernel"].reshape(k * k, c, f)
        out = np.empty((len(rows), f), dtype=np.result_type(x, w))
        acc = out[:m]
        np.matmul(rows[:m], w[0], out=acc)
        for t in range(1, k * k):
            acc += rows[offs[t]:offs[t] + m] @ w[t]
        out[m:] = 0
        out = out.reshape(b, hp, wp, f)[:, :h, :wd, :] + params["bias"]
        return out, (rows, x.shape)

    def backward(self, params, cache, g, param_grads=True):
        rows, (b, h, wd, c) = cache
        k, f = self.kernel, self.filters
        hp, wp = h + k - 1, wd + k - 1
        offs = self._offsets(wp)
        m = len(rows) - offs[-1]
        gext = np.zeros((b, hp, wp, f), dtype=g.dtype)
        gext[:, :h, :wd, :] = g
        gm = gext.reshape(-1, f)[:m]
        w = params["kernel"].reshape(k * k, c, f)
        grads = {}
        if param_grads:
            dw = np.stack([rows[o:o + m].T @ gm for o in offs])
            grads = {"kernel": dw.reshape(k, k, c, f), "bias": g.reshape(-1, f).sum(axis=0)}
        drows = np.zeros((len(rows), c), dtype=g.dtype)
        for t, o in enumerate(offs):
            drows[o:o + m] += gm @ w[t].T
        lead, _ = _same_pad(k)
        return drows.reshape(b, hp, wp, c)[:, lead:lead + h, lead:lead + wd, :], grads


@dataclass(frozen=True)
class Dense(Layer):
    kind: ClassVar[str] = "Dense"
    trainable: ClassVar[tuple[str, ...]] = ("kernel", "bias")
    units: int

    def validate(self):
        if self.units < 1:
            raise SpecError("Dense needs units >= 1")

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise SpecError(f"Dense expects flat input, got {in_shape}")
        return (self.units,)

    def param_shapes(self, in_shape):
        return {"kernel": (in_shape[0], self.units), "bias": (self.units,)}

    def init(self, in_shape, rng, dtype):
        n = in_shape[0]
        return {"kernel": _glorot(rng, (n, self.units), n, self.units, dtype),
                "bias": np.zeros(self.units, dtype=dtype)}

    def forward(self, params, x, train, rng):
        return x @ params["kernel"] + params["bias"], x

    def backward(self, params, cache, g, param_grads=True):
        grads = {"kernel": cache.T @ g, "bias": g.sum(axis=0)} if param_grads else {}
        return g @ params["kernel"].T, grads


@dataclass(frozen=True)
class BatchNorm(Layer):
    """Normalizes over every axis but the last.

    In train mode the moving statistics in ``params`` are updated in place:
    ``moving = momentum * moving + (1 - momentum) * batch_stat``.
    """

    kind: ClassVar[str] = "BatchNorm"
    trainable: ClassVar[tuple[str, ...]] = ("gamma", "beta")
    momentum: float = 0.9
    epsilon: float = 1e-5

    def validate(self):
        if not 0 <= self.momentum < 1 or not self.epsilon > 0:
            raise SpecError(f"invalid BatchNorm settings {self}")

    def param_shapes(self, in_shape):
        c = (in_shape[-1],)
        return {"gamma": c, "beta": c, "moving_mean": c, "moving_variance": c}

    def init(self, in_shape, rng, dtype):
        c = in_shape[-1]
        return {"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype),
                "moving_mean": np.zeros(c, dtype), "moving_variance": np.ones(c, dtype)}

    def forward(self, params, x, train, rng):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes, dtype=np.float64)
            var = np.square(x - mean.astype(x.dtype)).mean(axis=axes, dtype=np.float64)
            mean, var = mean.astype(x.dtype), var.astype(x.dtype)
            m = self.momentum
            params["moving_mean"][...] = m * params["moving_mean"] + (1 - m) * mean
            params["moving_variance"][...] = m * params["moving_variance"] + (1 - m) * var
        else:
            mean, var = params["moving_mean"], params["moving_variance"]
        inv = 1.0 / np.sqrt(var + x.dtype.type(self.epsilon))
        xhat = (x - mean) * inv
        return params["gamma"] * xhat + params["beta"], (xhat, inv, train)

    def backward(self, params, cache, g, param_grads=True):
        xhat, inv, train = cache
        axes = tuple(range(g.ndim - 1))
        grads = {}
        if param_grads:
            grads = {"gamma": (g * xhat).sum(axis=axes), "beta": g.sum(axis=axes)}
        gx = g * params["gamma"]
        if not train:
            return gx * inv, grads
        count = g.size // g.shape[-1]
        dx = (inv / count) * (count * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes))
        return dx, grads


@dataclass(frozen=True)
class Dropout(Layer):
    kind: ClassVar[str] = "Dropout"
    rate: float

    def validate(self):
        if not 0 <= self.rate < 1:
            raise SpecError(f"dropout rate must be in [0, 1), got {self.rate}")

    def forward(self, params, x, train, rng):
        if not train or self.rate == 0:
            return x, None
        if rng is None:
            raise ContractError("Dropout in train mode needs a random stream")
        keep = rng.random(x.shape, dtype=np.float32) >= np.float32(self.rate)
        mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.rate))
        return x * mask, mask

    def backward(self, params, mask, g, param_grads=True):
        return (g if mask is None else g * mask), {}


@dataclass(frozen=True)
class LeakyReLU(Layer):
    kind: ClassVar[str] = "LeakyReLU"
    slope: float = 0.2

    def validate(self):
        if not self.slope > 0:
            raise SpecError("LeakyReLU slope must be positive")

    def forward(self, params, x, train, rng):
        slope = x.dtype.type(self.slope)
        factor = (x > 0).astype(x.dtype) * (1 - slope) + slope
        return x * factor, factor

    def backward(self, params, factor, g, param_grads=True):
        return g * factor, {}


@dataclass(frozen=True)
class ReLU(Layer):
    kind: ClassVar[str] = "ReLU"

    def forward(self, params, x, train, rng):
        y = np.maximum(x, 0)
        return y, y > 0

    def backward(self, params, pos, g, param_grads=True):
        return g * pos, {}


@dataclass(frozen=True)
class Tanh(Layer):
    kind: ClassVar[str] = "Tanh"

    def forward(self, params, x, train, rng):
        y = np.tanh(x)
        return y, y

    def backward(self, params, y, g, param_grads=True):
        return g * (1 - y * y), {}


@dataclass(frozen=True)
class Sigmoid(Layer):
    kind: ClassVar[str] = "Sigmoid"

    def forward(self, params, x, train, rng):
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
        return y, y

    def backward(self, params, y, g, param_grads=True):
        return g * y * (1 - y), {}


@dataclass(frozen=True)
class UpSample2x(Layer):
    """Nearest-neighbour 2x upsampling of height and width."""

    kind: ClassVar[str] = "UpSample2x"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"UpSample2x expects (h, w, c) input, got {in_shape}")
        return (2 * in_shape[0], 2 * in_shape[1], in_shape[2])

    def forward(self, params, x, train, rng):
        return x.repeat(2, axis=1).repeat(2, axis=2), None

    def backward(self, params, cache, g, param_grads=True):
        b, h, w, c = g.shape
        return g.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)), {}


@dataclass(frozen=True)
class Flatten(Layer):
    kind: ClassVar[str] = "Flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, shape, g, param_grads=True):
        return g.reshape(shape), {}


@dataclass(frozen=True)
class Reshape(Layer):
    kind: ClassVar[str] = "Reshape"
    shape: tuple = field(default=())

    def validate(self):
        if not self.shape or any(s < 1 for s in self.shape):
            raise SpecError(f"invalid reshape target {self.shape}")

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise SpecError(f"cannot reshape {in_shape} to {self.shape}")
        return tuple(self.shape)

    def forward(self, params, x, train, rng):
        return x.reshape((x.shape[0],) + tuple(self.shape)), x.shape

    def backward(self, params, shape, g, param_grads=True):
        return g.reshape(shape), {}


LAYER_KINDS = {cls.kind: cls for cls in (Input, Conv2D, Dense, BatchNorm, Dropout, LeakyReLU,
                                          ReLU, Tanh, Sigmoid, UpSample2x, Flatten, Reshape)}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    try:
        cls = LAYER_KINDS[d.pop("kind")]
    except KeyError as exc:
        raise SpecError(f"unknown layer kind {exc}") from None
    for key in ("shape",):
        if key in d:
            d[key] = tuple(d[key])
    return cls(**d)
