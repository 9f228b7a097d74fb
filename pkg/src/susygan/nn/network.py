"""Layer stacks, parameter storage and the forward/backward passes."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, NumericFault, SpecError
from .layers import Input, Layer, layer_from_dict


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or not isinstance(self.layers[0], Input):
            raise SpecError("first layer must be Input", layer_index=0)
        shape = None
        shapes = []
        for i, layer in enumerate(self.layers):
            try:
                layer.validate()
                out = layer.output_shape(shape)
            except SpecError as exc:
                raise SpecError(f"{self.name} layer {i} ({layer.kind}): {exc}", layer_index=i) from None
            if i > 0 and isinstance(layer, Input):
                raise SpecError(f"{self.name} layer {i}: Input may only appear first", layer_index=i)
            shapes.append((shape, out))
            shape = out
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def input_shape(self) -> tuple:
        return tuple(self.layers[0].shape)

    @property
    def output_shape(self) -> tuple:
        return self._shapes[-1][1]

    def shapes(self) -> list[tuple[tuple, tuple]]:
        """(input shape, output shape) of every layer, batch axis excluded."""
        return list(self._shapes)

    def layer_param_counts(self) -> list[int]:
        return [sum(int(np.prod(s)) for s in layer.param_shapes(ins).values())
                for layer, (ins, _) in zip(self.layers, self._shapes)]

    def to_dict(self) -> dict:
        return {"name": self.name, "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(d["name"], tuple(layer_from_dict(x) for x in d["layers"]))


def param_count(net: NetworkSpec) -> int:
    return sum(net.layer_param_counts())


def summary(net: NetworkSpec) -> str:
    rows = [f"{'Layer':<12}{'Output Shape':<20}{'Param #':>10}"]
    for layer, (_, out), count in zip(net.layers, net.shapes(), net.layer_param_counts()):
        rows.append(f"{layer.kind:<12}{str(out):<20}{count:>10}")
    rows.append(f"Total params: {param_count(net):,}")
    return "\n".join(rows)


@dataclass
class ParamStore:
    """Weights (including BatchNorm moving statistics) plus RMSprop caches.

    ``iterations`` counts optimizer updates applied so far.
    """

    params: list[dict[str, np.ndarray]]
    cache: list[dict[str, np.ndarray]] = field(default_factory=list)
    iterations: int = 0

    def size(self) -> int:
        return sum(a.size for layer in self.params for a in layer.values())

    def copy(self) -> "ParamStore":
        return copy.deepcopy(self)

    @property
    def dtype(self):
        for layer in self.params:
            for a in layer.values():
                return a.dtype
        return np.dtype(np.float32)


def init_params(net: NetworkSpec, seed: int, dtype=np.float32) -> ParamStore:
    """Glorot-uniform kernels, zero biases, identity BatchNorm; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params, cache = [], []
    for layer, (ins, _) in zip(net.layers, net.shapes()):
        p = layer.init(ins, rng, dtype)
        params.append(p)
        cache.append({k: np.zeros_like(p[k]) for k in layer.trainable})
    return ParamStore(params, cache, 0)


def check_store(net: NetworkSpec, store: ParamStore):
    if len(store.params) != len(net.layers):
        raise ContractError(f"store has {len(store.params)} layers, {net.name} has {len(net.layers)}")
    for i, (layer, (ins, _)) in enumerate(zip(net.layers, net.shapes())):
        expected = layer.param_shapes(ins)
        got = {k: a.shape for k, a in store.params[i].items()}
        if got != expected:
            raise ContractError(f"{net.name} layer {i} ({layer.kind}): parameter shapes {got} != {expected}")


def forward(net: NetworkSpec, store: ParamStore, x: np.ndarray, train: bool = False,
            rng: np.random.Generator | None = None, check_finite: bool = True):
    """Run the stack; returns (output, caches).

    Train mode activates dropout (needs ``rng``) and batch statistics in
    BatchNorm, whose moving averages are updated in place.
    """
    if tuple(x.shape[1:]) != net.input_shape:
        raise ContractError(f"{net.name}: input shape {x.shape[1:]} != {net.input_shape}")
    caches = []
    for i, (layer, p) in enumerate(zip(net.layers, store.params)):
        x, c = layer.forward(p, x, train, rng)
        if check_finite and not np.all(np.isfinite(x)):
            raise NumericFault(f"{net.name}: non-finite activation after layer {i} ({layer.kind})",
                               layer_index=i)
        caches.append((layer.kind, c))
    return x, caches


def backward(net: NetworkSpec, store: ParamStore, caches, grad_out: np.ndarray,
             param_grads: bool = True, top: int | None = None):
    """Back-propagate ``grad_out``; returns (per-layer gradient dicts, input gradient).

    ``grad_out`` is the gradient at the output of layer ``top - 1`` (default:
    the last layer), so ``top=len(net.layers) - 1`` skips a final activation
    whose gradient was folded into the loss.
    """
    if len(caches) != len(net.layers):
        raise ContractError(f"{net.name}: cache has {len(caches)} entries for {len(net.layers)} layers")
    grads: list[dict] = [{} for _ in net.layers]
    g = grad_out
    top = len(net.layers) if top is None else top
    for i in range(top - 1, -1, -1):
        layer = net.layers[i]
        kind, c = caches[i]
        if kind != layer.kind:
            raise ContractError(f"{net.name} layer {i}: cache from {kind}, layer is {layer.kind}")
        g, grads[i] = layer.backward(store.params[i], c, g, param_grads)
    return grads, g
