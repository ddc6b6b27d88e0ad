"""Dense multilayer networks written directly in numpy.

Batches are column-major: a batch of ``n_m`` samples with ``d`` features is a
``(d, n_m)`` array. Parameter gradients returned by :func:`backward` are summed
over the batch, never averaged; every learner in the package relies on that.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1

OUTPUT_ACTIVATIONS = ("linear", "tanh")


class ShapeError(ValueError):
    """Raised when an array does not have the shape a network expects."""


class StaleCacheError(RuntimeError):
    """Raised when a forward cache no longer matches the network parameters."""


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    output_activation: str = "linear"
    hidden_activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ValueError(f"need at least one hidden layer, got sizes {sizes}")
        if any(n < 1 for n in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.hidden_activation != "relu":
            raise ValueError("only relu hidden layers are supported")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        """Layer count including the input layer (a 10-12-12-2 net has 4)."""
        return len(self.layer_sizes)


def param_count(spec: MlpSpec) -> int:
    sizes = spec.layer_sizes
    return sum(n_in * n_out + n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


def _views(spec: MlpSpec, flat: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Split a flat vector into weight and bias views, all weights first."""
    sizes = spec.layer_sizes
    weights, biases = [], []
    offset = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[offset:offset + n_in * n_out].reshape(n_out, n_in))
        offset += n_in * n_out
    for n_out in sizes[1:]:
        biases.append(flat[offset:offset + n_out])
        offset += n_out
    return weights, biases


def flatten_grads(grads) -> np.ndarray:
    """Flat view (or copy) of a gradient list ordered like ``net.params()``."""
    if isinstance(grads, np.ndarray):
        return grads
    base = grads[0].base
    n = sum(np.size(g) for g in grads)
    if base is not None and base.ndim == 1 and base.size == n and all(g.base is base for g in grads):
        return base
    return np.concatenate([np.ravel(g) for g in grads])


class MlpNet:
    """Weights ``W[l]`` have shape ``(fan_out, fan_in)``; biases ``b[l]`` are 1-d."""

    def __init__(self, spec: MlpSpec, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.spec = spec
        self.theta = np.zeros(param_count(spec))
        self.weights, self.biases = _views(spec, self.theta)
        if len(weights) != len(self.weights) or len(biases) != len(self.biases):
            raise ShapeError("parameter list length does not match spec")
        for dst, src in zip(self.params(), [*weights, *biases]):
            src = np.asarray(src, dtype=float)
            if src.shape != dst.shape:
                raise ShapeError(f"parameter shape {src.shape} does not match spec {spec.layer_sizes}")
            dst[...] = src
        self.version = 0

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "MlpNet":
        """Uniform weights in +/- sqrt(6 / (fan_in + fan_out)), zero biases."""
        weights, biases = [], []
        for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
            limit = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(spec, weights, biases)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "MlpNet":
        sizes = spec.layer_sizes
        return cls(
            spec,
            [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
        )

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order, shared with gradient lists."""
        return [*self.weights, *self.biases]

    def copy(self) -> "MlpNet":
        return MlpNet(self.spec, self.weights, self.biases)

    def load_from(self, other: "MlpNet") -> None:
        """Overwrite parameters in place with those of ``other``."""
        self.set_flat(other.theta)

    def flat(self) -> np.ndarray:
        return self.theta.copy()

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ShapeError("flat parameter vector has the wrong length")
        self.theta[...] = theta
        self.version += 1

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class ForwardCache:
    net_id: int
    version: int
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None


def _as_batch(x: np.ndarray, n_features: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != n_features:
        raise ShapeError(f"expected batch with {n_features} rows, got shape {x.shape}")
    return x


def forward(net: MlpNet, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    h = _as_batch(x, net.spec.n_in)
    cache = ForwardCache(id(net), net.version)
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        cache.inputs.append(h)
        z = w @ h + b[:, None]
        cache.preacts.append(z)
        if l < last:
            h = np.maximum(z, 0.0)
        elif net.spec.output_activation == "tanh":
            h = np.tanh(z)
        else:
            h = z
    cache.output = h
    return h, cache


def backward(
    net: MlpNet, cache: ForwardCache, dy: np.ndarray, need_params: bool = True
) -> tuple[list[np.ndarray] | None, np.ndarray]:
    """Reverse-mode pass for the scalar ``sum(dy * y)``.

    Returns the parameter gradients (ordered as ``net.params()``, or ``None``
    when ``need_params`` is false) and the input gradient ``dx``.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("cache was produced by a different or since-modified network")
    dy = np.asarray(dy, dtype=float)
    if dy.shape != cache.output.shape:
        raise ShapeError(f"dy shape {dy.shape} != output shape {cache.output.shape}")
    last = len(net.weights) - 1
    if net.spec.output_activation == "tanh":
        dz = dy * (1.0 - cache.output**2)
    else:
        dz = dy
    if need_params:
        flat = np.empty(net.theta.size)
        dws, dbs = _views(net.spec, flat)
    for l in range(last, -1, -1):
        if need_params:
            np.matmul(dz, cache.inputs[l].T, out=dws[l])
            np.sum(dz, axis=1, out=dbs[l])
        dh = net.weights[l].T @ dz
        if l > 0:
            dz = dh * (cache.preacts[l - 1] > 0)
    grads = [*dws, *dbs] if need_params else None
    return grads, dh


def input_vjp(net: MlpNet, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Input gradient only: ``dy`` pulled back through the net at ``x``."""
    _, cache = forward(net, x)
    return backward(net, cache, dy, need_params=False)[1]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_net(cls, net: MlpNet, **kwargs) -> "AdamState":
        return cls(m=np.zeros_like(net.theta), v=np.zeros_like(net.theta), **kwargs)


def adam_step(net: MlpNet, grads, state: AdamState, lr: float) -> bool:
    """Apply one bias-corrected Adam update in place.

    ``grads`` is a list ordered like ``net.params()`` or a flat vector.
    Returns False (and counts the skip in ``state.skipped``) when any gradient
    entry is non-finite; the network and moments are then left untouched.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not isinstance(grads, np.ndarray):
        params = net.params()
        if len(grads) != len(params):
            raise ShapeError("gradient list does not match parameters")
        for g, p in zip(grads, params):
            if np.shape(g) != p.shape:
                raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
    g = flatten_grads(grads)
    if g.shape != net.theta.shape:
        raise ShapeError("flat gradient has the wrong length")
    if not np.isfinite(g).all():
        state.skipped += 1
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1**state.step)
    v_hat = v / (1.0 - b2**state.step)
    net.theta -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    net.version += 1
    return True


def soft_update(target: MlpNet, source: MlpNet, tau: float) -> None:
    """target <- target + tau * (source - target), in place."""
    target.theta += tau * (source.theta - target.theta)
    target.version += 1


# checkpoint format: a single .npz holding a JSON header plus raw float64 arrays


def _header(net: MlpNet) -> dict:
    return {
        "format": "costate_rl.mlp",
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(net.spec.layer_sizes),
        "output_activation": net.spec.output_activation,
        "hidden_activation": net.spec.hidden_activation,
    }


def pack_nets(nets: dict[str, MlpNet], extra: dict[str, np.ndarray] | None = None) -> dict:
    arrays: dict[str, np.ndarray] = {}
    headers = {}
    for name, net in nets.items():
        headers[name] = _header(net)
        for i, p in enumerate(net.params()):
            arrays[f"{name}/p{i}"] = p
    for key, value in (extra or {}).items():
        arrays[f"extra/{key}"] = np.asarray(value)
    arrays["__header__"] = np.frombuffer(json.dumps(headers).encode(), dtype=np.uint8)
    return arrays


def unpack_nets(arrays) -> tuple[dict[str, MlpNet], dict[str, np.ndarray]]:
    headers = json.loads(bytes(arrays["__header__"]).decode())
    nets = {}
    for name, h in headers.items():
        if h.get("format") != "costate_rl.mlp" or h.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint entry {name!r}: {h}")
        spec = MlpSpec(tuple(h["layer_sizes"]), h["output_activation"], h["hidden_activation"])
        n = len(spec.layer_sizes) - 1
        params = [np.array(arrays[f"{name}/p{i}"]) for i in range(2 * n)]
        nets[name] = MlpNet(spec, params[:n], params[n:])
    extra = {k[len("extra/"):]: np.array(arrays[k]) for k in arrays.keys() if k.startswith("extra/")}
    return nets, extra


def save_nets(path, nets: dict[str, MlpNet], extra: dict[str, np.ndarray] | None = None) -> None:
    with open(Path(path), "wb") as fh:
        np.savez(fh, **pack_nets(nets, extra))


def load_nets(path) -> tuple[dict[str, MlpNet], dict[str, np.ndarray]]:
    with np.load(Path(path)) as data:
        return unpack_nets({k: data[k] for k in data.files})


def to_bytes(net: MlpNet) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **pack_nets({"net": net}))
    return buf.getvalue()


def from_bytes(blob: bytes) -> MlpNet:
    with np.load(io.BytesIO(blob)) as data:
        return unpack_nets({k: data[k] for k in data.files})[0]["net"]


def pack_adam(states: dict[str, AdamState]) -> dict[str, np.ndarray]:
    """Optimizer states as flat arrays, for the ``extra`` slot of a checkpoint."""
    out = {}
    for name, st in states.items():
        out[f"adam/{name}/m"] = st.m
        out[f"adam/{name}/v"] = st.v
        out[f"adam/{name}/meta"] = np.array([st.step, st.beta1, st.beta2, st.eps, st.skipped], dtype=float)
    return out


def unpack_adam(extra: dict[str, np.ndarray]) -> dict[str, AdamState]:
    names = {k.split("/")[1] for k in extra if k.startswith("adam/")}
    states = {}
    for name in sorted(names):
        step, b1, b2, eps, skipped = extra[f"adam/{name}/meta"]
        states[name] = AdamState(
            np.array(extra[f"adam/{name}/m"]), np.array(extra[f"adam/{name}/v"]),
            int(step), float(b1), float(b2), float(eps), int(skipped),
        )
    return states
