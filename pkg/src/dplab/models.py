"""Fully-connected models, initializers and the checkpoint container.

A :class:`Model` is an MLP described by ``layer_sizes``; the two-layer
linear network ``f(x) = W2 W1 x`` is the special case ``[d, m, 1]`` with the
identity activation and no biases. Weight matrices are stored ``(out, in)``
so a batch ``X`` of shape ``(n, in)`` maps to ``X @ W.T + b``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ad

ACTIVATION_FNS = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "identity": lambda z: z,
}


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class InitSpec:
    """How to draw initial parameters.

    ``uniform``: U(-sqrt(1/fan_in), +sqrt(1/fan_in)) for weights and biases.
    ``gaussian``: N(mean, std^2) for every entry.
    ``balanced``: rank-one construction with ``W1 W1^T == W2^T W2``
    (two-layer linear models only); ``scale`` is the norm of ``W2``.
    """

    scheme: str = "uniform"
    seed: int = 0
    mean: float = 0.0
    std: float = 0.1
    scale: float = 0.1

    def __post_init__(self):
        if self.scheme not in ("uniform", "gaussian", "balanced"):
            raise ValueError(f"unknown init scheme {self.scheme!r}")
        if self.scheme == "gaussian" and self.std < 0:
            raise ValueError("gaussian init needs std >= 0")
        if self.scheme == "balanced" and not self.scale > 0:
            raise ValueError("balanced init needs scale > 0; a zero start is a fixed point of the flow")


@dataclass
class Model:
    layer_sizes: list[int]
    activation: str = "relu"
    bias: bool = True
    params: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("a model needs at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.activation not in ACTIVATION_FNS:
            raise ValueError(f"unknown activation {self.activation!r}")
        expected = dict(self.param_shapes())
        if not self.params:
            self.params = {k: np.zeros(s) for k, s in expected.items()}
        if list(self.params) != list(expected):
            raise ValueError(f"parameter names {list(self.params)} do not match {list(expected)}")
        for name, shape in expected.items():
            p = np.asarray(self.params[name], dtype=np.float64)
            if p.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {p.shape}")
            self.params[name] = p
        for name, m in self.masks.items():
            if name not in expected:
                raise ValueError(f"mask for unknown parameter {name!r}")
            if np.shape(m) != expected[name]:
                raise ShapeError(f"mask {name}: shape {np.shape(m)} != parameter shape {expected[name]}")
            self.masks[name] = (np.asarray(m) != 0).astype(np.float64)

    # structure ------------------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:]), start=1):
            out.append((f"W{i}", (fan_out, fan_in)))
            if self.bias:
                out.append((f"b{i}", (fan_out,)))
        return out

    def weight_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("W")]

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def same_architecture(self, other: "Model") -> bool:
        return (self.layer_sizes == other.layer_sizes and self.activation == other.activation
                and self.bias == other.bias)

    def copy(self) -> "Model":
        return Model(list(self.layer_sizes), self.activation, self.bias,
                     {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.masks.items()},
                     dict(self.meta))

    # masks ----------------------------------------------------------------

    def effective(self, name: str) -> np.ndarray:
        p = self.params[name]
        m = self.masks.get(name)
        return p if m is None else p * m

    def mask_vector(self) -> np.ndarray:
        """0/1 vector in flatten order (all ones where no mask is set)."""
        parts = [self.masks[n].ravel() if n in self.masks else np.ones(p.size)
                 for n, p in self.params.items()]
        return np.concatenate(parts)

    def apply_masks(self) -> "Model":
        for name, m in self.masks.items():
            self.params[name] = self.params[name] * m
        return self

    # flatten --------------------------------------------------------------

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def unflatten(self, vector: np.ndarray) -> "Model":
        """New model with the same structure and masks and parameters from ``vector``."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.ndim != 1 or vector.size != self.num_params:
            raise ValueError(f"unflatten: expected vector of length {self.num_params}, got shape {vector.shape}")
        out = self.copy()
        out.set_flat(vector)
        return out

    def set_flat(self, vector: np.ndarray) -> None:
        if vector.size != self.num_params:
            raise ValueError(f"set_flat: expected {self.num_params} values, got {vector.size}")
        pos = 0
        for name, p in self.params.items():
            self.params[name] = np.array(vector[pos:pos + p.size], dtype=np.float64).reshape(p.shape)
            pos += p.size

    # forward --------------------------------------------------------------

    def _check_input(self, X: np.ndarray) -> None:
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ShapeError(f"layer W1 expects inputs of width {self.input_dim}, got array of shape {X.shape}")

    def forward(self, tape: ad.Tape, X: np.ndarray) -> tuple[ad.Node, dict[str, ad.Node]]:
        """Record the forward pass on ``tape``; returns output and parameter leaves."""
        X = np.asarray(X, dtype=np.float64)
        self._check_input(X)
        leaves = {name: tape.leaf(p) for name, p in self.params.items()}
        act = ad.ACTIVATIONS[self.activation]
        h = tape.constant(X)
        for i in range(1, self.n_layers + 1):
            W = leaves[f"W{i}"]
            if f"W{i}" in self.masks:
                W = ad.mask(W, self.masks[f"W{i}"])
            z = h @ W.T
            if self.bias:
                b = leaves[f"b{i}"]
                if f"b{i}" in self.masks:
                    b = ad.mask(b, self.masks[f"b{i}"])
                z = z + b
            h = act(z) if i < self.n_layers else z
        return h, leaves

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        self._check_input(X)
        act = ACTIVATION_FNS[self.activation]
        h = X
        for i in range(1, self.n_layers + 1):
            z = h @ self.effective(f"W{i}").T
            if self.bias:
                z = z + self.effective(f"b{i}")
            h = act(z) if i < self.n_layers else z
        return h


# builders -----------------------------------------------------------------

def _init_params(model: Model, init: InitSpec) -> None:
    rng = np.random.default_rng(init.seed)
    for name, shape in model.param_shapes():
        if init.scheme == "gaussian":
            model.params[name] = init.mean + init.std * rng.standard_normal(shape)
        else:
            fan_in = model.layer_sizes[int(name[1:]) - 1]
            bound = np.sqrt(1.0 / fan_in)
            model.params[name] = rng.uniform(-bound, bound, size=shape)


def build_mlp(layer_sizes: list[int], activation: str = "relu", init: InitSpec | None = None,
              bias: bool = True) -> Model:
    if not layer_sizes or len(layer_sizes) < 2:
        raise ValueError("build_mlp needs at least two layer sizes")
    init = init or InitSpec()
    if init.scheme == "balanced":
        raise ValueError("balanced init applies only to two-layer linear models")
    model = Model(list(layer_sizes), activation, bias)
    _init_params(model, init)
    return model


def balanced_init(m: int, d: int, scale: float, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Rank-one ``(W1, W2)`` with ``W1 W1^T == W2^T W2`` and ``|W2| == scale``.

    ``W2 = w`` for a random row ``w`` of norm ``scale`` and ``W1 = w^T b`` for a
    random unit row ``b``, so ``W1 W1^T = w^T (b b^T) w = w^T w``.
    """
    if m < 1 or d < 1:
        raise ValueError("balanced_init needs m, d >= 1")
    if not scale > 0:
        raise ValueError("balanced_init needs scale > 0")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(m)
    w *= scale / np.linalg.norm(w)
    b = rng.standard_normal(d)
    b /= np.linalg.norm(b)
    return np.outer(w, b), w[None, :].copy()


def build_two_layer_linear(d_s: int, d_n: int, m: int, init: InitSpec | None = None) -> Model:
    """``f(x) = W2 W1 x`` with ``W1`` split into signal columns ``[:d_s]`` and noise columns."""
    if d_s < 0 or d_n < 0 or d_s + d_n < 1:
        raise ValueError(f"need d_s, d_n >= 0 with d_s + d_n >= 1, got {d_s}, {d_n}")
    if m < 1:
        raise ValueError(f"hidden width m must be positive, got {m}")
    init = init or InitSpec()
    d = d_s + d_n
    model = Model([d, m, 1], "identity", bias=False, meta={"d_s": int(d_s), "d_n": int(d_n)})
    if init.scheme == "balanced":
        W1, W2 = balanced_init(m, d, init.scale, init.seed)
        model.params["W1"], model.params["W2"] = W1, W2
    else:
        _init_params(model, init)
    return model


def balancedness_residual(model: Model) -> float:
    W1, W2 = model.effective("W1"), model.effective("W2")
    return float(np.linalg.norm(W1 @ W1.T - W2.T @ W2))


# checkpoint container -----------------------------------------------------
#
# bytes 0..7     magic b"DPLABCK\x01"
# bytes 8..15    header length H, uint64 little-endian
# bytes 16..16+H UTF-8 JSON header (sorted keys, compact separators)
# then           every parameter in declaration order, float64 little-endian, row-major
# then           every mask flagged in the header, one uint8 (0/1) per entry, same order

MAGIC = b"DPLABCK\x01"


def checkpoint_bytes(model: Model) -> bytes:
    header = {
        "format": 1,
        "layer_sizes": model.layer_sizes,
        "activation": model.activation,
        "bias": model.bias,
        "meta": model.meta,
        "tensors": [{"name": n, "shape": list(p.shape), "has_mask": n in model.masks}
                    for n, p in model.params.items()],
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(hdr)), hdr]
    chunks += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params.values()]
    chunks += [np.ascontiguousarray(model.masks[n], dtype=np.uint8).tobytes()
               for n in model.params if n in model.masks]
    return b"".join(chunks)


def model_from_bytes(buf: bytes) -> Model:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CheckpointError("not a dplab checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    pos = 16 + hlen
    params, masks = {}, {}
    for t in header["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        end = pos + 8 * size
        if end > len(buf):
            raise CheckpointError(f"truncated data for {t['name']}")
        params[t["name"]] = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64).reshape(t["shape"])
        pos = end
    for t in header["tensors"]:
        if t["has_mask"]:
            size = params[t["name"]].size
            if pos + size > len(buf):
                raise CheckpointError(f"truncated mask for {t['name']}")
            masks[t["name"]] = np.frombuffer(buf[pos:pos + size], dtype=np.uint8).astype(np.float64).reshape(t["shape"])
            pos += size
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after checkpoint data")
    return Model(header["layer_sizes"], header["activation"], header["bias"], params, masks, header["meta"])


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
