"""Minimal from-scratch network engine: conv/dense layers, backprop, Adam, grad checks.

Layers are described by LayerSpec values; parameters live in a versioned
ParamStore keyed by layer name.  Reusing a layer name across branches ties the
weights: initialization happens once and backward sums the branch gradients.
All math is float64 numpy; convolutions are im2col matmuls with valid padding.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PROB_EPS = 1e-7

CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Input/parameter shape inconsistent with the layer contract."""


class StaleCacheError(RuntimeError):
    """A forward cache was reused after the parameters changed."""


@dataclass(frozen=True)
class Conv:
    name: str
    out_channels: int
    kernel: int
    stride: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kernel < 1 or self.stride < 1 or self.out_channels < 1:
            raise ValueError(f"conv {self.name!r}: kernel/stride/channels must be >= 1")


@dataclass(frozen=True)
class Dense:
    name: str
    out_units: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.out_units < 1:
            raise ValueError(f"dense {self.name!r}: out_units must be >= 1")


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Conv | Dense | Relu | Sigmoid | Flatten


class ParamStore:
    """Immutable-by-convention mapping name -> array, with a version counter.

    Forward caches record the version they were computed against; backward
    refuses a cache whose version no longer matches (stale after an optimizer
    step, which always returns a fresh store with version + 1).
    """

    def __init__(self, arrays: Mapping[str, np.ndarray], version: int = 0):
        self._arrays = {k: np.asarray(v, dtype=float) for k, v in arrays.items()}
        self.version = int(version)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return sorted(self._arrays)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return ((k, self._arrays[k]) for k in self.names())

    def n_params(self) -> int:
        return int(sum(a.size for _, a in self.items()))

    def with_arrays(self, updates: Mapping[str, np.ndarray]) -> "ParamStore":
        merged = dict(self._arrays)
        merged.update(updates)
        return ParamStore(merged, version=self.version + 1)

    def copy(self) -> "ParamStore":
        return ParamStore(self._arrays, version=self.version)

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self._arrays[k], other._arrays[k]) for k in self._arrays
        )


def _layer_rng(global_seed: int, spec: Conv | Dense) -> np.random.Generator:
    name_tag = zlib.crc32(spec.name.encode())
    return np.random.default_rng(np.random.SeedSequence((global_seed, name_tag, spec.seed)))


def out_shape(net: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Propagate a (batchless) input shape through the chain."""
    shape = tuple(input_shape)
    for spec in net:
        if isinstance(spec, Conv):
            if len(shape) != 3:
                raise ShapeError(f"layer {spec.name!r}: conv needs (C, H, W), got {shape}")
            c, h, w = shape
            if h < spec.kernel or w < spec.kernel:
                raise ShapeError(f"layer {spec.name!r}: kernel {spec.kernel} exceeds input {shape}")
            shape = (
                spec.out_channels,
                (h - spec.kernel) // spec.stride + 1,
                (w - spec.kernel) // spec.stride + 1,
            )
        elif isinstance(spec, Dense):
            if len(shape) != 1:
                raise ShapeError(f"layer {spec.name!r}: dense needs flat input, got {shape}")
            shape = (spec.out_units,)
        elif isinstance(spec, Flatten):
            shape = (int(np.prod(shape)),)
    return shape


def init_params(
    net: Sequence[LayerSpec],
    input_shape: tuple[int, ...],
    seed: int,
    into: ParamStore | None = None,
) -> ParamStore:
    """Fan-in uniform init, zero biases; existing names are kept (weight tying)."""
    arrays: dict[str, np.ndarray] = dict(into.items()) if into is not None else {}
    shape = tuple(input_shape)
    for spec in net:
        if isinstance(spec, Conv):
            c = shape[0]
            fan_in = c * spec.kernel * spec.kernel
            wname, bname = f"{spec.name}.W", f"{spec.name}.b"
            wshape = (spec.out_channels, c, spec.kernel, spec.kernel)
            if wname in arrays:
                if arrays[wname].shape != wshape:
                    raise ShapeError(f"layer {spec.name!r}: tied weight shape mismatch")
            else:
                rng = _layer_rng(seed, spec)
                lim = 1.0 / np.sqrt(fan_in)
                arrays[wname] = rng.uniform(-lim, lim, size=wshape)
                arrays[bname] = np.zeros(spec.out_channels)
        elif isinstance(spec, Dense):
            fan_in = shape[0]
            wname, bname = f"{spec.name}.W", f"{spec.name}.b"
            wshape = (fan_in, spec.out_units)
            if wname in arrays:
                if arrays[wname].shape != wshape:
                    raise ShapeError(f"layer {spec.name!r}: tied weight shape mismatch")
            else:
                rng = _layer_rng(seed, spec)
                lim = 1.0 / np.sqrt(fan_in)
                arrays[wname] = rng.uniform(-lim, lim, size=wshape)
                arrays[bname] = np.zeros(spec.out_units)
        shape = out_shape([spec], shape)
    return ParamStore(arrays, version=into.version if into is not None else 0)


@dataclass
class ForwardCache:
    version: int
    items: list


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    n, c, h, wd = x.shape
    oc, _, k, _ = w.shape
    patches = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = patches.shape[2], patches.shape[3]
    cols = np.ascontiguousarray(patches.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * k * k
    )
    out = (cols @ w.reshape(oc, -1).T + b).reshape(n, ho, wo, oc).transpose(0, 3, 1, 2)
    return out, cols, (ho, wo)


def _conv_backward(cols, w, dout, stride, x_shape):
    n, c, h, wd = x_shape
    oc, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dout2 = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, oc)
    dw = (dout2.T @ cols).reshape(w.shape)
    db = dout2.sum(axis=0)
    dcols = (dout2 @ w.reshape(oc, -1)).reshape(n, ho, wo, c, k, k)
    dx = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dw, db, dx


def forward(
    net: Sequence[LayerSpec], params: ParamStore, x: np.ndarray
) -> tuple[np.ndarray, ForwardCache]:
    """Run the chain on a batched input; returns output and a backward cache."""
    y = np.asarray(x, dtype=float)
    items: list = []
    for spec in net:
        if isinstance(spec, Conv):
            if y.ndim != 4:
                raise ShapeError(f"layer {spec.name!r}: conv expects (N, C, H, W), got {y.shape}")
            w, b = params[f"{spec.name}.W"], params[f"{spec.name}.b"]
            if y.shape[1] != w.shape[1]:
                raise ShapeError(
                    f"layer {spec.name!r}: expected {w.shape[1]} channels, got {y.shape[1]}"
                )
            if y.shape[2] < spec.kernel or y.shape[3] < spec.kernel:
                raise ShapeError(f"layer {spec.name!r}: input {y.shape} smaller than kernel")
            out, cols, _ = _conv_forward(y, w, b, spec.stride)
            items.append(("conv", spec, cols, y.shape))
            y = out
        elif isinstance(spec, Dense):
            if y.ndim != 2:
                raise ShapeError(f"layer {spec.name!r}: dense expects (N, units), got {y.shape}")
            w, b = params[f"{spec.name}.W"], params[f"{spec.name}.b"]
            if y.shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {spec.name!r}: expected {w.shape[0]} inputs, got {y.shape[1]}"
                )
            items.append(("dense", spec, y))
            y = y @ w + b
        elif isinstance(spec, Relu):
            items.append(("relu", y > 0.0))
            y = np.maximum(y, 0.0)
        elif isinstance(spec, Sigmoid):
            y = 1.0 / (1.0 + np.exp(-y))
            items.append(("sigmoid", y))
        elif isinstance(spec, Flatten):
            items.append(("flatten", y.shape))
            y = y.reshape(y.shape[0], -1)
        else:
            raise TypeError(f"unknown layer spec {spec!r}")
    return y, ForwardCache(version=params.version, items=items)


def backward(
    net: Sequence[LayerSpec],
    params: ParamStore,
    cache: ForwardCache,
    dy: np.ndarray,
    grads: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse pass; accumulates into (and returns) a name -> gradient dict."""
    if cache.version != params.version:
        raise StaleCacheError(
            f"cache from params version {cache.version}, store is at {params.version}"
        )
    if grads is None:
        grads = {}

    def add(name: str, g: np.ndarray) -> None:
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    d = np.asarray(dy, dtype=float)
    for entry in reversed(cache.items):
        kind = entry[0]
        if kind == "conv":
            _, spec, cols, x_shape = entry
            w = params[f"{spec.name}.W"]
            dw, db, d = _conv_backward(cols, w, d, spec.stride, x_shape)
            add(f"{spec.name}.W", dw)
            add(f"{spec.name}.b", db)
        elif kind == "dense":
            _, spec, x = entry
            w = params[f"{spec.name}.W"]
            add(f"{spec.name}.W", x.T @ d)
            add(f"{spec.name}.b", d.sum(axis=0))
            d = d @ w.T
        elif kind == "relu":
            d = d * entry[1]
        elif kind == "sigmoid":
            y = entry[1]
            d = d * y * (1.0 - y)
        elif kind == "flatten":
            d = d.reshape(entry[1])
    return grads, d


def cross_entropy(p: np.ndarray, o: np.ndarray) -> float:
    """Mean binary cross-entropy with epsilon-clipped probabilities."""
    p = np.clip(np.asarray(p, dtype=float), PROB_EPS, 1.0 - PROB_EPS)
    o = np.asarray(o, dtype=float)
    return float(np.mean(-(o * np.log(p) + (1.0 - o) * np.log(1.0 - p))))


def cross_entropy_grad(p: np.ndarray, o: np.ndarray) -> np.ndarray:
    """d(mean CE)/dp, zero where clipping is active (matching the clipped loss)."""
    p = np.asarray(p, dtype=float)
    o = np.asarray(o, dtype=float)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    g = (pc - o) / (pc * (1.0 - pc)) / p.size
    return np.where(inside, g, 0.0)


def new_adam_state() -> dict:
    return {"t": 0, "m": {}, "v": {}}


def optimizer_step(
    params: ParamStore, grads: Mapping[str, np.ndarray], state: dict, lr: float
) -> tuple[ParamStore, dict]:
    """One Adam update; returns a fresh ParamStore (version + 1) and new state."""
    t = state["t"] + 1
    m = dict(state["m"])
    v = dict(state["v"])
    updates: dict[str, np.ndarray] = {}
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=float)
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        m[name] = ADAM_BETA1 * m.get(name, 0.0) + (1.0 - ADAM_BETA1) * g
        v[name] = ADAM_BETA2 * v.get(name, 0.0) + (1.0 - ADAM_BETA2) * g * g
        mhat = m[name] / (1.0 - ADAM_BETA1**t)
        vhat = v[name] / (1.0 - ADAM_BETA2**t)
        updates[name] = p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return params.with_arrays(updates), {"t": t, "m": m, "v": v}


def grad_check(
    net: Sequence[LayerSpec],
    input_shape: tuple[int, ...],
    seed: int,
    step: float = 1e-5,
) -> float:
    """Worst relative error between backprop and central finite differences.

    Uses a random linear functional of the network output as the loss.  Where
    the two-step-size numeric estimates disagree (finite differences straddling
    a relu kink are meaningless) the element is skipped.
    """
    params = init_params(net, input_shape, seed)
    if params.n_params() >= 10_000:
        raise ValueError(f"grad_check limited to small nets, got {params.n_params()} params")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0FFEE)))
    x = rng.uniform(-1.0, 1.0, size=(2, *input_shape))
    y, cache = forward(net, params, x)
    coeffs = rng.uniform(-1.0, 1.0, size=y.shape)
    grads, _ = backward(net, params, cache, coeffs)

    def loss_at(store: ParamStore) -> float:
        out, _ = forward(net, store, x)
        return float(np.sum(coeffs * out))

    worst = 0.0
    for name in sorted(grads):
        base = params[name]
        analytic = grads[name]
        flat = base.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            estimates = []
            for h in (step, step / 10.0):
                pert = base.copy().ravel()
                pert[idx] = orig + h
                lp = loss_at(params.with_arrays({name: pert.reshape(base.shape)}))
                pert[idx] = orig - h
                lm = loss_at(params.with_arrays({name: pert.reshape(base.shape)}))
                estimates.append((lp - lm) / (2.0 * h))
            g1, g2 = estimates
            if abs(g1 - g2) / max(1e-8, abs(g1) + abs(g2)) > 1e-3:
                continue  # numeric oracle invalid here (nonsmooth point)
            ga = analytic.ravel()[idx]
            rel = abs(g2 - ga) / max(1e-8, abs(g2) + abs(ga))
            worst = max(worst, rel)
    return worst


def save_checkpoint(
    path: str | Path, params: ParamStore, opt_state: dict | None = None, step: int = 0,
    extra: Mapping | None = None,
) -> None:
    """JSON checkpoint with exact float round-trip (shortest-repr doubles)."""
    def enc(a: np.ndarray) -> dict:
        return {"shape": list(a.shape), "data": [float(v) for v in np.asarray(a).ravel()]}

    opt_state = opt_state if opt_state is not None else new_adam_state()
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": int(step),
        "params_version": params.version,
        "params": {k: enc(v) for k, v in params.items()},
        "opt_state": {
            "t": opt_state["t"],
            "m": {k: enc(v) for k, v in sorted(opt_state["m"].items())},
            "v": {k: enc(v) for k, v in sorted(opt_state["v"].items())},
        },
    }
    if extra:
        doc["extra"] = dict(extra)
    with Path(path).open("w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict, int, dict]:
    with Path(path).open() as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")

    def dec(obj: dict) -> np.ndarray:
        return np.array(obj["data"], dtype=float).reshape(obj["shape"])

    params = ParamStore(
        {k: dec(v) for k, v in doc["params"].items()}, version=doc.get("params_version", 0)
    )
    opt = {
        "t": doc["opt_state"]["t"],
        "m": {k: dec(v) for k, v in doc["opt_state"]["m"].items()},
        "v": {k: dec(v) for k, v in doc["opt_state"]["v"].items()},
    }
    return params, opt, int(doc["step"]), doc.get("extra", {})
