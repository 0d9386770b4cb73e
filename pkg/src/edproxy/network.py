"""Feedforward proxy network: parameters, forward passes, Adam, checkpoints.

Architecture: dense -> batch-norm -> ReLU -> dropout per hidden layer, and a
final dense layer with sigmoid activation so outputs land in [0, 1] and can
be scaled onto the generator boxes.

Two forward paths are provided: a taped path used for training (minibatch
batch-norm statistics, sampled dropout masks) and a pure-numpy eval path
(running statistics, deterministic dropout scaling).  Checkpoints serialize
to JSON and round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
FORMAT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalError(RuntimeError):
    pass


@dataclass
class DenseLayer:
    w: np.ndarray
    b: np.ndarray
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None


@dataclass
class MLPParams:
    layers: list[DenseLayer]
    dropout_rate: float = 0.2

    def trainable_arrays(self) -> list[np.ndarray]:
        out = []
        for lay in self.layers:
            out.extend([lay.w, lay.b])
            if lay.has_bn:
                out.extend([lay.bn_gamma, lay.bn_beta])
        return out

    def set_trainable_arrays(self, arrays: list[np.ndarray]):
        it = iter(arrays)
        for lay in self.layers:
            lay.w = next(it)
            lay.b = next(it)
            if lay.has_bn:
                lay.bn_gamma = next(it)
                lay.bn_beta = next(it)

    def copy(self) -> "MLPParams":
        layers = [DenseLayer(
            w=lay.w.copy(), b=lay.b.copy(),
            bn_gamma=None if lay.bn_gamma is None else lay.bn_gamma.copy(),
            bn_beta=None if lay.bn_beta is None else lay.bn_beta.copy(),
            bn_mean=None if lay.bn_mean is None else lay.bn_mean.copy(),
            bn_var=None if lay.bn_var is None else lay.bn_var.copy(),
        ) for lay in self.layers]
        return MLPParams(layers=layers, dropout_rate=self.dropout_rate)


def init_mlp(rng: np.random.Generator, sizes: list[int], dropout_rate: float = 0.2) -> MLPParams:
    """Glorot-uniform weights, zero biases; batch-norm on hidden layers only."""
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    layers = []
    last = len(sizes) - 2
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        if i < last:
            layers.append(DenseLayer(w=w, b=b, bn_gamma=np.ones(fan_out),
                                     bn_beta=np.zeros(fan_out), bn_mean=np.zeros(fan_out),
                                     bn_var=np.ones(fan_out)))
        else:
            layers.append(DenseLayer(w=w, b=b))
    return MLPParams(layers=layers, dropout_rate=dropout_rate)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _bn_train_op(tape, x: ad.Var, gamma: ad.Var, beta: ad.Var):
    xv = x.value
    batch = xv.shape[0]
    mu = xv.mean(axis=0)
    var = xv.var(axis=0)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xv - mu) * inv
    out = gamma.value * xhat + beta.value

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.value
        dx = (inv / batch) * (batch * dxhat - dxhat.sum(axis=0)
                              - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    return ad.custom(tape, out, [x, gamma, beta], vjp, "batchnorm"), mu, var


def _dropout_op(tape, x: ad.Var, rate: float, rng: np.random.Generator):
    mask = (rng.random(x.value.shape) >= rate).astype(np.float64)

    def vjp(g):
        return (g * mask,)

    return ad.custom(tape, x.value * mask, [x], vjp, "dropout")


def forward_mlp_train(params: MLPParams, x: np.ndarray, tape: ad.Tape,
                      rng: np.random.Generator, update_running: bool = True):
    """Taped training forward; returns (z_var, leaf_vars) with leaves in
    ``trainable_arrays`` order.  Dropout masks come from ``rng``; minibatch
    batch-norm statistics update the running averages as a side effect."""
    leaves: list[ad.Var] = []
    h: ad.Var = tape.leaf(x, kind="input")
    last = len(params.layers) - 1
    for i, lay in enumerate(params.layers):
        w = tape.leaf(lay.w, kind="param")
        b = tape.leaf(lay.b, kind="param")
        leaves.extend([w, b])
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            gamma = tape.leaf(lay.bn_gamma, kind="param")
            beta = tape.leaf(lay.bn_beta, kind="param")
            leaves.extend([gamma, beta])
            h, mu, var = _bn_train_op(tape, h, gamma, beta)
            if update_running:
                lay.bn_mean += BN_MOMENTUM * (mu - lay.bn_mean)
                lay.bn_var += BN_MOMENTUM * (var - lay.bn_var)
            h = ad.relu(h)
            if params.dropout_rate > 0.0:
                h = _dropout_op(tape, h, params.dropout_rate, rng)
        else:
            h = ad.sigmoid(h)
    if not np.isfinite(h.value).all():
        raise NumericalError("non-finite activation in final layer")
    return h, leaves


def forward_mlp_eval(params: MLPParams, x: np.ndarray) -> np.ndarray:
    """Deterministic inference path: running batch-norm statistics and
    dropout compensated by scaling."""
    h = np.asarray(x, dtype=np.float64)
    last = len(params.layers) - 1
    for i, lay in enumerate(params.layers):
        h = h @ lay.w + lay.b
        if i < last:
            h = (h - lay.bn_mean) / np.sqrt(lay.bn_var + BN_EPS)
            h = lay.bn_gamma * h + lay.bn_beta
            h = np.maximum(h, 0.0)
            if params.dropout_rate > 0.0:
                h = h * (1.0 - params.dropout_rate)
        else:
            h = 1.0 / (1.0 + np.exp(-h))
        if not np.isfinite(h).all():
            raise NumericalError(f"non-finite activation in layer {i}")
    return h


def scale_to_bounds(z: np.ndarray, p_max: np.ndarray) -> np.ndarray:
    """Map sigmoid outputs in [0,1] onto the generator box [0, p_max]."""
    return z * p_max


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------


def adam_init(params: list[np.ndarray]) -> dict:
    return {"m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params],
            "t": 0}


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict,
              lr: float, weight_decay: float = 0.0) -> dict:
    """One in-place Adam update (beta1=0.9, beta2=0.999) with decoupled decay."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if weight_decay > 0.0:
            p -= lr * weight_decay * p
    return state


# ---------------------------------------------------------------------------
# trained proxy container and checkpoint serialization
# ---------------------------------------------------------------------------


@dataclass
class TrainedProxy:
    params: MLPParams
    norm_mean: np.ndarray
    norm_scale: np.ndarray
    arch: str                 # dnn | deepopf | dc3 | e2elr
    repair_mode: str          # none | balance | balance+reserve
    meta: dict = field(default_factory=dict)

    def normalize_input(self, features: np.ndarray) -> np.ndarray:
        return (features - self.norm_mean) / self.norm_scale


def proxy_to_json(proxy: TrainedProxy) -> str:
    layers = []
    for lay in proxy.params.layers:
        entry = {"w": lay.w.tolist(), "b": lay.b.tolist()}
        for name in ("bn_gamma", "bn_beta", "bn_mean", "bn_var"):
            arr = getattr(lay, name)
            entry[name] = None if arr is None else arr.tolist()
        layers.append(entry)
    doc = {
        "format_version": FORMAT_VERSION,
        "arch": proxy.arch,
        "repair_mode": proxy.repair_mode,
        "dropout_rate": proxy.params.dropout_rate,
        "layers": layers,
        "norm": {"mean": proxy.norm_mean.tolist(), "scale": proxy.norm_scale.tolist()},
        "meta": proxy.meta,
    }
    return json.dumps(doc, sort_keys=True)


def proxy_from_json(text: str) -> TrainedProxy:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')}")
    layers = []
    for entry in doc["layers"]:
        kwargs = {"w": np.array(entry["w"], dtype=np.float64),
                  "b": np.array(entry["b"], dtype=np.float64)}
        for name in ("bn_gamma", "bn_beta", "bn_mean", "bn_var"):
            val = entry[name]
            kwargs[name] = None if val is None else np.array(val, dtype=np.float64)
        layers.append(DenseLayer(**kwargs))
    params = MLPParams(layers=layers, dropout_rate=doc["dropout_rate"])
    return TrainedProxy(params=params,
                        norm_mean=np.array(doc["norm"]["mean"], dtype=np.float64),
                        norm_scale=np.array(doc["norm"]["scale"], dtype=np.float64),
                        arch=doc["arch"], repair_mode=doc["repair_mode"],
                        meta=doc.get("meta", {}))


def save_proxy(proxy: TrainedProxy, path: str):
    with open(path, "w") as fh:
        fh.write(proxy_to_json(proxy))


def load_proxy(path: str) -> TrainedProxy:
    with open(path) as fh:
        return proxy_from_json(fh.read())
