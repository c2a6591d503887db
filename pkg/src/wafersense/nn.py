"""Numerical core: embedding + one-layer LSTM encoder + MLP regressor.

The sensor steps are embedded with a dense affine map, run through a
standard LSTM recurrence from zero initial states, and the *last cell
state* (not the hidden state) is the encoded sensor vector. That vector,
concatenated with the measurement features, feeds a two-hidden-layer ReLU
MLP with a linear scalar output.

Forward and reverse-mode backward are written directly against numpy;
gradients are exact (verified against central finite differences in the
test suite). Training runs in float32; pass dtype=np.float64 to
``init_params`` for gradient checking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace

import numpy as np

GATES = ("i", "f", "g", "o")


@dataclass(frozen=True)
class ArchConfig:
    """Model dimensions. d is both the LSTM input and hidden size."""

    sensor_dim: int
    meas_dim: int
    d: int
    mlp_hidden: int
    mlp_layers: int = 2

    def __post_init__(self) -> None:
        if min(self.sensor_dim, self.meas_dim, self.d, self.mlp_hidden) <= 0:
            raise ValueError("all dimensions must be positive")
        if self.mlp_layers != 2:
            raise ValueError("only 2 MLP hidden layers are supported")

    @classmethod
    def small(cls, sensor_dim: int, meas_dim: int) -> "ArchConfig":
        return cls(sensor_dim, meas_dim, d=128, mlp_hidden=256)

    @classmethod
    def large(cls, sensor_dim: int, meas_dim: int) -> "ArchConfig":
        return cls(sensor_dim, meas_dim, d=1024, mlp_hidden=2048)

    @classmethod
    def preset(cls, name: str, sensor_dim: int, meas_dim: int) -> "ArchConfig":
        if name == "small":
            return cls.small(sensor_dim, meas_dim)
        if name == "large":
            return cls.large(sensor_dim, meas_dim)
        raise ValueError(f"unknown arch preset {name!r}")


def param_count(cfg: ArchConfig) -> int:
    """Closed-form parameter count of the architecture."""
    s, m, d, h = cfg.sensor_dim, cfg.meas_dim, cfg.d, cfg.mlp_hidden
    return (s + 1) * d + 4 * (d * d + d * d + d) + (d + m + 1) * h + (h + 1) * h + (h + 1)


@dataclass
class ModelParams:
    """All weights, as (out, in) matrices in row-major order.

    emb: S -> d affine. Per LSTM gate k in (i, f, g, o): input map wx_k,
    recurrent map wh_k, bias b_k. MLP: (d+M) -> H -> H -> 1.
    """

    cfg: ArchConfig
    emb_w: np.ndarray
    emb_b: np.ndarray
    wx_i: np.ndarray
    wh_i: np.ndarray
    b_i: np.ndarray
    wx_f: np.ndarray
    wh_f: np.ndarray
    b_f: np.ndarray
    wx_g: np.ndarray
    wh_g: np.ndarray
    b_g: np.ndarray
    wx_o: np.ndarray
    wh_o: np.ndarray
    b_o: np.ndarray
    mlp1_w: np.ndarray
    mlp1_b: np.ndarray
    mlp2_w: np.ndarray
    mlp2_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    @property
    def dtype(self) -> np.dtype:
        return self.emb_w.dtype

    def arrays(self):
        """Yield (name, array) in a fixed order."""
        for f in fields(self):
            if f.name != "cfg":
                yield f.name, getattr(self, f.name)

    def copy(self) -> "ModelParams":
        return replace(self, **{name: arr.copy() for name, arr in self.arrays()})

    def size(self) -> int:
        return sum(arr.size for _, arr in self.arrays())


def zeros_like_params(params: ModelParams) -> ModelParams:
    return replace(params, **{name: np.zeros_like(arr) for name, arr in params.arrays()})


def init_params(cfg: ArchConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per weight matrix.

    Biases start at zero except the forget gate bias, which starts at 1.
    Deterministic given seed.
    """
    rng = np.random.default_rng(seed)
    s, m, d, h = cfg.sensor_dim, cfg.meas_dim, cfg.d, cfg.mlp_hidden

    def uniform(out_dim, in_dim):
        bound = 1.0 / np.sqrt(in_dim)
        return rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    kwargs = {"emb_w": uniform(d, s), "emb_b": zeros(d)}
    for gate in GATES:
        kwargs[f"wx_{gate}"] = uniform(d, d)
        kwargs[f"wh_{gate}"] = uniform(d, d)
        kwargs[f"b_{gate}"] = zeros(d)
    kwargs["b_f"] = np.ones(d, dtype=dtype)
    kwargs["mlp1_w"] = uniform(h, d + m)
    kwargs["mlp1_b"] = zeros(h)
    kwargs["mlp2_w"] = uniform(h, h)
    kwargs["mlp2_b"] = zeros(h)
    kwargs["out_w"] = uniform(1, h)[0]
    kwargs["out_b"] = zeros(1)
    params = ModelParams(cfg=cfg, **kwargs)
    assert params.size() == param_count(cfg)
    return params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh formulation avoids exp overflow at any dtype
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardTrace:
    """Intermediate activations retained for the backward pass."""

    steps: np.ndarray            # (B, n, S)
    meas: np.ndarray             # (B, M)
    x: list[np.ndarray]          # embedded inputs per step, (B, d)
    gates: list[dict[str, np.ndarray]]  # i, f, g, o per step, (B, d)
    c: list[np.ndarray]          # cell states c_0 .. c_n, (B, d); c[0] is zeros
    h: list[np.ndarray]          # hidden states h_0 .. h_n, (B, d)
    z0: np.ndarray               # (B, d + M)
    z1: np.ndarray               # (B, H) post-ReLU
    z2: np.ndarray               # (B, H) post-ReLU

    @property
    def n_steps(self) -> int:
        return len(self.x)


def forward_batch(params: ModelParams, steps: np.ndarray, meas: np.ndarray,
                  want_trace: bool = True):
    """Run the model on a batch of same-length step sequences.

    steps has shape (B, n, S), meas (B, M). Returns (predictions (B,),
    trace or None).
    """
    p, cfg = params, params.cfg
    steps = np.asarray(steps, dtype=p.dtype)
    meas = np.asarray(meas, dtype=p.dtype)
    if steps.ndim != 3 or steps.shape[2] != cfg.sensor_dim:
        raise ValueError(f"steps must be (B, n, {cfg.sensor_dim}), got {steps.shape}")
    if meas.ndim != 2 or meas.shape[1] != cfg.meas_dim or meas.shape[0] != steps.shape[0]:
        raise ValueError(f"meas must be ({steps.shape[0]}, {cfg.meas_dim}), got {meas.shape}")
    batch, n_steps = steps.shape[0], steps.shape[1]

    h = np.zeros((batch, cfg.d), dtype=p.dtype)
    c = np.zeros((batch, cfg.d), dtype=p.dtype)
    xs, gate_list, cs, hs = [], [], [c], [h]
    for t in range(n_steps):
        x = steps[:, t, :] @ p.emb_w.T + p.emb_b
        i = _sigmoid(x @ p.wx_i.T + h @ p.wh_i.T + p.b_i)
        f = _sigmoid(x @ p.wx_f.T + h @ p.wh_f.T + p.b_f)
        g = np.tanh(x @ p.wx_g.T + h @ p.wh_g.T + p.b_g)
        o = _sigmoid(x @ p.wx_o.T + h @ p.wh_o.T + p.b_o)
        c = f * c + i * g
        h = o * np.tanh(c)
        xs.append(x)
        gate_list.append({"i": i, "f": f, "g": g, "o": o})
        cs.append(c)
        hs.append(h)

    z0 = np.concatenate([c, meas], axis=1)  # encoded vector is the last cell state
    z1 = np.maximum(z0 @ p.mlp1_w.T + p.mlp1_b, 0.0)
    z2 = np.maximum(z1 @ p.mlp2_w.T + p.mlp2_b, 0.0)
    preds = z2 @ p.out_w + p.out_b[0]

    trace = None
    if want_trace:
        trace = ForwardTrace(steps=steps, meas=meas, x=xs, gates=gate_list,
                             c=cs, h=hs, z0=z0, z1=z1, z2=z2)
    return preds, trace


def forward(params: ModelParams, steps: np.ndarray, meas: np.ndarray):
    """Single-sample forward: steps (n, S), meas (M,). Returns (float, trace)."""
    steps = np.asarray(steps)
    meas = np.asarray(meas)
    preds, trace = forward_batch(params, steps[None, :, :], meas[None, :])
    return float(preds[0]), trace


def backward_batch(params: ModelParams, trace: ForwardTrace,
                   upstream: np.ndarray) -> ModelParams:
    """Reverse-mode gradients of sum_b upstream[b] * prediction[b].

    Returns a gradient with the same structure as ModelParams. The caller
    folds loss derivatives and any 1/batch factor into ``upstream``.
    """
    p = params
    grads = zeros_like_params(params)
    dy = np.asarray(upstream, dtype=p.dtype)

    # MLP head
    grads.out_b[0] = dy.sum()
    grads.out_w += trace.z2.T @ dy
    dz2 = dy[:, None] * p.out_w[None, :]
    dpre2 = dz2 * (trace.z2 > 0)
    grads.mlp2_w += dpre2.T @ trace.z1
    grads.mlp2_b += dpre2.sum(axis=0)
    dz1 = dpre2 @ p.mlp2_w
    dpre1 = dz1 * (trace.z1 > 0)
    grads.mlp1_w += dpre1.T @ trace.z0
    grads.mlp1_b += dpre1.sum(axis=0)
    dz0 = dpre1 @ p.mlp1_w

    d = p.cfg.d
    dc = dz0[:, :d].copy()  # prediction consumes c_n; h_n is unused
    dh = np.zeros_like(dc)
    for t in range(trace.n_steps - 1, -1, -1):
        gates = trace.gates[t]
        i, f, g, o = gates["i"], gates["f"], gates["g"], gates["o"]
        c_prev, h_prev = trace.c[t], trace.h[t]
        tanh_c = np.tanh(trace.c[t + 1])

        da_o = dh * tanh_c * o * (1.0 - o)
        dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
        da_i = dc * g * i * (1.0 - i)
        da_g = dc * i * (1.0 - g * g)
        da_f = dc * c_prev * f * (1.0 - f)

        x = trace.x[t]
        dx = np.zeros_like(x)
        for gate, da in zip(GATES, (da_i, da_f, da_g, da_o)):
            wx = getattr(p, f"wx_{gate}")
            wh = getattr(p, f"wh_{gate}")
            getattr(grads, f"wx_{gate}")[...] += da.T @ x
            getattr(grads, f"wh_{gate}")[...] += da.T @ h_prev
            getattr(grads, f"b_{gate}")[...] += da.sum(axis=0)
            dx += da @ wx
        dh = da_i @ p.wh_i + da_f @ p.wh_f + da_g @ p.wh_g + da_o @ p.wh_o
        dc = dc * f

        grads.emb_w += dx.T @ trace.steps[:, t, :]
        grads.emb_b += dx.sum(axis=0)
    return grads


def backward(params: ModelParams, trace: ForwardTrace, upstream: float) -> ModelParams:
    """Single-sample backward; ``trace`` must come from ``forward`` on ``params``."""
    return backward_batch(params, trace, np.array([upstream]))


# Checkpoint container: a .npz holding every weight array plus a JSON
# metadata entry (architecture, loss type, preprocessing manifest hash, ...).

def save_checkpoint(path, params: ModelParams, meta: dict) -> None:
    cfg = params.cfg
    header = dict(meta)
    header["arch"] = {
        "sensor_dim": cfg.sensor_dim,
        "meas_dim": cfg.meas_dim,
        "d": cfg.d,
        "mlp_hidden": cfg.mlp_hidden,
        "mlp_layers": cfg.mlp_layers,
    }
    header["dtype"] = np.dtype(params.dtype).name
    arrays = {name: np.ascontiguousarray(arr) for name, arr in params.arrays()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arch = meta.pop("arch")
        dtype = np.dtype(meta.pop("dtype"))
        cfg = ArchConfig(**arch)
        kwargs = {}
        for f in fields(ModelParams):
            if f.name != "cfg":
                kwargs[f.name] = data[f.name].astype(dtype)
    return ModelParams(cfg=cfg, **kwargs), meta
