"""Dense numerical kernels: a fixed residual MLP, its reverse-mode gradients,
and an Adam optimizer.

The architecture is a fully connected network with two residual blocks.  The
scalar conditioning value (a transformed noise level) is expanded with a
sinusoidal embedding and injected additively into each block:

    h0 = W_in x + b_in
    h  = h + W2 silu(W1 h + b1 + Wt e)     (twice, e = embed(c))
    y  = W_out silu(h) + b_out

All arithmetic is float64.  Parameters are plain arrays in a dict; containers
are treated as immutable values - every update returns new arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericsError, SchemaError

CHECKPOINT_SCHEMA = 1

# Declared parameter order; checkpoints and optimizer state follow it.
PARAM_ORDER = (
    "w_in", "b_in",
    "blk1_w1", "blk1_b1", "blk1_wt", "blk1_w2", "blk1_b2",
    "blk2_w1", "blk2_b1", "blk2_wt", "blk2_w2", "blk2_b2",
    "w_out", "b_out",
)


def silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def _silu_grad(z: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def sinusoidal_embed(t: float | np.ndarray, dim: int) -> np.ndarray:
    """Embed scalar times as [sin(t w_0..w_{n-1}), cos(t w_0..w_{n-1})].

    Frequencies are geometrically spaced from 1 down to 1/10000.  Accepts a
    scalar (returns shape (dim,)) or a batch of shape (B,) (returns (B, dim)).
    """
    if dim <= 0 or dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even and positive, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ConfigError("time value must be finite")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10.0 ** (-4.0 * np.arange(half) / (half - 1))
    phase = t[..., None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


@dataclass(frozen=True)
class NetParams:
    """Weights of the residual MLP plus its declared widths."""

    d_in: int
    d_out: int
    hidden: int
    t_dim: int
    arrays: dict[str, np.ndarray]

    def check_finite(self) -> None:
        for name in PARAM_ORDER:
            if not np.all(np.isfinite(self.arrays[name])):
                raise NumericsError(f"non-finite entries in parameter {name}")

    def n_params(self) -> int:
        return sum(self.arrays[k].size for k in PARAM_ORDER)


def _shapes(d_in: int, d_out: int, hidden: int, t_dim: int) -> dict[str, tuple]:
    blk = {
        "w1": (hidden, hidden), "b1": (hidden,), "wt": (hidden, t_dim),
        "w2": (hidden, hidden), "b2": (hidden,),
    }
    out = {"w_in": (hidden, d_in), "b_in": (hidden,)}
    for k in (1, 2):
        for n, s in blk.items():
            out[f"blk{k}_{n}"] = s
    out["w_out"] = (d_out, hidden)
    out["b_out"] = (d_out,)
    return out


def init_params(d_in: int, d_out: int, hidden: int = 256, t_dim: int = 128,
                seed: int = 0) -> NetParams:
    """Uniform(-1,1)/sqrt(fan_in) weights, zero biases, zero output layer.

    The zero output layer makes the untrained network's correction term
    vanish, so a fresh preconditioned denoiser starts at the skip path.
    """
    if hidden <= 0 or d_in <= 0 or d_out <= 0:
        raise ConfigError("widths must be positive")
    if t_dim % 2 != 0 or t_dim <= 0:
        raise ConfigError("t_dim must be even and positive")
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _shapes(d_in, d_out, hidden, t_dim).items():
        if len(shape) == 1 or name == "w_out":
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[1]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return NetParams(d_in, d_out, hidden, t_dim, arrays)


def zeros_like_params(params: NetParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


def net_forward(params: NetParams, x: np.ndarray, t_embed: np.ndarray) -> np.ndarray:
    """Forward pass.  x is (d_in,) or (B, d_in); t_embed matches with t_dim."""
    y, _ = _forward_cached(params, np.atleast_2d(x), np.atleast_2d(t_embed))
    return y[0] if np.asarray(x).ndim == 1 else y


def _forward_cached(params: NetParams, x: np.ndarray, e: np.ndarray):
    p = params.arrays
    if x.shape[1] != params.d_in:
        raise ConfigError(f"input dim {x.shape[1]} != declared d_in {params.d_in}")
    if e.shape[1] != params.t_dim:
        raise ConfigError(f"embedding dim {e.shape[1]} != declared t_dim {params.t_dim}")
    cache: dict[str, np.ndarray] = {"x": x, "e": e}
    h = x @ p["w_in"].T + p["b_in"]
    for k in (1, 2):
        cache[f"h{k}"] = h
        z = h @ p[f"blk{k}_w1"].T + p[f"blk{k}_b1"] + e @ p[f"blk{k}_wt"].T
        a = silu(z)
        cache[f"z{k}"], cache[f"a{k}"] = z, a
        h = h + a @ p[f"blk{k}_w2"].T + p[f"blk{k}_b2"]
    cache["h3"] = h
    g = silu(h)
    cache["g"] = g
    y = g @ p["w_out"].T + p["b_out"]
    if not np.all(np.isfinite(y)):
        raise NumericsError("non-finite network output")
    return y, cache


def net_grad(params: NetParams, x: np.ndarray, t_embed: np.ndarray, loss_head):
    """Loss and exact reverse-mode gradients.

    ``loss_head(outputs) -> (loss, d_loss/d_outputs)`` is any scalar-valued
    reduction over the (B, d_out) outputs.  Returns
    ``(loss, param_grads, input_grads)`` where input_grads is (B, d_in).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    e = np.atleast_2d(np.asarray(t_embed, dtype=np.float64))
    y, cache = _forward_cached(params, x, e)
    loss, dy = loss_head(y)
    if not np.isfinite(loss):
        raise NumericsError("non-finite loss value at loss head")
    grads, dx = _backward(params, cache, np.asarray(dy, dtype=np.float64))
    return float(loss), grads, dx


def _backward(params: NetParams, cache, dy: np.ndarray):
    p = params.arrays
    g, h3 = cache["g"], cache["h3"]
    grads: dict[str, np.ndarray] = {}
    grads["w_out"] = dy.T @ g
    grads["b_out"] = dy.sum(axis=0)
    dg = dy @ p["w_out"]
    dh = dg * _silu_grad(h3)
    for k in (2, 1):
        a, z, h_in = cache[f"a{k}"], cache[f"z{k}"], cache[f"h{k}"]
        grads[f"blk{k}_w2"] = dh.T @ a
        grads[f"blk{k}_b2"] = dh.sum(axis=0)
        da = dh @ p[f"blk{k}_w2"]
        dz = da * _silu_grad(z)
        grads[f"blk{k}_w1"] = dz.T @ h_in
        grads[f"blk{k}_b1"] = dz.sum(axis=0)
        grads[f"blk{k}_wt"] = dz.T @ cache["e"]
        dh = dh + dz @ p[f"blk{k}_w1"]
    grads["w_in"] = dh.T @ cache["x"]
    grads["b_in"] = dh.sum(axis=0)
    dx = dh @ p["w_in"]
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericsError(f"non-finite gradient in layer {name}")
    return grads, dx


def forward_and_input_grad(params: NetParams, x: np.ndarray, t_embed: np.ndarray,
                           dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Outputs plus d(dy . y)/dx, skipping parameter gradients.

    Cheaper than net_grad on evaluation paths that only need the input
    sensitivity (guidance at sampling time).
    """
    p = params.arrays
    x = np.atleast_2d(x)
    y, cache = _forward_cached(params, x, np.atleast_2d(t_embed))
    dh = (np.atleast_2d(dy) @ p["w_out"]) * _silu_grad(cache["h3"])
    for k in (2, 1):
        dz = (dh @ p[f"blk{k}_w2"]) * _silu_grad(cache[f"z{k}"])
        dh = dh + dz @ p[f"blk{k}_w1"]
    dx = dh @ p["w_in"]
    return y, dx


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: NetParams, lr: float = 3e-4, **kw) -> "AdamState":
        return cls(m=zeros_like_params(params), v=zeros_like_params(params),
                   step=0, lr=lr, **kw)


def adam_step(state: AdamState, params: NetParams,
              grads: dict[str, np.ndarray]) -> tuple[AdamState, NetParams]:
    """One bias-corrected Adam update.  Returns fresh containers."""
    new_m, new_v, new_p = {}, {}, {}
    step = state.step + 1
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    for name in PARAM_ORDER:
        grad = grads[name]
        if not np.all(np.isfinite(grad)):
            raise NumericsError(f"non-finite gradient passed to adam for {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        new_m[name], new_v[name] = m, v
        new_p[name] = params.arrays[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    out_params = replace(params, arrays=new_p)
    out_params.check_finite()
    return replace(state, m=new_m, v=new_v, step=step), out_params


def save_checkpoint(path, params: NetParams, extra: dict | None = None) -> None:
    """Write a self-describing .npz checkpoint (bit-exact f64 round trip).

    The archive is assembled with a fixed zip timestamp so identical
    parameters produce identical bytes run to run.
    """
    import io
    import json
    import zipfile

    meta = dict(schema=CHECKPOINT_SCHEMA, d_in=params.d_in, d_out=params.d_out,
                hidden=params.hidden, t_dim=params.t_dim)
    if extra:
        meta.update(extra)
    payload = {f"param_{i:02d}_{name}": params.arrays[name]
               for i, name in enumerate(PARAM_ORDER)}
    payload["meta_json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in payload.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> tuple[NetParams, dict]:
    import json
    with np.load(path) as z:
        try:
            meta = json.loads(bytes(z["meta_json"]).decode())
        except KeyError as exc:
            raise SchemaError(f"{path}: not a checkpoint (missing meta)") from exc
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise SchemaError(f"{path}: unsupported checkpoint schema {meta.get('schema')!r}")
        arrays = {}
        for i, name in enumerate(PARAM_ORDER):
            arrays[name] = np.array(z[f"param_{i:02d}_{name}"], dtype=np.float64)
    params = NetParams(meta["d_in"], meta["d_out"], meta["hidden"], meta["t_dim"], arrays)
    params.check_finite()
    return params, meta
