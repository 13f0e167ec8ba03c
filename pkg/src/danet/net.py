"""Bidirectional LSTM embedding network with a hand-written backward pass.

Each frame's F-dimensional feature column is fed through a stack of
bidirectional LSTM layers; a dense layer maps the 2*hidden state to K*F
values, reshaped to one K-dimensional embedding per frequency bin.

Row convention for every per-bin tensor in this package: time-major,
``row = t * F + f``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tensorio import load_tensors, save_tensors

GATES = 4  # input, forget, output, candidate


class NumericalDivergence(FloatingPointError):
    pass


@dataclass
class NetConfig:
    n_layers: int = 2
    hidden: int = 64
    K: int = 20
    F: int = 129
    activation: str = "tanh"
    head: str = "sigmoid"
    threshold_pct: float = 0.0

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1 or self.K < 1 or self.F < 1:
            raise ValueError(f"invalid network config {self}")
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown embedding activation {self.activation!r}")
        if self.head not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown mask head {self.head!r}")

    @classmethod
    def full_scale(cls, **kw):
        return cls(n_layers=4, hidden=600, K=20, F=129, **kw)


def _dirs():
    return ("fw", "bw")


def param_shapes(cfg: NetConfig) -> dict:
    shapes = {}
    H = cfg.hidden
    for layer in range(cfg.n_layers):
        n_in = cfg.F if layer == 0 else 2 * H
        for d in _dirs():
            shapes[f"l{layer}.{d}.W"] = (n_in, GATES * H)
            shapes[f"l{layer}.{d}.U"] = (H, GATES * H)
            shapes[f"l{layer}.{d}.b"] = (GATES * H,)
    shapes["out.W"] = (2 * H, cfg.K * cfg.F)
    shapes["out.b"] = (cfg.K * cfg.F,)
    return shapes


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Uniform(-r, r) weights with r = 1/sqrt(fan_in); forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    H = cfg.hidden
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            b = np.zeros(shape)
            if name.startswith("l"):
                b[H:2 * H] = 1.0
            params[name] = b.astype(dtype)
        else:
            r = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-r, r, size=shape).astype(dtype)
    return params


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


@dataclass
class TapeState:
    cfg: NetConfig
    inputs: list = field(default_factory=list)  # per layer input (B, T, n_in)
    caches: dict = field(default_factory=dict)  # (layer, dir) -> gate activations
    top: np.ndarray | None = None  # (B, T, 2H)
    emb: np.ndarray | None = None  # (B, T, K*F) post-activation
    batched: bool = True


def _lstm_dir_forward(xproj, U, reverse):
    """Run one LSTM direction over precomputed input projections (B, T, 4H)."""
    B, T, G = xproj.shape
    H = G // GATES
    h = np.zeros((B, H), dtype=xproj.dtype)
    c = np.zeros((B, H), dtype=xproj.dtype)
    hs = np.empty((B, T, H), dtype=xproj.dtype)
    cs = np.empty((B, T, H), dtype=xproj.dtype)
    acts = np.empty((B, T, G), dtype=xproj.dtype)
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        z = xproj[:, t] + h @ U
        a = acts[:, t]
        a[:, :3 * H] = _sigmoid(z[:, :3 * H])
        a[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        c = a[:, H:2 * H] * c + a[:, :H] * a[:, 3 * H:]
        h = a[:, 2 * H:3 * H] * np.tanh(c)
        cs[:, t] = c
        hs[:, t] = h
    return hs, cs, acts


def _lstm_dir_backward(dh_all, U, hs, cs, acts, reverse):
    """BPTT for one direction. Returns (d pre-activations (B,T,4H), dU)."""
    B, T, H = hs.shape
    dz_all = np.empty((B, T, GATES * H), dtype=hs.dtype)
    dh_next = np.zeros((B, H), dtype=hs.dtype)
    dc_next = np.zeros((B, H), dtype=hs.dtype)
    order = range(T) if reverse else range(T - 1, -1, -1)
    step = 1 if reverse else -1
    for t in order:
        prev = t + step
        has_prev = 0 <= prev < T
        a = acts[:, t]
        i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        tc = np.tanh(cs[:, t])
        dh = dh_all[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = cs[:, prev] if has_prev else 0.0
        dz = dz_all[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dz @ U.T
    # dU = sum_t h_{prev(t)}^T dz_t; h_prev is the state one step earlier in processing order
    if reverse:
        h_prev = np.concatenate([hs[:, 1:], np.zeros_like(hs[:, :1])], axis=1)
    else:
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
    dU = h_prev.reshape(-1, H).T @ dz_all.reshape(-1, GATES * H)
    return dz_all, dU


def forward(params: dict, features: np.ndarray, cfg: NetConfig):
    """Embed a feature matrix (F, T) or a batch (B, F, T).

    Returns ``(v, tape)`` where v is (T*F, K) or (B, T*F, K).
    """
    feats = np.asarray(features)
    batched = feats.ndim == 3
    if not batched:
        feats = feats[None]
    B, F, T = feats.shape
    if F != cfg.F:
        raise ValueError(f"feature matrix has {F} rows, network expects {cfg.F}")
    dtype = params["out.W"].dtype
    x = np.ascontiguousarray(feats.transpose(0, 2, 1), dtype=dtype)
    tape = TapeState(cfg, batched=batched)
    for layer in range(cfg.n_layers):
        tape.inputs.append(x)
        outs = []
        for d in _dirs():
            p = f"l{layer}.{d}"
            xproj = x @ params[p + ".W"] + params[p + ".b"]
            hs, cs, acts = _lstm_dir_forward(xproj, params[p + ".U"], reverse=(d == "bw"))
            tape.caches[(layer, d)] = (hs, cs, acts)
            outs.append(hs)
        x = np.concatenate(outs, axis=2)
    tape.top = x
    pre = x @ params["out.W"] + params["out.b"]
    emb = np.tanh(pre) if cfg.activation == "tanh" else pre
    if not np.all(np.isfinite(emb)):
        raise NumericalDivergence("numerical divergence: non-finite embeddings")
    tape.emb = emb
    v = emb.reshape(B, T * F, cfg.K)
    return (v if batched else v[0]), tape


def backward(params: dict, tape: TapeState, grad_v: np.ndarray) -> dict:
    """Reverse-mode gradients of <grad_v, v> with respect to every parameter."""
    cfg = tape.cfg
    g = np.asarray(grad_v)
    if not tape.batched:
        g = g[None]
    B, T = tape.top.shape[:2]
    if g.shape != (B, T * cfg.F, cfg.K):
        raise ValueError(f"grad_v shape {g.shape} does not match embeddings "
                         f"{(B, T * cfg.F, cfg.K)}")
    dtype = params["out.W"].dtype
    dpre = g.reshape(B, T, cfg.F * cfg.K).astype(dtype, copy=False)
    if cfg.activation == "tanh":
        dpre = dpre * (1.0 - tape.emb * tape.emb)
    grads = {}
    top = tape.top.reshape(B * T, -1)
    dflat = dpre.reshape(B * T, -1)
    grads["out.W"] = top.T @ dflat
    grads["out.b"] = dflat.sum(axis=0)
    dx = (dflat @ params["out.W"].T).reshape(B, T, -1)
    H = cfg.hidden
    for layer in range(cfg.n_layers - 1, -1, -1):
        x_in = tape.inputs[layer]
        dx_in = np.zeros_like(x_in)
        for k, d in enumerate(_dirs()):
            p = f"l{layer}.{d}"
            hs, cs, acts = tape.caches[(layer, d)]
            dz, dU = _lstm_dir_backward(dx[:, :, k * H:(k + 1) * H], params[p + ".U"],
                                        hs, cs, acts, reverse=(d == "bw"))
            dz2 = dz.reshape(B * T, -1)
            grads[p + ".W"] = x_in.reshape(B * T, -1).T @ dz2
            grads[p + ".U"] = dU
            grads[p + ".b"] = dz2.sum(axis=0)
            dx_in += (dz2 @ params[p + ".W"].T).reshape(dx_in.shape)
        dx = dx_in
    return grads


def save_checkpoint(path, params: dict, cfg: NetConfig, norm_stats, extra: dict | None = None):
    mean, std = norm_stats
    tensors = dict(params)
    tensors["norm.mean"] = np.asarray(mean)
    tensors["norm.std"] = np.asarray(std)
    meta = {"kind": "checkpoint", "config": asdict(cfg)}
    if extra:
        meta.update(extra)
    save_tensors(path, tensors, meta)


def load_checkpoint(path):
    """Returns ``(params, cfg, (mean, std))``; params are float32."""
    from .tensorio import FormatError

    tensors, meta = load_tensors(path)
    if meta.get("kind") != "checkpoint" or "config" not in meta:
        raise FormatError(f"{path}: DANET1 file is not a model checkpoint")
    cfg = NetConfig(**meta["config"])
    try:
        mean = tensors.pop("norm.mean")
        std = tensors.pop("norm.std")
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint lacks normalization stats") from exc
    expected = param_shapes(cfg)
    if set(tensors) != set(expected):
        raise FormatError(f"{path}: parameter names do not match config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise FormatError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, config implies {shape}")
    if mean.shape != (cfg.F,) or std.shape != (cfg.F,):
        raise FormatError(f"{path}: normalization stats do not have {cfg.F} entries")
    return tensors, cfg, (mean.astype(np.float64), std.astype(np.float64))
