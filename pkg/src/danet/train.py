"""Training loop: RMSprop, exponential learning-rate decay, validation-based
early stopping and an optional long-chunk curriculum phase."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import attractor as att
from . import net
from .data import ChunkSet, DataError, load_chunks, load_norm_stats

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, history=None, params=None):
        super().__init__(msg)
        self.history = history or []
        self.params = params


@dataclass
class TrainConfig:
    lr_start: float = 1e-4
    lr_end: float = 3e-6
    max_epochs: int = 30
    patience: int = 10
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    batch: int = 8
    head: str = "sigmoid"
    threshold_pct: float = 0.0
    chunk_len: int = 100
    curriculum_len: int = 0  # 0 disables; 400 in the long-chunk phase
    curriculum_epochs: int = 0
    objective: str = "danet"  # "danet" or "dc"
    flow_through_attractor: bool = True
    normalize_loss: bool = True
    n_layers: int = 2
    hidden: int = 64
    K: int = 20
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if not self.lr_start > self.lr_end > 0:
            raise ConfigError("need lr_start > lr_end > 0")
        if self.patience < 1 or self.max_epochs < 1 or self.batch < 1:
            raise ConfigError("patience, max_epochs and batch must be >= 1")
        if self.head not in ("sigmoid", "softmax"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.objective not in ("danet", "dc"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if not 0 <= self.threshold_pct < 100:
            raise ConfigError("threshold_pct must be in [0, 100)")

    @classmethod
    def full_scale(cls, **kw):
        return cls(max_epochs=150, n_layers=4, hidden=600, K=20, **kw)

    def with_curriculum(self, chunk_len=400, epochs=None):
        return dataclasses.replace(self, curriculum_len=chunk_len,
                                   curriculum_epochs=epochs or max(1, self.max_epochs // 3))


def _parse_value(raw, typ, key, lineno):
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment, unknown keys are errors."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw, types[key], key, lineno)
    try:
        return dataclasses.replace(base or TrainConfig(), **values)
    except ConfigError as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def load_config(path, base=None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


def dump_config(cfg) -> str:
    return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(cfg).items())


def lr_schedule(epoch: int, cfg: TrainConfig, n_epochs: int | None = None) -> float:
    n = n_epochs or cfg.max_epochs
    if n == 1 or epoch <= 0:
        return cfg.lr_start
    if epoch >= n - 1:
        return cfg.lr_end
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (epoch / (n - 1))


def init_opt_state(params: dict) -> dict:
    return {"step": 0, "acc": {k: np.zeros_like(v) for k, v in params.items()}}


def rmsprop_step(params: dict, grads: dict, opt: dict, lr: float,
                 decay: float = 0.9, eps: float = 1e-8):
    """In-place RMSprop update; returns (params, opt)."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"divergence: non-finite gradient for {k}")
    for k, g in grads.items():
        acc = opt["acc"][k]
        acc *= decay
        acc += (1.0 - decay) * g * g
        params[k] -= lr * g / np.sqrt(acc + eps)
    opt["step"] += 1
    return params, opt


class EarlyStopping:
    """Stop once the monitored value has not decreased for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record an epoch; returns True when this is a new best."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def net_config_for(cfg: TrainConfig, F: int) -> net.NetConfig:
    return net.NetConfig(n_layers=cfg.n_layers, hidden=cfg.hidden, K=cfg.K, F=F,
                         activation=cfg.activation, head=cfg.head,
                         threshold_pct=cfg.threshold_pct)


def chunk_loss_grad(v, cs: ChunkSet, i: int, cfg: TrainConfig, with_grad=True):
    """Objective value and d/dv for chunk ``i``; raises EmptySourceError when a
    source has no bins surviving the salience threshold."""
    x = cs.mixture_mag[i].astype(np.float64)
    w = att.salience_weights(np.log(x + 1e-8), cfg.threshold_pct)
    y = cs.membership[i]
    v = np.asarray(v, dtype=np.float64)
    if cfg.objective == "dc":
        vw, yw = v * w[:, None], y * w[:, None]
        value, g = att.dc_loss_backward(vw, yw)
        scale = 1.0 / (w.sum() ** 2) if cfg.normalize_loss else 1.0
        return value * scale, g * w[:, None] * scale
    if not with_grad:
        a = att.estimate_attractors(v, y, w)
        m = att.masks(v, a, cfg.head, x.shape[0], x.shape[1])
        return att.loss(x, cs.source_mags[i], m, cfg.normalize_loss), None
    return att.loss_backward(x, cs.source_mags[i], v, y, w, cfg.head,
                             cfg.flow_through_attractor, cfg.normalize_loss)


def evaluate_loss(params, ncfg, cs: ChunkSet, cfg: TrainConfig, batch=16) -> float:
    total, n = 0.0, 0
    for start in range(0, len(cs), batch):
        idx = np.arange(start, min(start + batch, len(cs)))
        v, _ = net.forward(params, cs.features[idx], ncfg)
        for j, i in enumerate(idx):
            try:
                value, _ = chunk_loss_grad(v[j], cs, i, cfg, with_grad=False)
            except att.EmptySourceError:
                continue
            total += value
            n += 1
    return total / n if n else float("nan")


def _run_epoch(params, ncfg, opt, cs: ChunkSet, cfg: TrainConfig, lr, rng):
    order = rng.permutation(len(cs))
    total, n, skipped = 0.0, 0, 0
    for start in range(0, len(order), cfg.batch):
        idx = np.sort(order[start:start + cfg.batch])
        v, tape = net.forward(params, cs.features[idx], ncfg)
        grad_v = np.zeros(v.shape, dtype=v.dtype)
        used = 0
        for j, i in enumerate(idx):
            try:
                value, g = chunk_loss_grad(v[j], cs, i, cfg)
            except att.EmptySourceError:
                skipped += 1
                continue
            grad_v[j] = g
            total += value
            used += 1
        if not used:
            continue
        n += used
        grad_v /= used
        grads = net.backward(params, tape, grad_v)
        rmsprop_step(params, grads, opt, lr, cfg.rms_decay, cfg.rms_eps)
    return (total / n if n else float("nan")), skipped


@dataclass
class TrainResult:
    params: dict
    net_config: net.NetConfig
    history: list = field(default_factory=list)
    initial_train_loss: float = float("nan")
    best_val_loss: float = float("inf")
    skipped_chunks: int = 0
    norm_stats: tuple | None = None


def _phase(params, ncfg, train_cs, valid_cs, cfg, n_epochs, rng, history, epoch0, result,
           keep_start=False):
    opt = init_opt_state(params)
    stopper = EarlyStopping(cfg.patience)
    best = {k: v.copy() for k, v in params.items()}
    if keep_start:
        # a continued phase must not return something worse than its starting point
        stopper.update(evaluate_loss(params, ncfg, valid_cs, cfg), epoch0)
    for e in range(n_epochs):
        lr = lr_schedule(e, cfg, n_epochs)
        try:
            train_loss, skipped = _run_epoch(params, ncfg, opt, train_cs, cfg, lr, rng)
            val_loss = evaluate_loss(params, ncfg, valid_cs, cfg)
        except (TrainingDiverged, net.NumericalDivergence) as exc:
            raise TrainingDiverged(str(exc), history, best) from exc
        result.skipped_chunks += skipped
        epoch = epoch0 + e + 1
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                        "lr": lr})
        log.info("epoch %d train %.5g valid %.5g lr %.3g", epoch, train_loss, val_loss, lr)
        if stopper.update(val_loss, epoch):
            best = {k: v.copy() for k, v in params.items()}
        if stopper.should_stop:
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break
    return best, stopper.best


def train_on_chunks(train_cs: ChunkSet, valid_cs: ChunkSet, cfg: TrainConfig,
                    seed: int | None = None, params=None, long_chunks=None) -> TrainResult:
    """Train on in-memory chunk sets.

    ``long_chunks`` is an optional (train, valid) pair of curriculum-length
    chunk sets used for the second phase.
    """
    if len(train_cs) == 0 or len(valid_cs) == 0:
        raise DataError("training and validation splits must be non-empty")
    seed = cfg.seed if seed is None else seed
    F = train_cs.features.shape[1]
    ncfg = net_config_for(cfg, F)
    params = params if params is not None else net.init_params(ncfg, seed)
    rng = np.random.default_rng(seed)
    result = TrainResult(params, ncfg)
    try:
        result.initial_train_loss = evaluate_loss(params, ncfg, train_cs, cfg)
    except net.NumericalDivergence as exc:
        raise TrainingDiverged(str(exc), [], params) from exc
    history = []
    best, best_val = _phase(params, ncfg, train_cs, valid_cs, cfg, cfg.max_epochs, rng,
                            history, 0, result)
    if long_chunks is not None and cfg.curriculum_epochs > 0:
        params = {k: v.copy() for k, v in best.items()}
        best, best_val = _phase(params, ncfg, long_chunks[0], long_chunks[1], cfg,
                                cfg.curriculum_epochs, rng, history, len(history), result,
                                keep_start=True)
    result.params = best
    result.history = history
    result.best_val_loss = best_val
    return result


def train(dataset_dir, cfg: TrainConfig, seed: int | None = None) -> TrainResult:
    stats = load_norm_stats(dataset_dir)
    train_cs = load_chunks(dataset_dir, "train", cfg.chunk_len)
    valid_cs = load_chunks(dataset_dir, "valid", cfg.chunk_len)
    long_chunks = None
    if cfg.curriculum_len and cfg.curriculum_epochs:
        long_chunks = (load_chunks(dataset_dir, "train", cfg.curriculum_len, stats),
                       load_chunks(dataset_dir, "valid", cfg.curriculum_len, stats))
    result = train_on_chunks(train_cs, valid_cs, cfg, seed, long_chunks=long_chunks)
    result.norm_stats = stats
    return result


def write_history_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
        w.writeheader()
        for row in history:
            w.writerow(row)
