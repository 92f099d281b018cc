"""Small ReLU perceptron trained with Adam on RMSE, plus text serialization.

The model embeds the input normalizer, so :func:`forward` takes raw patch
features.  With ``log_target`` set the network regresses ``log(dt)`` and
:func:`predict_dt` exponentiates.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import N_FEATURES, Normalizer, normalize

FORMAT_TAG = "ptcnet-mlp"
FORMAT_VERSION = 1
DEFAULT_DIMS = (N_FEATURES, 16, 16, 1)


class ModelFormatError(ValueError):
    pass


@dataclass
class MlpModel:
    weights: list[np.ndarray]  # W[k] has shape (dims[k+1], dims[k])
    biases: list[np.ndarray]
    normalizer: Normalizer
    log_target: bool = True
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.array(w, dtype=float) for w in self.weights]
        self.biases = [np.array(b, dtype=float) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: bad shapes {w.shape}, {b.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: dimension chain broken")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must have one unit")
        if len(self.normalizer.mean) != self.weights[0].shape[1]:
            raise ValueError("normalizer length does not match the input dimension")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> MlpModel:
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.normalizer, self.log_target, dict(self.meta))


def init_model(dims=DEFAULT_DIMS, normalizer: Normalizer | None = None, log_target: bool = True,
               seed: int = 0) -> MlpModel:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    ws = [rng.normal(0.0, math.sqrt(2.0 / a), size=(b, a)) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(b) for b in dims[1:]]
    return MlpModel(ws, bs, normalizer or Normalizer.identity(dims[0]), log_target)


def _forward_normalized(m: MlpModel, Z: np.ndarray):
    acts = [Z]
    a = Z
    for k, (w, b) in enumerate(zip(m.weights, m.biases)):
        a = a @ w.T + b
        if k < len(m.weights) - 1:
            a = np.maximum(a, 0.0)
        acts.append(a)
    return acts


def forward(m: MlpModel, x: np.ndarray) -> np.ndarray:
    """Network output for raw features ``x`` of shape (124,) or (S, 124)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != m.dims[0]:
        raise ValueError(f"expected {m.dims[0]} features, got {X.shape[1]}")
    if np.isnan(X).any():
        raise ValueError("NaN in network input")
    out = _forward_normalized(m, normalize(m.normalizer, X))[-1][:, 0]
    return out[0] if single else out


def predict_dt(m: MlpModel, X: np.ndarray) -> np.ndarray:
    """Pseudo-time step prediction in seconds (unclipped)."""
    y = forward(m, X)
    if m.log_target:
        with np.errstate(over="ignore"):
            return np.exp(y)
    return y


def _target(m: MlpModel, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if m.log_target:
        if np.any(y <= 0):
            raise ValueError("log-target mode needs positive targets")
        return np.log(y)
    return y


def loss_and_grads(m: MlpModel, Z: np.ndarray, t: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """RMSE on normalized inputs ``Z`` and (transformed) targets ``t``; grads per parameter."""
    acts = _forward_normalized(m, Z)
    r = acts[-1][:, 0] - t
    loss = math.sqrt(float(np.mean(r * r)))
    if loss == 0.0:
        return 0.0, [np.zeros_like(p) for p in m.params()]
    delta = (r / (len(t) * loss))[:, None]
    grads = []
    for k in range(len(m.weights) - 1, -1, -1):
        gw = delta.T @ acts[k]
        gb = delta.sum(axis=0)
        grads = [gw, gb] + grads
        if k:
            delta = (delta @ m.weights[k]) * (acts[k] > 0)
    return loss, grads


def rmse(m: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    """RMSE in the training space (log space in log-target mode)."""
    r = forward(m, X) - _target(m, y)
    return math.sqrt(float(np.mean(r * r)))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 5000
    patience: int = 150
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dims: tuple[int, ...] = DEFAULT_DIMS
    log_target: bool = True

    def __post_init__(self):
        if not self.lr > 0 or self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("need lr > 0, patience >= 1, batch_size >= 1, max_epochs >= 1")


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_rmse: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_rmse", "val_rmse"])
        for row in zip(self.epoch, self.train_rmse, self.val_rmse):
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()


class Adam:
    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        b1t = 1 - c.beta1 ** self.t
        b2t = 1 - c.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= c.lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


def train(X_train: np.ndarray, y_train: np.ndarray, X_val: np.ndarray, y_val: np.ndarray,
          cfg: TrainConfig = TrainConfig(), normalizer: Normalizer | None = None
          ) -> tuple[MlpModel, History]:
    """Adam on mini-batch RMSE with early stopping on validation RMSE.

    The normalizer is fitted on ``X_train`` unless given.  The returned model
    carries the parameters of the best validation epoch.
    """
    from .features import fit_normalizer

    X_train = np.asarray(X_train, dtype=float)
    X_val = np.asarray(X_val, dtype=float)
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    if X_train.shape[1] != cfg.dims[0]:
        raise ValueError("feature count does not match the first layer")
    norm = normalizer or fit_normalizer(X_train)
    model = init_model(cfg.dims, norm, cfg.log_target, cfg.seed)
    Zt, Zv = normalize(norm, X_train), normalize(norm, X_val)
    tt, tv = _target(model, y_train), _target(model, y_val)
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.params()
    opt = Adam(params, cfg)
    hist = History()
    best, best_params, wait = math.inf, [p.copy() for p in params], 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(Zt))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, grads = loss_and_grads(model, Zt[idx], tt[idx])
            opt.step(params, grads)
        tr = _rmse_z(model, Zt, tt)
        va = _rmse_z(model, Zv, tv)
        hist.epoch.append(epoch)
        hist.train_rmse.append(tr)
        hist.val_rmse.append(va)
        if va < best:
            best, best_params, wait = va, [p.copy() for p in params], 0
            hist.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    for p, q in zip(params, best_params):
        p[...] = q
    model.meta = {"seed": str(cfg.seed), "epochs": str(hist.epoch[-1]),
                  "best_epoch": str(hist.best_epoch),
                  "train_rmse": repr(hist.train_rmse[hist.best_epoch - 1]),
                  "val_rmse": repr(best)}
    return model, hist


def _rmse_z(m: MlpModel, Z: np.ndarray, t: np.ndarray) -> float:
    r = _forward_normalized(m, Z)[-1][:, 0] - t
    return math.sqrt(float(np.mean(r * r)))


def _relu_pattern(m: MlpModel, Z: np.ndarray) -> list[np.ndarray]:
    return [a > 0 for a in _forward_normalized(m, Z)[1:-1]]


def gradient_check(m: MlpModel, X: np.ndarray, y: np.ndarray, n_params: int = 100,
                   eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between backprop and central differences on random parameters.

    Errors are relative to ``max(|g_bp|, |g_fd|)``, floored at 1e-4 of the
    largest sampled gradient so that round-off on near-zero entries does not
    dominate.  Parameters whose perturbation flips a ReLU are skipped: the
    loss has a kink there and the difference quotient is meaningless.
    """
    Z = normalize(m.normalizer, np.asarray(X, dtype=float))
    t = _target(m, y)
    _, grads = loss_and_grads(m, Z, t)
    base = _relu_pattern(m, Z)
    params = m.params()
    sizes = np.array([p.size for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    g_bp, g_fd = [], []
    for f in flat:
        k = int(np.searchsorted(bounds, f, side="right"))
        i = f - (bounds[k - 1] if k else 0)
        p = params[k].reshape(-1)
        old = p[i]
        values = []
        kink = False
        for h in (eps, -eps):
            p[i] = old + h
            values.append(loss_and_grads(m, Z, t)[0])
            kink = kink or any(np.any(a != b) for a, b in zip(_relu_pattern(m, Z), base))
        p[i] = old
        if kink:
            continue
        g_fd.append((values[0] - values[1]) / (2 * eps))
        g_bp.append(grads[k].reshape(-1)[i])
    if not g_bp:
        return 0.0
    g_bp, g_fd = np.array(g_bp), np.array(g_fd)
    scale = np.maximum(np.abs(g_bp), np.abs(g_fd))
    floor = 1e-4 * scale.max()
    if floor == 0.0:
        return 0.0
    return float(np.max(np.abs(g_bp - g_fd) / np.maximum(scale, floor)))


# ---------------------------------------------------------------------------
# architecture search


def kfold_indices(n: int, folds: int, seed: int = 0) -> list[np.ndarray]:
    if folds < 2 or n < folds:
        raise ValueError("need 2 <= folds <= sample count")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def grid_search(X: np.ndarray, y: np.ndarray, layers=(2, 3, 4, 5), widths=(16, 32, 64, 128, 256),
                folds: int = 6, cfg: TrainConfig = TrainConfig()) -> list[tuple[int, int, float]]:
    """Rank (hidden layers, width) by mean validation RMSE over ``folds`` folds."""
    from .features import fit_normalizer

    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    parts = kfold_indices(len(X), folds, cfg.seed)
    rows = []
    for L in layers:
        for w in widths:
            dims = (X.shape[1],) + (w,) * L + (1,)
            scores = []
            for k, val in enumerate(parts):
                tr = np.concatenate([p for j, p in enumerate(parts) if j != k])
                c = replace(cfg, dims=dims)
                m, _ = train(X[tr], y[tr], X[val], y[val], c, fit_normalizer(X[tr]))
                scores.append(rmse(m, X[val], y[val]))
            rows.append((L, w, float(np.mean(scores))))
    rows.sort(key=lambda r: (r[2], r[0], r[1]))
    return rows


def grid_csv(rows: list[tuple[int, int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "hidden_layers", "width", "mean_val_rmse"])
    for k, (L, wd, s) in enumerate(rows, 1):
        w.writerow([k, L, wd, repr(s)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# serialization


def _line(name: str, arr) -> str:
    return name + " " + " ".join(repr(float(v)) for v in np.ravel(arr))


def save_model(m: MlpModel, path: str | Path) -> None:
    rng = np.random.default_rng(12345)
    check = m.normalizer.mean + m.normalizer.std * rng.standard_normal(m.dims[0])
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION}",
             "dims " + " ".join(str(d) for d in m.dims),
             f"log_target {int(m.log_target)}"]
    for k, v in sorted(m.meta.items()):
        if any(ch.isspace() for ch in k + v):
            raise ValueError("metadata keys and values may not contain whitespace")
        lines.append(f"meta {k} {v}")
    lines += [_line("mean", m.normalizer.mean), _line("std", m.normalizer.std)]
    for k, (w, b) in enumerate(zip(m.weights, m.biases)):
        lines.append(f"W{k} {w.shape[0]} {w.shape[1]}")
        lines += [" ".join(repr(float(v)) for v in row) for row in w]
        lines.append(_line(f"b{k}", b))
    lines.append(_line("check_input", check))
    lines.append(_line("check_output", [forward(m, check)]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path: str | Path) -> MlpModel:
    lines = Path(path).read_text().splitlines()
    pos = 0

    def take(prefix: str) -> list[str]:
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError(f"unexpected end of file, expected {prefix!r}")
        parts = lines[pos].split()
        if not parts or parts[0] != prefix:
            raise ModelFormatError(f"line {pos + 1}: expected {prefix!r}")
        pos += 1
        return parts[1:]

    def floats(tokens, n) -> np.ndarray:
        try:
            arr = np.array([float(t) for t in tokens])
        except ValueError as exc:
            raise ModelFormatError(f"line {pos}: bad number") from exc
        if len(arr) != n:
            raise ModelFormatError(f"line {pos}: expected {n} values, got {len(arr)}")
        return arr

    if take(FORMAT_TAG) != [str(FORMAT_VERSION)]:
        raise ModelFormatError("unsupported model format version")
    try:
        dims = [int(t) for t in take("dims")]
        log_target = bool(int(take("log_target")[0]))
    except (ValueError, IndexError) as exc:
        raise ModelFormatError("bad header") from exc
    meta = {}
    while pos < len(lines) and lines[pos].startswith("meta "):
        parts = take("meta")
        if len(parts) != 2:
            raise ModelFormatError(f"line {pos}: bad metadata")
        meta[parts[0]] = parts[1]
    mean = floats(take("mean"), dims[0])
    std = floats(take("std"), dims[0])
    ws, bs = [], []
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        if take(f"W{k}") != [str(b), str(a)]:
            raise ModelFormatError(f"layer {k}: shape mismatch")
        rows = []
        for _ in range(b):
            if pos >= len(lines):
                raise ModelFormatError("unexpected end of file in weights")
            pos += 1
            rows.append(floats(lines[pos - 1].split(), a))
        ws.append(np.array(rows))
        bs.append(floats(take(f"b{k}"), b))
    check = floats(take("check_input"), dims[0])
    expected = floats(take("check_output"), 1)[0]
    try:
        m = MlpModel(ws, bs, Normalizer(mean, std), log_target, meta)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc
    if forward(m, check) != expected:
        raise ModelFormatError("cross-check vector does not reproduce the stored output")
    return m
