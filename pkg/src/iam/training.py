"""Anticipation supervision, losses, AdamW with cosine decay, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import cell as iam
from . import numerics as nx
from .numerics import ContractError, NonFiniteError, ParamStore, Tensor

log = logging.getLogger(__name__)

MASK = -1
LOG_EPS = 1e-12
METRICS_HEADER = ["epoch", "split", "loss", "top1", "top5", "mt5r", "lr"]


@dataclass(frozen=True)
class TrainConfig:
    tau_a: float = 1.0
    fps_train: float = 1.0
    window_T: int = 30
    epochs: int = 50
    batch_size: int = 128
    lr_base: float = 2e-4
    weight_decay: float = 1e-2
    smoothing: float = 0.0
    inverse_count_weights: bool = False
    jitter: bool = False
    seed: int = 0
    max_steps: int = 0          # 0 = no cap
    val_fraction: float = 0.0

    def __post_init__(self):
        if not self.tau_a > 0:
            raise ContractError("tau_a must be > 0")
        if self.window_T < 2:
            raise ContractError("window_T must be >= 2")
        if not self.lr_base > 0:
            raise ContractError("lr_base must be > 0")
        if not 0 <= self.smoothing < 1:
            raise ContractError("smoothing must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ContractError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LabeledWindow:
    features: np.ndarray        # (T, F)
    labels: np.ndarray          # (T,) class id or MASK
    mask: np.ndarray            # (T,) bool
    source_indices: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not np.array_equal(self.mask, self.labels != MASK):
            raise ContractError("mask must be false exactly where labels are MASK")

    @property
    def T(self) -> int:
        return self.labels.shape[0]

    def final_step(self) -> int:
        """Index of the last unmasked step."""
        idx = np.flatnonzero(self.mask)
        if idx.size == 0:
            raise ContractError("window has no unmasked step")
        return int(idx[-1])


# ----------------------------------------------------------------- supervision

def anticipation_labels(segments, frame_times: Sequence[float], tau_a: float,
                        tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Label each frame with the first action starting in (t, t + tau_a]."""
    segs = sorted(segments, key=lambda s: (s.start_s, s.stop_s))
    for a, b in zip(segs, segs[1:]):
        if b.start_s < a.stop_s - tol:
            raise ContractError(f"overlapping segments at {a.start_s} and {b.start_s}")
    starts = np.array([s.start_s for s in segs], dtype=np.float64)
    actions = np.array([s.action for s in segs], dtype=np.int64)
    times = np.asarray(frame_times, dtype=np.float64)
    labels = np.full(times.shape, MASK, dtype=np.int64)
    if starts.size:
        first = np.searchsorted(starts, times + tol, side="right")
        ok = first < starts.size
        hit = ok.copy()
        hit[ok] = starts[first[ok]] <= times[ok] + tau_a + tol
        labels[hit] = actions[first[hit]]
    return labels, labels != MASK


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-count weights (zero counts treated as one), normalized to mean 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts < 0):
        raise ContractError("counts must be non-negative")
    if not counts.any():
        raise ContractError("all class counts are zero")
    # exact rational arithmetic so e.g. uniform counts give weights of exactly 1
    inv = [Fraction(1) / Fraction(max(c, 1.0)) for c in counts]
    mean = sum(inv) / len(inv)
    return np.array([float(w / mean) for w in inv])


def smoothed_weighted_ce(y, label: int, weights=None, smoothing: float = 0.0) -> Tensor:
    """-w[label] * sum_c target_c log(y_c + eps) with a label-smoothed target."""
    y = nx.as_tensor(y)
    if label == MASK or label < 0:
        raise ContractError("loss requested for a masked step")
    C = y.shape[-1]
    target = np.full(C, smoothing / C)
    target[label] += 1.0 - smoothing
    w = 1.0 if weights is None else float(weights[label])
    return nx.mul(nx.tsum(nx.mul(nx.log(y, LOG_EPS), target.astype(y.dtype))), -w)


def _step_coefficients(labels: np.ndarray, mask: np.ndarray, C: int, weights,
                       smoothing: float, dtype) -> np.ndarray:
    """Per (window, step) target rows scaled so the sum is the batch loss.

    Each window averages over its unmasked steps and the batch averages windows.
    """
    B, T = labels.shape
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("window with every step masked")
    w = np.ones(C) if weights is None else np.asarray(weights, dtype=np.float64)
    coef = np.zeros((B, T, C))
    b_idx, t_idx = np.nonzero(mask)
    lab = labels[b_idx, t_idx]
    scale = w[lab] / (counts[b_idx] * B)
    coef[b_idx, t_idx, :] = (smoothing / C) * scale[:, None]
    coef[b_idx, t_idx, lab] += (1.0 - smoothing) * scale
    return (-coef).astype(dtype)


@dataclass
class Unrolled:
    loss: Tensor
    predictions: list[Tensor]
    traces: list[iam.StepTrace]


def unroll(P: dict, cfg: iam.CellConfig, features: np.ndarray, labels: np.ndarray,
           mask: np.ndarray, weights=None, smoothing: float = 0.0, rng=None,
           training: bool = False, *, detach_keys: bool = True,
           key_sources: Sequence | None = None) -> Unrolled:
    """Run a batch of windows from empty memory and accumulate the mean loss."""
    features = np.asarray(features)
    if features.ndim == 2:
        features, labels, mask = features[None], np.asarray(labels)[None], np.asarray(mask)[None]
    B, T, _ = features.shape
    dtype = nx.as_tensor(next(iter(P.values()))).dtype
    coef = _step_coefficients(np.asarray(labels), np.asarray(mask), cfg.C, weights,
                              smoothing, dtype)
    state = iam.IamState.initial(cfg)
    total: Tensor | float = 0.0
    preds, traces = [], []
    for t in range(T):
        ks = None if key_sources is None else key_sources[t]
        y, _, state, trace = iam.step(state, features[:, t].astype(dtype, copy=False), P, cfg,
                                      rng, training, detach_keys=detach_keys, key_source=ks)
        preds.append(y)
        traces.append(trace)
        if mask[:, t].any():
            total = nx.add(total, nx.tsum(nx.mul(nx.log(y, LOG_EPS), coef[:, t])))
    if not isinstance(total, Tensor):
        raise ContractError("every step of every window is masked")
    return Unrolled(total, preds, traces)


def sequence_loss(P: dict, cfg: iam.CellConfig, window: LabeledWindow, weights=None,
                  smoothing: float = 0.0, rng=None, training: bool = False, **kw) -> Tensor:
    """Mean smoothed/weighted CE over the unmasked steps of one window."""
    if not window.mask.any():
        raise ContractError("every step of the window is masked")
    return unroll(P, cfg, window.features, window.labels, window.mask, weights,
                  smoothing, rng, training, **kw).loss


# ------------------------------------------------------------------ optimizer

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    exempt: frozenset = frozenset()

    @classmethod
    def for_params(cls, store: ParamStore,
                   exempt: Callable[[str], bool] = iam.decay_exempt) -> "OptimizerState":
        return cls({n: np.zeros_like(p) for n, p in store.items()},
                   {n: np.zeros_like(p) for n, p in store.items()}, 0,
                   frozenset(n for n in store.names() if exempt(n)))


def adamw_step(store: ParamStore, state: OptimizerState, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update using the gradients held in ``store``."""
    for name, g in store.grads():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(name, f"non-finite gradient in {name}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in store.items():
        g = store.grad(name)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        if name not in state.exempt:
            p = p * (1.0 - lr * weight_decay)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        store[name] = p


def cosine_lr(epoch: float, epochs: float, lr_base: float) -> float:
    if not 0 <= epoch <= epochs:
        raise ContractError(f"epoch {epoch} outside [0, {epochs}]")
    return lr_base * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0


# ---------------------------------------------------------------- training loop

class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, where: str = "loss"):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite {where} at epoch {epoch}, batch {batch}")


def collate(windows: Sequence[LabeledWindow]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T = {w.T for w in windows}
    if len(T) != 1:
        raise ContractError("windows in a batch must share a length")
    return (np.stack([w.features for w in windows]),
            np.stack([w.labels for w in windows]),
            np.stack([w.mask for w in windows]))


def final_predictions(preds: list[Tensor], mask: np.ndarray) -> np.ndarray:
    """Prediction at each window's last unmasked step, shape (B, C)."""
    last = mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)
    stacked = np.stack([p.data for p in preds], axis=1)
    return stacked[np.arange(mask.shape[0]), last]


def final_labels(labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    last = mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)
    return labels[np.arange(mask.shape[0]), last]


def label_counts(windows: Iterable[LabeledWindow], C: int) -> np.ndarray:
    counts = np.zeros(C, dtype=np.int64)
    for w in windows:
        counts += np.bincount(w.labels[w.mask], minlength=C)[:C]
    return counts


def predict_windows(P, cfg: iam.CellConfig, windows: Sequence[LabeledWindow],
                    batch_size: int = 256, weights=None, smoothing: float = 0.0
                    ) -> tuple[np.ndarray, np.ndarray, float]:
    """Inference-mode final-step predictions, their labels, and the mean loss."""
    preds, labs, losses = [], [], []
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        X, Y, M = collate(chunk)
        out = unroll(P, cfg, X, Y, M, weights, smoothing, training=False)
        preds.append(final_predictions(out.predictions, M))
        labs.append(final_labels(Y, M))
        losses.append(float(out.loss.data) * len(chunk))
    if not preds:
        return np.zeros((0, cfg.C)), np.zeros(0, dtype=np.int64), float("nan")
    return np.concatenate(preds), np.concatenate(labs), sum(losses) / len(windows)


@dataclass
class TrainResult:
    params: ParamStore
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    best_epoch: int = -1


WindowSource = Callable[[int, np.random.Generator], Sequence[LabeledWindow]]


def train(cell_cfg: iam.CellConfig, train_cfg: TrainConfig,
          data: Sequence[LabeledWindow] | WindowSource,
          val_windows: Sequence[LabeledWindow] | None = None,
          ckpt_path: str | Path | None = None, metrics_path: str | Path | None = None,
          meta: dict | None = None, dtype=np.float32) -> TrainResult:
    """Train a fresh cell; deterministic for a fixed config and seed.

    ``data`` is either a fixed list of windows or ``source(epoch, rng)`` returning
    the windows for that epoch (used to redraw jitter every epoch).  When
    ``ckpt_path`` is given the final checkpoint is written there and the best one
    (by validation top-1, or training loss without validation) next to it with a
    ``.best`` suffix.
    """
    from .checkpoint import save_checkpoint
    from .evaluation import mean_topk_recall, topk_accuracy

    rng = nx.Rng(train_cfg.seed)
    params = iam.init_params(cell_cfg, nx.Rng(train_cfg.seed + 1), dtype)
    opt = OptimizerState.for_params(params)
    source: WindowSource = data if callable(data) else (lambda epoch, _rng: data)

    first = list(source(0, rng))
    if not first:
        raise ContractError("no training windows")
    weights = None
    if train_cfg.inverse_count_weights:
        weights = class_weights(label_counts(first, cell_cfg.C))
    steps_per_epoch = math.ceil(len(first) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps:
        total_steps = min(total_steps, train_cfg.max_steps)

    meta = dict(meta or {})
    meta.update(tau_a=train_cfg.tau_a, fps_train=train_cfg.fps_train,
                window_T=train_cfg.window_T)
    metrics_fh = None
    writer = None
    if metrics_path is not None:
        metrics_fh = open(metrics_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(metrics_fh)
        writer.writerow(METRICS_HEADER)

    result = TrainResult(params)
    best_score = -math.inf
    global_step = 0
    try:
        for epoch in range(train_cfg.epochs):
            if global_step >= total_steps:
                break
            windows = first if epoch == 0 else list(source(epoch, rng))
            order = rng.permutation(len(windows))
            epoch_loss, seen = 0.0, 0
            tr_preds, tr_labels = [], []
            lr = cosine_lr(0.0, 1.0, train_cfg.lr_base)
            for b, start in enumerate(range(0, len(order), train_cfg.batch_size)):
                if global_step >= total_steps:
                    break
                batch = [windows[i] for i in order[start:start + train_cfg.batch_size]]
                X, Y, M = collate(batch)
                holder = {}

                def loss_fn(P):
                    out = unroll(P, cell_cfg, X, Y, M, weights, train_cfg.smoothing,
                                 rng, training=True)
                    holder["out"] = out
                    return out.loss
                try:
                    loss = nx.gradient_of(loss_fn, params)
                except NonFiniteError as exc:
                    raise TrainingDiverged(epoch, b, exc.where) from exc
                lr = cosine_lr(train_cfg.epochs * global_step / total_steps,
                               train_cfg.epochs, train_cfg.lr_base)
                try:
                    adamw_step(params, opt, lr, train_cfg.weight_decay)
                except NonFiniteError as exc:
                    raise TrainingDiverged(epoch, b, f"gradient {exc.where}") from exc
                global_step += 1
                epoch_loss += loss * len(batch)
                seen += len(batch)
                tr_preds.append(final_predictions(holder["out"].predictions, M))
                tr_labels.append(final_labels(Y, M))

            preds, labs = np.concatenate(tr_preds), np.concatenate(tr_labels)
            row = _metrics_row(epoch, "train", epoch_loss / seen, preds, labs, lr,
                               cell_cfg.C, topk_accuracy, mean_topk_recall)
            result.history.append(row)
            score = -row["loss"]
            if val_windows:
                vp, vl, vloss = predict_windows(params, cell_cfg, val_windows,
                                                weights=weights, smoothing=train_cfg.smoothing)
                vrow = _metrics_row(epoch, "val", vloss, vp, vl, lr, cell_cfg.C,
                                    topk_accuracy, mean_topk_recall)
                result.history.append(vrow)
                score = vrow["top1"]
            for r in result.history[-(2 if val_windows else 1):]:
                log.info("epoch %d %s loss=%.4f top1=%.3f", r["epoch"], r["split"],
                         r["loss"], r["top1"])
                if writer:
                    writer.writerow([r[k] for k in METRICS_HEADER])
                    metrics_fh.flush()
            if score > best_score:
                best_score = score
                result.best_epoch = epoch
                if ckpt_path is not None:
                    save_checkpoint(_best_path(ckpt_path), cell_cfg, params, meta)
    finally:
        if metrics_fh:
            metrics_fh.close()
    result.steps = global_step
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, cell_cfg, params, meta)
    return result


def _best_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".best")


def _metrics_row(epoch, split, loss, preds, labels, lr, C, topk_accuracy, mean_topk_recall):
    k5 = min(5, C)
    mt5r = mean_topk_recall(preds, labels, k5)
    return {"epoch": epoch, "split": split, "loss": float(loss),
            "top1": topk_accuracy(preds, labels, 1), "top5": topk_accuracy(preds, labels, k5),
            "mt5r": float("nan") if mt5r is None else mt5r, "lr": lr}


# ------------------------------------------------------------ memoryless control

@dataclass
class LogisticModel:
    W: np.ndarray
    b: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        return nx.softmax(np.asarray(X, dtype=np.float64) @ self.W + self.b).data


def fit_memoryless_logistic(X: np.ndarray, y: np.ndarray, C: int, steps: int = 500,
                            lr: float = 0.1, l2: float = 1e-4) -> LogisticModel:
    """Multinomial logistic regression on single frames (full-batch gradient descent)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ContractError("need matching, non-empty X and y")
    onehot = np.eye(C)[y]
    W = np.zeros((X.shape[1], C))
    b = np.zeros(C)
    n = X.shape[0]
    for _ in range(steps):
        p = nx.softmax(X @ W + b).data
        g = (p - onehot) / n
        W -= lr * (X.T @ g + l2 * W)
        b -= lr * g.sum(axis=0)
    return LogisticModel(W, b)


def labeled_frames(features, annotations, tau_a: float) -> tuple[np.ndarray, np.ndarray]:
    """Every stream frame whose anticipation label is defined, with that label."""
    labels, mask = anticipation_labels(annotations, features.frame_times(), tau_a)
    return features.data[mask], labels[mask]


# ----------------------------------------------------------------- grad check

def check_sequence_gradients(seed: int = 0, d: int = 16, C: int = 5, S: int = 4, F: int = 8,
                             T: int = 6, heads: int = 2, h: float = 1e-4,
                             tolerance: float = 1e-5, samples: int | None = 40,
                             smoothing: float = 0.1) -> nx.GradCheckReport:
    """Finite-difference check of the full unrolled sequence loss in 64-bit.

    The analytic side is the real model.  Central differences cannot respect the
    stop-gradient on memory keys, so the numeric side evaluates the same model
    with each key's prediction frozen at the value recorded from an unperturbed
    forward pass -- the function whose gradient the stop-gradient defines.
    """
    cfg = iam.CellConfig(d=d, C=C, F=F, S=S, heads=heads, dropout=0.0)
    rng = nx.Rng(seed)
    store = iam.init_params(cfg, rng, np.float64)
    X = rng.normal(size=(T, F))
    labels = rng.integers(0, C, size=T)
    labels[rng.random(T) < 0.2] = MASK
    if not (labels != MASK).any():
        labels[-1] = 0
    mask = labels != MASK
    weights = class_weights(rng.integers(1, 10, size=C))
    frozen = unroll(store.leaves(False), cfg, X, labels, mask, weights, smoothing)
    key_sources = [p.data for p in frozen.predictions]

    def real(P):
        return unroll(P, cfg, X, labels, mask, weights, smoothing).loss

    def frozen_keys(P):
        return unroll(P, cfg, X, labels, mask, weights, smoothing, key_sources=key_sources).loss

    return nx.grad_check(real, store, h=h, tolerance=tolerance, samples=samples,
                         rng=nx.Rng(seed + 7919), numeric_fn=frozen_keys)
