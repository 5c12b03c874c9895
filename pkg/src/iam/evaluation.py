"""Top-k accuracy, mean top-k recall, evaluation over annotated streams, and traces.

Top-k ties are broken toward the lower class id, so ``[0.3, 0.3, 0.4]`` ranks
classes as ``2, 0, 1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import cell as iam
from .datagen import FeatureFile, SegmentAnnotation, make_windows
from .numerics import ContractError, ParamStore
from .training import TrainConfig, predict_windows


def topk_ids(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, ties to lower ids."""
    probs = np.asarray(probs)
    C = probs.shape[-1]
    if not 1 <= k <= C:
        raise ContractError(f"k must be in [1, {C}], got {k}")
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def topk_hit(probs, label: int, k: int) -> bool:
    return bool(label in topk_ids(probs, k))


def topk_hits(predictions: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    ids = topk_ids(predictions, k)
    return (ids == np.asarray(labels)[:, None]).any(axis=1)


def topk_accuracy(predictions: np.ndarray, labels: np.ndarray, k: int) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(topk_hits(predictions, labels, k).mean())


def per_class_recall(predictions: np.ndarray, labels: np.ndarray, k: int) -> dict[int, float]:
    """Recall for every class with at least one instance."""
    labels = np.asarray(labels)
    hits = topk_hits(predictions, labels, k)
    out = {}
    for c in np.unique(labels):
        sel = labels == c
        out[int(c)] = float(hits[sel].sum() / sel.sum())
    return out


def mean_topk_recall(predictions: np.ndarray, labels: np.ndarray, k: int,
                     subset: Sequence[int] | set | None = None) -> float | None:
    """Unweighted mean of per-class top-k recall; None if no class is represented.

    Computed in exact rational arithmetic and rounded once, so the value does
    not depend on summation order.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        return None
    hits = topk_hits(predictions, labels, k)
    classes = [int(c) for c in np.unique(labels)]
    if subset is not None:
        keep = set(int(c) for c in subset)
        classes = [c for c in classes if c in keep]
    if not classes:
        return None
    total = Fraction(0)
    for c in classes:
        sel = labels == c
        total += Fraction(int(hits[sel].sum()), int(sel.sum()))
    return float(total / len(classes))


def marginalize(predictions: np.ndarray, labels: np.ndarray, mapping: Mapping[int, int]
                ) -> tuple[np.ndarray, np.ndarray]:
    """Sum action probabilities into coarser classes (verbs or nouns)."""
    C = predictions.shape[1]
    missing = [a for a in range(C) if a not in mapping]
    if missing:
        raise ContractError(f"mapping lacks action ids {missing[:5]}")
    target = np.array([mapping[a] for a in range(C)])
    n = int(target.max()) + 1
    agg = np.zeros((predictions.shape[0], n))
    for a in range(C):
        agg[:, target[a]] += predictions[:, a]
    return agg, target[np.asarray(labels)]


@dataclass
class EvalReport:
    n: int
    accuracy: dict[int, float]
    recall_k: int
    mean_recall: dict[str, float | None]
    per_class: dict[int, float]
    children: dict[str, "EvalReport"] = field(default_factory=dict)

    @property
    def top1(self) -> float:
        return self.accuracy.get(1, float("nan"))

    @property
    def top5(self) -> float:
        return self.accuracy.get(5, self.accuracy.get(max(self.accuracy), float("nan")))

    @property
    def mean_top5_recall(self) -> float | None:
        return self.mean_recall.get("overall")

    def rows(self, prefix: str = "action") -> list[list]:
        out = [[prefix, "overall", k, "topk_accuracy", v] for k, v in sorted(self.accuracy.items())]
        for name, v in self.mean_recall.items():
            out.append([prefix, name, self.recall_k, "mean_topk_recall",
                        "" if v is None else v])
        for c, r in sorted(self.per_class.items()):
            out.append([prefix, f"class:{c}", self.recall_k, "recall", r])
        for name, child in self.children.items():
            out.extend(child.rows(name))
        return out

    def summary(self, prefix: str = "action") -> str:
        lines = [f"[{prefix}] samples={self.n}"]
        for k, v in sorted(self.accuracy.items()):
            lines.append(f"  top{k} accuracy: {100 * v:.2f}%")
        for name, v in self.mean_recall.items():
            shown = "n/a" if v is None else f"{100 * v:.2f}%"
            lines.append(f"  mean top{self.recall_k} recall ({name}): {shown}")
        for name, child in self.children.items():
            lines.append(child.summary(name))
        return "\n".join(lines)


def build_report(predictions: np.ndarray, labels: np.ndarray, ks: Sequence[int] = (1, 5),
                 subsets: Mapping[str, Sequence[int]] | None = None,
                 maps: Mapping[str, Mapping[int, int]] | None = None) -> EvalReport:
    C = predictions.shape[1]
    ks = sorted({min(k, C) for k in ks})
    rk = min(5, C)
    mean_recall = {"overall": mean_topk_recall(predictions, labels, rk)}
    for name, ids in (subsets or {}).items():
        if any(int(i) >= C or int(i) < 0 for i in ids):
            raise ContractError(f"subset {name!r} has ids outside [0, {C})")
        mean_recall[name] = mean_topk_recall(predictions, labels, rk, ids)
    report = EvalReport(len(labels), {k: topk_accuracy(predictions, labels, k) for k in ks},
                        rk, mean_recall, per_class_recall(predictions, labels, rk)
                        if len(labels) else {})
    for name, mapping in (maps or {}).items():
        p, l = marginalize(predictions, labels, mapping)
        report.children[name] = build_report(p, l, ks)
    return report


def window_config(meta: Mapping, tau_a: float | None = None,
                  window_T: int | None = None) -> TrainConfig:
    return TrainConfig(tau_a=float(tau_a if tau_a is not None else meta.get("tau_a", 1.0)),
                       fps_train=float(meta.get("fps_train", 1.0)),
                       window_T=int(window_T if window_T is not None else meta.get("window_T", 30)))


def evaluate(cfg: iam.CellConfig, params: ParamStore, features: FeatureFile,
             annotations: Sequence[SegmentAnnotation], tau_a: float | None = None,
             ks: Sequence[int] = (1, 5), subsets: Mapping[str, Sequence[int]] | None = None,
             maps: Mapping[str, Mapping[int, int]] | None = None,
             meta: Mapping | None = None, window_T: int | None = None) -> EvalReport:
    """Score the prediction at each window's final anticipation step (inference mode)."""
    if features.F != cfg.F:
        raise ContractError(f"feature dim mismatch: checkpoint expects F={cfg.F}, "
                            f"file has F={features.F}")
    wcfg = window_config(meta or {}, tau_a, window_T)
    windows = make_windows(features, annotations, wcfg, jitter=False)
    preds, labels, _ = predict_windows(params, cfg, windows)
    return build_report(preds, labels, ks, subsets, maps)


def write_report(report: EvalReport, csv_path: str | Path, text_path: str | Path | None = None
                 ) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "subset", "k", "metric", "value"])
        writer.writerows(report.rows())
    if text_path is not None:
        Path(text_path).write_text(report.summary() + "\n", encoding="utf-8")


def read_subset(path: str | Path) -> list[int]:
    ids = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            ids.append(int(line))
    return ids


def read_mapping(path: str | Path) -> dict[int, int]:
    """``action_id,target_id`` per line (an optional header line is skipped)."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                out[int(row[0])] = int(row[1])
            except ValueError:
                if out:
                    raise
    return out


TRACE_HEADER = ["t", "head", "slot_age", "attention_weight", "gate_mean", "gate_min", "gate_max"]


def dump_traces(cfg: iam.CellConfig, params: ParamStore, features: FeatureFile,
                out_path: str | Path) -> int:
    """Stream a feature file and write attention/gate rows; returns the row count.

    Attention rows fill ``t,head,slot_age,attention_weight`` (slot_age 1 is the
    newest entry); the per-step gate row fills ``t,gate_mean,gate_min,gate_max``.
    """
    if features.F != cfg.F:
        raise ContractError(f"feature dim mismatch: expected F={cfg.F}, got {features.F}")
    state = iam.IamState.initial(cfg)
    rows = 0
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for t in range(features.T):
            _, _, state, trace = iam.step(state, features.data[t], params, cfg)
            if trace.attention is not None:
                w = trace.attention[0]          # (heads, L), oldest first
                L = w.shape[1]
                for head in range(w.shape[0]):
                    for slot in range(L):
                        writer.writerow([t, head, L - slot, repr(float(w[head, slot])),
                                         "", "", ""])
                        rows += 1
            g = trace.gate
            writer.writerow([t, "", "", "", repr(float(g.mean())), repr(float(g.min())),
                             repr(float(g.max()))])
            rows += 1
    return rows
