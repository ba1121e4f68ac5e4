"""Metrics, threshold optimization, linear probe, and the ablation harness.

Macro precision/recall/F1 follow the 0/0 -> 0 convention; AUC uses the rank
(Mann-Whitney) form and is only reported for classification phases. The
ablation harness manipulates the calibrated visual tokens (zeroed / random /
shuffled) before generation or teacher forcing and reads labels back out of
the generated text with the keyword oracle.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

METRICS_CSV_HEADER = ["class", "precision", "recall", "f1", "support", "threshold"]
ABLATION_KINDS = ("normal", "zeroed", "random", "shuffled")


@dataclass
class MetricReport:
    per_class: list                      # dicts: class/precision/recall/f1/support/threshold
    macro_precision: float
    macro_recall: float
    macro_f1: float
    thresholds: np.ndarray = None
    auc: list = None                     # per-class AUC or None
    leaky: bool = False
    condition: str = "normal"

    def to_json(self, **extra):
        doc = {
            "per_class": self.per_class,
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
            "leaky": self.leaky,
            "condition": self.condition,
        }
        if self.auc is not None:
            doc["auc"] = self.auc
        doc.update(extra)
        return json.dumps(doc, sort_keys=True, indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(METRICS_CSV_HEADER)
        for row in self.per_class:
            w.writerow([row["class"], f"{row['precision']:.6f}", f"{row['recall']:.6f}",
                        f"{row['f1']:.6f}", row["support"], f"{row['threshold']:.6f}"])
        w.writerow(["MACRO", f"{self.macro_precision:.6f}", f"{self.macro_recall:.6f}",
                    f"{self.macro_f1:.6f}", "", ""])
        return buf.getvalue()


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    r = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, f


def macro_metrics(preds, labels, class_names=None, thresholds=None, condition="normal"):
    """Per-class and macro P/R/F1 from boolean predictions."""
    pr = np.asarray(preds, dtype=bool)
    y = np.asarray(labels, dtype=bool)
    if pr.shape != y.shape:
        raise ValueError(f"shape mismatch: preds {pr.shape} vs labels {y.shape}")
    m, c = y.shape
    names = class_names or [f"class{i}" for i in range(c)]
    th = np.full(c, 0.5) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    rows = []
    for j in range(c):
        tp = int((pr[:, j] & y[:, j]).sum())
        fp = int((pr[:, j] & ~y[:, j]).sum())
        fn = int((~pr[:, j] & y[:, j]).sum())
        p, r, f = _prf(tp, fp, fn)
        rows.append({
            "class": names[j], "precision": p, "recall": r, "f1": f,
            "support": int(y[:, j].sum()), "threshold": float(th[j]),
        })
    return MetricReport(
        per_class=rows,
        macro_precision=float(np.mean([r["precision"] for r in rows])),
        macro_recall=float(np.mean([r["recall"] for r in rows])),
        macro_f1=float(np.mean([r["f1"] for r in rows])),
        thresholds=th,
        condition=condition,
    )


def auc_score(scores, labels):
    """Rank-based (trapezoidal) AUC; NaN when only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    ranks[order] = np.arange(1, len(s) + 1)
    # average ranks over ties
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def optimize_thresholds(scores, labels, class_names=None):
    """Per-class threshold sweep maximizing class F1 (leaky by construction:
    thresholds are fit on the evaluation scores themselves)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    m, c = y.shape
    best_th = np.full(c, 0.5)
    for j in range(c):
        cands = np.unique(np.concatenate([s[:, j], [0.5]]))
        best_f = -1.0
        for t in cands:
            pred = s[:, j] >= t
            tp = int((pred & y[:, j]).sum())
            fp = int((pred & ~y[:, j]).sum())
            fn = int((~pred & y[:, j]).sum())
            _, _, f = _prf(tp, fp, fn)
            if f > best_f:
                best_f, best_th[j] = f, t
    report = macro_metrics(s >= best_th, y, class_names, thresholds=best_th)
    report.leaky = True
    return best_th, report


# -- linear probe ---------------------------------------------------------------


def _logreg_fit(x, y, iters=200, lr=0.5, l2=1e-3):
    """Full-batch gradient descent logistic regression; returns (w, b)."""
    w = np.zeros(x.shape[1])
    b = 0.0
    yy = y.astype(np.float64)
    for _ in range(iters):
        z = x @ w + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -30, 30)))
        err = p - yy
        gw = x.T @ err / len(yy) + l2 * w
        gb = err.mean()
        w -= lr * gw
        b -= lr * gb
    return w, b


def linear_probe(features, labels, folds=5, seed=0, iters=200):
    """Per-class one-vs-rest logistic probe, stratified k-fold CV.

    Returns dict with fold-mean macro F1 and any (fold, class) pairs skipped
    because a training fold held a single class.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    m, c = y.shape
    if m < folds:
        raise ValueError(f"need at least {folds} samples, got {m}")
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-8
    xs = (x - mu) / sd
    rng = np.random.default_rng(seed)
    fold_f1, skipped = [], []
    for j in range(c):
        # stratified fold assignment per class
        fold_of = np.empty(m, dtype=np.int64)
        for val in (True, False):
            idx = np.flatnonzero(y[:, j] == val)
            idx = idx[rng.permutation(len(idx))]
            fold_of[idx] = np.arange(len(idx)) % folds
        for f in range(folds):
            te = fold_of == f
            tr = ~te
            if y[tr, j].all() or not y[tr, j].any():
                skipped.append((f, j))
                continue
            w, b = _logreg_fit(xs[tr], y[tr, j], iters=iters)
            pred = (xs[te] @ w + b) > 0
            tp = int((pred & y[te, j]).sum())
            fp = int((pred & ~y[te, j]).sum())
            fn = int((~pred & y[te, j]).sum())
            _, _, f1 = _prf(tp, fp, fn)
            fold_f1.append(f1)
    return {
        "macro_f1": float(np.mean(fold_f1)) if fold_f1 else 0.0,
        "num_scores": len(fold_f1),
        "skipped": skipped,
    }


# -- visual-token ablations -------------------------------------------------------


def ablate_tokens(tokens, kind, seed, target_norm):
    """Manipulate calibrated visual tokens (B, K, d) per ablation condition."""
    t = np.asarray(tokens, dtype=np.float64)
    if kind == "normal":
        return t.copy()
    if kind == "zeroed":
        return np.zeros_like(t)
    rng = np.random.default_rng(seed)
    if kind == "random":
        g = rng.normal(size=t.shape)
        norms = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(norms, 1e-12) * target_norm
    if kind == "shuffled":
        b = t.shape[0]
        if b < 2:
            raise ValueError("shuffled ablation needs at least two samples in the batch")
        shift = int(rng.integers(1, b))
        perm = (np.arange(b) + shift) % b   # fixed derangement for this seed
        return t[perm].copy()
    raise ValueError(f"unknown ablation kind {kind!r}")


def generation_ablation(bundle, sample_idxs, kind, seed=0):
    """Generate under the token manipulation, extract labels with the oracle,
    and score against ground truth."""
    tokens = bundle.calibrated_tokens(sample_idxs)
    tokens = ablate_tokens(tokens, kind, seed, bundle.target_norm)
    words = bundle.generate_reports(tokens, sample_idxs)
    preds = np.stack([bundle.oracle(w) for w in words])
    labels = bundle.labels_of(sample_idxs)
    report = macro_metrics(preds, labels, bundle.class_names, condition=kind)
    return report


def nll_ablation(bundle, sample_idxs, kinds=("normal", "zeroed", "shuffled"), seed=0):
    """Teacher-forced NLL per ablation condition, split by word class.

    Returns {kind: {"nll", "pathology_nll", "generic_nll"}} plus relative
    deltas against the "normal" condition.
    """
    out = {}
    for kind in kinds:
        tokens = bundle.calibrated_tokens(sample_idxs)
        tokens = ablate_tokens(tokens, kind, seed, bundle.target_norm)
        nll, path_nll, gen_nll = bundle.teacher_nll(tokens, sample_idxs)
        out[kind] = {"nll": nll, "pathology_nll": path_nll, "generic_nll": gen_nll}
    base = out.get("normal")
    if base:
        for kind, rec in out.items():
            rec["delta_nll"] = rec["nll"] - base["nll"]
            rec["delta_pathology"] = rec["pathology_nll"] - base["pathology_nll"]
            rec["delta_generic"] = rec["generic_nll"] - base["generic_nll"]
    return out
