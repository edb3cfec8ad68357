"""Evaluation: binary F1, per-sub-population scores, cluster confusion and exports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import FedEmbedError, UsageError
from .model import model_forward

REPORT_SCHEMA_VERSION = 1


def f1_binary(preds, labels):
    """2TP / (2TP + FP + FN), or 0.0 when the denominator is 0."""
    p = np.asarray(preds).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise UsageError(f"preds {p.shape} and labels {y.shape} differ in shape")
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


@dataclass
class PopulationScores:
    per_user: np.ndarray
    subpops: list
    per_subpop: list
    macro_f1: float
    micro_f1: float

    def to_dict(self):
        return {
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "per_subpop_f1": {str(k): v for k, v in zip(self.subpops, self.per_subpop)},
        }


def aggregate_scores(user_f1, user_subpop) -> PopulationScores:
    """Sub-population score = mean over its users; macro = mean over sub-populations."""
    f = np.asarray(user_f1, dtype=np.float64)
    k = np.asarray(user_subpop)
    groups = sorted(int(x) for x in np.unique(k))
    per = [float(f[k == g].mean()) for g in groups]
    macro = float(np.mean(per)) if per else 0.0
    micro = float(f.mean()) if len(f) else 0.0
    return PopulationScores(f, groups, per, macro, micro)


def predict_users(users, params, samples, heads, bank=None, chunk=4096):
    """Argmax predictions of every user on its own test split.

    ``heads[i]`` indexes ``bank`` (or the server bank) for user ``i``.
    Returns one prediction array per user.
    """
    sizes = [len(u.data.test_idx) for u in users]
    if not users:
        return []
    idx = np.concatenate([u.data.test_idx for u in users])
    emb = np.repeat(np.stack([u.embedding for u in users]), sizes, axis=0)
    hidx = np.repeat(np.asarray(heads, dtype=np.intp), sizes)
    preds = np.empty(len(idx), dtype=np.int64)
    for s in range(0, len(idx), chunk):
        sl = slice(s, s + chunk)
        out = model_forward(params, emb[sl], samples.images[idx[sl]], hidx[sl], bank)
        preds[sl] = np.argmax(out.subpop_logits, axis=1)
    return np.split(preds, np.cumsum(sizes)[:-1])


def evaluate_population(users, params, samples, heads, bank=None) -> PopulationScores:
    preds = predict_users(users, params, samples, heads, bank)
    f1 = [f1_binary(p, u.data.test_y) for p, u in zip(preds, users)]
    return aggregate_scores(f1, [u.subpop for u in users])


def cluster_confusion(true_k, assigned, num_subpops=None, num_clusters=None):
    """Entry (k, c) counts users of sub-population k assigned to cluster c."""
    t = np.asarray(true_k, dtype=np.int64)
    a = np.asarray(assigned, dtype=np.int64)
    K = int(t.max()) + 1 if num_subpops is None else num_subpops
    N = int(a.max()) + 1 if num_clusters is None else num_clusters
    m = np.zeros((K, N), dtype=np.int64)
    np.add.at(m, (t, a), 1)
    return m


def matched_diagonal_fraction(confusion):
    """Share of users on the diagonal under the best one-to-one cluster matching."""
    m = np.asarray(confusion)
    total = m.sum()
    if total == 0:
        return 0.0
    rows, cols = linear_sum_assignment(-m)
    return float(m[rows, cols].sum() / total)


def silhouette(points, labels):
    """Mean silhouette coefficient (Euclidean); singleton clusters score 0."""
    x = np.asarray(points, dtype=np.float64)
    lab = np.asarray(labels)
    uniq = np.unique(lab)
    if len(uniq) < 2:
        return 0.0
    d = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1), 0.0))
    scores = np.zeros(len(x))
    for i in range(len(x)):
        own = lab == lab[i]
        if own.sum() < 2:
            continue
        a = d[i, own].sum() / (own.sum() - 1)
        b = min(d[i, lab == c].mean() for c in uniq if c != lab[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def export_embeddings(users, assigned, path):
    """CSV ``user_id, true_k, assigned, e_0 .. e_{D-1}``, one row per user by id."""
    path = Path(path)
    rows = sorted(zip(users, assigned), key=lambda r: r[0].user_id)
    dim = len(users[0].embedding) if users else 0
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_id", "true_k", "assigned"] + [f"e_{i}" for i in range(dim)])
            for u, a in rows:
                w.writerow([u.user_id, u.subpop, int(a)] + [repr(float(v)) for v in u.embedding])
    except OSError as exc:
        raise FedEmbedError(f"cannot write embeddings to {path}: {exc.strerror}") from None
    return path


@dataclass
class RunReport:
    config: dict
    seed: int
    history: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    privacy: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    timestamps: dict | None = None
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def macro_f1(self):
        return self.final.get("macro_f1")

    def to_dict(self, include_timestamps=True):
        out = {
            "schema_version": self.schema_version,
            "config": self.config,
            "seed": self.seed,
            "history": self.history,
            "final": self.final,
            "privacy": self.privacy,
            "artifacts": self.artifacts,
        }
        if include_timestamps and self.timestamps is not None:
            out["timestamps"] = self.timestamps
        return out

    def to_json(self, include_timestamps=True):
        return json.dumps(self.to_dict(include_timestamps), sort_keys=True, indent=2) + "\n"

    def write(self, path, include_timestamps=True):
        path = Path(path)
        try:
            path.write_text(self.to_json(include_timestamps))
        except OSError as exc:
            raise FedEmbedError(f"cannot write report to {path}: {exc.strerror}") from None
        return path

    @classmethod
    def from_dict(cls, d):
        return cls(
            config=d["config"],
            seed=d["seed"],
            history=d.get("history", []),
            final=d.get("final", {}),
            privacy=d.get("privacy", {}),
            artifacts=d.get("artifacts", {}),
            timestamps=d.get("timestamps"),
            schema_version=d.get("schema_version", REPORT_SCHEMA_VERSION),
        )
