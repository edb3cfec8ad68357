"""Sub-population assignment.

Two mechanisms are provided:

* a self-organising map that is trained federatedly. Every client proposes
  a Kohonen update computed from its own embedding, and the server applies
  only the update of the best-scoring client. Heads follow SOM nodes across
  refits by maximal membership overlap.
* prototype assignment. A triplet step pulls the embedding toward the
  user's prototype and away from a random other prototype, then the user
  takes the head of the nearest prototype.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from math import exp, sqrt

import numpy as np

from .errors import UsageError

SELECTION_RULES = ("best", "mean")


def grid_shape(n):
    """Most-square ``rows x cols`` factorisation of ``n`` with ``cols >= rows``."""
    rows = max(r for r in range(1, int(sqrt(n)) + 1) if n % r == 0)
    return rows, n // rows


@dataclass
class SOMap:
    weights: np.ndarray
    grid: np.ndarray
    lr0: float = 0.5
    radius0: float = 1.0
    tau: float = 50.0
    iteration: int = 0
    broadcast: bool = False

    @property
    def num_nodes(self):
        return self.weights.shape[0]

    def lr(self, t=None):
        t = self.iteration if t is None else t
        return self.lr0 * exp(-t / self.tau)

    def radius(self, t=None):
        t = self.iteration if t is None else t
        return self.radius0 * exp(-t / self.tau)

    def neighborhood(self, bmu, t=None):
        r = self.radius(t)
        d2 = ((self.grid - self.grid[bmu]) ** 2).sum(axis=1)
        return np.exp(-d2 / (2.0 * r * r))


def make_som(num_nodes, dim, total_rounds, rng, shape=None, lr0=0.5, init="uniform", init_scale=1.0, broadcast=False):
    rows, cols = shape if shape is not None else grid_shape(num_nodes)
    if rows * cols != num_nodes:
        raise UsageError(f"grid {rows}x{cols} does not hold {num_nodes} nodes")
    grid = np.array([(r, c) for r in range(rows) for c in range(cols)], dtype=np.float64)
    diameter = sqrt((rows - 1) ** 2 + (cols - 1) ** 2)
    if init == "uniform":
        weights = init_scale * rng.uniform(0.0, 1.0, size=(num_nodes, dim))
    else:
        weights = init_scale * rng.normal(size=(num_nodes, dim))
    return SOMap(
        weights=weights,
        grid=grid,
        lr0=lr0,
        radius0=max(diameter / 2.0, 1e-12),
        tau=max(total_rounds / 2.0, 1.0),
        broadcast=broadcast,
    )


def som_bmu(som: SOMap, embedding):
    d = ((som.weights - np.asarray(embedding)) ** 2).sum(axis=1)
    return int(np.argmin(d))


def som_bmu_many(som: SOMap, embeddings):
    """Best-matching unit of every row; same tie-break as :func:`som_bmu`."""
    e = np.asarray(embeddings)
    d = (e * e).sum(1)[:, None] - 2.0 * e @ som.weights.T + (som.weights**2).sum(1)[None, :]
    return np.argmin(d, axis=1)


@dataclass
class SOMClientReport:
    deltas: np.ndarray
    score: float


def som_client_step(som: SOMap, embedding, iteration=None) -> SOMClientReport:
    """Kohonen update proposed by one client plus its similarity score.

    The score is the negative squared distance to the best-matching unit, so
    higher is better and 0 means the embedding sits exactly on a node.
    """
    t = som.iteration if iteration is None else iteration
    e = np.asarray(embedding, dtype=np.float64)
    diff = e - som.weights
    d2 = (diff * diff).sum(axis=1)
    bmu = int(np.argmin(d2))
    h = np.ones(som.num_nodes) if som.broadcast else som.neighborhood(bmu, t)
    return SOMClientReport(som.lr(t) * h[:, None] * diff, float(-d2[bmu]))


def som_server_round(som: SOMap, reports, rule="best") -> SOMap:
    """Apply client proposals and advance the schedule.

    ``rule="best"`` keeps only the highest-scoring report (first one wins a
    tie). ``rule="mean"`` averages every proposal. ``reports`` may be a
    generator, since only one delta is held at a time under ``best``.
    """
    if rule not in SELECTION_RULES:
        raise UsageError(f"rule must be one of {SELECTION_RULES}")
    best = None
    total = None
    count = 0
    for rep in reports:
        count += 1
        if rule == "best":
            if best is None or rep.score > best.score:
                best = rep
        else:
            total = rep.deltas.copy() if total is None else total + rep.deltas
    if count == 0:
        raise UsageError("som_server_round needs at least one report")
    delta = best.deltas if rule == "best" else total / count
    return replace(som, weights=som.weights + delta, iteration=som.iteration + 1)


def purity(assignments, labels):
    """Fraction of points that share the majority label of their cluster."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    hit = 0
    for c in np.unique(assignments):
        hit += np.bincount(labels[assignments == c]).max()
    return hit / len(labels)


# ---------------------------------------------------------------------------
# head remapping


def overlap_matrix(old_memberships, new_memberships, n_old, n_new):
    old = np.asarray(old_memberships)
    new = np.asarray(new_memberships)
    if old.shape != new.shape:
        raise UsageError("membership maps must cover the same users")
    m = np.zeros((n_new, n_old), dtype=np.int64)
    np.add.at(m, (new, old), 1)
    return m


def match_overlap(overlap):
    """Greedy maximal-overlap matching of new nodes (rows) to old nodes (columns).

    Returns an array giving the matched old node for every new node, or -1.
    Only pairs that share at least one user are matched.
    """
    m = np.array(overlap, dtype=np.int64)
    mapping = -np.ones(m.shape[0], dtype=np.int64)
    while m.size and m.max() > 0:
        i, j = np.unravel_index(np.argmax(m), m.shape)
        mapping[i] = j
        m[i, :] = -1
        m[:, j] = -1
    return mapping


def remap_heads(old_memberships, new_memberships, old_heads, fresh_heads):
    """Carry head weights from old SOM nodes to the new nodes they overlap most.

    ``old_heads`` and ``fresh_heads`` are arrays with the node index first.
    New nodes without an overlapping old node get the matching row of
    ``fresh_heads``. Returns ``(new_heads, mapping)``.
    """
    n_new = fresh_heads.shape[0]
    n_old = old_heads.shape[0]
    mapping = match_overlap(overlap_matrix(old_memberships, new_memberships, n_old, n_new))
    new = fresh_heads.copy()
    hit = mapping >= 0
    new[hit] = old_heads[mapping[hit]]
    return new, mapping


# ---------------------------------------------------------------------------
# prototypes


@dataclass
class PrototypeSet:
    prototypes: np.ndarray
    margin: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise UsageError("triplet margin must be positive")


def triplet_loss(e_u, e_p, e_n, margin=1.0):
    e_u, e_p, e_n = (np.asarray(a, dtype=np.float64) for a in (e_u, e_p, e_n))
    return float(((e_u - e_p) ** 2).sum() - ((e_u - e_n) ** 2).sum() + margin)


def triplet_grad(e_u, e_p, e_n):
    """Gradient of the triplet loss in ``e_u``; it does not depend on ``e_u``."""
    return 2.0 * (np.asarray(e_n, dtype=np.float64) - np.asarray(e_p, dtype=np.float64))


def triplet_update(e_u, e_p, e_n, margin=1.0, lr=0.01):
    """One gradient-descent step on the triplet loss."""
    return np.asarray(e_u, dtype=np.float64) - lr * triplet_grad(e_u, e_p, e_n)


def prototype_assign(e_u, prototypes):
    p = prototypes.prototypes if isinstance(prototypes, PrototypeSet) else np.asarray(prototypes)
    return int(np.argmin(((p - np.asarray(e_u)) ** 2).sum(axis=1)))


def prototype_assign_many(embeddings, prototypes):
    p = prototypes.prototypes if isinstance(prototypes, PrototypeSet) else np.asarray(prototypes)
    e = np.asarray(embeddings)
    d = ((e[:, None, :] - p[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def update_prototypes(protos: PrototypeSet, assignments, grads, lr) -> PrototypeSet:
    """Move every prototype by the mean embedding gradient of its assigned users."""
    assignments = np.asarray(assignments, dtype=np.int64)
    grads = np.asarray(grads, dtype=np.float64).reshape(len(assignments), -1)
    new = protos.prototypes.copy()
    for k in np.unique(assignments):
        new[k] = new[k] - lr * grads[assignments == k].mean(axis=0)
    return PrototypeSet(new, protos.margin)
