"""Record-set construction: size/diversity/variation-aware selection and ordering."""

from __future__ import annotations

import random

import numpy as np

from .model import ERError, SetConfig


class EmptyInput(ERError):
    pass


class TooFewPoints(ERError):
    pass


class BadK(ERError):
    pass


def variation(cluster_sizes) -> float:
    """Coefficient of variation (population sigma over mean) of cluster sizes."""
    sizes = list(cluster_sizes)
    if not sizes:
        raise EmptyInput("variation of an empty size list")
    mu = sum(sizes) / len(sizes)
    sigma = (sum((s - mu) ** 2 for s in sizes) / len(sizes)) ** 0.5
    return sigma / mu


def kmeans(points: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Seeded Lloyd k-means with farthest-point init; returns a label array.

    Deterministic for a fixed seed: the first center is drawn from the seeded
    RNG, the rest by farthest-point (ties to the lowest index).
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if not 1 <= k <= n:
        raise BadK(f"k={k} outside [1, {n}]")
    rng = random.Random(seed)
    centers = [points[rng.randrange(n)]]
    dist2 = np.sum((points - centers[0]) ** 2, axis=1)
    while len(centers) < k:
        idx = int(np.argmax(dist2))
        centers.append(points[idx])
        dist2 = np.minimum(dist2, np.sum((points - centers[-1]) ** 2, axis=1))
    centers = np.array(centers)
    labels = np.full(n, -1, dtype=int)
    for _iteration in range(100):
        d = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d, axis=1)
        # Re-seed any emptied cluster with the point farthest from its own
        # center, never stealing from a cluster that would empty in turn.
        for c in range(k):
            if np.any(new_labels == c):
                continue
            counts = np.bincount(new_labels, minlength=k)
            own_dist = d[np.arange(n), new_labels]
            own_dist = np.where(counts[new_labels] > 1, own_dist, -1.0)
            new_labels[int(np.argmax(own_dist))] = c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centers[c] = points[labels == c].mean(axis=0)
    return labels


def _sse(points: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for c in np.unique(labels):
        cluster = points[labels == c]
        total += float(np.sum((cluster - cluster.mean(axis=0)) ** 2))
    return total


def elbow_k(points: np.ndarray, k_max: int, seed: int = 0) -> int:
    """Discrete knee of the within-cluster SSE curve (max second difference)."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n < 2:
        raise TooFewPoints("elbow needs at least 2 points")
    k_cap = min(k_max, n)
    sse = {k: _sse(points, kmeans(points, k, seed)) for k in range(1, k_cap + 1)}
    if sse[1] < 1e-12:
        return 1
    if k_cap == 2:
        return 2 if sse[2] < sse[1] else 1
    sse[k_cap + 1] = sse[k_cap]  # pad so k_cap itself is a knee candidate
    best_k, best_d2 = 2, -float("inf")
    for k in range(2, k_cap + 1):
        d2 = sse[k - 1] - 2 * sse[k] + sse[k + 1]
        if d2 > best_d2 + 1e-12:
            best_k, best_d2 = k, d2
    return best_k


def sequential_order(members, similarity) -> list:
    """Greedy similarity chain: start at the lowest id, append the most
    similar remaining member to the last appended (ties to the lowest id)."""
    remaining = sorted(members)
    if not remaining:
        return []
    order = [remaining.pop(0)]
    while remaining:
        last = order[-1]
        best = max(remaining, key=lambda m: (similarity(last, m), _neg_key(m)))
        remaining.remove(best)
        order.append(best)
    return order


class _neg_key:
    """Inverts string ordering so max() breaks similarity ties toward lower ids."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value

    def __lt__(self, other):
        return self.value > other.value

    def __eq__(self, other):
        return self.value == other.value


def next_record_set(
    b_remain,
    config: SetConfig,
    similarity,
    embeddings: dict[str, np.ndarray],
    seed: int | None = None,
) -> list:
    """Select and order the members of the next record set from a block.

    Returns an ordered id list of size min(|b_remain|, set_size); the caller
    removes them from the block. For oversized blocks, a cheap k-means
    pre-clustering drives diversity: floor(S_s/S_d) records per sufficiently
    large pre-cluster, then fillers chosen to least increase the coefficient
    of variation of the selected pre-cluster-size profile.
    """
    pool = sorted(b_remain)
    if not pool:
        raise EmptyInput("next_record_set on an empty block")
    if seed is None:
        seed = config.seed
    if len(pool) <= config.set_size:
        return sequential_order(pool, similarity)

    points = np.array([embeddings[rid] for rid in pool])
    k = elbow_k(points, k_max=config.set_diversity + 2, seed=seed)
    labels = kmeans(points, k, seed)
    by_cluster: dict[int, list[str]] = {}
    for rid, label in zip(pool, labels):
        by_cluster.setdefault(int(label), []).append(rid)

    target_size = config.set_size // config.set_diversity
    selected: list[str] = []
    cluster_of = {rid: int(label) for rid, label in zip(pool, labels)}
    for c in sorted(by_cluster):
        members = by_cluster[c]
        room = config.set_size - len(selected)
        if room <= 0 or len(members) < target_size:
            continue
        centroid = points[[pool.index(m) for m in members]].mean(axis=0)
        # seed on the centroid-nearest record, then grow by nearest neighbour
        # within the pre-cluster: a coherent draw keeps likely duplicates in
        # the same record set, where a spread of centroid-nearest records
        # from a mixed pre-cluster would rarely contain any duplicate pair
        seed_rid = min(
            members,
            key=lambda m: (float(np.linalg.norm(embeddings[m] - centroid)), m),
        )
        take = [seed_rid]
        candidates = [m for m in members if m != seed_rid]
        while len(take) < min(target_size, room) and candidates:
            nxt = max(
                candidates,
                key=lambda m: (max(similarity(m, t) for t in take), _neg_key(m)),
            )
            candidates.remove(nxt)
            take.append(nxt)
        selected.extend(take)
        for m in take:
            members.remove(m)

    remaining = [rid for rid in pool if rid not in set(selected)]
    while len(selected) < config.set_size and remaining:
        profile_base: dict[int, int] = {}
        for rid in selected:
            profile_base[cluster_of[rid]] = profile_base.get(cluster_of[rid], 0) + 1

        def filler_cost(rid: str) -> float:
            profile = dict(profile_base)
            profile[cluster_of[rid]] = profile.get(cluster_of[rid], 0) + 1
            return variation(profile.values())

        best = min(remaining, key=lambda rid: (filler_cost(rid), rid))
        remaining.remove(best)
        selected.append(best)

    return sequential_order(selected, similarity)
