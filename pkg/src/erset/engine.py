"""Resolution engine: misclustering guardrail, set regeneration, hierarchical
cluster merging, exit condition and the end-to-end driver."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .blocking import Block
from .gateway import LlmGateway
from .model import (
    ClusterNode,
    ConstraintStore,
    CostLedger,
    Partition,
    Record,
    RecordSet,
    SetClustering,
    SetConfig,
)
from .setbuilder import next_record_set
from .similarity import SimilarityConfig, SimilarityIndex, cosine


@dataclass
class GuardrailStats:
    checks_failed: int = 0
    regenerations: int = 0
    exhausted: int = 0
    conflict_warnings: int = 0

    def add(self, other: "GuardrailStats") -> None:
        self.checks_failed += other.checks_failed
        self.regenerations += other.regenerations
        self.exhausted += other.exhausted
        self.conflict_warnings += other.conflict_warnings


@dataclass
class LevelState:
    """Active cluster nodes of one hierarchy level, sharing the global
    constraint store; node member sets are pairwise disjoint."""

    level: int
    nodes: list[ClusterNode]
    store: ConstraintStore


def _intra_inter(clustering: SetClustering, record_set: RecordSet, pair_sim):
    """Per position: (min within-group sim or 1.0, max cross-group sim or 0.0)."""
    members = record_set.members
    out: dict[int, tuple[float, float]] = {}
    for gi, group in enumerate(clustering.groups):
        for pos in group:
            mates = [q for q in group if q != pos]
            intra = min((pair_sim(members[pos], members[q]) for q in mates), default=1.0)
            others = [
                q
                for gj, other in enumerate(clustering.groups)
                if gj != gi
                for q in other
            ]
            inter = max((pair_sim(members[pos], members[q]) for q in others), default=0.0)
            out[pos] = (intra, inter)
    return out


def mdg_check(clustering: SetClustering, record_set: RecordSet, pair_sim) -> bool:
    """Misclustering detection guardrail: passes unless some record's minimum
    within-group similarity is below its maximum cross-group similarity."""
    scores = _intra_inter(clustering, record_set, pair_sim)
    return all(intra >= inter for intra, inter in scores.values())


def _misclustered(clustering: SetClustering, record_set: RecordSet, pair_sim):
    scores = _intra_inter(clustering, record_set, pair_sim)
    return sorted(pos for pos, (intra, inter) in scores.items() if intra < inter)


def regenerate_set(
    record_set: RecordSet, clustering: SetClustering, pair_sim
) -> RecordSet:
    """Reorder a rejected set: each misclustered record (original order) is
    moved to sit immediately after the last member of the group it is most
    similar to. The member multiset is unchanged."""
    members = record_set.members
    group_of = {pos: gi for gi, g in enumerate(clustering.groups) for pos in g}
    order = list(range(len(members)))
    for pos in _misclustered(clustering, record_set, pair_sim):
        best_group, best_sim = None, -math.inf
        for gi, group in enumerate(clustering.groups):
            if gi == group_of[pos]:
                continue
            sim = max(pair_sim(members[pos], members[q]) for q in group)
            if sim > best_sim:
                best_group, best_sim = gi, sim
        if best_group is None:
            continue
        order.remove(pos)
        anchor = max(
            order.index(q) for q in clustering.groups[best_group] if q != pos
        )
        order.insert(anchor + 1, pos)
    return RecordSet(
        set_id=record_set.set_id,
        members=tuple(members[i] for i in order),
        level=record_set.level,
    )


def guarded_cluster(
    record_set: RecordSet,
    gateway: LlmGateway,
    pair_sim,
    max_regen: int,
) -> tuple[RecordSet, SetClustering, GuardrailStats]:
    """Cluster with the guardrail: on MDG failure, regenerate the set and
    re-cluster, up to max_regen times; the last clustering is returned either
    way (flagged "guardrail-exhausted" if still failing)."""
    stats = GuardrailStats()
    clustering = gateway.cluster_records(record_set)
    attempts = 0
    while not mdg_check(clustering, record_set, pair_sim):
        stats.checks_failed += 1
        if attempts >= max_regen:
            stats.exhausted += 1
            clustering = clustering.with_flag("guardrail-exhausted")
            break
        record_set = regenerate_set(record_set, clustering, pair_sim)
        clustering = gateway.cluster_records(record_set)
        stats.regenerations += 1
        attempts += 1
    return record_set, clustering, stats


def _representative(members: frozenset[str], index: SimilarityIndex) -> str:
    ids = sorted(members)
    if len(ids) == 1:
        return ids[0]
    mean = index.mean_embedding(ids)
    if float(np.linalg.norm(mean)) == 0.0:
        return ids[0]
    return min(ids, key=lambda rid: (1.0 - cosine(index.embeddings[rid], mean), rid))


def apply_clustering(
    state: LevelState,
    record_set: RecordSet,
    clustering: SetClustering,
    index: SimilarityIndex,
) -> tuple[list[ClusterNode], int]:
    """Fold one set clustering into the constraint store.

    Group mates are must-linked; distinct groups are pairwise cannot-linked.
    When a group contradicts existing cannot-links it is split along them
    (earlier evidence wins) and a conflict warning is counted; a cannot-link
    between groups that already share a root is skipped with a warning.
    Returns the new cluster nodes and the warning count.
    """
    clustering.validate(record_set)
    store = state.store
    warnings = 0
    merged: list[list[ClusterNode]] = []
    for group in clustering.groups:
        nodes = [record_set.members[pos] for pos in group]
        subgroups: list[list[ClusterNode]] = []
        for node in nodes:
            placed = False
            for sub in subgroups:
                if all(
                    not store.cannot_link(node.representative, other.representative)
                    for other in sub
                ):
                    sub.append(node)
                    placed = True
                    break
            if not placed:
                subgroups.append([node])
        if len(subgroups) > 1:
            warnings += 1
        for sub in subgroups:
            for a, b in zip(sub, sub[1:]):
                store.merge(a.representative, b.representative)
        merged.extend(subgroups)

    for i in range(len(merged)):
        for j in range(i + 1, len(merged)):
            a = merged[i][0].representative
            b = merged[j][0].representative
            if store.same_entity(a, b):
                warnings += 1
                continue
            if not store.cannot_link(a, b):
                store.add_cannot_link(a, b)

    new_nodes = []
    for sub in merged:
        members = frozenset().union(*(n.members for n in sub))
        new_nodes.append(
            ClusterNode(members, _representative(members, index), record_set.set_id)
        )
    return new_nodes, warnings


def merge_round(
    state: LevelState,
    config: SetConfig,
    node_sim,
    set_id_prefix: str,
) -> list[RecordSet]:
    """One CMR round: pack the level's clusters into next-level record sets.

    Waves of greedy packing over the whole level: each wave seeds a new
    record set with the cluster holding the strongest cross-origin match
    still available, then repeatedly appends the unselected cluster most
    similar to the growing set, up to S_s members. Every cluster is selected
    exactly once per round and two clusters from the same origin set are
    never co-packed (their separation is already known), so a wave takes at
    most one cluster per origin set. The emitted set keeps similar clusters
    adjacent (greedy sequential order).
    """
    by_origin: dict[str, list[ClusterNode]] = {}
    for node in state.nodes:
        by_origin.setdefault(node.origin_set or "", []).append(node)
    for members in by_origin.values():
        members.sort(key=lambda n: n.representative)
    if len(by_origin) < 2:
        return []

    memo: dict[tuple[str, str], float] = {}

    def sim(a: ClusterNode, b: ClusterNode) -> float:
        key = (a.representative, b.representative)
        if key[0] > key[1]:
            key = (key[1], key[0])
        value = memo.get(key)
        if value is None:
            value = node_sim(a, b)
            memo[key] = value
        return value

    unselected: dict[str, list[ClusterNode]] = {
        origin: list(by_origin[origin]) for origin in sorted(by_origin)
    }

    # Stage the descent of the hierarchy. Packing every wave to S_s members
    # narrows the level width so fast that a later round cannot fit the
    # surviving clusters into fewer sets than its predecessor (a set holds at
    # most one cluster per origin set, so width bounces back up once the
    # count drops near the square root of the survivor count). Cap the wave
    # size so the width shrinks but stays above that bound. The cap only
    # matters once cannot-links exist: without them everything may still
    # collapse into one cluster and maximal packing is optimal.
    n_total = len(state.nodes)
    origins = len(by_origin)
    max_size = min(config.set_size, origins)
    target_sets = math.ceil(n_total / max_size)
    if state.store.has_cannot_links(n.representative for n in state.nodes):
        plateau = math.ceil((1.0 + math.sqrt(1.0 + 4.0 * n_total)) / 2.0)
        target_sets = max(target_sets, min(origins - 1, plateau))
    size_cap = min(max_size, math.ceil(n_total / target_sets))

    groups: list[list[ClusterNode]] = []
    while any(unselected.values()):
        # Build one output set. Each step adds either the best remaining
        # cross-origin pair (two clusters from two unused origin sets) or
        # the single cluster best matching the picks so far, whichever has
        # the higher similarity — joins win ties so entities complete. This
        # packs several likely-duplicate pairs into one set instead of
        # burning origin-set capacity on arbitrary fillers that would block
        # a twin from entering the wave.
        picks: list[ClusterNode] = []
        used_origins: set[str | None] = set()

        def take(node: ClusterNode) -> None:
            unselected[node.origin_set or ""].remove(node)
            used_origins.add(node.origin_set)
            picks.append(node)

        while len(picks) < size_cap:
            candidates = [
                n
                for origin, nodes in unselected.items()
                if origin not in used_origins
                for n in nodes
            ]
            if not candidates:
                break
            best_join: tuple | None = None
            if picks:
                best_join = max(
                    (
                        (max(sim(n, p) for p in picks), _NegStr(n.representative), n)
                        for n in candidates
                    ),
                    key=lambda t: t[:2],
                )
            best_pair: tuple | None = None
            if len(picks) + 2 <= size_cap:
                for i, p in enumerate(candidates):
                    for q in candidates[i + 1 :]:
                        if p.origin_set == q.origin_set:
                            continue
                        key = (
                            sim(p, q),
                            _NegStr(min(p.representative, q.representative)),
                        )
                        if best_pair is None or key > best_pair[:2]:
                            a, b = sorted(
                                (p, q), key=lambda n: n.representative
                            )
                            best_pair = (*key, a, b)
            if best_pair is not None and (
                best_join is None or best_pair[0] > best_join[0]
            ):
                take(best_pair[2])
                take(best_pair[3])
            elif best_join is not None:
                take(best_join[2])
            else:
                take(min(candidates, key=lambda n: n.representative))

        if not picks:
            break
        groups.append(picks)

    # Leftover waves fragment when the remaining clusters concentrate in few
    # origin sets; fold the smallest tails together (same-origin co-packing
    # is harmless, it just spends a slot on a known relation) until the round
    # meets its target width or nothing small enough remains.
    groups.sort(key=len, reverse=True)
    while len(groups) > target_sets and len(groups) >= 2:
        if len(groups[-1]) + len(groups[-2]) > config.set_size:
            break
        tail = groups.pop()
        groups[-1].extend(tail)
        groups.sort(key=len, reverse=True)

    out: list[RecordSet] = []
    for counter, picks in enumerate(groups):
        # keep similar clusters adjacent in the emitted set
        ordered_picks = [picks.pop(0)]
        while picks:
            last = ordered_picks[-1]
            nxt = max(
                picks,
                key=lambda n: (sim(last, n), _NegStr(n.representative)),
            )
            picks.remove(nxt)
            ordered_picks.append(nxt)
        out.append(
            RecordSet(
                set_id=f"{set_id_prefix}.{counter:04d}",
                members=tuple(ordered_picks),
                level=state.level + 1,
            )
        )
    return out


class _NegStr:
    """Inverts string ordering so max() breaks ties toward the lower id."""

    __slots__ = ("value",)

    def __init__(self, value: str):
        self.value = value

    def __lt__(self, other):
        return self.value > other.value

    def __eq__(self, other):
        return self.value == other.value


def final_check(
    state: LevelState,
    config: SetConfig,
    set_id_prefix: str,
    start: int = 0,
) -> list[RecordSet]:
    """One wave of exit-condition sets: greedily pack record sets of at most
    S_s nodes maximizing newly covered unresolved pairs (distinct roots, no
    cannot-link). Known-distinct nodes may share a set — their pair adds no
    information, but mixing sides is what lets one call cover up to
    floor(S_s/2) * ceil(S_s/2) unresolved pairs."""
    store = state.store
    nodes = sorted(state.nodes, key=lambda n: n.representative)
    uncovered: set[frozenset[int]] = set()
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            a, b = nodes[i].representative, nodes[j].representative
            if not store.same_entity(a, b) and not store.cannot_link(a, b):
                uncovered.add(frozenset((i, j)))

    out: list[RecordSet] = []
    counter = start
    while uncovered:
        degree = {
            i: sum(1 for pair in uncovered if i in pair) for i in range(len(nodes))
        }
        seed = max(
            range(len(nodes)),
            key=lambda i: (degree[i], _NegStr(nodes[i].representative)),
        )
        if degree[seed] == 0:
            break
        chosen = [seed]
        while len(chosen) < config.set_size:
            best, best_gain = None, 0
            # nodes are in representative order, so ties go to the lowest id
            for i in range(len(nodes)):
                if i in chosen:
                    continue
                gain = sum(1 for c in chosen if frozenset((i, c)) in uncovered)
                if gain > best_gain:
                    best, best_gain = i, gain
            if best is None or best_gain == 0:
                break
            chosen.append(best)
        if len(chosen) < 2:
            break
        for x in range(len(chosen)):
            for y in range(x + 1, len(chosen)):
                uncovered.discard(frozenset((chosen[x], chosen[y])))
        out.append(
            RecordSet(
                set_id=f"{set_id_prefix}.{counter:04d}",
                members=tuple(nodes[i] for i in chosen),
                level=state.level + 1,
            )
        )
        counter += 1
    return out


@dataclass
class ResolveReport:
    blocks: int = 0
    level_set_counts: list[int] = field(default_factory=list)
    final_check_sets: int = 0
    final_check_rounds: int = 0
    guardrail: GuardrailStats = field(default_factory=GuardrailStats)
    ledger: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "blocks": self.blocks,
            "level_set_counts": list(self.level_set_counts),
            "final_check_sets": self.final_check_sets,
            "final_check_rounds": self.final_check_rounds,
            "checks_failed": self.guardrail.checks_failed,
            "regenerations": self.guardrail.regenerations,
            "exhausted": self.guardrail.exhausted,
            "conflict_warnings": self.guardrail.conflict_warnings,
            "ledger": dict(self.ledger),
        }


class Resolver:
    """End-to-end driver: per-block record-set hierarchies over a shared
    constraint store, with concurrent guarded clustering within each round."""

    def __init__(
        self,
        records: dict[str, Record],
        backend,
        config: SetConfig | None = None,
        sim_config: SimilarityConfig | None = None,
        embeddings: dict[str, np.ndarray] | None = None,
        parallelism: int = 1,
        ledger: CostLedger | None = None,
        max_levels: int = 50,
    ):
        self.records = records
        self.config = config or SetConfig()
        self.index = SimilarityIndex(records, sim_config, embeddings)
        self.ledger = ledger if ledger is not None else CostLedger()
        self.gateway = LlmGateway(
            backend, records, config=self.config, ledger=self.ledger
        )
        self.parallelism = max(1, parallelism)
        self.max_levels = max_levels
        self.store = ConstraintStore(sorted(records))
        self.report = ResolveReport()

    def _pair_sim(self, a: ClusterNode, b: ClusterNode) -> float:
        return self.index.sim(a.representative, b.representative)

    def _cluster_all(self, record_sets: list[RecordSet]):
        """Guarded-cluster each set (concurrently) and return results sorted
        by set_id so application order is deterministic."""

        def work(rs: RecordSet):
            return guarded_cluster(
                rs, self.gateway, self._pair_sim, self.config.max_regen
            )

        if self.parallelism == 1 or len(record_sets) <= 1:
            results = [work(rs) for rs in record_sets]
        else:
            with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                results = list(pool.map(work, record_sets))
        return sorted(results, key=lambda r: r[0].set_id)

    def _apply_all(self, state: LevelState, results) -> list[ClusterNode]:
        new_nodes: list[ClusterNode] = []
        for record_set, clustering, stats in results:
            self.report.guardrail.add(stats)
            nodes, warnings = apply_clustering(state, record_set, clustering, self.index)
            self.report.guardrail.conflict_warnings += warnings
            new_nodes.extend(nodes)
        return new_nodes

    def _count_level(self, level: int, n_sets: int) -> None:
        counts = self.report.level_set_counts
        while len(counts) <= level:
            counts.append(0)
        counts[level] += n_sets

    def _level0_sets(self, block: Block) -> list[RecordSet]:
        remaining = set(block.members)
        sets: list[RecordSet] = []
        i = 0
        while remaining:
            ids = next_record_set(
                remaining,
                self.config,
                self.index.sim,
                self.index.embeddings,
                seed=self.config.seed,
            )
            remaining.difference_update(ids)
            sets.append(
                RecordSet(
                    set_id=f"{block.block_id}.L0.{i:04d}",
                    members=tuple(ClusterNode.singleton(rid) for rid in ids),
                    level=0,
                )
            )
            i += 1
        return sets

    def _resolve_block(self, block: Block) -> None:
        state = LevelState(level=0, nodes=[], store=self.store)
        sets = self._level0_sets(block)
        self._count_level(0, len(sets))
        results = self._cluster_all(sets)
        state.nodes = self._apply_all(state, results)
        all_singletons = all(c.is_all_singletons() for _, c, _ in results)

        while not all_singletons and state.level < self.max_levels:
            next_level = state.level + 1
            prefix = f"{block.block_id}.L{next_level}"
            candidate_sets = merge_round(state, self.config, self._pair_sim, prefix)
            callable_sets = [rs for rs in candidate_sets if len(rs) >= 2]
            if not callable_sets:
                break
            self._count_level(next_level, len(callable_sets))
            carried = [
                node
                for rs in candidate_sets
                if len(rs) == 1
                for node in rs.members
            ]
            results = self._cluster_all(callable_sets)
            state.level = next_level
            state.nodes = self._apply_all(state, results) + carried
            all_singletons = all(c.is_all_singletons() for _, c, _ in results)

        # Exit condition: sweep remaining unresolved pairs until none are left.
        wave = 0
        counter = 0
        while True:
            sets = final_check(
                state, self.config, f"{block.block_id}.F", start=counter
            )
            if not sets:
                break
            wave += 1
            counter += len(sets)
            self.report.final_check_sets += len(sets)
            self.report.final_check_rounds = max(self.report.final_check_rounds, wave)
            results = self._cluster_all(sets)
            state.level += 1
            carried_ids = {
                node.representative for rs in sets for node in rs.members
            }
            untouched = [
                n for n in state.nodes if n.representative not in carried_ids
            ]
            state.nodes = self._apply_all(state, results) + untouched
            if wave >= self.max_levels:
                break

    def resolve(self, blocks: list[Block]) -> tuple[Partition, CostLedger, ResolveReport]:
        self.report.blocks = len(blocks)
        for block in sorted(blocks, key=lambda b: b.block_id):
            self._resolve_block(block)
        clusters = []
        for _, members in sorted(self.store.components().items()):
            member_set = frozenset(members)
            clusters.append(
                ClusterNode(member_set, _representative(member_set, self.index))
            )
        partition = Partition(clusters)
        partition.validate(self.records)
        self.report.ledger = self.ledger.snapshot()
        return partition, self.ledger, self.report


def resolve(
    records: dict[str, Record],
    blocks: list[Block],
    backend,
    config: SetConfig | None = None,
    sim_config: SimilarityConfig | None = None,
    embeddings: dict[str, np.ndarray] | None = None,
    parallelism: int = 1,
) -> tuple[Partition, CostLedger, ResolveReport]:
    """Run the full pipeline over pre-computed blocks with the given backend."""
    resolver = Resolver(
        records,
        backend,
        config=config,
        sim_config=sim_config,
        embeddings=embeddings,
        parallelism=parallelism,
    )
    return resolver.resolve(blocks)
