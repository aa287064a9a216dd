"""Clustering backends: prompt construction, response parsing, the live HTTP
provider and the simulated oracle, with per-attempt cost accounting."""

from __future__ import annotations

import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field

import requests

from .model import (
    CostLedger,
    ERError,
    Record,
    RecordSet,
    SetClustering,
    SetConfig,
    estimate_tokens,
)

RETRY_REMINDER = "Answer ONLY with one line per cluster, comma-separated labels."

_SYSTEM_TEXT = (
    "You are an expert at entity resolution. You group data records that "
    "refer to the same real-world entity."
)

_INSTRUCTION = (
    "Group the following records by the real-world entity they refer to. "
    "Records of the same entity may differ in spelling, formatting or "
    "missing values. Answer with one line per cluster, listing the labels "
    "of the records in that cluster separated by commas. Every label must "
    "appear in exactly one line."
)

_LABEL_RE = re.compile(r"^R(\d+)$", re.IGNORECASE)
_SET_HEADER_RE = re.compile(r"^SET\s+(\d+)\s*:?\s*$", re.IGNORECASE)


class MalformedResponse(ERError):
    pass


class MissingMember(ERError):
    pass


class DuplicateMember(ERError):
    pass


class UnknownLabel(ERError):
    pass


class ProviderUnavailable(ERError):
    pass


class UncoveredRecord(ERError):
    pass


@dataclass(frozen=True)
class Prompt:
    system_text: str
    user_text: str
    # per set: tuple mapping position -> record id (the node representative)
    orders: tuple[tuple[str, ...], ...]


@dataclass
class ProviderConfig:
    endpoint: str
    model: str
    temperature: float = 0.0
    api_key_env: str = "ER_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    requests_per_minute: int = 60
    transcript_path: str | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class OracleConfig:
    truth: dict[str, str]
    error_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.error_rate <= 1.0:
            raise ValueError("error_rate must be in [0, 1]")


def _member_line(label: str, record: Record) -> str:
    parts = [label]
    parts.extend(f"{a.name}: {a.value}" for a in record.attributes if a.value)
    return " | ".join(parts)


def build_prompt(
    record_sets: list[RecordSet], records: dict[str, Record]
) -> Prompt:
    """Render one or more record sets as a zero-shot clustering prompt.

    Each member gets a positional label R1..Rn (restarting per set); batches
    of more than one set are delimited by "SET j" headers, a single set is
    rendered without a header.
    """
    if not record_sets:
        raise ValueError("build_prompt needs at least one record set")
    sections: list[str] = []
    orders: list[tuple[str, ...]] = []
    for j, record_set in enumerate(record_sets, 1):
        lines: list[str] = []
        if len(record_sets) > 1:
            lines.append(f"SET {j}")
        order: list[str] = []
        for pos, node in enumerate(record_set.members, 1):
            rid = node.representative
            order.append(rid)
            lines.append(_member_line(f"R{pos}", records[rid]))
        sections.append("\n".join(lines))
        orders.append(tuple(order))
    if len(record_sets) > 1:
        closing = (
            "Cluster each SET independently; repeat its header line before "
            "that set's answer lines."
        )
    else:
        closing = ""
    user_text = _INSTRUCTION + "\n\n" + "\n\n".join(sections)
    if closing:
        user_text += "\n\n" + closing
    return Prompt(_SYSTEM_TEXT, user_text, tuple(orders))


def _parse_section(lines: list[str], record_set: RecordSet) -> SetClustering:
    n = len(record_set)
    groups: list[tuple[int, ...]] = []
    seen: set[int] = set()
    for line in lines:
        tokens = [t.strip() for t in line.split(",")]
        positions: list[int] = []
        for token in tokens:
            m = _LABEL_RE.match(token)
            if m is None:
                raise MalformedResponse(f"unparseable line: {line!r}")
            pos = int(m.group(1))
            if not 1 <= pos <= n:
                raise UnknownLabel(f"R{pos}")
            if pos - 1 in seen:
                raise DuplicateMember(f"R{pos}")
            seen.add(pos - 1)
            positions.append(pos - 1)
        groups.append(tuple(positions))
    if len(seen) < n:
        missing = min(set(range(n)) - seen)
        raise MissingMember(f"R{missing + 1}")
    return SetClustering(source=record_set.set_id, groups=tuple(groups))


def parse_clustering(response_text: str, record_set: RecordSet) -> SetClustering:
    """Parse lines of comma-separated R-labels into an exact-cover clustering."""
    lines = [ln.strip() for ln in response_text.splitlines() if ln.strip()]
    if not lines:
        raise MalformedResponse("empty response")
    return _parse_section(lines, record_set)


def parse_batch(
    response_text: str, record_sets: list[RecordSet]
) -> list[SetClustering]:
    """Parse a batched response; sections are delimited by "SET j" headers."""
    if len(record_sets) == 1:
        return [parse_clustering(response_text, record_sets[0])]
    sections: dict[int, list[str]] = {}
    current: int | None = None
    for raw in response_text.splitlines():
        line = raw.strip()
        if not line:
            continue
        header = _SET_HEADER_RE.match(line)
        if header:
            current = int(header.group(1))
            sections.setdefault(current, [])
            continue
        if current is None:
            raise MalformedResponse(f"line before any SET header: {line!r}")
        sections[current].append(line)
    out: list[SetClustering] = []
    for j, record_set in enumerate(record_sets, 1):
        if j not in sections or not sections[j]:
            raise MalformedResponse(f"missing section for SET {j}")
        out.append(_parse_section(sections[j], record_set))
    return out


def _render_groups(groups) -> str:
    return "\n".join(
        ",".join(f"R{pos + 1}" for pos in group) for group in groups
    )


class SimulatedOracle:
    """Test backend: the ground-truth clustering of each set, perturbed by a
    seeded per-member displacement probability.

    Each record set gets its own random stream derived from (seed, set_id),
    consumed across repeated calls for the same set, so results do not depend
    on scheduling order across sets.
    """

    def __init__(self, config: OracleConfig):
        self.config = config
        self._streams: dict[str, random.Random] = {}
        self._lock = threading.Lock()

    def _stream(self, set_id: str) -> random.Random:
        with self._lock:
            if set_id not in self._streams:
                self._streams[set_id] = random.Random(
                    f"{self.config.seed}:{set_id}"
                )
            return self._streams[set_id]

    def _truth_groups(self, record_set: RecordSet) -> list[list[int]]:
        by_entity: dict[str, list[int]] = {}
        for pos, node in enumerate(record_set.members):
            for rid in node.members:
                if rid not in self.config.truth:
                    raise UncoveredRecord(f"no ground truth for record {rid!r}")
            entity = self.config.truth[node.representative]
            by_entity.setdefault(entity, []).append(pos)
        return [by_entity[e] for e in sorted(by_entity)]

    def _perturb(self, groups: list[list[int]], rng: random.Random) -> list:
        p = self.config.error_rate
        positions = sorted(pos for group in groups for pos in group)
        for pos in positions:
            if rng.random() >= p:
                continue
            home = next(g for g in groups if pos in g)
            others = [g for g in groups if g is not home]
            g = len(groups)
            if not others or rng.random() < 1.0 / (g + 1):
                home.remove(pos)
                groups.append([pos])
            else:
                home.remove(pos)
                others[rng.randrange(len(others))].append(pos)
            if not home:
                groups.remove(home)
        return [sorted(g) for g in groups]

    def clustering_for(self, record_set: RecordSet):
        groups = self._truth_groups(record_set)
        if self.config.error_rate > 0.0:
            groups = self._perturb(groups, self._stream(record_set.set_id))
        return groups

    def complete(self, prompt: Prompt, record_sets: list[RecordSet]):
        """Render the (possibly perturbed) truth as response text, so oracle
        output flows through the same parser as live-provider output."""
        sections: list[str] = []
        for j, record_set in enumerate(record_sets, 1):
            body = _render_groups(self.clustering_for(record_set))
            if len(record_sets) > 1:
                sections.append(f"SET {j}\n{body}")
            else:
                sections.append(body)
        return "\n".join(sections), None


class _TokenBucket:
    def __init__(self, per_minute: int):
        self.capacity = max(1, per_minute)
        self.tokens = float(self.capacity)
        self.updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(
                    self.capacity,
                    self.tokens + (now - self.updated) * self.capacity / 60.0,
                )
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) * 60.0 / self.capacity
            time.sleep(wait)


class HttpProvider:
    """Chat-completion HTTP backend with retries, backoff and rate limiting."""

    def __init__(self, config: ProviderConfig):
        self.config = config
        self._bucket = _TokenBucket(config.requests_per_minute)
        self._transcript_lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _log(self, payload: dict, response: dict) -> None:
        if not self.config.transcript_path:
            return
        line = json.dumps({"request": payload, "response": response})
        with self._transcript_lock:
            with open(self.config.transcript_path, "a") as fh:
                fh.write(line + "\n")

    def complete(self, prompt: Prompt, record_sets: list[RecordSet]):
        payload = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_text},
            ],
        }
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            self._bucket.acquire()
            try:
                resp = requests.post(
                    self.config.endpoint,
                    json=payload,
                    headers=self._headers(),
                    timeout=self.config.timeout,
                )
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise requests.HTTPError(
                        f"status {resp.status_code}", response=resp
                    )
                resp.raise_for_status()
                data = resp.json()
                self._log(payload, data)
                text = data["choices"][0]["message"]["content"]
                usage = data.get("usage")
                if usage:
                    return text, (
                        int(usage.get("prompt_tokens", 0)),
                        int(usage.get("completion_tokens", 0)),
                    )
                return text, None
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < self.config.max_retries:
                    time.sleep(min(2.0**attempt, 30.0))
        raise ProviderUnavailable(
            f"provider failed after {self.config.max_retries + 1} attempts: "
            f"{last_error}"
        )


@dataclass
class LlmGateway:
    """Builds prompts, calls a backend, parses and validates, accounts cost.

    Parse failures are retried (with a format reminder appended) up to
    max_retries; after exhaustion the clustering falls back to all singletons
    and is flagged "fallback-singletons". Every backend attempt is ledgered.
    """

    backend: object
    records: dict[str, Record]
    config: SetConfig = field(default_factory=SetConfig)
    ledger: CostLedger = field(default_factory=CostLedger)
    max_retries: int = 3

    def __post_init__(self):
        self._ledger_lock = threading.Lock()

    def _call(self, prompt: Prompt, record_sets: list[RecordSet]) -> str:
        start = time.monotonic()
        text, usage = self.backend.complete(prompt, record_sets)
        elapsed = time.monotonic() - start
        if usage is None:
            usage = (
                estimate_tokens(prompt.system_text + prompt.user_text),
                estimate_tokens(text),
            )
        with self._ledger_lock:
            self.ledger.record(*usage)
            self.ledger.add_wall_time(elapsed)
        return text

    def cluster_batch(
        self, record_sets: list[RecordSet]
    ) -> list[SetClustering]:
        if not 1 <= len(record_sets) <= self.config.batch_size:
            raise ValueError(
                f"batch of {len(record_sets)} exceeds batch_size "
                f"{self.config.batch_size}"
            )
        prompt = build_prompt(record_sets, self.records)
        for attempt in range(self.max_retries + 1):
            text = self._call(prompt, record_sets)
            try:
                clusterings = parse_batch(text, record_sets)
            except ERError:
                if attempt == 0:
                    prompt = Prompt(
                        prompt.system_text,
                        prompt.user_text + "\n\n" + RETRY_REMINDER,
                        prompt.orders,
                    )
                continue
            for clustering, record_set in zip(clusterings, record_sets):
                clustering.validate(record_set)
            return clusterings
        return [
            SetClustering(
                source=rs.set_id,
                groups=tuple((i,) for i in range(len(rs))),
                flags=("fallback-singletons",),
            )
            for rs in record_sets
        ]

    def cluster_records(self, record_set: RecordSet) -> SetClustering:
        return self.cluster_batch([record_set])[0]
