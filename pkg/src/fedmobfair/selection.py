"""Participant selection: the pre-processing fairness lever.

All strategies return a sorted list of user ids. Stratified strategies split
``m`` into equal per-stratum quotas; remainders go to strata in ascending
order, and strata short of eligible members hand their deficit on by the same
rule.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping

import numpy as np

UNIFORM = "uniform"
GROUP = "group_stratified"
CLUSTER = "cluster_stratified"
STRATEGIES = (UNIFORM, GROUP, CLUSTER)

REGISTRY_HEADER = ["user_id", "group", "cluster", "pi_max", "record_count", "eligible"]


class SelectionError(ValueError):
    pass


@dataclass
class ClientRecord:
    user_id: str
    group: str
    cluster: int | None = None
    pi_max: float = math.nan
    record_count: int = 0
    eligible: bool = True


class ClientRegistry:
    def __init__(self, records: Iterable[ClientRecord], groups: Iterable[str] | None = None):
        self.records = {r.user_id: r for r in records}
        declared = set(groups) if groups is not None else None
        if declared is not None:
            unknown = {r.group for r in self.records.values()} - declared
            if unknown:
                raise SelectionError(f"group labels not declared: {sorted(unknown)}")
        self.groups = sorted(declared if declared is not None else {r.group for r in self.records.values()})

    def __len__(self):
        return len(self.records)

    def __getitem__(self, user_id: str) -> ClientRecord:
        return self.records[user_id]

    def __iter__(self):
        return iter(self.records[u] for u in sorted(self.records))

    def eligible(self) -> list[str]:
        return sorted(u for u, r in self.records.items() if r.eligible)

    def group_of(self) -> dict[str, str]:
        return {u: r.group for u, r in self.records.items()}

    def pi_of(self) -> dict[str, float]:
        return {u: r.pi_max for u, r in self.records.items()}

    def set_clusters(self, clusters: Mapping[str, int]) -> None:
        for u, c in clusters.items():
            if u in self.records:
                self.records[u].cluster = int(c)

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REGISTRY_HEADER)
        for r in self:
            w.writerow([
                r.user_id, r.group, "" if r.cluster is None else r.cluster,
                repr(float(r.pi_max)), r.record_count, int(r.eligible),
            ])
        return buf.getvalue().encode("utf-8")

    @classmethod
    def from_csv(cls, data: bytes | str, groups: Iterable[str] | None = None) -> "ClientRegistry":
        text = data.decode("utf-8") if isinstance(data, bytes) else data
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != REGISTRY_HEADER:
            raise SelectionError(f"registry header must be {','.join(REGISTRY_HEADER)}")
        recs = []
        for row in reader:
            recs.append(ClientRecord(
                user_id=row["user_id"],
                group=row["group"],
                cluster=int(row["cluster"]) if row["cluster"].strip() else None,
                pi_max=float(row["pi_max"]) if row["pi_max"].strip() else math.nan,
                record_count=int(row["record_count"] or 0),
                eligible=row["eligible"].strip().lower() in ("1", "true", "yes"),
            ))
        return cls(recs, groups)


def _draw(rng: np.random.Generator, pool: list[str], m: int) -> list[str]:
    if m == 0:
        return []
    idx = rng.choice(len(pool), size=m, replace=False)
    return [pool[i] for i in idx]


def select_uniform(reg: ClientRegistry, m: int, seed: int) -> list[str]:
    pool = reg.eligible()
    if not 0 <= m <= len(pool):
        raise SelectionError(f"cannot select {m} of {len(pool)} eligible clients")
    return sorted(_draw(np.random.default_rng(seed), pool, m))


def stratum_quotas(capacity: Mapping[Hashable, int], m: int) -> dict[Hashable, int]:
    """Equal split of ``m`` over strata, respecting each stratum's capacity."""
    if m > sum(capacity.values()):
        raise SelectionError(f"cannot select {m} of {sum(capacity.values())} eligible clients")
    quota = {s: 0 for s in capacity}
    remaining = m
    while remaining > 0:
        open_strata = sorted(s for s in capacity if quota[s] < capacity[s])
        base, extra = divmod(remaining, len(open_strata))
        remaining = 0
        for i, s in enumerate(open_strata):
            want = base + (1 if i < extra else 0)
            take = min(want, capacity[s] - quota[s])
            quota[s] += take
            remaining += want - take
    return quota


def _select_stratified(strata: Mapping[Hashable, list[str]], m: int, seed: int) -> list[str]:
    quotas = stratum_quotas({s: len(p) for s, p in strata.items()}, m)
    rng = np.random.default_rng(seed)
    chosen: list[str] = []
    for s in sorted(strata):
        chosen += _draw(rng, strata[s], quotas[s])
    return sorted(chosen)


def select_group_stratified(reg: ClientRegistry, m: int, seed: int) -> list[str]:
    strata: dict[str, list[str]] = {}
    for u in reg.eligible():
        strata.setdefault(reg[u].group, []).append(u)
    return _select_stratified(strata, m, seed)


def select_cluster_stratified(reg: ClientRegistry, m: int, seed: int) -> list[str]:
    strata: dict[int, list[str]] = {}
    for u in reg.eligible():
        c = reg[u].cluster
        if c is None:
            raise SelectionError(f"client {u!r} has no cluster assignment")
        strata.setdefault(c, []).append(u)
    return _select_stratified(strata, m, seed)


def select(strategy: str, reg: ClientRegistry, m: int, seed: int) -> list[str]:
    if strategy == UNIFORM:
        return select_uniform(reg, m, seed)
    if strategy == GROUP:
        return select_group_stratified(reg, m, seed)
    if strategy == CLUSTER:
        return select_cluster_stratified(reg, m, seed)
    raise SelectionError(f"unknown selection strategy {strategy!r}; expected one of {STRATEGIES}")
