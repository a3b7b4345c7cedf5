"""Seeded synthetic mobility populations with planted group structure.

Each user walks a first-order Markov chain over ``a`` active cells drawn from
their group's region: stay with probability ``p``, otherwise jump uniformly to
one of the other active cells. ``p = 1/a`` gives an i.i.d. uniform walk with
entropy rate ``log2 a``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fedmobfair.config import ConfigError, KeyValues, grid_from, load_kv, parse_kv
from fedmobfair.mobility import ProfileError, build_profile
from fedmobfair.seeding import derive_rng
from fedmobfair.selection import ClientRecord, ClientRegistry
from fedmobfair.trajectory import Cell, DailyLocationSequence, Grid, Trajectory, daily_to_trajectory


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    label: str
    count: int
    region: tuple[int, int, int, int]  # row0, col0, row1, col1 (half-open), in grid cells
    p: float
    a: int

    def cells(self) -> list[Cell]:
        r0, c0, r1, c1 = self.region
        return [(r, c) for r in range(r0, r1) for c in range(c0, c1)]


@dataclass(frozen=True)
class PopulationSpec:
    groups: tuple[GroupSpec, ...]
    days: int
    grid: Grid
    seed: int = 0

    def __post_init__(self):
        if self.days < 1:
            raise SynthError(f"days must be >= 1, got {self.days}")
        labels = [g.label for g in self.groups]
        if not labels or len(set(labels)) != len(labels):
            raise SynthError("group labels must be non-empty and unique")
        for g in self.groups:
            if g.count < 1:
                raise SynthError(f"group {g.label!r}: count must be >= 1")
            if not 0.0 <= g.p <= 1.0:
                raise SynthError(f"group {g.label!r}: p must lie in [0, 1]")
            if g.a < 1 or g.a > self.grid.num_cells:
                raise SynthError(f"group {g.label!r}: a must lie in [1, {self.grid.num_cells}]")
            r0, c0, r1, c1 = g.region
            if not (0 <= r0 < r1 <= self.grid.rows and 0 <= c0 < c1 <= self.grid.cols):
                raise SynthError(f"group {g.label!r}: region {g.region} outside {self.grid.shape} grid")

    def with_seed(self, seed: int) -> "PopulationSpec":
        return replace(self, seed=seed)

    @property
    def labels(self) -> list[str]:
        return [g.label for g in self.groups]


@dataclass
class Population:
    spec: PopulationSpec
    daily: dict[str, DailyLocationSequence]
    registry: ClientRegistry
    group_of: dict[str, str] = field(default_factory=dict)

    def trajectories(self, start_ts: int = 0) -> dict[str, Trajectory]:
        return {u: daily_to_trajectory(d, self.spec.grid, start_ts) for u, d in self.daily.items()}


def user_id(label: str, index: int) -> str:
    return f"{label}-{index:04d}"


def markov_walk(rng: np.random.Generator, n_active: int, p: float, days: int) -> np.ndarray:
    """Indices into the active-cell list, one per day."""
    out = np.empty(days, dtype=np.int64)
    cur = int(rng.integers(n_active))
    stay = rng.random(days)
    jumps = rng.integers(max(n_active - 1, 1), size=days)
    for t in range(days):
        out[t] = cur
        if n_active > 1 and stay[t] >= p:
            j = int(jumps[t])
            cur = j if j < cur else j + 1
    return out


def generate_population(spec: PopulationSpec, profile: bool = True) -> Population:
    daily: dict[str, DailyLocationSequence] = {}
    records: list[ClientRecord] = []
    for g in spec.groups:
        region = g.cells()
        if g.a > len(region):
            raise SynthError(f"group {g.label!r}: a={g.a} exceeds the {len(region)} cells of its region")
        for i in range(g.count):
            uid = user_id(g.label, i)
            rng = derive_rng(spec.seed, "synthgen", g.label, i)
            active = [region[k] for k in rng.choice(len(region), size=g.a, replace=False)]
            walk = markov_walk(rng, g.a, g.p, spec.days)
            seq = DailyLocationSequence(uid, [(d, active[k]) for d, k in enumerate(walk)])
            daily[uid] = seq
            pi = float("nan")
            if profile and len(seq) >= 2:
                try:
                    pi = build_profile(seq).pi_max
                except ProfileError:
                    pass
            records.append(ClientRecord(uid, g.label, None, pi, len(seq), True))
    registry = ClientRegistry(records, spec.labels)
    return Population(spec, daily, registry, {r.user_id: r.group for r in records})


def spec_from_kv(kv: KeyValues) -> PopulationSpec:
    groups = []
    for name, block in kv.blocks:
        if name != "group":
            raise ConfigError(f"unknown block [{name}] in population spec")
        region = block.get_ints("region")
        if len(region) != 4:
            raise ConfigError(f"{block.prefix}region: expected row0,col0,row1,col1")
        groups.append(GroupSpec(
            label=block.get_str("label"),
            count=block.get_int("count"),
            region=tuple(region),
            p=block.get_float("p"),
            a=block.get_int("a"),
        ))
    try:
        return PopulationSpec(
            groups=tuple(groups),
            days=kv.get_int("days"),
            grid=grid_from(kv),
            seed=kv.get_int("seed", 0),
        )
    except SynthError as exc:
        raise ConfigError(f"population spec: {exc}") from None


def load_spec(path: str | Path) -> PopulationSpec:
    return spec_from_kv(load_kv(path))


def parse_spec(text: str) -> PopulationSpec:
    return spec_from_kv(parse_kv(text, "<spec>"))


def spec_to_text(spec: PopulationSpec) -> str:
    g = spec.grid
    lines = [
        f"days = {spec.days}",
        f"seed = {spec.seed}",
        f"grid.origin_lat = {g.origin_lat!r}",
        f"grid.origin_lon = {g.origin_lon!r}",
        f"grid.w = {g.width!r}",
        f"grid.l = {g.length!r}",
        f"grid.cell_size = {g.cell_size!r}",
    ]
    for grp in spec.groups:
        lines += [
            "",
            "[group]",
            f"label = {grp.label}",
            f"count = {grp.count}",
            "region = " + ",".join(str(v) for v in grp.region),
            f"p = {grp.p!r}",
            f"a = {grp.a}",
        ]
    return "\n".join(lines) + "\n"
