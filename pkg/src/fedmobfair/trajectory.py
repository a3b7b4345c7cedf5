"""GPS trajectory ingestion, grid discretization and daily reduction."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MILES_PER_DEG_LAT = 69.0
CSV_HEADER = ("user_id", "timestamp", "lat", "lon")
DAY_SECONDS = 86400

Cell = tuple[int, int]


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    timestamp: int
    lat: float
    lon: float

    def __post_init__(self):
        if self.timestamp < 0:
            raise TrajectoryError(f"negative timestamp {self.timestamp}")
        if not -90.0 <= self.lat <= 90.0:
            raise TrajectoryError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise TrajectoryError(f"longitude out of range: {self.lon}")


@dataclass
class Trajectory:
    user_id: str
    points: list[GeoPoint]


@dataclass(frozen=True)
class Grid:
    """Rectangle of ``width`` x ``length`` miles anchored at its south-west corner."""

    origin_lat: float
    origin_lon: float
    width: float
    length: float
    cell_size: float

    def __post_init__(self):
        if self.width <= 0 or self.length <= 0:
            raise TrajectoryError("grid width and length must be positive")
        if not 0 < self.cell_size <= min(self.width, self.length):
            raise TrajectoryError(
                f"cell_size must lie in (0, min(w, l)], got {self.cell_size}"
            )

    @property
    def cols(self) -> int:
        return math.ceil(self.width / self.cell_size - 1e-9)

    @property
    def rows(self) -> int:
        return math.ceil(self.length / self.cell_size - 1e-9)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def num_cells(self) -> int:
        return self.rows * self.cols

    @property
    def miles_per_deg_lon(self) -> float:
        return MILES_PER_DEG_LAT * math.cos(math.radians(self.origin_lat))

    def with_cell_size(self, cell_size: float) -> "Grid":
        return Grid(self.origin_lat, self.origin_lon, self.width, self.length, cell_size)

    def offset_miles(self, lat: float, lon: float) -> tuple[float, float]:
        """(north, east) offset of a coordinate from the origin, in miles."""
        north = (lat - self.origin_lat) * MILES_PER_DEG_LAT
        east = (lon - self.origin_lon) * self.miles_per_deg_lon
        return north, east

    def locate(self, lat: float, lon: float) -> Cell | None:
        north, east = self.offset_miles(lat, lon)
        # tolerate projection round-off right at the edges
        eps = 1e-9
        if north < -eps or east < -eps or north >= self.length - eps or east >= self.width - eps:
            return None
        row = min(max(int(math.floor(max(north, 0.0) / self.cell_size + 1e-9)), 0), self.rows - 1)
        col = min(max(int(math.floor(max(east, 0.0) / self.cell_size + 1e-9)), 0), self.cols - 1)
        return row, col

    def cell_center(self, cell: Cell) -> tuple[float, float]:
        row, col = cell
        north = (row + 0.5) * self.cell_size
        east = (col + 0.5) * self.cell_size
        return (
            self.origin_lat + north / MILES_PER_DEG_LAT,
            self.origin_lon + east / self.miles_per_deg_lon,
        )

    def cell_index(self, cell: Cell) -> int:
        return cell[0] * self.cols + cell[1]

    def index_cell(self, index: int) -> Cell:
        return divmod(int(index), self.cols)


@dataclass
class CellSequence:
    user_id: str
    cells: list[tuple[int, Cell]]
    dropped: int = 0

    def __len__(self):
        return len(self.cells)


@dataclass
class DailyLocationSequence:
    user_id: str
    days: list[tuple[int, Cell]] = field(default_factory=list)

    def __len__(self):
        return len(self.days)

    @property
    def cells(self) -> list[Cell]:
        return [c for _, c in self.days]


@dataclass
class ParseResult:
    trajectories: dict[str, Trajectory]
    bad_rows: list[tuple[int, str]]


def parse_trajectories(data: bytes | str) -> ParseResult:
    """Parse the ``user_id,timestamp,lat,lon`` CSV into per-user trajectories.

    Rows that fail to parse are collected in ``bad_rows`` as ``(line, reason)``.
    More than half of the rows failing is treated as a corrupt file.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise TrajectoryError("missing header; expected " + ",".join(CSV_HEADER)) from None
    if tuple(h.strip().lstrip("﻿") for h in header) != CSV_HEADER:
        raise TrajectoryError(
            f"malformed header {header!r}; expected {','.join(CSV_HEADER)}"
        )

    points: dict[str, list[GeoPoint]] = {}
    bad: list[tuple[int, str]] = []
    total = 0
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        total += 1
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            uid = row[0].strip()
            if not uid:
                raise ValueError("empty user_id")
            pt = GeoPoint(int(row[1]), float(row[2]), float(row[3]))
        except ValueError as exc:
            bad.append((lineno, str(exc)))
            continue
        points.setdefault(uid, []).append(pt)

    if total and len(bad) * 2 > total:
        preview = "; ".join(f"line {n}: {msg}" for n, msg in bad[:5])
        raise TrajectoryError(f"{len(bad)} of {total} rows unparseable ({preview})")
    if bad:
        log.warning("skipped %d unparseable rows", len(bad))

    # stable sort keeps input order among equal timestamps
    trajs = {
        uid: Trajectory(uid, sorted(pts, key=lambda p: p.timestamp))
        for uid, pts in sorted(points.items())
    }
    return ParseResult(trajs, bad)


def write_trajectories(trajs: dict[str, Trajectory]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for uid in sorted(trajs):
        for p in trajs[uid].points:
            writer.writerow([uid, p.timestamp, repr(p.lat), repr(p.lon)])
    return buf.getvalue().encode("utf-8")


def discretize(traj: Trajectory, grid: Grid) -> CellSequence:
    cells = []
    dropped = 0
    for p in traj.points:
        cell = grid.locate(p.lat, p.lon)
        if cell is None:
            dropped += 1
        else:
            cells.append((p.timestamp, cell))
    if not cells and traj.points:
        raise TrajectoryError(f"empty discretization for user {traj.user_id!r}")
    return CellSequence(traj.user_id, cells, dropped)


def daily_last_locations(seq: CellSequence, day_length_seconds: int = DAY_SECONDS) -> DailyLocationSequence:
    """Reduce a cell sequence to the last observed cell of each day.

    Equal maximal timestamps within a day resolve to the later row.
    """
    if not seq.cells:
        raise TrajectoryError(f"cell sequence for {seq.user_id!r} is empty")
    if day_length_seconds <= 0:
        raise TrajectoryError("day_length_seconds must be positive")
    last: dict[int, tuple[int, Cell]] = {}
    for ts, cell in seq.cells:
        day = ts // day_length_seconds
        prev = last.get(day)
        if prev is None or ts >= prev[0]:
            last[day] = (ts, cell)
    return DailyLocationSequence(seq.user_id, [(d, last[d][1]) for d in sorted(last)])


def daily_to_trajectory(daily: DailyLocationSequence, grid: Grid, start_ts: int = 0,
                        day_length_seconds: int = DAY_SECONDS) -> Trajectory:
    """Materialise a daily sequence as one point per day at cell centres (noon)."""
    pts = []
    for day, cell in daily.days:
        lat, lon = grid.cell_center(cell)
        pts.append(GeoPoint(start_ts + day * day_length_seconds + day_length_seconds // 2, lat, lon))
    return Trajectory(daily.user_id, pts)


def cell_indices(cells: list[Cell], grid: Grid) -> np.ndarray:
    return np.array([grid.cell_index(c) for c in cells], dtype=np.int64)
