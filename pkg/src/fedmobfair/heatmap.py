"""Frequency-matrix heatmaps and windowed structural similarity."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from fedmobfair import _kernels
from fedmobfair.trajectory import Cell, CellSequence, Grid


class HeatmapError(ValueError):
    pass


@dataclass(frozen=True)
class SsimParams:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    window: int = 8

    def __post_init__(self):
        if self.window < 1:
            raise HeatmapError(f"SSIM window must be >= 1, got {self.window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise HeatmapError("SSIM stabilisers c1, c2 must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass
class SimilarityMatrix:
    user_ids: list[str]
    values: np.ndarray

    def to_csv(self) -> bytes:
        return matrix_to_csv(self.user_ids, self.values)

    @classmethod
    def from_csv(cls, data: bytes | str) -> "SimilarityMatrix":
        ids, values = matrix_from_csv(data)
        return cls(ids, values)


def build_fm(seq: CellSequence | Sequence[Cell], grid: Grid) -> np.ndarray:
    """Visit counts per grid cell, shape ``(rows, cols)``."""
    cells = [c for _, c in seq.cells] if isinstance(seq, CellSequence) else list(seq)
    fm = np.zeros(grid.shape, dtype=np.int64)
    if cells:
        arr = np.asarray(cells, dtype=np.int64)
        if (arr[:, 0] < 0).any() or (arr[:, 0] >= grid.rows).any() or \
                (arr[:, 1] < 0).any() or (arr[:, 1] >= grid.cols).any():
            raise HeatmapError("cell outside grid bounds")
        np.add.at(fm, (arr[:, 0], arr[:, 1]), 1)
    return fm


def normalize_fm(fm: np.ndarray) -> np.ndarray:
    """Log-scale counts into [0, 1] relative to the largest count.

    ``ln(count) / ln(max)`` for non-zero cells; with ``max == 1`` every
    visited cell is 1.
    """
    fm = np.asarray(fm)
    m = int(fm.max()) if fm.size else 0
    out = np.zeros(fm.shape, dtype=np.float64)
    if m == 0:
        return out
    if m == 1:
        out[fm == 1] = 1.0
        return out
    nz = fm > 0
    out[nz] = np.log(fm[nz]) / math.log(m)
    return out


def _check_pair(x: np.ndarray, y: np.ndarray, p: SsimParams) -> None:
    if x.shape != y.shape:
        raise HeatmapError(f"heatmap shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < p.window:
        raise HeatmapError(
            f"heatmap of shape {x.shape} is smaller than the {p.window}x{p.window} "
            f"SSIM window; use a smaller ssim.window"
        )


def ssim(x: np.ndarray, y: np.ndarray, p: SsimParams | None = None) -> float:
    """Mean SSIM over all fully contained ``N x N`` windows, stride 1."""
    p = p or SsimParams()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y, p)
    return _kernels.windowed_ssim(x, y, p.window, p.c1, p.c2)


def ssim_matrix(heatmaps: Mapping[str, np.ndarray], p: SsimParams | None = None) -> SimilarityMatrix:
    p = p or SsimParams()
    ids = list(heatmaps)
    if len(ids) < 2:
        raise HeatmapError("ssim_matrix needs at least 2 users")
    imgs = [np.ascontiguousarray(heatmaps[u], dtype=np.float64) for u in ids]
    for img in imgs[1:]:
        _check_pair(imgs[0], img, p)
    n = len(ids)
    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = _kernels.windowed_ssim(imgs[i], imgs[j], p.window, p.c1, p.c2)
    return SimilarityMatrix(ids, values)


def mean_off_diagonal(values: np.ndarray) -> float:
    n = values.shape[0]
    mask = ~np.eye(n, dtype=bool)
    return float(values[mask].mean())


def export_pgm(h: np.ndarray) -> bytes:
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    # round half up, not numpy's banker's rounding
    px = np.floor(np.clip(h, 0.0, 1.0) * 255 + 0.5).astype(int)
    lines = ["P2", f"{h.shape[1]} {h.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in px]
    return ("\n".join(lines) + "\n").encode("ascii")


def matrix_to_csv(ids: Sequence[str], values: np.ndarray) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["user_id", *ids])
    for uid, row in zip(ids, values):
        w.writerow([uid, *(repr(float(v)) for v in row)])
    return buf.getvalue().encode("utf-8")


def matrix_from_csv(data: bytes | str) -> tuple[list[str], np.ndarray]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:1] != ["user_id"]:
        raise HeatmapError("matrix CSV must start with a 'user_id' header cell")
    ids = rows[0][1:]
    body = [r for r in rows[1:] if r]
    if [r[0] for r in body] != ids:
        raise HeatmapError("matrix CSV row labels do not match column labels")
    values = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    if values.shape != (len(ids), len(ids)):
        raise HeatmapError(f"matrix CSV is not square: {values.shape}")
    return ids, values
