"""Plain-text ``key = value`` configuration files.

Keys may be dotted (``grid.cell_size``). A line ``[name]`` opens a repeated
block; keys after it belong to that block until the next header. ``#`` starts
a comment. Values stay strings until read through a typed accessor, which
raises :class:`ConfigError` naming the offending key path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from fedmobfair.heatmap import SsimParams
from fedmobfair.trajectory import Grid, TrajectoryError


class ConfigError(ValueError):
    pass


@dataclass
class KeyValues:
    values: dict[str, str] = field(default_factory=dict)
    blocks: list[tuple[str, "KeyValues"]] = field(default_factory=list)
    prefix: str = ""

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def _path(self, key: str) -> str:
        return f"{self.prefix}{key}"

    def _get(self, key: str, conv: Callable[[str], Any], default: Any, kind: str) -> Any:
        if key not in self.values:
            if default is _REQUIRED:
                raise ConfigError(f"{self._path(key)}: missing required key")
            return default
        raw = self.values[key]
        try:
            return conv(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{self._path(key)}: expected {kind}, got {raw!r}") from None

    def get_str(self, key: str, default: Any = None) -> str:
        return self._get(key, str, _REQUIRED if default is None else default, "string")

    def get_int(self, key: str, default: Any = None) -> int:
        return self._get(key, int, _REQUIRED if default is None else default, "integer")

    def get_float(self, key: str, default: Any = None) -> float:
        return self._get(key, float, _REQUIRED if default is None else default, "number")

    def get_floats(self, key: str, default: Any = None) -> list[float]:
        conv = lambda s: [float(x) for x in s.split(",") if x.strip()]  # noqa: E731
        return self._get(key, conv, _REQUIRED if default is None else default, "comma-separated numbers")

    def get_ints(self, key: str, default: Any = None) -> list[int]:
        conv = lambda s: [int(x) for x in s.split(",") if x.strip()]  # noqa: E731
        return self._get(key, conv, _REQUIRED if default is None else default, "comma-separated integers")

    def optional(self, key: str) -> str | None:
        return self.values.get(key)

    def echo(self) -> dict:
        out: dict[str, Any] = dict(sorted(self.values.items()))
        if self.blocks:
            out["blocks"] = [{"name": n, **b.echo()} for n, b in self.blocks]
        return out


_REQUIRED = object()


def parse_kv(text: str, source: str = "<config>") -> KeyValues:
    root = KeyValues()
    current = root
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"{source}:{lineno}: empty block name")
            idx = sum(1 for n, _ in root.blocks if n == name)
            current = KeyValues(prefix=f"{name}[{idx}].")
            root.blocks.append((name, current))
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in current.values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {current.prefix}{key}")
        current.values[key] = value
    return root


def load_kv(path: str | Path) -> KeyValues:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def grid_from(kv: KeyValues, cell_size: float | None = None) -> Grid:
    try:
        return Grid(
            origin_lat=kv.get_float("grid.origin_lat"),
            origin_lon=kv.get_float("grid.origin_lon"),
            width=kv.get_float("grid.w"),
            length=kv.get_float("grid.l"),
            cell_size=cell_size if cell_size is not None else kv.get_float("grid.cell_size"),
        )
    except TrajectoryError as exc:
        raise ConfigError(f"grid: {exc}") from None


def ssim_from(kv: KeyValues) -> SsimParams:
    try:
        return SsimParams(
            k1=kv.get_float("ssim.k1", 0.01),
            k2=kv.get_float("ssim.k2", 0.03),
            window=kv.get_int("ssim.window", 8),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"ssim: {exc}") from None
