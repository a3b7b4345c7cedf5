"""Per-user entropy, distinct-location count and Fano maximum predictability."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from fedmobfair import _kernels
from fedmobfair.trajectory import DailyLocationSequence

LEMPEL_ZIV = "lempel_ziv"
LITERAL = "literal_eq1"
ORACLE_MAX_LEN = 64


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class EntropyEstimate:
    value_bits: float
    method: str


@dataclass(frozen=True)
class MobilityProfile:
    user_id: str
    entropy: EntropyEstimate
    distinct_locations: int
    pi_max: float
    sequence_length: int

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "entropy_bits": self.entropy.value_bits,
            "method": self.entropy.method,
            "distinct_locations": self.distinct_locations,
            "pi_max": self.pi_max,
            "sequence_length": self.sequence_length,
        }


def _encode(seq: Sequence[Hashable]) -> np.ndarray:
    """Map arbitrary hashable symbols to dense int codes in first-seen order."""
    codes: dict[Hashable, int] = {}
    return np.fromiter((codes.setdefault(s, len(codes)) for s in seq), dtype=np.int64, count=len(seq))


def distinct_locations(seq: DailyLocationSequence | Sequence[Hashable]) -> int:
    cells = seq.cells if isinstance(seq, DailyLocationSequence) else list(seq)
    if not cells:
        raise ProfileError("distinct_locations of an empty sequence")
    return len(set(cells))


def lz_entropy(seq: Sequence[Hashable]) -> EntropyEstimate:
    """Lempel-Ziv estimate of the entropy rate in bits per symbol.

    ``n log2(n) / sum(lambda_i)`` where ``lambda_i`` is the length of the
    shortest substring starting at ``i`` that does not occur in the prefix
    before ``i``. Clamped to ``[0, log2 n]``.
    """
    n = len(seq)
    if n < 2:
        raise ProfileError(f"lz_entropy needs at least 2 symbols, got {n}")
    lambdas = _kernels.lz_lambda(_encode(seq))
    est = n * math.log2(n) / float(lambdas.sum())
    return EntropyEstimate(min(max(est, 0.0), math.log2(n)), LEMPEL_ZIV)


def literal_eq1_entropy(seq: Sequence[Hashable], max_len: int) -> EntropyEstimate:
    """Shannon entropy of the pooled distribution of contiguous substrings.

    Only meant as a brute-force reference on tiny inputs.
    """
    n = len(seq)
    if n > ORACLE_MAX_LEN:
        raise ProfileError(f"oracle only: sequence length {n} exceeds {ORACLE_MAX_LEN}")
    if not 1 <= max_len <= n:
        raise ProfileError(f"max_len must lie in [1, {n}], got {max_len}")
    counts: Counter = Counter()
    for length in range(1, max_len + 1):
        for start in range(n - length + 1):
            counts[tuple(seq[start:start + length])] += 1
    total = sum(counts.values())
    h = 0.0
    for c in counts.values():
        p = c / total
        h -= p * math.log2(p)
    return EntropyEstimate(max(h, 0.0), LITERAL)


def _binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def fano_rhs(pi: float, n_locations: int) -> float:
    """Right-hand side of the Fano equation, ``H(pi) + (1 - pi) log2(L - 1)``."""
    extra = (1.0 - pi) * math.log2(n_locations - 1) if n_locations > 1 else 0.0
    return _binary_entropy(pi) + extra


def fano_max_predictability(entropy_bits: float, n_locations: int, tol: float = 1e-9) -> float:
    """Largest predictability compatible with entropy ``E`` over ``L`` locations.

    Solves ``E = H(pi) + (1 - pi) log2(L - 1)`` on ``[1/L, 1]`` by bisection;
    the right-hand side is strictly decreasing there. Entropies above
    ``log2 L`` are clamped.
    """
    if n_locations <= 0:
        raise ProfileError(f"number of locations must be positive, got {n_locations}")
    if entropy_bits < 0 or math.isnan(entropy_bits):
        raise ProfileError(f"entropy must be non-negative, got {entropy_bits}")
    if n_locations == 1 or entropy_bits == 0.0:
        return 1.0
    if entropy_bits >= math.log2(n_locations):
        return 1.0 / n_locations

    lo, hi = 1.0 / n_locations, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if fano_rhs(mid, n_locations) > entropy_bits:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def build_profile(daily: DailyLocationSequence) -> MobilityProfile:
    if len(daily) < 2:
        raise ProfileError(f"user {daily.user_id!r} has {len(daily)} daily entries; need at least 2")
    cells = daily.cells
    n_loc = distinct_locations(cells)
    ent = lz_entropy(cells)
    return MobilityProfile(
        user_id=daily.user_id,
        entropy=ent,
        distinct_locations=n_loc,
        pi_max=fano_max_predictability(ent.value_bits, n_loc),
        sequence_length=len(cells),
    )


def profiles_to_json(profiles: Sequence[MobilityProfile]) -> bytes:
    rows = [p.to_json() for p in sorted(profiles, key=lambda p: p.user_id)]
    return (json.dumps(rows, indent=2) + "\n").encode("utf-8")


def profiles_from_json(data: bytes | str) -> list[MobilityProfile]:
    out = []
    for row in json.loads(data):
        out.append(MobilityProfile(
            user_id=row["user_id"],
            entropy=EntropyEstimate(float(row["entropy_bits"]), row["method"]),
            distinct_locations=int(row["distinct_locations"]),
            pi_max=float(row["pi_max"]),
            sequence_length=int(row["sequence_length"]),
        ))
    return out

