"""Group and individual fairness of model outcomes, plus synthetic audits.

Group fairness compares acceptance rates ``P(C=1 | A=a, Z=z)`` across
sensitive groups within each mobility bucket ``z``; a bucket passes when the
smallest-to-largest rate ratio is at least ``1 - epsilon``. Individual
fairness reports the accuracy spread among users with similar maximum
predictability, or within a cluster of mobility-similar users.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from fedmobfair.clustering import kmedoids, to_distance
from fedmobfair.flsim import GlobalModel, accuracy, build_client_dataset
from fedmobfair.heatmap import SsimParams, build_fm, normalize_fm, ssim_matrix
from fedmobfair.mobility import ProfileError, build_profile
from fedmobfair.seeding import derive_seed
from fedmobfair.synthgen import PopulationSpec, generate_population

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.2
DEFAULT_ACCEPT_THRESHOLD = 0.5
# absorbs rounding in 1 - epsilon, e.g. 1 - 0.2 vs a rate ratio of 4/5
RATIO_SLACK = 1e-12

OK = "ok"
UNDEFINED = "undefined"
INSUFFICIENT = "insufficient_data"
SINGLE_GROUP = "single_group"


class FairnessError(ValueError):
    pass


@dataclass(frozen=True)
class OutcomeRecord:
    user_id: str
    accuracy: float
    accepted: bool
    group: str
    z_bucket: str


@dataclass
class BucketFairness:
    z_bucket: str
    rates: dict[str, float]
    counts: dict[str, int]
    ratio: float | None
    satisfied: bool
    status: str
    diagnostic: str = ""


@dataclass
class GroupFairnessReport:
    epsilon: float
    buckets: list[BucketFairness]

    @property
    def satisfied(self) -> bool:
        """Conjunction over buckets with enough data to judge."""
        judged = [b for b in self.buckets if b.status != INSUFFICIENT]
        return bool(judged) and all(b.satisfied for b in judged)

    def bucket(self, z: str) -> BucketFairness:
        for b in self.buckets:
            if b.z_bucket == z:
                return b
        raise KeyError(z)

    def to_json(self) -> list[dict]:
        return [asdict(b) for b in self.buckets]


@dataclass
class GapReport:
    gaps: dict[str, float]
    members: dict[str, int]

    @property
    def overall(self) -> float:
        return max(self.gaps.values(), default=0.0)

    def to_json(self) -> dict:
        return {"overall": self.overall, "gaps": self.gaps, "members": self.members}


def make_outcomes(acc: Mapping[str, float], group_of: Mapping[str, str], z_of: Mapping[str, str],
                  accept_threshold: float = DEFAULT_ACCEPT_THRESHOLD) -> list[OutcomeRecord]:
    out = []
    for u in sorted(acc):
        a = float(acc[u])
        if math.isnan(a):
            continue
        out.append(OutcomeRecord(u, a, a >= accept_threshold, group_of[u], z_of.get(u, "z0")))
    return out


def bucketize_z(values: Mapping[str, float], q: int) -> dict[str, str]:
    """Quantile buckets ``z0..z{q-1}``; values equal to an edge go to the lower bucket."""
    n = len(values)
    if q < 1 or q > max(n, 1):
        raise FairnessError(f"q must lie in [1, {n}], got {q}")
    ids = sorted(values)
    arr = np.array([float(values[u]) for u in ids])
    if np.isnan(arr).any():
        raise FairnessError("cannot bucketize NaN values")
    edges = np.quantile(arr, [j / q for j in range(1, q)]) if q > 1 else np.empty(0)
    idx = np.searchsorted(edges, arr, side="left")
    return {u: f"z{int(i)}" for u, i in zip(ids, idx)}


def z_values(scheme: str, pi_of: Mapping[str, float], record_count_of: Mapping[str, int]) -> dict[str, float]:
    if scheme in ("pi_max", "pi_max_quantiles"):
        return dict(pi_of)
    if scheme in ("record_count", "record_count_quantiles"):
        return {u: float(c) for u, c in record_count_of.items()}
    raise FairnessError(f"unknown z scheme {scheme!r}")


def group_fairness(outcomes: Sequence[OutcomeRecord], epsilon: float = DEFAULT_EPSILON,
                   groups: Iterable[str] | None = None) -> GroupFairnessReport:
    if epsilon < 0:
        raise FairnessError(f"epsilon must be non-negative, got {epsilon}")
    all_groups = sorted(set(groups) if groups is not None else {o.group for o in outcomes})
    by_z: dict[str, list[OutcomeRecord]] = {}
    for o in outcomes:
        by_z.setdefault(o.z_bucket, []).append(o)

    buckets = []
    for z in sorted(by_z):
        rows = by_z[z]
        counts = {g: sum(1 for o in rows if o.group == g) for g in all_groups}
        rates = {
            g: sum(o.accepted for o in rows if o.group == g) / counts[g]
            for g in all_groups if counts[g]
        }
        if len(all_groups) < 2:
            buckets.append(BucketFairness(z, rates, counts, None, False, SINGLE_GROUP,
                                          "a ratio needs at least two groups"))
            continue
        empty = [g for g in all_groups if counts[g] == 0]
        if empty:
            log.warning("bucket %s has no members in groups %s; excluded", z, empty)
            buckets.append(BucketFairness(z, rates, counts, None, False, INSUFFICIENT,
                                          f"no members in groups {empty}"))
            continue
        hi = max(rates.values())
        if hi == 0:
            buckets.append(BucketFairness(z, rates, counts, None, False, UNDEFINED,
                                          "every group has zero acceptance"))
            continue
        ratio = min(rates.values()) / hi
        buckets.append(BucketFairness(z, rates, counts, ratio,
                                      ratio >= 1.0 - epsilon - RATIO_SLACK, OK))
    return GroupFairnessReport(epsilon, buckets)


def individual_fairness_pi(acc: Mapping[str, float], pi_of: Mapping[str, float],
                           bin_width: float) -> GapReport:
    """Accuracy spread within bins of equal width over maximum predictability."""
    if not 0 < bin_width <= 1:
        raise FairnessError(f"bin_width must lie in (0, 1], got {bin_width}")
    last = math.ceil(1.0 / bin_width - 1e-12) - 1
    bins: dict[int, list[float]] = {}
    for u, a in acc.items():
        pi = pi_of.get(u, math.nan)
        if math.isnan(a) or math.isnan(pi):
            continue
        b = min(int(math.floor(pi / bin_width)), last)
        bins.setdefault(b, []).append(float(a))
    keys = sorted(bins)
    return GapReport(
        {f"bin{b}": max(bins[b]) - min(bins[b]) for b in keys},
        {f"bin{b}": len(bins[b]) for b in keys},
    )


def individual_fairness_ssim(acc: Mapping[str, float], clusters: Mapping[str, int]) -> GapReport:
    missing = [u for u in acc if u not in clusters]
    if missing:
        raise FairnessError(f"no cluster assignment for users {missing[:5]}")
    groups: dict[int, list[float]] = {}
    for u, a in acc.items():
        if not math.isnan(a):
            groups.setdefault(int(clusters[u]), []).append(float(a))
    keys = sorted(groups)
    return GapReport(
        {f"cluster{c}": max(groups[c]) - min(groups[c]) for c in keys},
        {f"cluster{c}": len(groups[c]) for c in keys},
    )


def group_accuracy_gap(acc: Mapping[str, float], group_of: Mapping[str, str]) -> float:
    """Largest difference between per-group mean accuracies."""
    means: dict[str, list[float]] = {}
    for u, a in acc.items():
        if not math.isnan(a):
            means.setdefault(group_of[u], []).append(a)
    vals = [float(np.mean(v)) for v in means.values()]
    return max(vals) - min(vals) if vals else 0.0


@dataclass
class AuditSettings:
    accept_threshold: float = DEFAULT_ACCEPT_THRESHOLD
    z_scheme: str = "pi_max"
    z_buckets: int = 2
    bin_width: float = 0.1
    k: int | None = None
    ssim: SsimParams = field(default_factory=SsimParams)


def audit_with_synthetic(model: GlobalModel, spec: PopulationSpec, seed: int,
                         epsilon: float = DEFAULT_EPSILON,
                         settings: AuditSettings | None = None) -> dict[str, Any]:
    """Evaluate a frozen model on a fresh synthetic population with known groups."""
    settings = settings or AuditSettings()
    if spec.grid.num_cells != model.num_cells:
        raise FairnessError(
            f"model expects {model.num_cells} cells, population grid has {spec.grid.num_cells}"
        )
    pop = generate_population(spec.with_seed(seed))
    weights = model.weights()

    acc: dict[str, float] = {}
    pi_of: dict[str, float] = {}
    for u, daily in pop.daily.items():
        ds = build_client_dataset(daily, model.window, 0.0, spec.grid)
        if ds.num_examples == 0:
            continue
        acc[u] = accuracy(weights, ds.contexts, ds.labels)
        try:
            pi_of[u] = build_profile(daily).pi_max
        except ProfileError:
            pi_of[u] = math.nan

    valid_pi = {u: p for u, p in pi_of.items() if not math.isnan(p)}
    q = min(settings.z_buckets, max(len(valid_pi), 1))
    z_of = bucketize_z(z_values(settings.z_scheme, valid_pi,
                                {u: pop.registry[u].record_count for u in valid_pi}), q) if valid_pi else {}
    outcomes = make_outcomes(acc, pop.group_of, z_of, settings.accept_threshold)
    gf = group_fairness(outcomes, epsilon, spec.labels)

    heatmaps = {u: normalize_fm(build_fm(pop.daily[u].cells, spec.grid)) for u in sorted(acc)}
    k = settings.k or len(spec.groups)
    if len(heatmaps) >= 2 and min(spec.grid.shape) >= settings.ssim.window:
        sm = ssim_matrix(heatmaps, settings.ssim)
        k = min(k, len(heatmaps))
        clusters = kmedoids(to_distance(sm), k, derive_seed(seed, "audit-kmedoids")).as_dict()
    else:
        clusters = {u: 0 for u in heatmaps}

    return {
        "seed": seed,
        "num_users": len(acc),
        "accuracy": acc,
        "group": gf.to_json(),
        "group_satisfied": gf.satisfied,
        "individual_pi": individual_fairness_pi(acc, pi_of, settings.bin_width).to_json(),
        "individual_ssim": individual_fairness_ssim(acc, clusters).to_json(),
        "group_accuracy_gap": group_accuracy_gap(acc, pop.group_of),
    }


def fairness_report(acc: Mapping[str, float], group_of: Mapping[str, str], pi_of: Mapping[str, float],
                    record_count_of: Mapping[str, int], clusters: Mapping[str, int] | None,
                    epsilon: float = DEFAULT_EPSILON, settings: AuditSettings | None = None,
                    audit: Mapping[str, Any] | None = None,
                    config_echo: Mapping[str, Any] | None = None,
                    groups: Iterable[str] | None = None) -> dict[str, Any]:
    """Assemble the exported fairness document for one set of outcomes."""
    settings = settings or AuditSettings()
    vals = z_values(settings.z_scheme, pi_of, record_count_of)
    vals = {u: v for u, v in vals.items() if u in acc and not math.isnan(v)}
    z_of = bucketize_z(vals, min(settings.z_buckets, len(vals))) if vals else {}
    outcomes = make_outcomes(acc, group_of, z_of, settings.accept_threshold)
    gf = group_fairness(outcomes, epsilon, groups)
    ind_ssim = individual_fairness_ssim(acc, clusters).to_json() if clusters else None
    return {
        "group": gf.to_json(),
        "group_satisfied": gf.satisfied,
        "group_accuracy_gap": group_accuracy_gap(acc, group_of),
        "individual_pi": individual_fairness_pi(acc, pi_of, settings.bin_width).to_json(),
        "individual_ssim": ind_ssim,
        "audit": dict(audit) if audit else {},
        "config_echo": dict(config_echo) if config_echo else {},
    }


def dumps_report(report: Mapping[str, Any]) -> bytes:
    return (json.dumps(report, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n").encode("utf-8")


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
