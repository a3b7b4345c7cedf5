"""Command-line entry point.

Every command writes ``<command>.manifest.json`` into ``--out`` before any of
its outputs. Exit codes: 0 success, 1 usage or config error, 2 data error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from fedmobfair import __version__
from fedmobfair.clustering import ClusteringError, assignment_from_csv, kmedoids, to_distance
from fedmobfair.config import ConfigError, KeyValues, grid_from, load_kv, ssim_from
from fedmobfair.fairness import (
    DEFAULT_ACCEPT_THRESHOLD,
    DEFAULT_EPSILON,
    AuditSettings,
    FairnessError,
    audit_with_synthetic,
    dumps_report,
    fairness_report,
)
from fedmobfair.flsim import (
    AGGREGATIONS,
    GlobalModel,
    SimConfig,
    SimulationError,
    accuracy,
    build_client_dataset,
    read_rounds,
    run_simulation,
)
from fedmobfair.heatmap import (
    HeatmapError,
    SimilarityMatrix,
    SsimParams,
    build_fm,
    export_pgm,
    normalize_fm,
    ssim_matrix,
)
from fedmobfair.mobility import ProfileError, build_profile, profiles_to_json
from fedmobfair.seeding import derive_seed
from fedmobfair.selection import CLUSTER, STRATEGIES, ClientRecord, ClientRegistry, SelectionError
from fedmobfair.synthgen import SynthError, generate_population, load_spec
from fedmobfair.trajectory import (
    DailyLocationSequence,
    Grid,
    TrajectoryError,
    daily_last_locations,
    discretize,
    parse_trajectories,
    write_trajectories,
)

log = logging.getLogger("fedmobfair")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    seed: int | None
    config: dict[str, Any]
    inputs: dict[str, str]
    outputs: list[str]
    version: str = __version__
    created: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())

    def to_bytes(self) -> bytes:
        doc = {
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "created": self.created,
        }
        return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Per-command output directory with the manifest written up front."""

    def __init__(self, out: Path, command: str, seed: int | None, config: dict, inputs: Sequence[Path],
                 outputs: Sequence[str]):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        digests = {str(p): sha256_file(p) for p in inputs}
        self.manifest = RunManifest(command, seed, config, digests, [str(out / o) for o in outputs])
        (out / f"{command}.manifest.json").write_bytes(self.manifest.to_bytes())

    def write(self, name: str, data: bytes) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        return path


def _read_input(path: str | Path) -> bytes:
    p = Path(path)
    try:
        return p.read_bytes()
    except FileNotFoundError:
        raise DataError(f"input file not found: {p}") from None
    except OSError as exc:
        raise DataError(f"cannot read {p}: {exc}") from None


def _load_config(args) -> KeyValues:
    if args.config is None:
        return KeyValues()
    try:
        return load_kv(args.config)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None


def _echo(kv: KeyValues, **overrides) -> dict:
    out = kv.echo()
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _daily_from_csv(data: bytes, grid: Grid) -> tuple[dict[str, DailyLocationSequence], dict[str, str]]:
    parsed = parse_trajectories(data)
    daily, errors = {}, {}
    for uid, traj in parsed.trajectories.items():
        try:
            daily[uid] = daily_last_locations(discretize(traj, grid))
        except TrajectoryError as exc:
            errors[uid] = str(exc)
            log.error("user %s: %s", uid, exc)
    return daily, errors


def _audit_settings(kv: KeyValues, ssim: SsimParams | None = None) -> tuple[float, AuditSettings]:
    eps = kv.get_float("fairness.epsilon", DEFAULT_EPSILON)
    k = kv.get_int("clustering.k", 0)
    settings = AuditSettings(
        accept_threshold=kv.get_float("fairness.accept_threshold", DEFAULT_ACCEPT_THRESHOLD),
        z_scheme=kv.get_str("fairness.z_scheme", "pi_max"),
        z_buckets=kv.get_int("fairness.z_buckets", 2),
        bin_width=kv.get_float("fairness.bin_width", 0.1),
        k=k or None,
        ssim=ssim or ssim_from(kv),
    )
    if not 0 <= eps < 1:
        raise ConfigError(f"fairness.epsilon: must lie in [0, 1), got {eps}")
    if settings.z_buckets < 1:
        raise ConfigError(f"fairness.z_buckets: must be >= 1, got {settings.z_buckets}")
    if not 0 < settings.bin_width <= 1:
        raise ConfigError(f"fairness.bin_width: must lie in (0, 1], got {settings.bin_width}")
    if settings.z_scheme not in ("pi_max", "record_count"):
        raise ConfigError(f"fairness.z_scheme: expected pi_max or record_count, got {settings.z_scheme!r}")
    return eps, settings


def _cluster_users(daily: dict[str, DailyLocationSequence], grid: Grid, p: SsimParams, k: int,
                   seed: int) -> dict[str, int] | None:
    if len(daily) < 2 or min(grid.shape) < p.window:
        return None
    heatmaps = {u: normalize_fm(build_fm(daily[u].cells, grid)) for u in sorted(daily)}
    sm = ssim_matrix(heatmaps, p)
    return kmedoids(to_distance(sm), min(k, len(heatmaps)), seed).as_dict()


def cmd_generate(args) -> int:
    if args.spec is None:
        raise UsageError("generate: a population spec path is required")
    spec_bytes = _read_input(args.spec)
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    run = Run(Path(args.out), "generate", spec.seed, {"spec": spec_bytes.decode("utf-8"), "seed": spec.seed},
              [Path(args.spec)], ["trajectories.csv", "registry.csv"])
    pop = generate_population(spec)
    run.write("trajectories.csv", write_trajectories(pop.trajectories()))
    run.write("registry.csv", pop.registry.to_csv())
    return EXIT_OK


def cmd_profile(args) -> int:
    kv = _load_config(args)
    grid = grid_from(kv)
    data = _read_input(args.trajectories)
    run = Run(Path(args.out), "profile", args.seed, _echo(kv), [Path(args.trajectories)], ["profiles.json"])
    daily, errors = _daily_from_csv(data, grid)
    profiles = []
    for uid, seq in sorted(daily.items()):
        try:
            profiles.append(build_profile(seq))
        except ProfileError as exc:
            errors[uid] = str(exc)
            log.error("user %s: %s", uid, exc)
    if not profiles:
        raise DataError("no user could be profiled")
    run.write("profiles.json", profiles_to_json(profiles))
    return EXIT_OK


def cmd_ssim(args) -> int:
    kv = _load_config(args)
    sizes = kv.get_floats("ssim.cell_sizes", [kv.get_float("grid.cell_size")])
    grids = [grid_from(kv, cs) for cs in sizes]
    params = ssim_from(kv)
    data = _read_input(args.trajectories)
    names = [f"ssim_{cs!r}.csv" for cs in sizes]
    run = Run(Path(args.out), "ssim", args.seed, _echo(kv), [Path(args.trajectories)], names)
    trajs = parse_trajectories(data).trajectories
    if len(trajs) < 2:
        raise DataError(f"SSIM needs at least 2 users, found {len(trajs)}")
    for cs, grid, name in zip(sizes, grids, names):
        heatmaps = {}
        for uid, traj in trajs.items():
            try:
                heatmaps[uid] = normalize_fm(build_fm(discretize(traj, grid), grid))
            except TrajectoryError as exc:
                log.error("user %s at cell size %r: %s", uid, cs, exc)
        if len(heatmaps) < 2:
            raise DataError(f"fewer than 2 users have data at cell size {cs!r}")
        run.write(name, ssim_matrix(heatmaps, params).to_csv())
        if args.pgm:
            for uid, h in heatmaps.items():
                run.write(f"heatmaps/{cs!r}/{uid}.pgm", export_pgm(h))
    return EXIT_OK


def cmd_cluster(args) -> int:
    kv = _load_config(args)
    k = args.k if args.k is not None else kv.get_int("clustering.k")
    seed = args.seed if args.seed is not None else 0
    data = _read_input(args.ssim)
    run = Run(Path(args.out), "cluster", seed, _echo(kv, k=k), [Path(args.ssim)], ["clusters.csv"])
    sm = SimilarityMatrix.from_csv(data)
    if k < 1 or k > len(sm.user_ids):
        raise ConfigError(f"clustering.k: must lie in [1, {len(sm.user_ids)}], got {k}")
    run.write("clusters.csv", kmedoids(to_distance(sm), k, seed, user_ids=sm.user_ids).to_csv())
    return EXIT_OK


def _sim_config(kv: KeyValues, seed: int | None) -> SimConfig:
    d = SimConfig()
    cfg = SimConfig(
        rounds=kv.get_int("rounds", d.rounds),
        clients_per_round=kv.get_int("clients_per_round", d.clients_per_round),
        window=kv.get_int("window", d.window),
        test_fraction=kv.get_float("test_fraction", d.test_fraction),
        lr=kv.get_float("lr", d.lr),
        epochs=kv.get_int("epochs", d.epochs),
        selection_strategy=kv.get_str("selection_strategy", d.selection_strategy),
        aggregation_strategy=kv.get_str("aggregation_strategy", d.aggregation_strategy),
        master_seed=seed if seed is not None else kv.get_int("master_seed", d.master_seed),
        beta=kv.get_float("beta", d.beta),
    )
    for key in ("rounds", "epochs"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key}: must be >= 0")
    if cfg.selection_strategy not in STRATEGIES:
        raise ConfigError(f"selection_strategy: expected one of {STRATEGIES}, got {cfg.selection_strategy!r}")
    if cfg.aggregation_strategy not in AGGREGATIONS:
        raise ConfigError(f"aggregation_strategy: expected one of {AGGREGATIONS}, got {cfg.aggregation_strategy!r}")
    if cfg.clients_per_round < 1:
        raise ConfigError("clients_per_round: must be >= 1")
    if cfg.window < 1:
        raise ConfigError("window: must be >= 1")
    if not 0 <= cfg.test_fraction < 1:
        raise ConfigError("test_fraction: must lie in [0, 1)")
    if not (cfg.lr > 0 and math.isfinite(cfg.lr)):
        raise ConfigError("lr: must be positive")
    return cfg


def _config_dir(args) -> Path:
    return Path(args.config).resolve().parent if args.config else Path.cwd()


def cmd_simulate(args) -> int:
    kv = _load_config(args)
    cfg = _sim_config(kv, args.seed)
    eps, settings = _audit_settings(kv)
    base = _config_dir(args)
    pop_path = kv.optional("data.population")
    inputs: list[Path] = [Path(args.config)] if args.config else []
    spec = None
    if pop_path is not None:
        spec = load_spec(base / pop_path)
        grid = spec.grid
        inputs.append(base / pop_path)
    else:
        grid = grid_from(kv)
        traj_path = kv.get_str("data.trajectories")
        reg_path = kv.get_str("data.registry")
        inputs += [base / traj_path, base / reg_path]
    for p in inputs:
        if not p.exists():
            raise DataError(f"input file not found: {p}")

    outputs = ["rounds.jsonl", "model.bin", "registry.csv", "report.json"]
    run = Run(Path(args.out), "simulate", cfg.master_seed, _echo(kv, master_seed=cfg.master_seed), inputs, outputs)

    if spec is not None:
        pop = generate_population(spec)
        daily, registry = pop.daily, pop.registry
    else:
        daily, _ = _daily_from_csv(_read_input(inputs[-2]), grid)
        registry = ClientRegistry.from_csv(_read_input(inputs[-1]))
        missing = [r.user_id for r in registry if r.user_id not in daily]
        if missing:
            log.warning("registry users without trajectories marked ineligible: %s", missing[:5])
        recs = []
        for r in registry:
            pi = r.pi_max
            if math.isnan(pi) and r.user_id in daily and len(daily[r.user_id]) >= 2:
                pi = build_profile(daily[r.user_id]).pi_max
            n = len(daily[r.user_id]) if r.user_id in daily else 0
            recs.append(ClientRecord(r.user_id, r.group, r.cluster, pi, n, r.eligible and r.user_id in daily))
        registry = ClientRegistry(recs, registry.groups)

    datasets = {
        u: build_client_dataset(daily[u], cfg.window, cfg.test_fraction, grid)
        for u in sorted(daily) if u in registry.records
    }
    for u, ds in datasets.items():
        if not ds.eligible:
            log.warning("client %s ineligible: %s", u, ds.reason)
            registry[u].eligible = False

    k = settings.k or max(len(registry.groups), 1)
    clusters = _cluster_users({u: daily[u] for u in datasets}, grid, settings.ssim, k,
                              derive_seed(cfg.master_seed, "kmedoids"))
    if clusters is not None:
        registry.set_clusters(clusters)
    elif cfg.selection_strategy == CLUSTER:
        raise ConfigError("selection_strategy: cluster_stratified needs a grid at least ssim.window cells wide")

    result = run_simulation(datasets, registry, cfg, grid.num_cells)
    run.write("rounds.jsonl", result.rounds_jsonl())
    run.write("model.bin", result.model.to_bytes())
    run.write("registry.csv", registry.to_csv())

    w = result.model.weights()
    acc = {u: accuracy(w, *ds.evaluation()) for u, ds in datasets.items() if ds.eligible}
    audit = {}
    if spec is not None:
        audit = audit_with_synthetic(result.model, spec, derive_seed(cfg.master_seed, "audit"), eps, settings)
    report = fairness_report(
        acc, registry.group_of(), {u: registry[u].pi_max for u in acc},
        {u: registry[u].record_count for u in acc}, clusters and {u: clusters[u] for u in acc},
        eps, settings, audit, _echo(kv, master_seed=cfg.master_seed), registry.groups,
    )
    report["history_length"] = len(result.history)
    run.write("report.json", dumps_report(report))
    return EXIT_OK


def cmd_audit(args) -> int:
    kv = _load_config(args)
    eps, settings = _audit_settings(kv)
    seed = args.seed if args.seed is not None else 0
    model_bytes = _read_input(args.model)
    _read_input(args.spec)
    spec = load_spec(args.spec)
    run = Run(Path(args.out), "audit", seed, _echo(kv), [Path(args.model), Path(args.spec)], ["audit.json"])
    try:
        model = GlobalModel.from_bytes(model_bytes)
    except SimulationError as exc:
        raise DataError(str(exc)) from None
    audit = audit_with_synthetic(model, spec, seed, eps, settings)
    run.write("audit.json", dumps_report(audit))
    return EXIT_OK


def cmd_report(args) -> int:
    kv = _load_config(args)
    eps, settings = _audit_settings(kv)
    paths = [Path(args.rounds), Path(args.registry)] + ([Path(args.clusters)] if args.clusters else [])
    blobs = [_read_input(p) for p in paths]
    run = Run(Path(args.out), "report", args.seed, _echo(kv), paths, ["report.json"])
    history = read_rounds(blobs[0])
    registry = ClientRegistry.from_csv(blobs[1])
    clusters = assignment_from_csv(blobs[2]) if args.clusters else None
    acc = {u: a for u, a in history[-1].accuracy.items() if not math.isnan(a)} if history else {}
    unknown = [u for u in acc if u not in registry.records]
    if unknown:
        raise DataError(f"round history names users missing from the registry: {unknown[:5]}")
    report = fairness_report(
        acc, registry.group_of(), {u: registry[u].pi_max for u in acc},
        {u: registry[u].record_count for u in acc}, clusters, eps, settings, {}, _echo(kv), registry.groups,
    )
    report["history_length"] = len(history)
    run.write("report.json", dumps_report(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="key-value config file")
    common.add_argument("--seed", metavar="N", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")

    parser = _Parser(prog="fedmobfair", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="synthetic population -> trajectories.csv")
    p.add_argument("spec", nargs="?", help="population spec file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("profile", parents=[common], help="trajectories.csv -> profiles.json")
    p.add_argument("trajectories")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("ssim", parents=[common], help="trajectories.csv -> one SSIM matrix per cell size")
    p.add_argument("trajectories")
    p.add_argument("--pgm", action="store_true", help="also dump heatmaps as PGM images")
    p.set_defaults(func=cmd_ssim)

    p = sub.add_parser("cluster", parents=[common], help="ssim.csv -> clusters.csv")
    p.add_argument("ssim")
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("simulate", parents=[common], help="run the federated simulation")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("audit", parents=[common], help="audit a model on a synthetic population")
    p.add_argument("model")
    p.add_argument("spec")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", parents=[common], help="fairness report from a round history")
    p.add_argument("rounds")
    p.add_argument("registry")
    p.add_argument("--clusters", default=None)
    p.set_defaults(func=cmd_report)
    return parser


_USAGE_ERRORS = (UsageError, ConfigError, SelectionError)
_DATA_ERRORS = (DataError, TrajectoryError, ProfileError, HeatmapError, ClusteringError,
                SimulationError, FairnessError, SynthError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name, default in (("config", None), ("seed", None), ("out", ".")):
            if not hasattr(args, name):
                setattr(args, name, default)
        if args.command is None:
            raise UsageError("a command is required; see --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
