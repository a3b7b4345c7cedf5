"""Deterministic federated-learning simulation of a next-location predictor.

The shared model is a multinomial logistic regression over one-hot encodings
of the last ``W`` visited cells. Parameters are stored flat; reshaped they form
a ``(W*V + 1, V)`` matrix whose last row is the bias.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from fedmobfair import _kernels
from fedmobfair.seeding import derive_seed
from fedmobfair.selection import ClientRegistry, select
from fedmobfair.trajectory import DailyLocationSequence, Grid

FEDAVG = "fedavg"
UNIFORM = "uniform"
GROUP_BALANCED = "group_balanced"
PREDICTABILITY = "predictability_weighted"
AGGREGATIONS = (FEDAVG, UNIFORM, GROUP_BALANCED, PREDICTABILITY)
PREDICTABILITY_FLOOR = 0.05

LAYOUT_VERSION = 1
_MAGIC = b"FMFLMODL"
_HEADER = struct.Struct("<8sHHIIQ")


class SimulationError(RuntimeError):
    pass


@dataclass
class ClientDataset:
    user_id: str
    contexts: np.ndarray  # (n, W) cell indices
    labels: np.ndarray  # (n,)
    train_idx: np.ndarray
    test_idx: np.ndarray
    eligible: bool = True
    reason: str = ""

    @property
    def num_examples(self) -> int:
        return int(self.labels.shape[0])

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.contexts[self.train_idx], self.labels[self.train_idx]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.contexts[self.test_idx], self.labels[self.test_idx]

    def evaluation(self) -> tuple[np.ndarray, np.ndarray]:
        """Test split, or every example when the test split is empty."""
        if self.test_idx.size:
            return self.test()
        return self.contexts, self.labels


@dataclass
class GlobalModel:
    num_cells: int
    window: int
    params: np.ndarray
    layout_version: int = LAYOUT_VERSION

    @classmethod
    def zeros(cls, num_cells: int, window: int) -> "GlobalModel":
        return cls(num_cells, window, np.zeros(param_count(num_cells, window)))

    def weights(self) -> np.ndarray:
        return self.params.reshape(self.window * self.num_cells + 1, self.num_cells)

    def to_bytes(self) -> bytes:
        params = np.ascontiguousarray(self.params, dtype="<f8")
        head = _HEADER.pack(_MAGIC, self.layout_version, 0, self.num_cells, self.window, params.size)
        return head + params.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GlobalModel":
        if len(data) < _HEADER.size:
            raise SimulationError("model file truncated")
        magic, version, _, v, w, count = _HEADER.unpack_from(data)
        if magic != _MAGIC:
            raise SimulationError("not a model file (bad magic)")
        if version != LAYOUT_VERSION:
            raise SimulationError(f"unsupported model layout version {version}")
        if count != param_count(v, w) or len(data) != _HEADER.size + 8 * count:
            raise SimulationError("model file length does not match its header")
        params = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
        return cls(int(v), int(w), params, int(version))


@dataclass
class ClientUpdate:
    user_id: str
    new_params: np.ndarray
    num_samples: int
    train_loss: float
    local_accuracy: float
    loss_history: list[float] = field(default_factory=list)


@dataclass
class RoundRecord:
    round_index: int
    selected: list[str]
    selection: str
    aggregation: str
    accuracy: dict[str, float]
    train_loss: dict[str, float]
    global_loss: float

    def to_json(self) -> str:
        return json.dumps({
            "round": self.round_index,
            "selected": self.selected,
            "selection": self.selection,
            "aggregation": self.aggregation,
            "accuracy": self.accuracy,
            "train_loss": self.train_loss,
            "global_loss": self.global_loss,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RoundRecord":
        d = json.loads(line)
        return cls(d["round"], d["selected"], d["selection"], d["aggregation"],
                   d["accuracy"], d["train_loss"], d["global_loss"])


@dataclass
class SimConfig:
    rounds: int = 10
    clients_per_round: int = 5
    window: int = 1
    test_fraction: float = 0.2
    lr: float = 0.5
    epochs: int = 5
    selection_strategy: str = "uniform"
    aggregation_strategy: str = FEDAVG
    master_seed: int = 0
    beta: float = PREDICTABILITY_FLOOR


@dataclass
class SimulationResult:
    history: list[RoundRecord]
    model: GlobalModel

    def rounds_jsonl(self) -> bytes:
        return "".join(r.to_json() + "\n" for r in self.history).encode("utf-8")


def param_count(num_cells: int, window: int) -> int:
    return (window * num_cells + 1) * num_cells


def build_client_dataset(daily: DailyLocationSequence, window: int, test_fraction: float,
                         grid: Grid) -> ClientDataset:
    """Sliding windows of ``window`` cells predicting the next cell.

    The last ``ceil(test_fraction * n)`` examples form the test split.
    Sequences shorter than ``window + 2`` are flagged ineligible.
    """
    if window < 1:
        raise SimulationError(f"window must be >= 1, got {window}")
    if not 0.0 <= test_fraction < 1.0:
        raise SimulationError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    seq = np.array([grid.cell_index(c) for c in daily.cells], dtype=np.int64)
    n = max(seq.size - window, 0)
    if n:
        contexts = np.lib.stride_tricks.sliding_window_view(seq[:-1], window).copy()
    else:
        contexts = np.empty((0, window), dtype=np.int64)
    labels = seq[window:].copy() if n else np.empty(0, dtype=np.int64)
    n_test = math.ceil(test_fraction * n - 1e-12)
    idx = np.arange(n)
    ds = ClientDataset(daily.user_id, contexts, labels, idx[: n - n_test], idx[n - n_test:])
    # a single example is still built, but such clients do not take part in training
    if seq.size < window + 2:
        ds.eligible = False
        ds.reason = f"sequence length {seq.size} < window + 2"
    elif ds.train_idx.size == 0:
        ds.eligible = False
        ds.reason = "no training examples after split"
    return ds


def accuracy(weights: np.ndarray, contexts: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; a tie among k best cells earns 1/k credit if it contains the label."""
    if labels.size == 0:
        return float("nan")
    logits = _kernels.mlr_logits(weights, contexts)
    best = logits.max(axis=1, keepdims=True)
    tied = logits == best
    hit = tied[np.arange(labels.size), labels]
    return float(np.mean(hit / tied.sum(axis=1)))


def loss(weights: np.ndarray, contexts: np.ndarray, labels: np.ndarray) -> float:
    return _kernels.mlr_loss_grad(weights, contexts, labels)[0]


def local_train(params: np.ndarray, ds: ClientDataset, epochs: int, lr: float, seed: int,
                num_cells: int | None = None, round_index: int | None = None) -> ClientUpdate:
    """Full-batch gradient descent on the client's training split.

    ``seed`` is accepted for interface stability; full-batch training draws
    no random numbers.
    """
    del seed
    if not ds.eligible:
        raise SimulationError(f"client {ds.user_id!r} is not eligible: {ds.reason}")
    if lr <= 0:
        raise SimulationError(f"lr must be positive, got {lr}")
    if epochs < 1:
        raise SimulationError(f"epochs must be >= 1, got {epochs}")
    window = ds.contexts.shape[1]
    if num_cells is None:
        num_cells = int(round((-1 + math.sqrt(1 + 4 * window * params.size)) / (2 * window)))
    if param_count(num_cells, window) != params.size:
        raise SimulationError("parameter vector does not match (num_cells, window)")

    w = np.array(params, dtype=np.float64).reshape(window * num_cells + 1, num_cells)
    x, y = ds.train()
    history = []
    for _ in range(epochs):
        cur, grad = _kernels.mlr_loss_grad(w, x, y)
        if not math.isfinite(cur):
            raise SimulationError(f"non-finite loss in round {round_index} for client {ds.user_id!r}")
        history.append(cur)
        w -= lr * grad
    final = loss(w, x, y)
    if not math.isfinite(final):
        raise SimulationError(f"non-finite loss in round {round_index} for client {ds.user_id!r}")
    xt, yt = ds.evaluation()
    return ClientUpdate(ds.user_id, w.ravel(), int(y.size), final, accuracy(w, xt, yt), history)


def aggregation_weights(updates: Sequence[ClientUpdate], strategy: str,
                        group_of: Mapping[str, str] | None = None,
                        pi_of: Mapping[str, float] | None = None,
                        beta: float = PREDICTABILITY_FLOOR) -> np.ndarray:
    if strategy == FEDAVG:
        w = np.array([u.num_samples for u in updates], dtype=np.float64)
    elif strategy == UNIFORM:
        w = np.ones(len(updates))
    elif strategy == GROUP_BALANCED:
        if group_of is None:
            raise SimulationError("group_balanced aggregation needs group labels")
        missing = [u.user_id for u in updates if u.user_id not in group_of]
        if missing:
            raise SimulationError(f"unknown group for clients {missing}")
        labels = [group_of[u.user_id] for u in updates]
        sizes = {g: labels.count(g) for g in set(labels)}
        w = np.array([1.0 / (len(sizes) * sizes[g]) for g in labels])
    elif strategy == PREDICTABILITY:
        if pi_of is None:
            raise SimulationError("predictability_weighted aggregation needs pi_max values")
        pis = np.array([pi_of[u.user_id] for u in updates], dtype=np.float64)
        if np.isnan(pis).any():
            raise SimulationError("pi_max missing for some clients")
        w = (1.0 - pis) + beta
    else:
        raise SimulationError(f"unknown aggregation strategy {strategy!r}; expected one of {AGGREGATIONS}")
    return w / w.sum()


def aggregate(updates: Sequence[ClientUpdate], strategy: str,
              group_of: Mapping[str, str] | None = None,
              pi_of: Mapping[str, float] | None = None,
              beta: float = PREDICTABILITY_FLOOR) -> np.ndarray:
    """Convex combination of client parameter vectors, folded in user-id order."""
    if not updates:
        raise SimulationError("cannot aggregate an empty update list")
    updates = sorted(updates, key=lambda u: u.user_id)
    size = updates[0].new_params.size
    if any(u.new_params.size != size for u in updates):
        raise SimulationError("client updates have different parameter lengths")
    weights = aggregation_weights(updates, strategy, group_of, pi_of, beta)
    stacked = np.stack([u.new_params for u in updates])
    out = np.zeros(size)
    for wi, row in zip(weights, stacked):
        out += wi * row
    # rounding in the weights may push a coordinate an ulp outside the hull
    return np.clip(out, stacked.min(axis=0), stacked.max(axis=0))


def _eligible_registry(registry: ClientRegistry, datasets: Mapping[str, ClientDataset]) -> ClientRegistry:
    recs = []
    for r in registry:
        ds = datasets.get(r.user_id)
        recs.append(type(r)(r.user_id, r.group, r.cluster, r.pi_max, r.record_count,
                            bool(r.eligible and ds is not None and ds.eligible)))
    return ClientRegistry(recs, registry.groups)


def run_simulation(datasets: Mapping[str, ClientDataset], registry: ClientRegistry, cfg: SimConfig,
                   num_cells: int, initial: GlobalModel | None = None) -> SimulationResult:
    """Run ``cfg.rounds`` rounds of select, train locally, aggregate, evaluate.

    The result is a pure function of the datasets, registry and config.
    """
    model = initial or GlobalModel.zeros(num_cells, cfg.window)
    if model.num_cells != num_cells or model.window != cfg.window:
        raise SimulationError("initial model does not match (num_cells, window)")
    reg = _eligible_registry(registry, datasets)
    eligible = reg.eligible()
    if cfg.rounds > 0 and cfg.clients_per_round > len(eligible):
        raise SimulationError(
            f"clients_per_round={cfg.clients_per_round} exceeds {len(eligible)} eligible clients"
        )
    group_of = reg.group_of()
    pi_of = reg.pi_of()
    params = model.params.copy()
    history = []
    for r in range(cfg.rounds):
        chosen = select(cfg.selection_strategy, reg, cfg.clients_per_round,
                        derive_seed(cfg.master_seed, "select", r))
        updates = [
            local_train(params, datasets[u], cfg.epochs, cfg.lr,
                        derive_seed(cfg.master_seed, "train", r, u), num_cells, r)
            for u in chosen
        ]
        params = aggregate(updates, cfg.aggregation_strategy, group_of, pi_of, cfg.beta)
        w = params.reshape(cfg.window * num_cells + 1, num_cells)
        acc = {u: accuracy(w, *datasets[u].evaluation()) for u in eligible}
        xs = np.concatenate([datasets[u].train()[0] for u in chosen])
        ys = np.concatenate([datasets[u].train()[1] for u in chosen])
        history.append(RoundRecord(
            round_index=r,
            selected=list(chosen),
            selection=cfg.selection_strategy,
            aggregation=cfg.aggregation_strategy,
            accuracy=acc,
            train_loss={u.user_id: u.train_loss for u in updates},
            global_loss=loss(w, xs, ys),
        ))
    return SimulationResult(history, GlobalModel(num_cells, cfg.window, params))


def read_rounds(data: bytes | str) -> list[RoundRecord]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    return [RoundRecord.from_json(line) for line in text.splitlines() if line.strip()]
