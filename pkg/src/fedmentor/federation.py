"""Server state machine: broadcast, train, privatize, aggregate, gate, decay.

One round executes, in order: broadcast the global adapters to every client
(bytes counted per recipient), train each client locally in parallel,
privatize each update under the client's domain budget, upload (bytes
counted per payload), aggregate with dataset-size weights, evaluate utility
proxies on the server-held validation pool, apply the utility gate, and
decay the budgets. Aggregation always consumes results sorted by client id,
so neither worker scheduling nor client declaration order can change a
single bit of the outcome.

The worker pool size is capped by the ``FEDMENTOR_THREADS`` environment
variable.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import metrics as metrics_mod
from .dp import (
    BudgetTable,
    NoiseCalibration,
    apply_utility_gate,
    decay_budget,
    privatize,
    privatize_static,
)
from .linalg import Matrix, Rng, ShapeError
from .lora import AdapterSet, LoraPair, merge_delta, serialize
from .trainer import BackboneModel, ClientState, forward_batch, train_local

__all__ = [
    "PrivacyStrategy",
    "STRATEGY_KINDS",
    "ServerState",
    "SimChannel",
    "ClientRoundStats",
    "RoundRecord",
    "RoundError",
    "aggregate",
    "run_round",
    "run_training",
    "global_model",
    "write_metrics_csv",
    "write_summary_json",
    "adapters_sha256",
    "bytes_to_mb",
    "BYTES_PER_MB",
]

BYTES_PER_MB = 1024 * 1024

STRATEGY_KINDS = ("domain_aware", "uniform", "static_noise", "utility_threshold", "off")


def bytes_to_mb(n_bytes: int) -> float:
    return n_bytes / BYTES_PER_MB


@dataclass(frozen=True)
class PrivacyStrategy:
    """Which privatization variant a run uses.

    domain_aware      per-domain budgets, utility gate, budget decay
    uniform           same mechanics over a single global budget (eps_glob)
    static_noise      fixed std ``sigma`` for every parameter; no adaptation
    utility_threshold domain_aware with every threshold forced to ``tau``
    off               no noise, no gate, no decay (plain FedAvg)
    """

    kind: str = "domain_aware"
    eps_glob: float | None = None
    sigma: float | None = None
    tau: float | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.kind == "uniform" and (self.eps_glob is None or self.eps_glob <= 0):
            raise ValueError("uniform strategy requires eps_glob > 0")
        if self.kind == "static_noise" and (self.sigma is None or self.sigma < 0):
            raise ValueError("static_noise strategy requires sigma >= 0")
        if self.kind == "utility_threshold" and self.tau is None:
            raise ValueError("utility_threshold strategy requires tau")

    @property
    def adaptive(self) -> bool:
        """True when the gate and budget decay are active."""
        return self.kind in ("domain_aware", "uniform", "utility_threshold")


@dataclass(frozen=True)
class ServerState:
    backbone: BackboneModel
    global_adapters: AdapterSet
    budgets: BudgetTable
    calibration: NoiseCalibration
    thresholds: Mapping[str, float]
    strategy: PrivacyStrategy = PrivacyStrategy()
    round_index: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "thresholds", dict(self.thresholds))


@dataclass
class SimChannel:
    """Byte counters for the simulated network, plus injectable failures."""

    broadcast_bytes: int = 0
    upload_bytes: int = 0
    failures: set = field(default_factory=set)  # {(round, client_id)}

    def fail(self, round_number: int, client_id: int) -> None:
        self.failures.add((round_number, client_id))

    def is_failed(self, round_number: int, client_id: int) -> bool:
        return (round_number, client_id) in self.failures

    def record_broadcast(self, payload_len: int, n_recipients: int) -> None:
        self.broadcast_bytes += payload_len * n_recipients

    def record_upload(self, payload_len: int) -> None:
        self.upload_bytes += payload_len

    @property
    def total_bytes(self) -> int:
        return self.broadcast_bytes + self.upload_bytes


@dataclass(frozen=True)
class ClientRoundStats:
    client_id: int
    train_loss: float
    eval_loss: float
    payload_bytes: int
    wall_time: float


@dataclass(frozen=True)
class RoundRecord:
    round: int  # 1-based
    per_client: tuple[ClientRoundStats, ...]
    avg_train_loss: float
    avg_eval_loss: float
    broadcast_bytes: int
    upload_bytes: int
    total_comm_bytes: int
    utilities: Mapping[str, float]
    gate_triggered: bool
    scale_multiplier: float
    budgets: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "utilities", dict(self.utilities))
        object.__setattr__(self, "budgets", dict(self.budgets))


class RoundError(RuntimeError):
    """A round failed; the message carries the 1-based round number."""


def aggregate(updates: Sequence[AdapterSet], train_sizes: Sequence[int]) -> AdapterSet:
    """Dataset-weighted FedAvg: per-matrix convex combination of updates.

    Weights are train_sizes normalized to sum to one; every A and B matrix is
    averaged independently, accumulating in list order.
    """
    if len(updates) == 0:
        raise ValueError("aggregate needs at least one update")
    if len(updates) != len(train_sizes):
        raise ValueError(
            f"{len(updates)} updates but {len(train_sizes)} sizes"
        )
    for size in train_sizes:
        if size <= 0:
            raise ValueError(f"train sizes must be positive, got {size}")
    first = updates[0]
    for u in updates[1:]:
        if not first.conformable_with(u):
            raise ShapeError("updates are not conformable")
    # Identical updates are returned verbatim: a convex combination of equal
    # points is that point, and rounding the weighted sum must not break it.
    if all(u == first for u in updates[1:]):
        return first
    total = float(sum(train_sizes))
    weights = [s / total for s in train_sizes]
    assert abs(sum(weights) - 1.0) < 1e-12

    pairs = []
    for li, pair in enumerate(first.pairs):
        acc_a = weights[0] * pair.a.array
        acc_b = weights[0] * pair.b.array
        for u, w in zip(updates[1:], weights[1:]):
            acc_a = acc_a + w * u.pairs[li].a.array
            acc_b = acc_b + w * u.pairs[li].b.array
        pairs.append(LoraPair(pair.layer_index, Matrix(acc_a), Matrix(acc_b)))
    return AdapterSet(tuple(pairs), first.total_layers)


def _worker_count(n_clients: int) -> int:
    cap = os.environ.get("FEDMENTOR_THREADS")
    if cap is not None:
        return max(1, int(cap))
    return max(1, min(n_clients, os.cpu_count() or 1, 4))


def _train_one(client: ClientState, global_adapters: AdapterSet, seed: int, round_number: int):
    rng = Rng(seed).derive("client", client.id, "round", round_number)
    return train_local(client, global_adapters, rng)


def _privatized(
    server: ServerState, client: ClientState, update: AdapterSet, round_number: int
) -> AdapterSet:
    strategy = server.strategy
    if strategy.kind == "off":
        return update
    rng = Rng(server.rng_seed).derive("privatize", client.id, "round", round_number)
    if strategy.kind == "static_noise":
        return privatize_static(update, strategy.sigma, rng)
    return privatize(update, client.domain, server.budgets, server.calibration, rng)


def _validate_clients(server: ServerState, clients: Sequence[ClientState]) -> list[ClientState]:
    ordered = sorted(clients, key=lambda c: c.id)
    ids = [c.id for c in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids: {ids}")
    if server.strategy.kind not in ("off", "static_noise"):
        for c in ordered:
            server.budgets.epsilon(c.domain)  # raises UnknownDomainError
    return ordered


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    channel: SimChannel,
) -> tuple[ServerState, RoundRecord]:
    """Execute one federated round and return the advanced server state."""
    ordered = _validate_clients(server, clients)
    round_number = server.round_index + 1

    broadcast_blob = serialize(server.global_adapters)
    channel.record_broadcast(len(broadcast_blob), len(ordered))
    broadcast_bytes = len(broadcast_blob) * len(ordered)

    responders = [c for c in ordered if not channel.is_failed(round_number, c.id)]
    if not responders:
        raise ValueError(f"all clients failed in round {round_number}")

    workers = _worker_count(len(responders))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trained = list(
                pool.map(
                    lambda c: _train_one(c, server.global_adapters, server.rng_seed, round_number),
                    responders,
                )
            )
    else:
        trained = [
            _train_one(c, server.global_adapters, server.rng_seed, round_number)
            for c in responders
        ]

    per_client = []
    updates = []
    sizes = []
    upload_bytes = 0
    for client, (update, stats) in zip(responders, trained):
        noised = _privatized(server, client, update, round_number)
        payload = serialize(noised)
        channel.record_upload(len(payload))
        upload_bytes += len(payload)
        updates.append(noised)
        sizes.append(client.data.n_train)
        per_client.append(
            ClientRoundStats(
                client_id=client.id,
                train_loss=stats.final_train_loss,
                eval_loss=stats.final_eval_loss,
                payload_bytes=len(payload),
                wall_time=stats.wall_time,
            )
        )

    # Dropped clients are simply excluded; weights renormalize over responders.
    new_global = aggregate(updates, sizes)

    pool_datasets = [c.data for c in ordered]
    view = lambda xs: forward_batch(server.backbone, new_global, xs)  # noqa: E731
    report = metrics_mod.evaluate(view, pool_datasets)

    if server.strategy.adaptive:
        new_cal, gate_triggered = apply_utility_gate(
            server.calibration, report.per_metric, server.thresholds
        )
        new_budgets = decay_budget(server.budgets)
    else:
        new_cal, gate_triggered = server.calibration, False
        new_budgets = server.budgets

    record = RoundRecord(
        round=round_number,
        per_client=tuple(per_client),
        avg_train_loss=float(np.mean([c.train_loss for c in per_client])),
        avg_eval_loss=float(np.mean([c.eval_loss for c in per_client])),
        broadcast_bytes=broadcast_bytes,
        upload_bytes=upload_bytes,
        total_comm_bytes=broadcast_bytes + upload_bytes,
        utilities=report.per_metric,
        gate_triggered=gate_triggered,
        scale_multiplier=new_cal.scale_multiplier,
        budgets=dict(new_budgets.entries),
    )
    new_server = replace(
        server,
        global_adapters=new_global,
        budgets=new_budgets,
        calibration=new_cal,
        round_index=round_number,
    )
    return new_server, record


def run_training(
    server: ServerState,
    clients: Sequence[ClientState],
    rounds: int,
    channel: SimChannel | None = None,
) -> tuple[ServerState, list[RoundRecord], SimChannel]:
    """Run ``rounds`` sequential federated rounds from the given state."""
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if channel is None:
        channel = SimChannel()
    records: list[RoundRecord] = []
    for _ in range(rounds):
        round_number = server.round_index + 1
        try:
            server, record = run_round(server, clients, channel)
        except Exception as exc:
            raise RoundError(f"round {round_number}: {exc}") from exc
        records.append(record)
    return server, records, channel


def global_model(server: ServerState) -> list[Matrix]:
    """Effective per-layer weights: frozen backbone plus merged adapter deltas."""
    merged = []
    for w, pair in zip(server.backbone.layers, server.global_adapters.pairs):
        merged.append(Matrix(w.array + merge_delta(pair).array))
    return merged


# ---------------------------- artifact emission ---------------------------- #

def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv_lines(records: Sequence[RoundRecord]) -> list[str]:
    """Fixed-column CSV rows, one per round.

    Columns: round, per-client train/eval losses (client ids sorted), comm
    byte counters, utilities, gate flag, scale multiplier, per-domain budgets
    (domains sorted). Floats are written with ``repr`` so equal runs produce
    byte-equal files.
    """
    if not records:
        raise ValueError("no records to format")
    client_ids = sorted({c.client_id for r in records for c in r.per_client})
    domains = sorted(records[0].budgets)
    header = ["round"]
    for cid in client_ids:
        header += [f"client{cid}_train_loss", f"client{cid}_eval_loss"]
    header += ["broadcast_bytes", "upload_bytes", "total_comm_bytes"]
    header += list(metrics_mod.METRIC_NAMES)
    header += ["gate_triggered", "scale_multiplier"]
    header += [f"budget_{d}" for d in domains]

    lines = [",".join(header)]
    for rec in records:
        by_id = {c.client_id: c for c in rec.per_client}
        row = [str(rec.round)]
        for cid in client_ids:
            stats = by_id.get(cid)
            row += ["", ""] if stats is None else [_fmt(stats.train_loss), _fmt(stats.eval_loss)]
        row += [str(rec.broadcast_bytes), str(rec.upload_bytes), str(rec.total_comm_bytes)]
        row += [_fmt(rec.utilities[m]) for m in metrics_mod.METRIC_NAMES]
        row += [_fmt(rec.gate_triggered), _fmt(rec.scale_multiplier)]
        row += [_fmt(rec.budgets[d]) for d in domains]
        lines.append(",".join(row))
    return lines


def write_metrics_csv(records: Sequence[RoundRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(metrics_csv_lines(records)) + "\n")


def adapters_sha256(adapters: AdapterSet) -> str:
    import hashlib

    return hashlib.sha256(serialize(adapters)).hexdigest()


def write_summary_json(
    path,
    config_echo: Mapping,
    final_adapters: AdapterSet,
    records: Sequence[RoundRecord],
) -> None:
    summary = {
        "config": config_echo,
        "final_adapters_sha256": adapters_sha256(final_adapters),
        "rounds_completed": len(records),
        "total_comm_bytes": sum(r.total_comm_bytes for r in records),
        "final_utilities": dict(records[-1].utilities) if records else {},
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
