"""Reference training paths that bypass the privacy engine entirely.

``run_plain_fedavg`` is a from-first-principles FedAvg loop: broadcast,
sequential local training, dataset-weighted averaging, utility evaluation.
It never imports the privacy machinery, so it serves both as the
"FL without DP" baseline of ablation runs and as the oracle that the full
pipeline must match bit-for-bit when noise is disabled.

``run_centralized_sgd`` is the degenerate single-owner loop: plain minibatch
SGD over one dataset using the same per-round/per-epoch stream derivation,
with no federation machinery at all. A one-client federated run with noise
off must reproduce it exactly.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import metrics as metrics_mod
from .federation import ClientRoundStats, RoundRecord, SimChannel
from .linalg import Matrix, Rng
from .lora import AdapterSet, LoraPair, serialize
from .trainer import (
    BackboneModel,
    ClientState,
    forward_batch,
    grad_adapters,
    mean_loss,
    train_local,
)

__all__ = ["run_plain_fedavg", "run_centralized_sgd"]


def _weighted_mean(sets: Sequence[AdapterSet], sizes: Sequence[int]) -> AdapterSet:
    # Same convexity fixed point the pipeline aggregator honors.
    if all(s == sets[0] for s in sets[1:]):
        return sets[0]
    total = float(sum(sizes))
    weights = [s / total for s in sizes]
    pairs = []
    for li, pair in enumerate(sets[0].pairs):
        acc_a = weights[0] * pair.a.array
        acc_b = weights[0] * pair.b.array
        for u, w in zip(sets[1:], weights[1:]):
            acc_a = acc_a + w * u.pairs[li].a.array
            acc_b = acc_b + w * u.pairs[li].b.array
        pairs.append(LoraPair(pair.layer_index, Matrix(acc_a), Matrix(acc_b)))
    return AdapterSet(tuple(pairs), sets[0].total_layers)


def run_plain_fedavg(
    backbone: BackboneModel,
    clients: Sequence[ClientState],
    initial_adapters: AdapterSet,
    seed: int,
    rounds: int,
    budgets_echo: Mapping[str, float],
    channel: SimChannel | None = None,
) -> tuple[AdapterSet, list[RoundRecord], SimChannel]:
    """Plain dataset-weighted FedAvg with no noise, no gate, no decay.

    ``budgets_echo`` is copied verbatim into every round record so the
    emitted metrics line up column-for-column with a noise-off pipeline run.
    """
    ordered = sorted(clients, key=lambda c: c.id)
    if channel is None:
        channel = SimChannel()
    global_adapters = initial_adapters
    records: list[RoundRecord] = []

    for round_number in range(1, rounds + 1):
        blob = serialize(global_adapters)
        channel.record_broadcast(len(blob), len(ordered))
        broadcast_bytes = len(blob) * len(ordered)

        updates, sizes, per_client = [], [], []
        upload_bytes = 0
        for client in ordered:
            rng = Rng(seed).derive("client", client.id, "round", round_number)
            update, stats = train_local(client, global_adapters, rng)
            payload = serialize(update)
            channel.record_upload(len(payload))
            upload_bytes += len(payload)
            updates.append(update)
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

        global_adapters = _weighted_mean(updates, sizes)
        view = lambda xs: forward_batch(backbone, global_adapters, xs)  # noqa: E731
        report = metrics_mod.evaluate(view, [c.data for c in ordered])

        records.append(
            RoundRecord(
                round=round_number,
                per_client=tuple(per_client),
                avg_train_loss=float(np.mean([c.train_loss for c in per_client])),
                avg_eval_loss=float(np.mean([c.eval_loss for c in per_client])),
                broadcast_bytes=broadcast_bytes,
                upload_bytes=upload_bytes,
                total_comm_bytes=broadcast_bytes + upload_bytes,
                utilities=report.per_metric,
                gate_triggered=False,
                scale_multiplier=1.0,
                budgets=dict(budgets_echo),
            )
        )
    return global_adapters, records, channel


def run_centralized_sgd(
    client: ClientState,
    initial_adapters: AdapterSet,
    seed: int,
    rounds: int,
) -> AdapterSet:
    """Direct minibatch SGD over one client's data, no federation machinery.

    Streams are derived the same way the protocol derives them — per
    (seed, client, round) and per epoch — so this is the exact computation a
    single-client federation performs, minus broadcast/aggregate.
    """
    adapters = initial_adapters
    xs, ys = client.data.train_x, client.data.train_y
    n = xs.shape[0]
    lr = client.learning_rate
    for round_number in range(1, rounds + 1):
        rng = Rng(seed).derive("client", client.id, "round", round_number)
        for epoch in range(client.local_epochs):
            order = rng.derive("epoch", epoch, "shuffle").permutation(n)
            for start in range(0, n, client.batch_size):
                batch = order[start : start + client.batch_size]
                grads = grad_adapters(client.model, adapters, xs[batch], ys[batch])
                pairs = []
                for p, g in zip(adapters.pairs, grads.pairs):
                    pairs.append(
                        LoraPair(
                            p.layer_index,
                            Matrix(p.a.array - lr * g.a.array),
                            Matrix(p.b.array - lr * g.b.array),
                        )
                    )
                adapters = AdapterSet(tuple(pairs), adapters.total_layers)
    return adapters


def centralized_final_loss(client: ClientState, adapters: AdapterSet) -> float:
    return mean_loss(client.model, adapters, client.data.train_x, client.data.train_y)
