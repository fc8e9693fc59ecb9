"""Failure-injecting training loop for a split, personalized model.

Each client owns the layers below its cut; the server holds the rest,
split at the population max cut into a per-client personalized block and
a common block. Upload, download, and aggregation failures are Bernoulli
draws; every surviving update is scaled by the inverse survival
probability, which keeps each step unbiased in expectation.

Aggregation composes the literal weighted-mean operations on deltas from
a shared base rather than on raw parameter vectors. The sampled weights
m_i/q_i average to one only in expectation; applied to raw vectors they
rescale the whole model by that round's random total, and the training
signal drowns in multiplicative noise. Applied to deltas, the noise lands
on the (small) per-round updates instead, and the failure-free,
single-client configuration reduces exactly to centralized SGD.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .latency import LatencyProfile, expected_round_latency
from .model import draw_batch
from .types import ClientProfile, Population, SamplingPlan, ValidationError

Shard = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class RoundRecord:
    """One training round: who was sampled, what failed, how it went."""

    round: int
    loss: float
    grad_norm_sq: float
    sampled: tuple[int, ...]
    upload_ok: tuple[bool, ...]
    download_ok: tuple[bool, ...]
    aggregate_ok: tuple[bool, ...]
    latency: float
    discrepancy: tuple[float, ...] | None = None


@dataclass(frozen=True)
class SimulationTrace:
    """Per-round records plus the virtual aggregate the run ended on."""

    rounds: tuple[RoundRecord, ...]
    final_loss: float
    final_params: tuple[float, ...]

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rounds])

    def to_text(self) -> str:
        """Tab-separated rows; failure flags as bitstrings over occurrences."""
        lines = [
            "round\tloss\tgrad_norm_sq\tsampled\tupload_ok\tdownload_ok"
            "\taggregate_ok\tlatency"
        ]
        for rec in self.rounds:
            bits = lambda flags: "".join("1" if f else "0" for f in flags)
            lines.append(
                f"{rec.round}\t{rec.loss!r}\t{rec.grad_norm_sq!r}\t"
                + ",".join(str(i) for i in rec.sampled)
                + f"\t{bits(rec.upload_ok)}\t{bits(rec.download_ok)}"
                f"\t{bits(rec.aggregate_ok)}\t{rec.latency!r}"
            )
        return "\n".join(lines) + "\n"


class FailureSampler:
    """Independent per-(client, kind) Bernoulli streams.

    Every stream advances exactly once per round for every client, sampled
    or not, so a realization depends only on (seed, client, kind, round),
    never on who else participated or in what order work was done.
    """

    _KINDS = ("upload", "download", "aggregate")

    def __init__(self, seed: int | np.random.SeedSequence, num_clients: int):
        root = (
            seed
            if isinstance(seed, np.random.SeedSequence)
            else np.random.SeedSequence(seed)
        )
        children = root.spawn(num_clients * len(self._KINDS))
        self._streams = [
            np.random.Generator(np.random.PCG64(child)) for child in children
        ]
        self._num_clients = num_clients

    def draw_round(
        self, clients: Sequence[ClientProfile]
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(upload_ok, download_ok, aggregate_ok) over all clients."""
        if len(clients) != self._num_clients:
            raise ValidationError("sampler built for a different population")
        fail_probs = (
            [c.upload_fail for c in clients],
            [c.download_fail for c in clients],
            [c.aggregate_fail for c in clients],
        )
        out = []
        for kind, probs in enumerate(fail_probs):
            draws = np.array(
                [
                    self._streams[i * len(self._KINDS) + kind].uniform()
                    for i in range(self._num_clients)
                ]
            )
            out.append(draws >= np.asarray(probs))
        return out[0], out[1], out[2]


def sample_clients(
    q: Sequence[float], count: int, rng: np.random.Generator
) -> tuple[int, ...]:
    """Draw a multiset of client ids: count categorical draws from q."""
    probs = np.asarray(q, dtype=float)
    probs = probs / probs.sum()
    draws = rng.choice(len(probs), size=count, replace=True, p=probs)
    return tuple(int(i) + 1 for i in draws)


def client_side_step(
    client: ClientProfile,
    block: np.ndarray,
    gradient: np.ndarray,
    upload_ok: bool,
    download_ok: bool,
    learning_rate: float,
) -> np.ndarray:
    """Device-side update: survives only if both directions succeeded."""
    if not (upload_ok and download_ok):
        return block
    scale = 1.0 / ((1.0 - client.upload_fail) * (1.0 - client.download_fail))
    return block - learning_rate * scale * gradient


def server_side_step(
    client: ClientProfile,
    block: np.ndarray,
    gradient: np.ndarray,
    upload_ok: bool,
    learning_rate: float,
) -> np.ndarray:
    """Server-side update: needs only the upload to have succeeded."""
    if not upload_ok:
        return block
    scale = 1.0 / (1.0 - client.upload_fail)
    return block - learning_rate * scale * gradient


def aggregate_common(
    blocks: Mapping[int, np.ndarray],
    multiset: Sequence[int],
    clients: Sequence[ClientProfile],
    plan: SamplingPlan,
) -> np.ndarray:
    """Weighted mean over sampled occurrences: (1/K) sum (m/q) block."""
    total = None
    for cid in multiset:
        client = clients[cid - 1]
        contribution = (client.weight / plan.q[cid - 1]) * blocks[cid]
        total = contribution if total is None else total + contribution
    if total is None:
        raise ValidationError("empty multiset")
    return total / len(multiset)


def forge_personal_block(
    client: ClientProfile,
    block: np.ndarray,
    device_size: int,
    aggregate_ok: bool,
) -> np.ndarray:
    """Replace the device-held prefix by its inverse-probability estimate.

    A failed transfer contributes a zero prefix; a successful one is scaled
    up so the expectation matches the true block.
    """
    forged = block.copy()
    scale = (1.0 if aggregate_ok else 0.0) / (1.0 - client.aggregate_fail)
    forged[:device_size] *= scale
    return forged


def aggregate_client_specific(
    blocks: Mapping[int, np.ndarray],
    device_sizes: Mapping[int, int],
    aggregate_ok: Mapping[int, bool],
    multiset: Sequence[int],
    clients: Sequence[ClientProfile],
    plan: SamplingPlan,
) -> np.ndarray:
    """Forge each sampled block, then take the same weighted mean."""
    forged = {
        cid: forge_personal_block(
            clients[cid - 1], blocks[cid], device_sizes[cid], aggregate_ok[cid]
        )
        for cid in set(multiset)
    }
    return aggregate_common(forged, multiset, clients, plan)


def run_training(
    population: Population,
    plan: SamplingPlan,
    shards: Sequence[Shard],
    model_factory: Callable[[np.random.Generator], object],
    seed: int,
    batch_size: int = 32,
    profile: LatencyProfile | None = None,
    record_discrepancy: bool = False,
    sampler: Callable[[np.random.Generator], tuple[int, ...]] | None = None,
) -> SimulationTrace:
    """Train for the configured number of rounds and record a trace.

    The sampled client set is held fixed within each aggregation window.
    The common block is aggregated every round; personalized blocks are
    forged and aggregated at window ends, then broadcast to everyone. The
    reported loss is the weighted per-client loss of the virtual aggregate
    (base plus weighted mean of forged deltas), the iterate the analysis
    tracks. Deterministic given the seed.

    A ``sampler`` callable replaces the categorical draw at each window
    start (deterministic schedules like round-robin still aggregate with
    the plan's m/q weights); it must return ids in 1..N.

    Randomness is split into four child streams of ``SeedSequence(seed)``,
    in order: model initialization, client sampling, per-client batches
    (one grandchild per client), and failure draws.
    """
    system = population.system
    clients = population.clients
    n = len(clients)
    if len(shards) != n:
        raise ValidationError(f"{len(shards)} shards for {n} clients")
    if len(plan.q) != n:
        raise ValidationError("plan and population disagree on client count")
    max_cut = plan.max_cut
    gamma = system.learning_rate
    k = system.sampled_per_round
    interval = system.agg_interval

    root = np.random.SeedSequence(seed)
    init_seq, sample_seq, batch_seq, failure_seq = root.spawn(4)
    init_rng = np.random.Generator(np.random.PCG64(init_seq))
    sample_rng = np.random.Generator(np.random.PCG64(sample_seq))
    batch_rngs = [
        np.random.Generator(np.random.PCG64(child))
        for child in batch_seq.spawn(n)
    ]
    failures = FailureSampler(failure_seq, n)

    template = model_factory(init_rng)
    num_layers = template.num_layers
    if max_cut > num_layers:
        raise ValidationError("plan max cut exceeds the model's layers")
    personal_slice = template.block_slice(1, max_cut)
    common_slice = (
        template.block_slice(max_cut + 1, num_layers)
        if max_cut < num_layers
        else slice(0, 0)
    )
    device_sizes = {
        i + 1: template.block_slice(1, cut).stop
        for i, cut in enumerate(plan.cut_layers)
    }
    layer_slices = [template.layer_slice(j) for j in range(1, num_layers + 1)]

    members = [template.params.copy() for _ in range(n)]
    personal_base = template.params[personal_slice].copy()

    weights = np.array([c.weight for c in clients])
    latency = (
        expected_round_latency(plan, clients, profile, system)
        if profile is not None
        else 0.0
    )

    def weighted_loss(params: np.ndarray) -> float:
        scratch = template.copy()
        scratch.params[:] = params
        return sum(
            float(w) * scratch.loss(x, y)
            for w, (x, y) in zip(weights, shards)
        )

    records: list[RoundRecord] = []
    multiset: tuple[int, ...] = ()
    for round_no in range(1, system.total_rounds + 1):
        if (round_no - 1) % interval == 0:
            if sampler is None:
                multiset = sample_clients(plan.q, k, sample_rng)
            else:
                multiset = tuple(sampler(sample_rng))
                if len(multiset) != k or not all(
                    1 <= cid <= n for cid in multiset
                ):
                    raise ValidationError(
                        f"sampler returned an invalid multiset {multiset!r}"
                    )
        upload_ok, download_ok, aggregate_ok = failures.draw_round(clients)
        participants = sorted(set(multiset))
        common_base = members[participants[0] - 1][common_slice].copy()

        agg_gradient = np.zeros_like(template.params)
        for cid in participants:
            i = cid - 1
            client = clients[i]
            points, labels = shards[i]
            batch = draw_batch(batch_rngs[i], len(labels), batch_size)
            scratch = template.copy()
            scratch.params[:] = members[i]
            _, grads = scratch.loss_and_layer_grads(points[batch], labels[batch])
            cut = plan.cut_layers[i]
            scaled = np.zeros_like(template.params)
            for j, grad in enumerate(grads, start=1):
                sl = layer_slices[j - 1]
                if j <= cut:
                    members[i][sl] = client_side_step(
                        client, members[i][sl], grad,
                        bool(upload_ok[i]), bool(download_ok[i]), gamma,
                    )
                    if upload_ok[i] and download_ok[i]:
                        scaled[sl] = grad / (
                            (1.0 - client.upload_fail)
                            * (1.0 - client.download_fail)
                        )
                else:
                    members[i][sl] = server_side_step(
                        client, members[i][sl], grad, bool(upload_ok[i]), gamma
                    )
                    if upload_ok[i]:
                        scaled[sl] = grad / (1.0 - client.upload_fail)
            occurrences = multiset.count(cid)
            agg_gradient += (
                occurrences * (client.weight / plan.q[i]) / k
            ) * scaled

        # Common block: weighted mean of per-occurrence deltas, shared back
        # to every member immediately (it lives on the server).
        if common_slice.stop > common_slice.start:
            deltas = {
                cid: members[cid - 1][common_slice] - common_base
                for cid in participants
            }
            new_common = common_base + aggregate_common(
                deltas, multiset, clients, plan
            )
            for vec in members:
                vec[common_slice] = new_common

        # Trace iterate: the importance-weighted aggregate of the sampled
        # member models, taken before any window-end broadcast.
        aggregated = aggregate_common(
            {cid: members[cid - 1] for cid in participants},
            multiset, clients, plan,
        )
        loss = weighted_loss(aggregated)

        # Personalized block: virtual forged aggregate, anchored at the
        # window base. The transfer flag zeroes or rescales each client's
        # progress within the window, never the block itself, so a failed
        # transfer contributes staleness rather than a hole in the model.
        # At window ends the aggregate is materialized and broadcast,
        # becoming the next window's base.
        forged_deltas = {
            cid: forge_personal_block(
                clients[cid - 1],
                members[cid - 1][personal_slice] - personal_base,
                device_sizes[cid],
                bool(aggregate_ok[cid - 1]),
            )
            for cid in participants
        }
        virtual_personal = personal_base + aggregate_common(
            forged_deltas, multiset, clients, plan
        )
        if round_no % interval == 0:
            for vec in members:
                vec[personal_slice] = virtual_personal
            personal_base = virtual_personal.copy()

        discrepancy = None
        if record_discrepancy:
            discrepancy = tuple(
                float(np.sum((vec[personal_slice] - virtual_personal) ** 2))
                for vec in members
            )
        records.append(
            RoundRecord(
                round=round_no,
                loss=loss,
                grad_norm_sq=float(np.sum(agg_gradient**2)),
                sampled=multiset,
                upload_ok=tuple(bool(upload_ok[cid - 1]) for cid in multiset),
                download_ok=tuple(
                    bool(download_ok[cid - 1]) for cid in multiset
                ),
                aggregate_ok=tuple(
                    bool(aggregate_ok[cid - 1]) for cid in multiset
                ),
                latency=latency,
                discrepancy=discrepancy,
            )
        )
    return SimulationTrace(
        rounds=tuple(records),
        final_loss=records[-1].loss if records else 0.0,
        final_params=tuple(float(v) for v in aggregated),
    )
