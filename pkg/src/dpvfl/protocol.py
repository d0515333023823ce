"""Round orchestration: passive-party release pipelines, active-party
aggregation, gradient exchange, and local updates.

Each communication round runs, in order:

1. every passive party embeds its mini-batch, clips row norms to ``t``,
   (optionally) estimates its local output disparity and rescales, adds
   calibrated noise, and shares the result;
2. the active party concatenates the shared embeddings in ascending party
   id order, optimizes the supervised loss, updates its head, and returns
   each party's embedding gradient;
3. every passive party derives weak cluster labels from its returned
   gradients (optional), evaluates the auxiliary losses on its private
   pre-noise (clipped, then rescaled) embeddings, and takes an SGD step.

Only post-noise embeddings and gradients ever cross a party boundary; the
message channel keeps a log so tests can audit that.
"""

from __future__ import annotations

import time
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field

import numpy as np

from .adaptive import (
    SensitivityEstimate,
    contrastive_loss,
    estimate_local_sensitivity,
    fcm,
    histogram_kl_to_gaussian,
    kl_surrogate_loss,
    purity,
    rescale,
    rescale_factor,
)
from .data import DatasetSplits, VerticalDataset
from .errors import ArgumentError, InsufficientRetainedError, ProtocolError
from .mechanism import PrivacyParams, add_noise, clip_norm, clip_norm_vjp
from .neural import DenseNet, TrainingConfig, cross_entropy_softmax, sgd_step
from .numerics import Rng, pairwise_distances

EMBEDDING_UP = "embedding_up"
GRADIENT_DOWN = "gradient_down"


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class EmbeddingUp:
    """Upstream payload: one party's released (post-noise) embedding batch."""

    party_id: int
    batch_index: int
    embeddings: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "embeddings", _frozen_array(self.embeddings))

    kind = EMBEDDING_UP


@dataclass(frozen=True)
class GradientDown:
    """Downstream payload: the loss gradient for one party's shared batch."""

    party_id: int
    batch_index: int
    grad: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "grad", _frozen_array(self.grad))

    kind = GRADIENT_DOWN


class MessageChannel:
    """In-process exchange with the same schema a socket transport would carry.

    Messages are immutable snapshots; everything sent stays in ``log`` so a
    test spy can audit boundary hygiene.
    """

    def __init__(self):
        self._queues: dict[tuple[str, int, int], list] = {}
        self.log: list = []

    def send(self, message) -> None:
        key = (message.kind, message.party_id, message.batch_index)
        self._queues.setdefault(key, []).append(message)
        self.log.append(message)

    def receive(self, kind: str, party_id: int, batch_index: int):
        queue = self._queues.get((kind, party_id, batch_index))
        if not queue:
            raise ProtocolError(
                f"no {kind} message from/for party {party_id} in round {batch_index}"
            )
        return queue.pop(0)


class StageTimer:
    """Wall-clock accumulator for the pipeline stage breakdown."""

    BASE = "base"
    NOISE = "noise"
    RESCALE = "rescale"
    DIST_ADJUST = "dist_adjust"

    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - start


def _stage(timer: StageTimer | None, name: str):
    return timer.stage(name) if timer is not None else nullcontext()


@dataclass(frozen=True)
class AdaptiveConfig:
    """Per-party switches and knobs for the utility-recovery techniques."""

    rescale: bool = False
    dist_adjust: bool = False
    p2: float = 0.9987
    confidence_threshold: float = 0.8
    n_clusters: int = 2
    fuzzifier: float = 2.0
    fcm_max_iter: int = 100
    fcm_tol: float = 1e-5
    kl_diagnostic: str = "moment"

    def __post_init__(self):
        if self.kl_diagnostic not in ("moment", "histogram"):
            raise ArgumentError(f"unknown kl_diagnostic {self.kl_diagnostic!r}")


@dataclass
class ReleaseTrace:
    """Private per-round buffers of a passive party's pipeline.

    ``adjusted`` is the pre-noise state the auxiliary losses see: the
    clipped batch after the (optional) rescale step.
    """

    batch_index: int
    raw: np.ndarray
    clipped: np.ndarray
    estimate: SensitivityEstimate | None
    factor: float
    adjusted: np.ndarray
    released: np.ndarray
    stages: tuple[str, ...]


@dataclass
class PartyRoundStats:
    delta_local: float | None = None
    purity: float | None = None
    retained: int | None = None
    kl_loss: float | None = None
    cl_loss: float | None = None


class PassiveParty:
    """Feature-holding participant: extractor + release pipeline + local update.

    Holds its raw feature slice and never sees labels. ``protected=False``
    models the unprotected baseline that shares raw embeddings.
    """

    def __init__(
        self,
        party_id: int,
        features: np.ndarray,
        extractor: DenseNet,
        config: TrainingConfig,
        privacy: PrivacyParams | None = None,
        adaptive: AdaptiveConfig | None = None,
        rng: Rng | None = None,
        sigma_override: float | None = None,
    ):
        if privacy is None and adaptive is not None and (adaptive.rescale or adaptive.dist_adjust):
            raise ArgumentError("adaptive adjustments require the privacy mechanism")
        self.party_id = int(party_id)
        self.features = features
        self.extractor = extractor
        self.config = config
        self.privacy = privacy
        self.adaptive = adaptive or AdaptiveConfig()
        self.sigma_override = sigma_override
        root = rng if rng is not None else Rng(config.seed)
        self._noise_rng = root.split("noise", self.party_id)
        self._fcm_rng = root.split("fcm", self.party_id)
        self._trace: ReleaseTrace | None = None
        self.round_index = -1

    @property
    def protected(self) -> bool:
        return self.privacy is not None

    @property
    def embedding_dim(self) -> int:
        return self.extractor.output_dim

    def begin_round(self, round_index: int) -> None:
        self.round_index = round_index
        self._trace = None

    def compute_release(
        self,
        x: np.ndarray,
        noise_rng: Rng,
        batch_index: int = -1,
        timer: StageTimer | None = None,
    ) -> ReleaseTrace:
        """Run forward -> clip -> estimate/rescale -> noise and keep buffers."""
        stages = []
        with _stage(timer, StageTimer.BASE):
            raw = self.extractor.forward(x)
        if not self.protected:
            return ReleaseTrace(
                batch_index=batch_index, raw=raw, clipped=raw, estimate=None,
                factor=1.0, adjusted=raw, released=raw, stages=("raw",),
            )
        t = self.privacy.clip_threshold
        with _stage(timer, StageTimer.BASE):
            clipped = clip_norm(raw, t)
        stages.append("clipped")
        estimate, factor, adjusted = None, 1.0, clipped
        if self.adaptive.rescale and clipped.shape[0] >= 2:
            with _stage(timer, StageTimer.RESCALE):
                estimate = estimate_local_sensitivity(clipped, self.adaptive.p2, t)
                factor = rescale_factor(estimate, t)
                adjusted = rescale(clipped, estimate, t)
            stages.append("rescaled")
        with _stage(timer, StageTimer.NOISE):
            released = add_noise(adjusted, self.privacy, noise_rng, sigma=self.sigma_override)
        stages.append("noised")
        return ReleaseTrace(
            batch_index=batch_index, raw=raw, clipped=clipped, estimate=estimate,
            factor=factor, adjusted=adjusted, released=released, stages=tuple(stages),
        )

    def embed_and_share(
        self,
        indices: np.ndarray,
        batch_index: int,
        channel: MessageChannel,
        timer: StageTimer | None = None,
    ) -> None:
        x = self.features[indices]
        self._trace = self.compute_release(x, self._noise_rng, batch_index, timer)
        channel.send(EmbeddingUp(self.party_id, batch_index, self._trace.released))

    def receive_and_update(
        self,
        batch_index: int,
        channel: MessageChannel,
        true_labels: np.ndarray | None = None,
        timer: StageTimer | None = None,
    ) -> PartyRoundStats:
        """Consume the returned gradient, add auxiliary losses, step the extractor.

        ``true_labels`` is diagnostic-only (purity of the weak cluster labels);
        it never influences the update.
        """
        if self._trace is None or self._trace.batch_index != batch_index:
            raise ProtocolError(
                f"party {self.party_id} has no pending batch {batch_index}"
            )
        trace = self._trace
        message = channel.receive(GRADIENT_DOWN, self.party_id, batch_index)
        grad = np.asarray(message.grad)
        stats = PartyRoundStats(
            delta_local=None if trace.estimate is None else trace.estimate.delta_local
        )

        # The auxiliary losses see the pre-noise adjusted (clipped, then
        # rescaled) batch; their gradients live in the same space as the
        # returned task gradient, and the whole sum maps back to clipped
        # space by the round's constant rescale factor (noise is additive).
        adjusted_grad = grad

        if self.adaptive.dist_adjust and grad.shape[0] >= self.adaptive.n_clusters:
            with _stage(timer, StageTimer.DIST_ADJUST):
                assignment, _ = fcm(
                    grad,
                    self.adaptive.n_clusters,
                    fuzzifier=self.adaptive.fuzzifier,
                    max_iter=self.adaptive.fcm_max_iter,
                    tol=self.adaptive.fcm_tol,
                    rng=self._fcm_rng.split("round", batch_index),
                )
                assignment = assignment.filtered(self.adaptive.confidence_threshold)
                cl_loss, cl_grad = contrastive_loss(
                    trace.adjusted, assignment, self.config.beta
                )
            adjusted_grad = adjusted_grad + cl_grad
            stats.cl_loss = cl_loss
            stats.retained = assignment.n_retained
            if true_labels is not None and not assignment.degenerate:
                try:
                    stats.purity = purity(assignment, true_labels, use_mask=True)
                except InsufficientRetainedError:
                    stats.purity = None

        if self.adaptive.rescale and self.config.alpha != 0.0 and trace.adjusted.shape[0] >= 4:
            with _stage(timer, StageTimer.RESCALE):
                if self.adaptive.kl_diagnostic == "histogram":
                    _, kl_grad = kl_surrogate_loss(trace.adjusted, self.config.alpha)
                    kl_loss = histogram_kl_to_gaussian(pairwise_distances(trace.adjusted))
                else:
                    kl_loss, kl_grad = kl_surrogate_loss(trace.adjusted, self.config.alpha)
            adjusted_grad = adjusted_grad + kl_grad
            stats.kl_loss = kl_loss

        clipped_grad = trace.factor * adjusted_grad

        with _stage(timer, StageTimer.BASE):
            if self.protected:
                embedding_grad = clip_norm_vjp(
                    trace.raw, self.privacy.clip_threshold, clipped_grad
                )
            else:
                embedding_grad = clipped_grad
            grads, _ = self.extractor.backward(embedding_grad)
            sgd_step(self.extractor, grads, self.config)
        self._trace = None
        return stats


class ActiveParty:
    """Label-holding coordinator: concatenates embeddings, trains the head."""

    def __init__(
        self,
        head: DenseNet,
        labels: np.ndarray,
        config: TrainingConfig,
    ):
        self.head = head
        self.labels = np.asarray(labels, dtype=np.int64)
        self.config = config

    def aggregate_and_step(
        self,
        passive_ids: list[int],
        indices: np.ndarray,
        batch_index: int,
        channel: MessageChannel,
        timer: StageTimer | None = None,
    ) -> tuple[float, float]:
        """Lines: concatenate, optimize, exchange per-party gradients."""
        messages = [
            channel.receive(EMBEDDING_UP, pid, batch_index)
            for pid in sorted(passive_ids)
        ]
        with _stage(timer, StageTimer.BASE):
            concat = np.hstack([np.asarray(m.embeddings) for m in messages])
            if concat.shape[1] != self.head.input_dim:
                raise ProtocolError(
                    f"concatenated width {concat.shape[1]} does not match the "
                    f"head input {self.head.input_dim} in round {batch_index}"
                )
            y = self.labels[indices]
            logits = self.head.forward(concat)
            loss, logit_grad = cross_entropy_softmax(logits, y)
            accuracy = float(np.mean(np.argmax(logits, axis=1) == y))
            grads, input_grad = self.head.backward(logit_grad)
            sgd_step(self.head, grads, self.config)
            offset = 0
            for message in messages:
                width = message.embeddings.shape[1]
                channel.send(GradientDown(
                    message.party_id, batch_index,
                    input_grad[:, offset:offset + width],
                ))
                offset += width
        return loss, accuracy


@dataclass
class Parties:
    passives: tuple[PassiveParty, ...]
    active: ActiveParty

    def __post_init__(self):
        ids = [p.party_id for p in self.passives]
        if len(set(ids)) != len(ids):
            raise ArgumentError(f"duplicate passive party ids: {ids}")


def sample_aligned_batch(total: int, batch_size: int, rng: Rng) -> np.ndarray:
    """Uniform without-replacement indices, broadcast to all parties."""
    if batch_size > total:
        raise ArgumentError(f"cannot sample {batch_size} of {total} rows")
    return np.asarray(rng.choice(total, size=batch_size, replace=False), dtype=np.int64)


@dataclass
class RoundMetrics:
    round_index: int
    loss: float
    accuracy: float
    party_stats: dict[int, PartyRoundStats] = field(default_factory=dict)


def run_round(
    parties: Parties,
    indices: np.ndarray,
    batch_index: int,
    channel: MessageChannel | None = None,
    batch_labels_for_diagnostics: np.ndarray | None = None,
    timer: StageTimer | None = None,
) -> RoundMetrics:
    """One full communication round over an aligned mini-batch."""
    channel = channel if channel is not None else MessageChannel()
    for party in parties.passives:
        party.begin_round(batch_index)
    for party in parties.passives:
        party.embed_and_share(indices, batch_index, channel, timer)
    loss, accuracy = parties.active.aggregate_and_step(
        [p.party_id for p in parties.passives], indices, batch_index, channel, timer
    )
    stats = {}
    for party in parties.passives:
        stats[party.party_id] = party.receive_and_update(
            batch_index, channel, true_labels=batch_labels_for_diagnostics, timer=timer
        )
    return RoundMetrics(
        round_index=batch_index, loss=loss, accuracy=accuracy, party_stats=stats
    )


def evaluate(
    parties: Parties,
    dataset: VerticalDataset,
    rng: Rng,
    with_noise: bool = True,
    batch_size: int | None = None,
    repeats: int = 1,
) -> float:
    """Accuracy of the joint model on a dataset split.

    ``with_noise=True`` evaluates the deployed mechanism (the embeddings the
    active party would actually see); ``False`` is the diagnostic mode.
    ``repeats`` averages the noisy accuracy over several release draws for a
    lower-variance estimate of the same deployed quantity.
    """
    if repeats > 1 and with_noise:
        return float(np.mean([
            evaluate(parties, dataset, rng.split("repeat", i),
                     with_noise=True, batch_size=batch_size)
            for i in range(repeats)
        ]))
    n = dataset.n_rows
    if n == 0:
        raise ArgumentError("cannot evaluate an empty split")
    step = batch_size or parties.active.config.batch_size
    # Evaluate on read-only snapshots so a pending round's forward caches
    # are never disturbed.
    snapshots = [
        PassiveParty(
            party.party_id, party.features, party.extractor.copy(), party.config,
            privacy=party.privacy, adaptive=party.adaptive,
            sigma_override=party.sigma_override if with_noise else 0.0,
        )
        for party in parties.passives
    ]
    head = parties.active.head.copy()
    correct = 0
    for start in range(0, n, step):
        rows = np.arange(start, min(start + step, n))
        released = []
        for snap in snapshots:
            x = dataset.party_batch(snap.party_id, rows)
            noise_rng = rng.split("eval", snap.party_id, start)
            released.append(snap.compute_release(x, noise_rng).released)
        logits = head.forward(np.hstack(released))
        correct += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[rows]))
    return correct / n


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    mean_delta: dict[int, float] = field(default_factory=dict)
    mean_purity: dict[int, float] = field(default_factory=dict)


@dataclass
class TrainingHistory:
    epochs: list[EpochMetrics] = field(default_factory=list)
    rounds: int = 0


def train(
    parties: Parties,
    data: DatasetSplits,
    rng: Rng,
    *,
    evaluate_with_noise: bool = True,
    eval_repeats: int = 1,
    on_round=None,
    timer: StageTimer | None = None,
) -> TrainingHistory:
    """Epoch x mini-batch loop of communication rounds.

    Zero configured epochs returns an empty history without touching any
    party. ``on_round`` (epoch, RoundMetrics) and ``timer`` are observers
    for logging and the timing breakdown.
    """
    config = parties.active.config
    n_train = data.train.n_rows
    if config.batch_size > n_train:
        raise ArgumentError(
            f"batch size {config.batch_size} exceeds the {n_train} training rows"
        )
    rounds_per_epoch = n_train // config.batch_size
    batch_rng = rng.split("batch")
    channel = MessageChannel()
    history = TrainingHistory()
    batch_index = 0
    for epoch in range(config.epochs):
        losses, accuracies = [], []
        deltas: dict[int, list] = {p.party_id: [] for p in parties.passives}
        purities: dict[int, list] = {p.party_id: [] for p in parties.passives}
        for _ in range(rounds_per_epoch):
            indices = sample_aligned_batch(n_train, config.batch_size, batch_rng)
            metrics = run_round(
                parties, indices, batch_index, channel,
                batch_labels_for_diagnostics=data.train.labels[indices],
                timer=timer,
            )
            if on_round is not None:
                on_round(epoch, metrics)
            losses.append(metrics.loss)
            accuracies.append(metrics.accuracy)
            for pid, stats in metrics.party_stats.items():
                if stats.delta_local is not None:
                    deltas[pid].append(stats.delta_local)
                if stats.purity is not None:
                    purities[pid].append(stats.purity)
            batch_index += 1
        test_accuracy = evaluate(
            parties, data.test, rng.split("eval-epoch", epoch),
            with_noise=evaluate_with_noise, repeats=eval_repeats,
        )
        history.epochs.append(EpochMetrics(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            train_accuracy=float(np.mean(accuracies)),
            test_accuracy=test_accuracy,
            mean_delta={pid: float(np.mean(v)) for pid, v in deltas.items() if v},
            mean_purity={pid: float(np.mean(v)) for pid, v in purities.items() if v},
        ))
    history.rounds = batch_index
    return history
