"""Glue between configs and the protocol: dataset/party builders, training
runs, and victim access wrappers for the attack harness."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .data import (
    ColumnRangePlan,
    ColumnSpec,
    DatasetSplits,
    ImageHalfPlan,
    Table,
    encode_csv_dataset,
    even_column_plan,
    load_csv,
    load_idx,
    make_synthetic,
    partition_vertical,
    split_table,
    SyntheticSpec,
)
from .errors import ConfigError
from .mechanism import PrivacyParams
from .neural import DenseNet, TrainingConfig
from .numerics import Rng
from .protocol import (
    ActiveParty,
    AdaptiveConfig,
    Parties,
    PassiveParty,
    StageTimer,
    TrainingHistory,
    train,
)


def build_dataset(cfg: ExperimentConfig, seed: int | None = None) -> DatasetSplits:
    """Materialize the configured dataset, deterministically from the seed."""
    seed = cfg.seed if seed is None else seed
    ds = cfg.dataset
    if ds.kind == "synthetic":
        splits = make_synthetic(SyntheticSpec(
            n_classes=ds.classes,
            per_class=ds.per_class,
            dim=ds.dim,
            spread=ds.spread,
            seed=seed,
            parties=1 if ds.ranges else ds.parties,
            test_fraction=ds.test_fraction,
        ))
        if ds.ranges:
            plan = ColumnRangePlan(tuple((int(a), int(b)) for a, b in ds.ranges))
            splits = DatasetSplits(
                train=_repartition(splits.train, plan),
                test=_repartition(splits.test, plan),
            )
        return splits
    if ds.kind == "csv":
        if not ds.path or not ds.columns:
            raise ConfigError("csv dataset needs 'path' and 'columns'")
        schema = tuple(ColumnSpec(c["name"], c["kind"]) for c in ds.columns)
        raw = load_csv(ds.path, schema)
        train_table, test_table = encode_csv_dataset(raw, ds.test_fraction, seed)
        train_table, test_table = _limit(train_table, test_table, ds.limit)
        plan = _plan_for(ds, train_table)
        return DatasetSplits(
            train=partition_vertical(train_table, plan, "train"),
            test=partition_vertical(test_table, plan, "test"),
        )
    if ds.kind == "idx":
        if not ds.images or not ds.labels:
            raise ConfigError("idx dataset needs 'images' and 'labels'")
        table = load_idx(ds.images, ds.labels)
        if ds.limit is not None and table.n_rows > ds.limit:
            keep = np.arange(ds.limit)
            table = Table(
                features=table.features[keep], labels=table.labels[keep],
                n_classes=table.n_classes, sample_ids=table.sample_ids[keep],
                image_shape=table.image_shape,
            )
        train_table, test_table = split_table(table, ds.test_fraction, seed)
        plan = _plan_for(ds, train_table)
        return DatasetSplits(
            train=partition_vertical(train_table, plan, "train"),
            test=partition_vertical(test_table, plan, "test"),
        )
    raise ConfigError(f"unknown dataset kind {ds.kind!r}")


def _repartition(split, plan):
    """Re-slice a single-party split by an explicit column plan."""
    table = Table(
        features=split.party_features[0],
        labels=split.labels,
        n_classes=split.n_classes,
        sample_ids=split.sample_ids,
    )
    return partition_vertical(table, plan, split.split)


def _limit(train_table: Table, test_table: Table, limit):
    if limit is None or train_table.n_rows <= limit:
        return train_table, test_table
    keep = np.arange(limit)
    limited = Table(
        features=train_table.features[keep], labels=train_table.labels[keep],
        n_classes=train_table.n_classes, sample_ids=train_table.sample_ids[keep],
        feature_names=train_table.feature_names, image_shape=train_table.image_shape,
    )
    return limited, test_table


def _plan_for(ds, table: Table):
    if ds.halves:
        return ImageHalfPlan(tuple(ds.halves))
    if ds.ranges:
        return ColumnRangePlan(tuple((int(a), int(b)) for a, b in ds.ranges))
    return even_column_plan(table.n_features, ds.parties)


def training_config(cfg: ExperimentConfig) -> TrainingConfig:
    t = cfg.training
    return TrainingConfig(
        learning_rate=t.learning_rate,
        batch_size=t.batch_size,
        epochs=t.epochs,
        weight_decay=t.weight_decay,
        alpha=t.alpha,
        beta=t.beta,
        seed=cfg.seed,
    )


def privacy_params(cfg: ExperimentConfig) -> PrivacyParams | None:
    p = cfg.privacy
    if not p.enabled:
        return None
    return PrivacyParams.from_budget(
        epsilon=p.epsilon,
        delta=p.delta,
        clip_threshold=p.clip_threshold,
        p1=p.p1,
        p2=cfg.adaptive.p2,
        allow_large_epsilon=p.allow_large_epsilon,
    )


def adaptive_config(cfg: ExperimentConfig, n_classes: int) -> AdaptiveConfig:
    a = cfg.adaptive
    return AdaptiveConfig(
        rescale=a.rescale,
        dist_adjust=a.dist_adjust,
        p2=a.p2,
        confidence_threshold=a.confidence_threshold,
        n_clusters=n_classes,
        fuzzifier=a.fuzzifier,
        fcm_max_iter=a.fcm_max_iter,
        fcm_tol=a.fcm_tol,
        kl_diagnostic=a.kl_diagnostic,
    )


def build_parties(cfg: ExperimentConfig, data: DatasetSplits, seed: int | None = None) -> Parties:
    """Seeded extractors/head plus per-party privacy and adaptive settings.

    The head takes the embeddings concatenated in ascending party id order,
    so its input width is the sum of the per-party embedding dims.
    """
    seed = cfg.seed if seed is None else seed
    config = replace(training_config(cfg), seed=seed)
    root = Rng(seed)
    privacy = privacy_params(cfg)
    adaptive = adaptive_config(cfg, data.train.n_classes)
    passives = []
    for pid in range(data.train.n_parties):
        dims = (
            [data.train.party_features[pid].shape[1]]
            + list(cfg.model.extractor_hidden)
            + [cfg.model.embedding_dim]
        )
        activations = [cfg.model.activation] * (len(dims) - 1)
        extractor = DenseNet.create(dims, activations, root.split("init", pid))
        passives.append(PassiveParty(
            party_id=pid,
            features=data.train.party_features[pid],
            extractor=extractor,
            config=config,
            privacy=privacy,
            adaptive=adaptive,
            rng=root,
            sigma_override=cfg.privacy.sigma_override if privacy is not None else None,
        ))
    head_dims = (
        [cfg.model.embedding_dim * data.train.n_parties]
        + list(cfg.model.head_hidden)
        + [data.train.n_classes]
    )
    head_acts = [cfg.model.activation] * (len(head_dims) - 2) + ["identity"]
    head = DenseNet.create(head_dims, head_acts, root.split("init", data.train.n_parties))
    active = ActiveParty(head=head, labels=data.train.labels, config=config)
    return Parties(passives=tuple(passives), active=active)


@dataclass
class RunResult:
    config: ExperimentConfig
    data: DatasetSplits
    parties: Parties
    history: TrainingHistory


def run_training(
    cfg: ExperimentConfig,
    seed: int | None = None,
    on_round=None,
    timer: StageTimer | None = None,
) -> RunResult:
    """Build everything from the config and run the full training loop."""
    seed = cfg.seed if seed is None else seed
    data = build_dataset(cfg, seed)
    parties = build_parties(cfg, data, seed)
    history = train(
        parties, data, Rng(seed),
        evaluate_with_noise=cfg.evaluation.with_noise,
        eval_repeats=cfg.evaluation.repeats,
        on_round=on_round,
        timer=timer,
    )
    return RunResult(config=cfg, data=data, parties=parties, history=history)


def measure_stage_times(cfg: ExperimentConfig) -> dict[str, float]:
    """Wall-time per pipeline stage over a fixed budget of rounds.

    Returns seconds for the four accounted stages (base forward/backward,
    noise, rescale, dist-adjust); disabled stages report 0.0.
    """
    from .protocol import MessageChannel, run_round, sample_aligned_batch

    timer = StageTimer()
    data = build_dataset(cfg)
    batch_size = cfg.timing.batch_size or cfg.training.batch_size
    if batch_size > data.train.n_rows:
        raise ConfigError("timing batch size exceeds the training rows")
    parties = build_parties(cfg, data)
    for party in parties.passives:
        party.config = replace(party.config, batch_size=batch_size)
    parties.active.config = replace(parties.active.config, batch_size=batch_size)
    rng = Rng(cfg.seed).split("timing")
    channel = MessageChannel()
    for round_index in range(cfg.timing.rounds):
        indices = sample_aligned_batch(data.train.n_rows, batch_size, rng)
        run_round(parties, indices, round_index, channel, timer=timer)
    return {
        stage: timer.seconds.get(stage, 0.0)
        for stage in (StageTimer.BASE, StageTimer.NOISE,
                      StageTimer.RESCALE, StageTimer.DIST_ADJUST)
    }


class VflVictim:
    """Released-artifact access to a trained run, as an attacker sees it.

    ``release_embeddings`` returns what the target passive party would put
    on the wire for given raw features; ``predict_proba`` runs the full
    deployed inference pipeline to final softmax confidences.
    """

    def __init__(self, parties: Parties, tag: str = "victim"):
        self.parties = parties
        self.tag = tag

    def release_embeddings(self, party_id: int, x: np.ndarray, rng: Rng) -> np.ndarray:
        party = self._party(party_id)
        snap = PassiveParty(
            party.party_id, party.features, party.extractor.copy(), party.config,
            privacy=party.privacy, adaptive=party.adaptive,
            sigma_override=party.sigma_override,
        )
        return snap.compute_release(x, rng).released

    def predict_proba(self, xs_by_party: list[np.ndarray], rng: Rng) -> np.ndarray:
        released = []
        for party, x in zip(self.parties.passives, xs_by_party):
            released.append(self.release_embeddings(party.party_id, x, rng.split(party.party_id)))
        head = self.parties.active.head.copy()
        logits = head.forward(np.hstack(released))
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def embedding_dim(self, party_id: int) -> int:
        return self._party(party_id).embedding_dim

    def extractor_dims(self, party_id: int) -> list[int]:
        return self._party(party_id).extractor.dims

    def _party(self, party_id: int) -> PassiveParty:
        for party in self.parties.passives:
            if party.party_id == party_id:
                return party
        raise ConfigError(f"victim has no passive party {party_id}")


# ---------------------------------------------------------------------------
# Attack-suite orchestration
# ---------------------------------------------------------------------------

def _balanced_eval_rows(data: DatasetSplits, per_side: int, rng: Rng):
    per = min(per_side, data.train.n_rows, data.test.n_rows)
    members = rng.choice(data.train.n_rows, per, replace=False)
    nonmembers = rng.choice(data.test.n_rows, per, replace=False)
    return np.sort(members), np.sort(nonmembers)


def _party_inputs(split, rows) -> list[np.ndarray]:
    return [split.party_features[p][rows] for p in range(split.n_parties)]


def _carve_rows(n_rows: int, pieces: int, rng: Rng) -> list[np.ndarray]:
    order = rng.permutation(n_rows)
    return [np.sort(chunk) for chunk in np.array_split(order, pieces)]


def _subset(split, rows, tag: str):
    from .data import VerticalDataset

    return VerticalDataset(
        party_features=tuple(f[rows] for f in split.party_features),
        labels=split.labels[rows],
        n_classes=split.n_classes,
        sample_ids=split.sample_ids[rows],
        split=tag,
    )


def _shadow_run(cfg: ExperimentConfig, shadow_index: int, victim_data: DatasetSplits,
                carve: list[np.ndarray] | None) -> tuple[VflVictim, DatasetSplits]:
    """Train one shadow model on data disjoint from the victim's.

    Synthetic datasets draw fresh seeded samples from the same generative
    spec; file-backed datasets get a pair of disjoint chunks carved out of
    the held-out split (all that exists at desk scale).
    """
    shadow_seed = (cfg.seed * 1_000_003 + 7919 * (shadow_index + 1)) % 2**63
    epochs = cfg.attack.shadow_epochs or cfg.training.epochs
    shadow_cfg = replace(
        cfg,
        seed=shadow_seed,
        training=replace(cfg.training, epochs=epochs),
    )
    if carve is None:
        data = build_dataset(shadow_cfg, shadow_seed)
    else:
        data = DatasetSplits(
            train=_subset(victim_data.test, carve[2 * shadow_index], "train"),
            test=_subset(victim_data.test, carve[2 * shadow_index + 1], "test"),
        )
        max_batch = max(2, data.train.n_rows // 2)
        if shadow_cfg.training.batch_size > max_batch:
            shadow_cfg = replace(
                shadow_cfg, training=replace(shadow_cfg.training, batch_size=max_batch)
            )
    parties = build_parties(shadow_cfg, data, shadow_seed)
    train(parties, data, Rng(shadow_seed),
          evaluate_with_noise=shadow_cfg.evaluation.with_noise)
    return VflVictim(parties, tag=f"shadow-{shadow_index}"), data


def run_attack_suite(cfg: ExperimentConfig, victims: dict[str, RunResult],
                     seed: int | None = None) -> list:
    """Run inversion + membership inference against every victim.

    ``victims`` maps a configuration tag (e.g. unprotected / vanilla / full)
    to its loaded run. Attack settings come from ``cfg.attack``; the victim
    datasets are rebuilt from each victim's own resolved config.
    """
    from .attacks import (
        InversionConfig,
        MembershipConfig,
        inversion_attack,
        membership_inference,
    )

    seed = cfg.seed if seed is None else seed
    atk = cfg.attack
    reports = []
    for tag, run in sorted(victims.items()):
        rng = Rng(seed).split("attack", tag)
        victim = VflVictim(run.parties, tag=tag)
        data = run.data
        target = atk.target_party

        # The attacker holds samples from the victim's data distribution,
        # disjoint from the victim's own rows: fresh seeded draws for
        # synthetic data, the held-out split otherwise.
        if run.config.dataset.kind == "synthetic":
            attacker_seed = (seed * 2_000_003 + 104_729) % 2**63
            attacker_data = build_dataset(run.config, attacker_seed)
            attacker_pool = np.vstack([
                attacker_data.train.party_features[target],
                attacker_data.test.party_features[target],
            ])
        else:
            attacker_pool = data.test.party_features[target]
        holdout_rows = rng.split("holdout").choice(
            data.train.n_rows, min(atk.eval_per_side * 2, data.train.n_rows),
            replace=False,
        )
        holdout = data.train.party_features[target][np.sort(holdout_rows)]
        inversion = inversion_attack(
            lambda x, r: victim.release_embeddings(target, x, r),
            victim.extractor_dims(target),
            attacker_pool,
            holdout,
            InversionConfig(
                epochs=atk.decoder_epochs,
                learning_rate=atk.decoder_lr,
                hidden=tuple(atk.decoder_hidden) if atk.decoder_hidden else None,
                trials=atk.trials,
            ),
            rng.split("inversion"),
            victim_tag=tag,
        )
        reports.append(inversion)

        member_rows, nonmember_rows = _balanced_eval_rows(
            data, atk.eval_per_side, rng.split("eval-rows")
        )

        def conf_fn_for(v: VflVictim):
            if atk.level == "embedding":
                return lambda inputs, r: v.release_embeddings(target, inputs[target], r)
            return lambda inputs, r: v.predict_proba(inputs, r)

        carve = None
        if run.config.dataset.kind != "synthetic":
            carve = _carve_rows(data.test.n_rows, 2 * atk.shadows, rng.split("carve"))
        shadow_cache = {}

        def shadow_factory(i, shadow_rng):
            if i not in shadow_cache:
                shadow_cache[i] = _shadow_run(run.config, i, data, carve)
            shadow, shadow_data = shadow_cache[i]
            in_rows, out_rows = _balanced_eval_rows(
                shadow_data, atk.eval_per_side, shadow_rng.split("rows")
            )
            return (
                conf_fn_for(shadow),
                _party_inputs(shadow_data.train, in_rows),
                _party_inputs(shadow_data.test, out_rows),
            )

        mi = membership_inference(
            conf_fn_for(victim),
            _party_inputs(data.train, member_rows),
            _party_inputs(data.test, nonmember_rows),
            shadow_factory,
            MembershipConfig(
                n_shadows=atk.shadows,
                attack_hidden=atk.attack_hidden,
                attack_epochs=atk.attack_epochs,
                attack_lr=atk.attack_lr,
                sort_features=atk.level != "embedding",
            ),
            rng.split("mi"),
            victim_tag=tag,
        )
        reports.append(mi)
    return reports
