"""Quarter-batch online adaptation with confident pseudo-labels.

A labeled-at-scoring-time-only patient stream is split into contiguous
quarters.  Quarter 0 is scored by the frozen base cascade.  After each
quarter, slices whose softmax score clears a confidence threshold AND
agrees with the patient-level verdict are harvested into a pseudo-label
pool, and both slice models are retrained from the post-pretext
checkpoint on the base training data plus the pool.  The refreshed
cascade scores the next quarter.  A frozen-cascade baseline comparator
lives here too.

True labels are never read during harvesting or retraining; they flow
only into scoring.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .imaging import SelectionParams
from .nncore import Checkpoint, TrainConfig
from .pipeline import (
    CascadeModels,
    EvalResult,
    Patient,
    PatientClass,
    PatientVerdict,
    classify_patient,
    derived_seed,
    evaluate_patients,
    score_verdicts,
    train_cascade,
)

logger = logging.getLogger(__name__)

MODEL_A = "A"
MODEL_B = "B"


@dataclass(frozen=True)
class OnlineConfig:
    """Knobs of the online loop.

    ``confidence_threshold`` is inclusive: a slice at exactly the
    threshold is harvested.  ``cumulative`` keeps earlier quarters'
    harvests in the pool; ``pseudo_to_validation`` additionally feeds
    pool entries into the validation sets used for the recall
    multipliers (off by default: validating on the model's own guesses
    skews the multipliers toward its biases).
    """

    confidence_threshold: float = 0.9
    quarters: int = 4
    cumulative: bool = True
    pseudo_to_validation: bool = False

    def __post_init__(self):
        if not (0.5 < self.confidence_threshold <= 1.0):
            raise ConfigError(
                f"confidence_threshold must be in (0.5, 1], got {self.confidence_threshold}"
            )
        if self.quarters < 1:
            raise ConfigError(f"quarters must be >= 1, got {self.quarters}")


@dataclass
class StreamBatch:
    """One contiguous chunk of the arrival-ordered patient stream."""

    batch_index: int
    patients: list[Patient]


@dataclass
class PoolEntry:
    image: object  # GrayImage
    model_target: str  # MODEL_A or MODEL_B
    pseudo_label: int  # class index within the target model
    source_batch: int
    source_patient: str
    confidence: float


@dataclass
class PseudoPool:
    """Harvested slices with the labels the cascade assigned to them."""

    entries: list[PoolEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def extend(self, entries) -> None:
        self.entries.extend(entries)

    def for_target(self, target: str):
        """(images, labels) of the entries aimed at one slice model."""
        picked = [e for e in self.entries if e.model_target == target]
        images = [e.image for e in picked]
        labels = np.array([e.pseudo_label for e in picked], dtype=int)
        return images, labels

    def validate_targets(self) -> None:
        for e in self.entries:
            if e.model_target not in (MODEL_A, MODEL_B):
                raise DataError(f"pool entry with unknown model_target {e.model_target!r}")


def split_quarters(patients: list[Patient], k: int) -> list[StreamBatch]:
    """Contiguous near-equal split of the stream, in arrival order.

    The first ``n % k`` batches take the extra patient, so 30 patients
    at k=4 split as [8, 8, 7, 7].  Partition is by patient, never by
    slice.
    """
    if k < 1:
        raise ConfigError(f"quarter count must be >= 1, got {k}")
    if not patients:
        raise DataError("cannot split an empty patient stream")
    if k > len(patients):
        raise DataError(f"cannot split {len(patients)} patients into {k} batches")
    base, extra = divmod(len(patients), k)
    batches, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        batches.append(StreamBatch(i, patients[start : start + size]))
        start += size
    return batches


# Harvest plan per predicted patient class: which (model, probability
# column) pairs feed the pool when the slice agrees with the verdict.
_HARVEST_RULES = {
    PatientClass.HEALTHY: ((MODEL_A, 0),),
    PatientClass.COVID: ((MODEL_A, 1), (MODEL_B, 0)),
    PatientClass.CAP: ((MODEL_A, 1), (MODEL_B, 1)),
}


def harvest_confident(
    verdicts: list[PatientVerdict],
    patients: list[Patient],
    cfg: OnlineConfig,
    batch_index: int = 0,
) -> list[PoolEntry]:
    """Pool entries for slices confidently agreeing with their patient's verdict.

    A slice qualifies for a model when its softmax probability for the
    class implied by the patient verdict is at least the threshold
    (inclusive).  Healthy patients feed model A only; covid/cap patients
    feed both models.  An empty harvest is valid.
    """
    by_id = {p.id: p for p in patients}
    entries: list[PoolEntry] = []
    for v in verdicts:
        patient = by_id.get(v.patient_id)
        if patient is None:
            raise DataError(f"verdict for unknown patient {v.patient_id!r}")
        probs = {MODEL_A: v.slice_probs_a, MODEL_B: v.slice_probs_b}
        for target, label in _HARVEST_RULES[v.predicted]:
            for row, slice_idx in enumerate(v.selected_indices):
                p = float(probs[target][row, label])
                if p >= cfg.confidence_threshold:
                    entries.append(
                        PoolEntry(
                            image=patient.slices[slice_idx],
                            model_target=target,
                            pseudo_label=label,
                            source_batch=batch_index,
                            source_patient=v.patient_id,
                            confidence=p,
                        )
                    )
    return entries


@dataclass
class BaseBundle:
    """Everything the online loop carries forward from base training.

    ``train_cfg.seed`` is the base seed; the retrain that scores
    quarter q reuses the same profile with seed ``base_seed + q``.
    ``train_*`` / ``val_*`` are (images, labels) pairs as fed to
    train_cascade.
    """

    cascade: CascadeModels
    pretext: Checkpoint
    train_a: tuple
    train_b: tuple
    val_a: tuple
    val_b: tuple
    train_cfg: TrainConfig


def _merged(base_pair, pool_images, pool_labels):
    if len(pool_images) == 0:
        return base_pair
    images = list(base_pair[0]) + list(pool_images)
    labels = np.concatenate([np.asarray(base_pair[1]), pool_labels])
    return images, labels


def online_update(
    base: BaseBundle,
    pool: PseudoPool,
    train_cfg: TrainConfig,
    *,
    pseudo_to_validation: bool = False,
) -> CascadeModels:
    """Retrain both slice models from the post-pretext point.

    Model A trains on the base A set plus the pool's A entries, model B
    likewise; both recall multipliers are recomputed on the validation
    sets (augmented with pool entries only when asked).  With an empty
    pool and the base seed this reproduces the base cascade bit for bit.
    """
    pool.validate_targets()
    a_imgs, a_labels = pool.for_target(MODEL_A)
    b_imgs, b_labels = pool.for_target(MODEL_B)
    train_a = _merged(base.train_a, a_imgs, a_labels)
    train_b = _merged(base.train_b, b_imgs, b_labels)
    val_a, val_b = base.val_a, base.val_b
    if pseudo_to_validation:
        val_a = _merged(val_a, a_imgs, a_labels)
        val_b = _merged(val_b, b_imgs, b_labels)
    return train_cascade(
        base.pretext,
        train_a,
        train_b,
        val_a,
        val_b,
        train_cfg,
        healthy_factor=base.cascade.healthy_factor,
        aggregation_mode=base.cascade.aggregation_mode,
    )


def _harvest_counts(entries) -> dict:
    counts = {"a_healthy": 0, "a_unhealthy": 0, "b_covid": 0, "b_cap": 0}
    names = {(MODEL_A, 0): "a_healthy", (MODEL_A, 1): "a_unhealthy",
             (MODEL_B, 0): "b_covid", (MODEL_B, 1): "b_cap"}
    for e in entries:
        counts[names[(e.model_target, e.pseudo_label)]] += 1
    return counts


def _quarter_accuracy(verdicts, patients) -> float | None:
    labels = {p.id: p.label for p in patients if p.label is not None}
    if len(labels) != len(patients):
        return None
    return score_verdicts(verdicts, labels).accuracy


@dataclass
class OnlineResult:
    verdicts: list[PatientVerdict]
    result: EvalResult
    events: list[dict]
    final_cascade: CascadeModels
    pool: PseudoPool


def run_online(
    test_patients: list[Patient],
    base: BaseBundle,
    cfg: OnlineConfig,
    selection: SelectionParams | None = None,
) -> OnlineResult:
    """Score the stream quarter by quarter, retraining between quarters.

    Quarter 0 is scored by the frozen base cascade, so its verdicts are
    identical to the baseline's.  A final retrain runs after the last
    quarter as well: it never scores anything here, but a deployed
    system would keep updating, and the returned ``final_cascade`` is
    what it would ship with.
    """
    selection = selection or SelectionParams()
    batches = split_quarters(test_patients, cfg.quarters)
    pool = PseudoPool()
    cascade = base.cascade
    all_verdicts: list[PatientVerdict] = []
    events: list[dict] = []

    for batch in batches:
        verdicts = [classify_patient(cascade, p, selection) for p in batch.patients]
        all_verdicts.extend(verdicts)

        harvested = harvest_confident(verdicts, batch.patients, cfg, batch.batch_index)
        if cfg.cumulative:
            pool.extend(harvested)
        else:
            pool = PseudoPool(list(harvested))

        retrain_seed = derived_seed(base.train_cfg.seed, batch.batch_index + 1)
        t0 = time.perf_counter()
        cascade = online_update(
            base,
            pool,
            replace(base.train_cfg, seed=retrain_seed),
            pseudo_to_validation=cfg.pseudo_to_validation,
        )
        retrain_seconds = time.perf_counter() - t0

        events.append(
            {
                "batch_index": batch.batch_index,
                "n_patients": len(batch.patients),
                "harvested": _harvest_counts(harvested),
                "pool_size": len(pool),
                "retrain_seconds": round(retrain_seconds, 3),
                "multipliers": {
                    "healthy": cascade.mult_healthy,
                    "healthy_target": cascade.mult_healthy_target,
                    "b": cascade.mult_b,
                    "b_target": cascade.mult_b_target,
                },
                "accuracy": _quarter_accuracy(verdicts, batch.patients),
            }
        )

    labels = {p.id: p.label for p in test_patients if p.label is not None}
    result = score_verdicts(all_verdicts, labels) if labels else None
    return OnlineResult(all_verdicts, result, events, cascade, pool)


def run_baseline(
    test_patients: list[Patient],
    cascade: CascadeModels,
    selection: SelectionParams | None = None,
) -> EvalResult:
    """Score every patient with the frozen base cascade."""
    return evaluate_patients(cascade, test_patients, selection or SelectionParams())


def write_events(events: list[dict], path) -> None:
    """Per-quarter event log as JSON lines."""
    with open(path, "w") as fh:
        for event in events:
            fh.write(json.dumps(event) + "\n")
