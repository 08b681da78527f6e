"""Two-stage cascade: slice models, recall multipliers, patient verdicts.

Training happens in two steps.  A flip-detection pretext task trains the
whole network on automatically labeled data; the softmax head is then
replaced and the backbone fine-tuned twice, once into slice model A
(healthy=0 vs unhealthy=1) and once into slice model B (covid=0 vs
cap=1).

At the patient level, selected large-lung slices go through model A and
the per-class aggregates are compared: the patient is healthy only when
the healthy aggregate beats ``healthy_factor`` times the unhealthy
aggregate.  Otherwise model B arbitrates covid vs cap.  Each binary
decision first scales the aggregate of the class with *higher*
validation recall by the ratio of the two recalls, tipping borderline
patients toward the class the slice model tends to miss.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import metrics, nncore
from .errors import ConfigError, DataError, MultiplierUndefinedError, TrainingError
from .imaging import GrayImage, SelectionParams, hflip, select_large_lung_slices
from .nncore import Checkpoint, ClassifierModel, TrainConfig, TrainingStage

logger = logging.getLogger(__name__)

# Keeps model B's weight stream distinct from model A's; small additive
# offsets are reserved for per-quarter retrain seeds.
_MODEL_B_SEED_OFFSET = 1_000_003
_SEED_MOD = 2**64


class PatientClass(str, Enum):
    HEALTHY = "Healthy"
    COVID = "Covid"
    CAP = "Cap"


CLASS_ORDER = (PatientClass.HEALTHY, PatientClass.COVID, PatientClass.CAP)


def class_index(label: PatientClass) -> int:
    return CLASS_ORDER.index(label)


class SliceLabel(str, Enum):
    POSITIVE = "InfectionPositive"
    NEGATIVE = "InfectionNegative"


class AggregationMode(str, Enum):
    MEAN_SOFTMAX = "MeanSoftmax"
    SLICE_COUNT = "SliceCount"


@dataclass
class Patient:
    """Ordered CT slices plus optional labels.

    ``label`` is the patient-level class; ``slice_labels`` (when known)
    mark individual slices as infection positive/negative and must align
    with ``slices``.
    """

    id: str
    slices: list[GrayImage]
    label: PatientClass | None = None
    slice_labels: list[SliceLabel] | None = None

    def __post_init__(self):
        if len(self.slices) == 0:
            raise DataError(f"patient {self.id!r} has no slices")
        if self.slice_labels is not None and len(self.slice_labels) != len(self.slices):
            raise DataError(
                f"patient {self.id!r}: {len(self.slice_labels)} slice labels "
                f"for {len(self.slices)} slices"
            )

    def without_label(self) -> "Patient":
        """Label-free view handed to the learner; images are shared."""
        return Patient(self.id, self.slices, None, None)


@dataclass
class CascadeModels:
    """Both slice models plus the patient-level decision parameters.

    ``mult_healthy`` / ``mult_b`` scale the aggregate of the class given
    by the matching ``*_target`` index (the higher-recall class); a
    multiplier of 1.0 makes the target irrelevant.
    """

    model_a: ClassifierModel
    model_b: ClassifierModel
    healthy_factor: float = 5.0
    mult_healthy: float = 1.0
    mult_healthy_target: int = 0
    mult_b: float = 1.0
    mult_b_target: int = 0
    aggregation_mode: AggregationMode = AggregationMode.MEAN_SOFTMAX

    def __post_init__(self):
        if self.healthy_factor <= 0:
            raise ConfigError(f"healthy_factor must be > 0, got {self.healthy_factor}")
        if not (0 < self.mult_healthy <= 1.0) or not (0 < self.mult_b <= 1.0):
            raise ConfigError("multipliers must lie in (0, 1]")


@dataclass
class PatientVerdict:
    patient_id: str
    predicted: PatientClass
    healthy_score: float
    unhealthy_score: float
    covid_score: float
    cap_score: float
    slice_probs_a: np.ndarray  # [n_selected, 2]
    slice_probs_b: np.ndarray  # [n_selected, 2]
    selected_indices: list[int]


def stack_images(images) -> np.ndarray:
    """List of HxW images -> [N, 1, H, W] float32 batch."""
    if len(images) == 0:
        raise DataError("cannot stack an empty image list")
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return arr[:, None, :, :]


# --- training ----------------------------------------------------------------


def pretext_pretrain(
    images: list[GrayImage],
    cfg: TrainConfig,
    *,
    conv_channels: tuple[int, ...] = (8, 16),
    dropout_rate: float = 0.25,
    weight_decay: float = 1e-4,
) -> Checkpoint:
    """Self-supervised flip-detection pretraining.

    Every image appears twice: as-is with label 0 and horizontally
    flipped with label 1.  Returns a POST_PRETEXT checkpoint that both
    slice models (and every online retrain) start from.
    """
    if len(images) == 0:
        raise TrainingError("pretext pretraining needs at least one image")
    side = np.asarray(images[0]).shape[0]
    x = stack_images(list(images) + [hflip(im) for im in images])
    y = np.array([0] * len(images) + [1] * len(images))
    model = nncore.init_model(
        2, side, cfg.seed,
        conv_channels=conv_channels,
        dropout_rate=dropout_rate,
        weight_decay=weight_decay,
    )
    trained = nncore.train(model, x, y, cfg)
    return Checkpoint(trained, TrainingStage.POST_PRETEXT, struct.pack("<Q", cfg.seed))


def pretext_accuracy(model: ClassifierModel, images: list[GrayImage]) -> float:
    """Flip-detection accuracy on held-out images (originals + flips)."""
    x = stack_images(list(images) + [hflip(im) for im in images])
    y = np.array([0] * len(images) + [1] * len(images))
    return nncore.accuracy(model, x, y)


def train_slice_model(
    start: Checkpoint,
    class0_slices: list[GrayImage],
    class1_slices: list[GrayImage],
    cfg: TrainConfig,
) -> ClassifierModel:
    """Replace the pretext head and fine-tune on a binary slice task.

    Serves both cascade stages; only the data differs.  The backbone of
    the returned model immediately after the head swap is bit-identical
    to the pretext backbone.
    """
    if start.stage != TrainingStage.POST_PRETEXT:
        raise ConfigError(
            f"slice models start from a POST_PRETEXT checkpoint, got {start.stage.name}"
        )
    if len(class0_slices) == 0 or len(class1_slices) == 0:
        raise TrainingError("both slice classes must be nonempty")
    x = stack_images(list(class0_slices) + list(class1_slices))
    y = np.array([0] * len(class0_slices) + [1] * len(class1_slices))
    fresh = nncore.replace_head(start.model, cfg.seed)
    return nncore.train(fresh, x, y, cfg)


def multiplier_from_recalls(r0: float, r1: float) -> tuple[float, int]:
    """Threshold multiplier and the favored (lower-recall) class index.

    The multiplier is min(r0, r1) / max(r0, r1); applying it to the
    higher-recall class's aggregate always adjusts the decision in favor
    of the class the model recalls worse.
    """
    if r0 <= 0.0 or r1 <= 0.0:
        raise MultiplierUndefinedError(f"recalls must be positive, got {r0}, {r1}")
    favored = 0 if r0 <= r1 else 1
    return min(r0, r1) / max(r0, r1), favored


def compute_multiplier(
    model: ClassifierModel,
    val_images: list[GrayImage],
    val_labels,
) -> tuple[float, int]:
    """Recall-ratio multiplier measured on a labeled validation set."""
    labels = np.asarray(val_labels)
    preds = nncore.forward(model, stack_images(val_images)).argmax(axis=1)
    recalls = []
    for cls in (0, 1):
        sel = labels == cls
        if not sel.any():
            raise MultiplierUndefinedError(f"validation set has no class-{cls} slices")
        recalls.append(float(np.mean(preds[sel] == cls)))
    return multiplier_from_recalls(recalls[0], recalls[1])


# --- patient-level decisions -------------------------------------------------


def _aggregate(probs: np.ndarray, mode: AggregationMode) -> np.ndarray:
    if mode == AggregationMode.MEAN_SOFTMAX:
        return probs.mean(axis=0)
    counts = np.bincount(probs.argmax(axis=1), minlength=2)
    return counts.astype(np.float64)


def decide_from_probs(
    probs_a: np.ndarray,
    probs_b: np.ndarray,
    cascade: CascadeModels,
) -> tuple[PatientClass, dict]:
    """Cascade decision from per-slice probabilities.

    Model A's adjusted aggregates gate the healthy verdict (strict
    ``healthy > factor * unhealthy``); model B's adjusted aggregates
    split covid vs cap, with ties going to cap.  Returned scores are the
    raw (pre-multiplier) aggregates.
    """
    agg_a = _aggregate(probs_a, cascade.aggregation_mode)
    adj_a = agg_a.astype(np.float64).copy()
    adj_a[cascade.mult_healthy_target] *= cascade.mult_healthy

    agg_b = _aggregate(probs_b, cascade.aggregation_mode)
    adj_b = agg_b.astype(np.float64).copy()
    adj_b[cascade.mult_b_target] *= cascade.mult_b

    if adj_a[0] > cascade.healthy_factor * adj_a[1]:
        predicted = PatientClass.HEALTHY
    elif adj_b[0] > adj_b[1]:
        predicted = PatientClass.COVID
    else:
        predicted = PatientClass.CAP

    scores = {
        "healthy": float(agg_a[0]),
        "unhealthy": float(agg_a[1]),
        "covid": float(agg_b[0]),
        "cap": float(agg_b[1]),
    }
    return predicted, scores


def classify_patient(
    cascade: CascadeModels,
    patient: Patient,
    selection: SelectionParams,
) -> PatientVerdict:
    """Select large-lung slices, run both slice models, decide the class."""
    kept = select_large_lung_slices(patient.slices, selection)
    batch = stack_images([patient.slices[i] for i in kept])
    probs_a = nncore.forward(cascade.model_a, batch)
    probs_b = nncore.forward(cascade.model_b, batch)
    predicted, scores = decide_from_probs(probs_a, probs_b, cascade)
    return PatientVerdict(
        patient_id=patient.id,
        predicted=predicted,
        healthy_score=scores["healthy"],
        unhealthy_score=scores["unhealthy"],
        covid_score=scores["covid"],
        cap_score=scores["cap"],
        slice_probs_a=probs_a,
        slice_probs_b=probs_b,
        selected_indices=kept,
    )


@dataclass
class EvalResult:
    verdicts: list[PatientVerdict]
    confusion: np.ndarray  # [3, 3] counts, rows = true class in CLASS_ORDER
    accuracy: float
    recalls: dict = field(default_factory=dict)  # PatientClass -> float | None


def score_verdicts(verdicts: list[PatientVerdict], labels_by_id: dict) -> EvalResult:
    """3-class confusion matrix and accuracy for labeled verdicts."""
    true_idx, pred_idx = [], []
    for v in verdicts:
        label = labels_by_id.get(v.patient_id)
        if label is None:
            raise DataError(f"patient {v.patient_id!r} has no label to score against")
        true_idx.append(class_index(label))
        pred_idx.append(class_index(v.predicted))
    confusion = metrics.confusion_matrix(true_idx, pred_idx, len(CLASS_ORDER))
    acc = float(np.trace(confusion) / confusion.sum())
    recalls = {}
    for cls in CLASS_ORDER:
        row = confusion[class_index(cls)]
        recalls[cls] = float(row[class_index(cls)] / row.sum()) if row.sum() else None
    return EvalResult(verdicts, confusion, acc, recalls)


def evaluate_patients(
    cascade: CascadeModels,
    patients: list[Patient],
    selection: SelectionParams,
) -> EvalResult:
    """Classify labeled patients and tabulate the confusion matrix."""
    for p in patients:
        if p.label is None:
            raise DataError(f"patient {p.id!r} is unlabeled")
    verdicts = [classify_patient(cascade, p, selection) for p in patients]
    return score_verdicts(verdicts, {p.id: p.label for p in patients})


# --- dataset assembly --------------------------------------------------------


@dataclass
class SliceSets:
    """Slice-level training material for both cascade stages.

    Model A: label 0 = healthy (selected slices of healthy patients),
    label 1 = unhealthy (infection-positive slices of covid/cap
    patients).  Model B: label 0 = covid, label 1 = cap, positives only.
    """

    a_images: list[GrayImage]
    a_labels: np.ndarray
    b_images: list[GrayImage]
    b_labels: np.ndarray


def build_slice_sets(patients: list[Patient], selection: SelectionParams) -> SliceSets:
    healthy, unhealthy, covid, cap = [], [], [], []
    for p in patients:
        if p.label == PatientClass.HEALTHY:
            for i in select_large_lung_slices(p.slices, selection):
                healthy.append(p.slices[i])
        elif p.label in (PatientClass.COVID, PatientClass.CAP):
            if p.slice_labels is None:
                continue  # no slice annotations: contributes nothing, like unannotated patients upstream
            for img, sl in zip(p.slices, p.slice_labels):
                if sl == SliceLabel.POSITIVE:
                    unhealthy.append(img)
                    (covid if p.label == PatientClass.COVID else cap).append(img)
    a_images = healthy + unhealthy
    a_labels = np.array([0] * len(healthy) + [1] * len(unhealthy))
    b_images = covid + cap
    b_labels = np.array([0] * len(covid) + [1] * len(cap))
    return SliceSets(a_images, a_labels, b_images, b_labels)


def _split_binary(images, labels):
    labels = np.asarray(labels)
    zeros = [im for im, l in zip(images, labels) if l == 0]
    ones = [im for im, l in zip(images, labels) if l == 1]
    return zeros, ones


def derived_seed(seed: int, offset: int) -> int:
    return (seed + offset) % _SEED_MOD


def train_cascade(
    pretext: Checkpoint,
    train_a: tuple,
    train_b: tuple,
    val_a: tuple,
    val_b: tuple,
    cfg: TrainConfig,
    *,
    healthy_factor: float = 5.0,
    aggregation_mode: AggregationMode = AggregationMode.MEAN_SOFTMAX,
) -> CascadeModels:
    """Train both slice models from the pretext checkpoint and set multipliers.

    ``train_*`` / ``val_*`` are (images, labels) pairs.  Model B's seed
    is offset from model A's so the two weight streams never coincide.
    When a multiplier cannot be computed (class missing from validation,
    or zero recall) it falls back to 1.0 with a warning.
    """
    cfg_a = replace(cfg, seed=derived_seed(cfg.seed, 0))
    cfg_b = replace(cfg, seed=derived_seed(cfg.seed, _MODEL_B_SEED_OFFSET))

    a0, a1 = _split_binary(*train_a)
    b0, b1 = _split_binary(*train_b)
    model_a = train_slice_model(pretext, a0, a1, cfg_a)
    model_b = train_slice_model(pretext, b0, b1, cfg_b)

    def safe_multiplier(model, val, name):
        try:
            return compute_multiplier(model, val[0], val[1])
        except MultiplierUndefinedError as exc:
            logger.warning("multiplier for %s undefined (%s); falling back to 1.0", name, exc)
            return 1.0, 0

    mult_a, favored_a = safe_multiplier(model_a, val_a, "model A")
    mult_b, favored_b = safe_multiplier(model_b, val_b, "model B")
    return CascadeModels(
        model_a=model_a,
        model_b=model_b,
        healthy_factor=healthy_factor,
        mult_healthy=mult_a,
        mult_healthy_target=1 - favored_a if mult_a < 1.0 else 0,
        mult_b=mult_b,
        mult_b_target=1 - favored_b if mult_b < 1.0 else 0,
        aggregation_mode=aggregation_mode,
    )
