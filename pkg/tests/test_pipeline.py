"""Cascade decisions, recall multipliers, slice-set assembly, training glue."""

import struct

import numpy as np
import pytest

from ctadapt.errors import ConfigError, DataError, MultiplierUndefinedError, TrainingError
from ctadapt.imaging import SelectionParams, select_large_lung_slices
from ctadapt.nncore import TrainConfig, TrainingStage, forward, init_model, models_identical
from ctadapt.pipeline import (
    AggregationMode,
    CascadeModels,
    Patient,
    PatientClass,
    PatientVerdict,
    SliceLabel,
    build_slice_sets,
    classify_patient,
    compute_multiplier,
    decide_from_probs,
    derived_seed,
    evaluate_patients,
    multiplier_from_recalls,
    pretext_pretrain,
    score_verdicts,
    stack_images,
    train_cascade,
    train_slice_model,
)

SIDE = 8
SELECTION = SelectionParams()


def lung_image(seed=0, level=0.1):
    """Mostly dark interior: always passes large-lung selection."""
    rng = np.random.default_rng(seed)
    return (level + 0.05 * rng.random((SIDE, SIDE))).astype(np.float32)


def bright_image(seed=0):
    """No dark pixels at all: dropped whenever darker siblings exist."""
    rng = np.random.default_rng(seed)
    return (0.7 + 0.2 * rng.random((SIDE, SIDE))).astype(np.float32)


def rows(*pairs):
    return np.array(pairs, dtype=np.float64)


@pytest.fixture(scope="module")
def pretext():
    images = [lung_image(s) for s in range(4)] + [bright_image(s) for s in range(4)]
    cfg = TrainConfig(learning_rate=0.01, epochs=2, batch_size=8, seed=3)
    return pretext_pretrain(images, cfg, conv_channels=(3, 3), dropout_rate=0.0)


def make_cascade(**kwargs):
    model = init_model(2, SIDE, seed=0, conv_channels=(3, 3))
    return CascadeModels(model_a=model, model_b=model, **kwargs)


# --- multipliers --------------------------------------------------------------


def test_multiplier_from_recalls_favors_lower_recall_class():
    mult, favored = multiplier_from_recalls(0.99, 0.72)
    assert mult == pytest.approx(0.72 / 0.99)
    assert favored == 1
    mult, favored = multiplier_from_recalls(0.72, 0.99)
    assert mult == pytest.approx(0.72 / 0.99)
    assert favored == 0


def test_multiplier_equal_recalls_is_one():
    assert multiplier_from_recalls(0.9, 0.9) == (1.0, 0)


def test_multiplier_rejects_nonpositive_recalls():
    with pytest.raises(MultiplierUndefinedError):
        multiplier_from_recalls(0.0, 0.9)
    with pytest.raises(MultiplierUndefinedError):
        multiplier_from_recalls(0.9, -0.1)


def test_compute_multiplier_matches_manual_recalls():
    model = init_model(2, SIDE, seed=7, conv_channels=(3, 3))
    rng = np.random.default_rng(1)
    images = [rng.random((SIDE, SIDE)).astype(np.float32) for _ in range(20)]
    labels = np.array([0] * 10 + [1] * 10)
    preds = forward(model, stack_images(images)).argmax(axis=1)
    r0 = float(np.mean(preds[:10] == 0))
    r1 = float(np.mean(preds[10:] == 1))
    if r0 > 0 and r1 > 0:
        assert compute_multiplier(model, images, labels) == multiplier_from_recalls(r0, r1)
    else:
        with pytest.raises(MultiplierUndefinedError):
            compute_multiplier(model, images, labels)


def test_compute_multiplier_needs_both_classes():
    model = init_model(2, SIDE, seed=7, conv_channels=(3, 3))
    images = [lung_image(s) for s in range(4)]
    with pytest.raises(MultiplierUndefinedError):
        compute_multiplier(model, images, np.zeros(4, dtype=int))


# --- cascade decision rule ----------------------------------------------------


def test_healthy_gate_is_strict():
    cascade = make_cascade(healthy_factor=4.0)
    at_gate = rows((0.5, 0.125))  # dyadic values keep 0.5 > 4 * 0.125 exactly false
    b = rows((0.5, 0.5))
    predicted, _ = decide_from_probs(at_gate, b, cascade)
    assert predicted != PatientClass.HEALTHY
    predicted, _ = decide_from_probs(rows((0.51, 0.125)), b, cascade)
    assert predicted == PatientClass.HEALTHY


def test_healthy_gate_slicecount_is_strict():
    cascade = make_cascade(healthy_factor=5.0, aggregation_mode=AggregationMode.SLICE_COUNT)
    five_one = rows(*([(0.9, 0.1)] * 5 + [(0.1, 0.9)]))
    b = rows((0.5, 0.5))
    predicted, _ = decide_from_probs(five_one, b, cascade)
    assert predicted != PatientClass.HEALTHY  # 5 > 5 * 1 is false
    twentysix_five = rows(*([(0.9, 0.1)] * 26 + [(0.1, 0.9)] * 5))
    predicted, _ = decide_from_probs(twentysix_five, b, cascade)
    assert predicted == PatientClass.HEALTHY  # 26 > 5 * 5


def test_covid_cap_tie_goes_to_cap():
    cascade = make_cascade()
    sick = rows((0.1, 0.9))
    predicted, _ = decide_from_probs(sick, rows((0.5, 0.5)), cascade)
    assert predicted == PatientClass.CAP
    predicted, _ = decide_from_probs(sick, rows((0.500001, 0.499999)), cascade)
    assert predicted == PatientClass.COVID


def test_healthy_multiplier_can_flip_the_gate():
    sick = rows((0.5, 0.5))
    a = rows((0.75, 0.25))
    on = make_cascade(healthy_factor=2.0, mult_healthy=0.5, mult_healthy_target=0)
    off = make_cascade(healthy_factor=2.0)
    assert decide_from_probs(a, sick, off)[0] == PatientClass.HEALTHY
    assert decide_from_probs(a, sick, on)[0] != PatientClass.HEALTHY


def test_b_multiplier_flips_slice_count_majority():
    # Recall pair (0.99, 0.72): class 1 is recalled worse, so class 0's
    # count gets scaled by 0.72/0.99 and a 31-vs-30 majority inverts.
    mult, favored = multiplier_from_recalls(0.99, 0.72)
    sick = rows((0.1, 0.9))
    b_probs = rows(*([(0.8, 0.2)] * 31 + [(0.2, 0.8)] * 30))
    with_mult = make_cascade(
        aggregation_mode=AggregationMode.SLICE_COUNT,
        mult_b=mult,
        mult_b_target=1 - favored,
    )
    without = make_cascade(aggregation_mode=AggregationMode.SLICE_COUNT)
    assert decide_from_probs(sick, b_probs, with_mult)[0] == PatientClass.CAP
    assert decide_from_probs(sick, b_probs, without)[0] == PatientClass.COVID


def test_scores_are_raw_aggregates():
    cascade = make_cascade(mult_healthy=0.5, mult_healthy_target=0, mult_b=0.5, mult_b_target=1)
    a = rows((0.9, 0.1), (0.7, 0.3))
    b = rows((0.6, 0.4), (0.2, 0.8))
    _, scores = decide_from_probs(a, b, cascade)
    assert scores["healthy"] == pytest.approx(0.8)
    assert scores["unhealthy"] == pytest.approx(0.2)
    assert scores["covid"] == pytest.approx(0.4)
    assert scores["cap"] == pytest.approx(0.6)


def test_slice_count_aggregation_counts_argmax_votes():
    cascade = make_cascade(aggregation_mode=AggregationMode.SLICE_COUNT)
    all_zero = rows((0.9, 0.1), (0.8, 0.2), (0.6, 0.4))
    _, scores = decide_from_probs(all_zero, all_zero, cascade)
    assert scores["healthy"] == 3.0 and scores["unhealthy"] == 0.0


def test_cascade_models_validation():
    with pytest.raises(ConfigError):
        make_cascade(healthy_factor=0.0)
    with pytest.raises(ConfigError):
        make_cascade(mult_healthy=0.0)
    with pytest.raises(ConfigError):
        make_cascade(mult_b=1.5)


# --- patients and slice sets --------------------------------------------------


def test_stack_images_shape():
    batch = stack_images([lung_image(s) for s in range(3)])
    assert batch.shape == (3, 1, SIDE, SIDE)
    assert batch.dtype == np.float32
    with pytest.raises(DataError):
        stack_images([])


def test_patient_validation():
    with pytest.raises(DataError):
        Patient("p0", [])
    with pytest.raises(DataError):
        Patient("p1", [lung_image()], PatientClass.COVID, [SliceLabel.POSITIVE] * 2)
    labeled = Patient("p2", [lung_image()], PatientClass.COVID, [SliceLabel.POSITIVE])
    bare = labeled.without_label()
    assert bare.label is None and bare.slice_labels is None
    assert bare.slices[0] is labeled.slices[0]


def test_build_slice_sets_routes_by_label():
    healthy = Patient(
        "h0", [lung_image(0), lung_image(1), bright_image(0)], PatientClass.HEALTHY
    )
    covid = Patient(
        "c0",
        [lung_image(2), lung_image(3), lung_image(4)],
        PatientClass.COVID,
        [SliceLabel.POSITIVE, SliceLabel.NEGATIVE, SliceLabel.POSITIVE],
    )
    cap = Patient(
        "p0",
        [lung_image(5), lung_image(6)],
        PatientClass.CAP,
        [SliceLabel.NEGATIVE, SliceLabel.POSITIVE],
    )
    unannotated = Patient("c1", [lung_image(7)], PatientClass.COVID)
    sets = build_slice_sets([healthy, covid, cap, unannotated], SELECTION)

    # Healthy contributes its selected slices only; the bright slice is dropped.
    assert list(sets.a_labels) == [0, 0, 1, 1, 1]
    assert sets.a_images[0] is healthy.slices[0]
    assert sets.a_images[1] is healthy.slices[1]
    # Sick patients contribute infection-positive slices regardless of selection.
    assert sets.a_images[2] is covid.slices[0]
    assert sets.a_images[3] is covid.slices[2]
    assert sets.a_images[4] is cap.slices[1]
    assert list(sets.b_labels) == [0, 0, 1]
    assert sets.b_images[2] is cap.slices[1]


def test_build_slice_sets_covid_slices_feed_both_stages():
    covid = Patient(
        "c0", [lung_image(0)], PatientClass.COVID, [SliceLabel.POSITIVE]
    )
    sets = build_slice_sets([covid], SELECTION)
    assert sets.a_images == sets.b_images
    assert list(sets.a_labels) == [1] and list(sets.b_labels) == [0]


# --- training glue ------------------------------------------------------------


def test_pretext_checkpoint_stage_and_determinism():
    images = [lung_image(s) for s in range(3)] + [bright_image(s) for s in range(3)]
    cfg = TrainConfig(learning_rate=0.01, epochs=2, batch_size=4, seed=9)
    first = pretext_pretrain(images, cfg, conv_channels=(3, 3), dropout_rate=0.0)
    second = pretext_pretrain(images, cfg, conv_channels=(3, 3), dropout_rate=0.0)
    assert first.stage == TrainingStage.POST_PRETEXT
    assert first.rng_state == struct.pack("<Q", 9)
    assert models_identical(first.model, second.model)


def test_pretext_rejects_empty_input():
    with pytest.raises(TrainingError):
        pretext_pretrain([], TrainConfig(epochs=1))


def test_slice_model_requires_pretext_stage(pretext):
    cfg = TrainConfig(epochs=1, seed=0)
    wrong = type(pretext)(pretext.model, TrainingStage.FRESH, b"")
    with pytest.raises(ConfigError):
        train_slice_model(wrong, [lung_image(0)], [bright_image(0)], cfg)


def test_slice_model_requires_both_classes(pretext):
    cfg = TrainConfig(epochs=1, seed=0)
    with pytest.raises(TrainingError):
        train_slice_model(pretext, [], [bright_image(0)], cfg)
    with pytest.raises(TrainingError):
        train_slice_model(pretext, [lung_image(0)], [], cfg)


def test_slice_model_zero_epochs_is_a_pure_head_swap(pretext):
    cfg = TrainConfig(epochs=0, seed=42)
    model = train_slice_model(pretext, [lung_image(0)], [bright_image(0)], cfg)
    for (name, tensor), (ref_name, ref) in zip(
        model.param_items(), pretext.model.param_items()
    ):
        assert name == ref_name
        if name.startswith("head"):
            assert not tensor.any()
        else:
            assert np.array_equal(tensor, ref)
    probs = forward(model, stack_images([lung_image(1)]))
    assert np.allclose(probs, 0.5)


@pytest.fixture(scope="module")
def toy_cascade_data():
    """Two binary slice problems with an obvious brightness split."""
    dark = [lung_image(s) for s in range(12)]
    bright = [bright_image(s) for s in range(12)]
    mid = [lung_image(s, level=0.4) for s in range(12)]
    a = (dark + bright, np.array([0] * 12 + [1] * 12))
    b = (bright + mid, np.array([0] * 12 + [1] * 12))
    val_a = ([lung_image(s + 50) for s in range(3)] + [bright_image(s + 50) for s in range(3)],
             np.array([0, 0, 0, 1, 1, 1]))
    val_b = ([bright_image(s + 60) for s in range(3)] + [lung_image(s + 60, level=0.4) for s in range(3)],
             np.array([0, 0, 0, 1, 1, 1]))
    return a, b, val_a, val_b


def test_train_cascade_is_deterministic_and_separates_models(pretext, toy_cascade_data):
    a, b, val_a, val_b = toy_cascade_data
    cfg = TrainConfig(learning_rate=0.01, epochs=2, batch_size=8, seed=5)
    first = train_cascade(pretext, a, b, val_a, val_b, cfg)
    second = train_cascade(pretext, a, b, val_a, val_b, cfg)
    assert models_identical(first.model_a, second.model_a)
    assert models_identical(first.model_b, second.model_b)
    assert not models_identical(first.model_a, first.model_b)
    assert first.healthy_factor == 5.0
    assert 0 < first.mult_healthy <= 1.0 and 0 < first.mult_b <= 1.0


def test_train_cascade_multiplier_falls_back_on_degenerate_validation(
    pretext, toy_cascade_data, caplog
):
    a, b, val_a, _ = toy_cascade_data
    single_class = ([lung_image(70), lung_image(71)], np.array([0, 0]))
    cfg = TrainConfig(learning_rate=0.01, epochs=1, batch_size=8, seed=5)
    with caplog.at_level("WARNING", logger="ctadapt.pipeline"):
        cascade = train_cascade(pretext, a, b, val_a, single_class, cfg)
    assert cascade.mult_b == 1.0 and cascade.mult_b_target == 0
    assert any("model B" in rec.message for rec in caplog.records)


def test_derived_seed_wraps_to_uint64_range():
    assert derived_seed(2**64 - 1, 2) == 1
    assert derived_seed(7, 0) == 7


# --- patient classification ---------------------------------------------------


def uniform_cascade(pretext, **kwargs):
    """Zero-epoch heads: every slice scores [0.5, 0.5] under both models."""
    cfg = TrainConfig(epochs=0, seed=0)
    model = train_slice_model(pretext, [lung_image(0)], [bright_image(0)], cfg)
    return CascadeModels(model_a=model, model_b=model, **kwargs)


def test_classify_patient_uses_selection_and_ties_to_cap(pretext):
    cascade = uniform_cascade(pretext)
    patient = Patient("p7", [lung_image(0), bright_image(0), lung_image(1)])
    verdict = classify_patient(cascade, patient, SELECTION)
    assert verdict.patient_id == "p7"
    assert verdict.selected_indices == select_large_lung_slices(patient.slices, SELECTION)
    assert verdict.selected_indices == [0, 2]
    assert verdict.slice_probs_a.shape == (2, 2)
    # Uniform probabilities fail the strict healthy gate and tie covid vs cap.
    assert verdict.predicted == PatientClass.CAP
    assert verdict.healthy_score == pytest.approx(0.5)


def make_verdict(pid, predicted):
    p = rows((0.5, 0.5))
    return PatientVerdict(pid, predicted, 0.5, 0.5, 0.5, 0.5, p, p, [0])


def test_score_verdicts_confusion_and_recalls():
    verdicts = [
        make_verdict("a", PatientClass.HEALTHY),
        make_verdict("b", PatientClass.COVID),
        make_verdict("c", PatientClass.CAP),
        make_verdict("d", PatientClass.COVID),
    ]
    labels = {
        "a": PatientClass.HEALTHY,
        "b": PatientClass.COVID,
        "c": PatientClass.COVID,
        "d": PatientClass.COVID,
    }
    result = score_verdicts(verdicts, labels)
    assert result.accuracy == pytest.approx(0.75)
    assert result.confusion[0].tolist() == [1, 0, 0]
    assert result.confusion[1].tolist() == [0, 2, 1]
    assert result.recalls[PatientClass.HEALTHY] == 1.0
    assert result.recalls[PatientClass.COVID] == pytest.approx(2 / 3)
    assert result.recalls[PatientClass.CAP] is None  # no true-cap patients


def test_score_verdicts_requires_labels():
    with pytest.raises(DataError):
        score_verdicts([make_verdict("a", PatientClass.HEALTHY)], {})


def test_evaluate_patients_rejects_unlabeled(pretext):
    cascade = uniform_cascade(pretext)
    with pytest.raises(DataError):
        evaluate_patients(cascade, [Patient("u0", [lung_image(0)])], SELECTION)
