"""Online loop: quarter splits, confident harvesting, pool-driven retraining."""

import json

import numpy as np
import pytest

from ctadapt.errors import ConfigError, DataError
from ctadapt.imaging import SelectionParams
from ctadapt.nncore import TrainConfig, models_identical
from ctadapt.online import (
    MODEL_A,
    MODEL_B,
    BaseBundle,
    OnlineConfig,
    PoolEntry,
    PseudoPool,
    harvest_confident,
    online_update,
    run_baseline,
    run_online,
    split_quarters,
    write_events,
)
from ctadapt.pipeline import (
    Patient,
    PatientClass,
    PatientVerdict,
    pretext_pretrain,
    train_cascade,
)

SIDE = 8
SELECTION = SelectionParams()


def dark(seed, level=0.1):
    rng = np.random.default_rng(seed)
    return (level + 0.05 * rng.random((SIDE, SIDE))).astype(np.float32)


def bright(seed):
    rng = np.random.default_rng(seed)
    return (0.7 + 0.2 * rng.random((SIDE, SIDE))).astype(np.float32)


def patient(pid, n_slices=3, label=None, seed=0):
    return Patient(pid, [dark(seed * 100 + i) for i in range(n_slices)], label)


def mk_verdict(pid, predicted, probs_a, probs_b, selected):
    a = np.asarray(probs_a, dtype=np.float64)
    b = np.asarray(probs_b, dtype=np.float64)
    return PatientVerdict(pid, predicted, 0.0, 0.0, 0.0, 0.0, a, b, selected)


# --- config and quarter splitting ----------------------------------------------


def test_online_config_validation():
    with pytest.raises(ConfigError):
        OnlineConfig(confidence_threshold=0.5)
    with pytest.raises(ConfigError):
        OnlineConfig(confidence_threshold=1.2)
    with pytest.raises(ConfigError):
        OnlineConfig(quarters=0)
    assert OnlineConfig(confidence_threshold=1.0).confidence_threshold == 1.0


def test_split_quarters_thirty_patients_four_batches():
    patients = [patient(f"p{i:02d}") for i in range(30)]
    batches = split_quarters(patients, 4)
    assert [len(b.patients) for b in batches] == [8, 8, 7, 7]
    assert [b.batch_index for b in batches] == [0, 1, 2, 3]
    flat = [p.id for b in batches for p in b.patients]
    assert flat == [p.id for p in patients]  # arrival order, contiguous


def test_split_quarters_remainder_goes_to_early_batches():
    patients = [patient(f"p{i}") for i in range(7)]
    assert [len(b.patients) for b in split_quarters(patients, 3)] == [3, 2, 2]
    assert [len(b.patients) for b in split_quarters(patients, 1)] == [7]


def test_split_quarters_errors():
    patients = [patient("p0")]
    with pytest.raises(ConfigError):
        split_quarters(patients, 0)
    with pytest.raises(DataError):
        split_quarters([], 2)
    with pytest.raises(DataError):
        split_quarters(patients, 2)


# --- pool ----------------------------------------------------------------------


def entry(target=MODEL_A, label=0, conf=0.95):
    return PoolEntry(dark(0), target, label, 0, "p0", conf)


def test_pool_for_target_filters_and_labels():
    pool = PseudoPool([entry(MODEL_A, 0), entry(MODEL_B, 1), entry(MODEL_A, 1)])
    images, labels = pool.for_target(MODEL_A)
    assert len(images) == 2 and labels.tolist() == [0, 1]
    _, b_labels = pool.for_target(MODEL_B)
    assert b_labels.tolist() == [1]
    assert len(pool) == 3


def test_pool_rejects_unknown_target():
    pool = PseudoPool([entry("C")])
    with pytest.raises(DataError):
        pool.validate_targets()


# --- harvesting ----------------------------------------------------------------


def test_harvest_healthy_feeds_model_a_only():
    p = patient("p0", n_slices=3)
    v = mk_verdict(
        "p0",
        PatientClass.HEALTHY,
        probs_a=[(0.95, 0.05), (0.85, 0.15), (0.92, 0.08)],
        probs_b=[(0.99, 0.01), (0.99, 0.01), (0.99, 0.01)],
        selected=[0, 1, 2],
    )
    entries = harvest_confident([v], [p], OnlineConfig(), batch_index=2)
    assert [(e.model_target, e.pseudo_label) for e in entries] == [(MODEL_A, 0), (MODEL_A, 0)]
    assert entries[0].image is p.slices[0]
    assert entries[1].image is p.slices[2]
    assert entries[0].source_batch == 2
    assert entries[0].source_patient == "p0"
    assert entries[0].confidence == pytest.approx(0.95)


def test_harvest_covid_feeds_both_models():
    p = patient("p1", n_slices=2)
    v = mk_verdict(
        "p1",
        PatientClass.COVID,
        probs_a=[(0.05, 0.95), (0.30, 0.70)],
        probs_b=[(0.91, 0.09), (0.95, 0.05)],
        selected=[0, 1],
    )
    entries = harvest_confident([v], [p], OnlineConfig(), batch_index=0)
    got = {(e.model_target, e.pseudo_label, e.image is p.slices[0]) for e in entries}
    # Slice 0: unhealthy for A, covid for B.  Slice 1 is confident for B only.
    assert got == {(MODEL_A, 1, True), (MODEL_B, 0, True), (MODEL_B, 0, False)}


def test_harvest_cap_labels():
    p = patient("p2", n_slices=1)
    v = mk_verdict(
        "p2", PatientClass.CAP, probs_a=[(0.02, 0.98)], probs_b=[(0.04, 0.96)], selected=[0]
    )
    entries = harvest_confident([v], [p], OnlineConfig())
    assert {(e.model_target, e.pseudo_label) for e in entries} == {(MODEL_A, 1), (MODEL_B, 1)}


def test_harvest_threshold_is_inclusive():
    p = patient("p3", n_slices=2)
    v = mk_verdict(
        "p3",
        PatientClass.HEALTHY,
        probs_a=[(0.9, 0.1), (0.8999, 0.1001)],
        probs_b=[(0.5, 0.5), (0.5, 0.5)],
        selected=[0, 1],
    )
    entries = harvest_confident([v], [p], OnlineConfig(confidence_threshold=0.9))
    assert len(entries) == 1 and entries[0].confidence == pytest.approx(0.9)


def test_harvest_requires_agreement_with_verdict():
    # A slice confidently healthy inside a covid-verdict patient is skipped:
    # the verdict dictates the pseudo-label and its probability is tiny.
    p = patient("p4", n_slices=2)
    v = mk_verdict(
        "p4",
        PatientClass.COVID,
        probs_a=[(0.97, 0.03), (0.05, 0.95)],
        probs_b=[(0.2, 0.8), (0.93, 0.07)],
        selected=[0, 1],
    )
    entries = harvest_confident([v], [p], OnlineConfig())
    assert [(e.model_target, e.pseudo_label, e.image is p.slices[1]) for e in entries] == [
        (MODEL_A, 1, True),
        (MODEL_B, 0, True),
    ]


def test_harvest_respects_selected_indices():
    p = patient("p5", n_slices=4)
    v = mk_verdict(
        "p5",
        PatientClass.HEALTHY,
        probs_a=[(0.99, 0.01), (0.99, 0.01)],
        probs_b=[(0.5, 0.5), (0.5, 0.5)],
        selected=[1, 3],
    )
    entries = harvest_confident([v], [p], OnlineConfig())
    assert entries[0].image is p.slices[1]
    assert entries[1].image is p.slices[3]


def test_harvest_unknown_patient_and_empty_result():
    v = mk_verdict("ghost", PatientClass.HEALTHY, [(0.99, 0.01)], [(0.5, 0.5)], [0])
    with pytest.raises(DataError):
        harvest_confident([v], [patient("other")], OnlineConfig())
    timid = mk_verdict("p6", PatientClass.HEALTHY, [(0.6, 0.4)], [(0.5, 0.5)], [0])
    assert harvest_confident([timid], [patient("p6", n_slices=1)], OnlineConfig()) == []


# --- retraining ------------------------------------------------------------------


@pytest.fixture(scope="module")
def bundle():
    darks = [dark(s) for s in range(10)]
    brights = [bright(s) for s in range(10)]
    mids = [dark(s, level=0.4) for s in range(10)]
    pretext = pretext_pretrain(
        darks[:4] + brights[:4],
        TrainConfig(learning_rate=0.01, epochs=2, batch_size=8, seed=3),
        conv_channels=(3, 3),
        dropout_rate=0.0,
    )
    train_a = (darks + brights, np.array([0] * 10 + [1] * 10))
    train_b = (brights + mids, np.array([0] * 10 + [1] * 10))
    val_a = ([dark(s + 30) for s in range(2)] + [bright(s + 30) for s in range(2)],
             np.array([0, 0, 1, 1]))
    val_b = ([bright(s + 40) for s in range(2)] + [dark(s + 40, level=0.4) for s in range(2)],
             np.array([0, 0, 1, 1]))
    cfg = TrainConfig(learning_rate=0.01, epochs=2, batch_size=8, seed=5)
    cascade = train_cascade(pretext, train_a, train_b, val_a, val_b, cfg)
    return BaseBundle(cascade, pretext, train_a, train_b, val_a, val_b, cfg)


def test_online_update_empty_pool_reproduces_base(bundle):
    cascade = online_update(bundle, PseudoPool(), bundle.train_cfg)
    assert models_identical(cascade.model_a, bundle.cascade.model_a)
    assert models_identical(cascade.model_b, bundle.cascade.model_b)
    assert cascade.mult_healthy == bundle.cascade.mult_healthy
    assert cascade.mult_b == bundle.cascade.mult_b


def test_online_update_a_only_pool_leaves_model_b_untouched(bundle):
    pool = PseudoPool([PoolEntry(dark(99), MODEL_A, 0, 0, "px", 0.97)])
    cascade = online_update(bundle, pool, bundle.train_cfg)
    assert models_identical(cascade.model_b, bundle.cascade.model_b)
    assert not models_identical(cascade.model_a, bundle.cascade.model_a)


def test_online_update_is_deterministic(bundle):
    pool = PseudoPool(
        [PoolEntry(dark(98), MODEL_A, 1, 0, "px", 0.95), PoolEntry(dark(97), MODEL_B, 0, 0, "py", 0.92)]
    )
    first = online_update(bundle, pool, bundle.train_cfg)
    second = online_update(bundle, pool, bundle.train_cfg)
    assert models_identical(first.model_a, second.model_a)
    assert models_identical(first.model_b, second.model_b)


def test_online_update_rejects_corrupt_pool(bundle):
    with pytest.raises(DataError):
        online_update(bundle, PseudoPool([entry("C")]), bundle.train_cfg)


# --- full online loop ------------------------------------------------------------


def stream(labels=True):
    classes = [
        PatientClass.HEALTHY, PatientClass.COVID, PatientClass.CAP, PatientClass.COVID,
        PatientClass.HEALTHY, PatientClass.CAP, PatientClass.COVID, PatientClass.HEALTHY,
    ]
    return [
        patient(f"s{i}", n_slices=3, label=cls if labels else None, seed=i)
        for i, cls in enumerate(classes)
    ]


def test_run_online_quarter_zero_matches_baseline(bundle):
    patients = stream()
    cfg = OnlineConfig(quarters=4)
    online = run_online(patients, bundle, cfg, SELECTION)
    base = run_baseline(patients, bundle.cascade, SELECTION)
    first_batch = split_quarters(patients, 4)[0].patients
    for ov, bv in zip(online.verdicts[: len(first_batch)], base.verdicts):
        assert ov.patient_id == bv.patient_id
        assert ov.predicted == bv.predicted
        assert np.array_equal(ov.slice_probs_a, bv.slice_probs_a)
        assert np.array_equal(ov.slice_probs_b, bv.slice_probs_b)


def test_run_online_events_shape(bundle):
    patients = stream()
    online = run_online(patients, bundle, OnlineConfig(quarters=3), SELECTION)
    assert [e["batch_index"] for e in online.events] == [0, 1, 2]
    assert [e["n_patients"] for e in online.events] == [3, 3, 2]
    sizes = [e["pool_size"] for e in online.events]
    assert sizes == sorted(sizes)  # cumulative pool never shrinks
    for e in online.events:
        assert set(e["harvested"]) == {"a_healthy", "a_unhealthy", "b_covid", "b_cap"}
        assert e["retrain_seconds"] >= 0
        assert e["accuracy"] is not None
        assert set(e["multipliers"]) == {"healthy", "healthy_target", "b", "b_target"}
    assert len(online.verdicts) == len(patients)
    assert online.result.accuracy == pytest.approx(
        np.mean([v.predicted == p.label for v, p in zip(online.verdicts, patients)])
    )


def test_run_online_is_deterministic(bundle):
    patients = stream()
    first = run_online(patients, bundle, OnlineConfig(), SELECTION)
    second = run_online(patients, bundle, OnlineConfig(), SELECTION)
    assert models_identical(first.final_cascade.model_a, second.final_cascade.model_a)
    assert models_identical(first.final_cascade.model_b, second.final_cascade.model_b)
    assert [v.predicted for v in first.verdicts] == [v.predicted for v in second.verdicts]


def test_run_online_noncumulative_pool_holds_last_harvest_only(bundle):
    patients = stream()
    online = run_online(patients, bundle, OnlineConfig(cumulative=False), SELECTION)
    last = online.events[-1]
    assert last["pool_size"] == sum(last["harvested"].values())
    assert len(online.pool) == last["pool_size"]


def test_run_online_true_labels_never_reach_training(bundle):
    truthful = stream()
    poisoned = stream()
    wrong = {
        PatientClass.HEALTHY: PatientClass.COVID,
        PatientClass.COVID: PatientClass.CAP,
        PatientClass.CAP: PatientClass.HEALTHY,
    }
    for p in poisoned:
        p.label = wrong[p.label]
    a = run_online(truthful, bundle, OnlineConfig(), SELECTION)
    b = run_online(poisoned, bundle, OnlineConfig(), SELECTION)
    assert models_identical(a.final_cascade.model_a, b.final_cascade.model_a)
    assert models_identical(a.final_cascade.model_b, b.final_cascade.model_b)
    assert len(a.pool) == len(b.pool)
    assert [v.predicted for v in a.verdicts] == [v.predicted for v in b.verdicts]
    # Labels exist purely for scoring; a derangement flips every hit to a miss.
    assert a.result.accuracy + b.result.accuracy <= 1.0


def test_run_online_unlabeled_stream_yields_no_score(bundle):
    online = run_online(stream(labels=False), bundle, OnlineConfig(quarters=2), SELECTION)
    assert online.result is None
    assert all(e["accuracy"] is None for e in online.events)
    assert len(online.verdicts) == 8


def test_write_events_round_trip(bundle, tmp_path):
    online = run_online(stream(), bundle, OnlineConfig(quarters=2), SELECTION)
    path = tmp_path / "events.jsonl"
    write_events(online.events, path)
    lines = path.read_text().strip().split("\n")
    assert [json.loads(line)["batch_index"] for line in lines] == [0, 1]
