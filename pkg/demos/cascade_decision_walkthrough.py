"""How a patient verdict is made, and how recall multipliers tip close calls.

Runs entirely on hand-built slice probabilities; no training involved.
"""

import numpy as np

from ctadapt.nncore import init_model
from ctadapt.pipeline import (
    AggregationMode,
    CascadeModels,
    PatientClass,
    decide_from_probs,
    multiplier_from_recalls,
)


def cascade_with(mult_b, target):
    # The models themselves are irrelevant here: decide_from_probs only
    # reads the probability rows and the decision parameters.
    model = init_model(2, 8, seed=0, conv_channels=(3, 3))
    return CascadeModels(
        model_a=model,
        model_b=model,
        aggregation_mode=AggregationMode.SLICE_COUNT,
        mult_b=mult_b,
        mult_b_target=target,
    )


def main():
    # A clearly unhealthy patient: every slice votes "unhealthy" in stage A,
    # so the healthy gate (healthy > 5 x unhealthy) cannot pass and stage B
    # must arbitrate covid vs cap.
    probs_a = np.array([[0.1, 0.9]] * 61)

    # Stage B is nearly split: 31 slices lean covid, 30 lean cap.
    probs_b = np.array([[0.8, 0.2]] * 31 + [[0.2, 0.8]] * 30)

    # Validation recalls for stage B: covid slices are recalled at 0.99,
    # cap slices only at 0.72. The multiplier shrinks the aggregate of the
    # better-recalled class (covid) by 0.72/0.99, conceding borderline
    # patients to the class the model tends to miss.
    mult, favored = multiplier_from_recalls(0.99, 0.72)
    print(f"recalls (0.99, 0.72) -> multiplier {mult:.4f}, favored class {favored} (cap)")

    plain = cascade_with(1.0, 0)
    verdict, scores = decide_from_probs(probs_a, probs_b, plain)
    print(f"multiplier off:  counts covid={scores['covid']:.0f} cap={scores['cap']:.0f}"
          f" -> {verdict.value}")
    assert verdict == PatientClass.COVID  # raw 31 > 30 majority wins

    adjusted = cascade_with(mult, 1 - favored)
    verdict, scores = decide_from_probs(probs_a, probs_b, adjusted)
    print(f"multiplier on:   covid count scaled to {scores['covid'] * mult:.1f}"
          f" vs cap {scores['cap']:.0f} -> {verdict.value}")
    assert verdict == PatientClass.CAP  # 31 x 0.727 = 22.5 < 30

    print("a 31-vs-30 majority flipped to the under-recalled class, as intended")


if __name__ == "__main__":
    main()
