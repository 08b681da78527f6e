"""Confidence-based online pseudo-label adaptation for CT slice cascades.

The package trains a two-stage slice-classifier cascade (healthy vs
unhealthy, then covid vs cap), aggregates slice scores into patient
verdicts, and adapts the cascade to unlabeled shifted data by
harvesting confident pseudo-labeled slices from quarter batches and
retraining from a self-supervised restore point.
"""

__version__ = "0.1.0"
