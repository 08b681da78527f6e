"""Procedural CT-like grayscale patients in three classes.

Slices are bright-body images with two dark lung ellipses.  Covid adds
a few mid-gray peripheral blobs inside the lungs (ground-glass analog);
cap adds one large bright consolidation in a single lung; healthy adds
nothing.  Each patient also carries a couple of near-uniform bright
slices with no lungs, which is what the dark-pixel slice selection is
supposed to throw away.

Domain shift is modelled per dataset by ``ShiftParams``: Gaussian pixel
noise (the low-dose analog), Gaussian blur (slice-thickness analog), a
brightness offset, and an optional bright streak overlay (the unrelated
comorbidity analog).  Shift is applied last and pixels re-clamped to
[0, 1].

All geometry lives in the constants below, expressed as fractions of
the image side, with seed-driven jitter.  Generation is a pure function
of the rng state; patients derive independent seeds so datasets are
reproducible regardless of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .pipeline import CLASS_ORDER, Patient, PatientClass, SliceLabel

# --- geometry constants (fractions of image side unless noted) ---------------

BODY_LEVEL = 0.85
LUNG_LEVEL = 0.15
LUNGLESS_LEVEL = 0.85
TEXTURE_SIGMA = 0.02  # per-pixel background texture

LUNG_CENTER_X = (0.32, 0.68)
LUNG_CENTER_Y = 0.52
LUNG_SEMI_X = 0.15
LUNG_SEMI_Y = 0.30
LUNG_CENTER_JITTER = 0.02
LUNG_SCALE_JITTER = 0.10

# The heart sits right of centre and bites into the inner edge of the
# right-hand lung.  It is the one consistently lateral structure, which
# is what makes the flip pretext learnable rather than memorizable.
# Kept shallow so it clips the lung edge without covering the region
# where infection blobs are placed.
HEART_CENTER_X = 0.54
HEART_CENTER_Y = 0.62
HEART_SEMI_X = 0.10
HEART_SEMI_Y = 0.15
HEART_LEVEL = 0.75

# Covid shows as a diffuse bilateral tint of the lung interior (the
# ground-glass analog) plus scattered mid-gray blobs; cap as one large
# bright consolidation.  The tint stays below the dark-pixel threshold
# so slice selection still sees infected lungs as lung.
INFILTRATE_TINT = 0.08

COVID_BLOB_COUNT = (3, 6)  # inclusive range
COVID_BLOB_RADIUS = (0.08, 0.12)
COVID_BLOB_LEVEL = (0.42, 0.52)
COVID_BLOB_PLACEMENT = (0.35, 0.85)  # radial fraction of the lung ellipse

CAP_BLOB_RADIUS = (0.17, 0.23)
CAP_BLOB_LEVEL = (0.88, 0.97)
CAP_BLOB_PLACEMENT = (0.0, 0.45)

INFECTED_SLICE_PROB = 0.85  # chance a lung slice of a sick patient shows blobs
STREAK_LEVEL = 0.95


@dataclass(frozen=True)
class ShiftParams:
    """Distribution-shift knobs applied to every generated slice."""

    noise_sigma: float = 0.0
    blur_radius: float = 0.0  # Gaussian sigma, pixels
    brightness_delta: float = 0.0
    artifact: bool = False

    def __post_init__(self):
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ConfigError("noise_sigma and blur_radius must be >= 0")


@dataclass
class GenConfig:
    patients_per_class: dict
    image_side: int = 32
    slices_per_patient: tuple[int, int] = (8, 11)
    lungless_slices_per_patient: int = 2
    seed: int = 0
    shift: ShiftParams = field(default_factory=ShiftParams)

    def __post_init__(self):
        if self.image_side < 8:
            raise ConfigError(f"image_side must be >= 8, got {self.image_side}")
        lo, hi = self.slices_per_patient
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad slices_per_patient range {self.slices_per_patient}")
        if self.lungless_slices_per_patient < 0:
            raise ConfigError("lungless_slices_per_patient must be >= 0")
        if not any(v > 0 for v in self.patients_per_class.values()):
            raise ConfigError("at least one class must have a positive patient count")
        for cls, count in self.patients_per_class.items():
            if count < 0:
                raise ConfigError(f"negative patient count for {cls}")

    @property
    def classes_present(self):
        return [c for c in CLASS_ORDER if self.patients_per_class.get(c, 0) > 0]


def _coords(side: int):
    ys, xs = np.mgrid[0:side, 0:side]
    return ys.astype(np.float64), xs.astype(np.float64)


def _ellipse_mask(side, cy, cx, ay, ax):
    ys, xs = _coords(side)
    return ((ys - cy) / ay) ** 2 + ((xs - cx) / ax) ** 2 <= 1.0


def _disk_mask(side, cy, cx, r):
    ys, xs = _coords(side)
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r


def nominal_lung_mask(side: int) -> np.ndarray:
    """Unjittered union of both lung ellipses minus the heart (analysis helper)."""
    mask = np.zeros((side, side), dtype=bool)
    for cx in LUNG_CENTER_X:
        mask |= _ellipse_mask(
            side, LUNG_CENTER_Y * side, cx * side, LUNG_SEMI_Y * side, LUNG_SEMI_X * side
        )
    heart = _ellipse_mask(
        side, HEART_CENTER_Y * side, HEART_CENTER_X * side, HEART_SEMI_Y * side, HEART_SEMI_X * side
    )
    return mask & ~heart


def _lungless_slice(side: int, rng) -> np.ndarray:
    img = np.full((side, side), LUNGLESS_LEVEL) + rng.normal(0.0, TEXTURE_SIGMA, (side, side))
    return img


def _lung_slice(side: int, rng, cls: PatientClass, infected: bool) -> np.ndarray:
    img = np.full((side, side), BODY_LEVEL) + rng.normal(0.0, TEXTURE_SIGMA, (side, side))

    lung_level = LUNG_LEVEL
    if infected and cls == PatientClass.COVID:
        lung_level = LUNG_LEVEL + INFILTRATE_TINT

    lungs = []  # (cy, cx, ay, ax, mask)
    for cx_frac in LUNG_CENTER_X:
        cy = (LUNG_CENTER_Y + rng.uniform(-LUNG_CENTER_JITTER, LUNG_CENTER_JITTER)) * side
        cx = (cx_frac + rng.uniform(-LUNG_CENTER_JITTER, LUNG_CENTER_JITTER)) * side
        scale = 1.0 + rng.uniform(-LUNG_SCALE_JITTER, LUNG_SCALE_JITTER)
        ay = LUNG_SEMI_Y * scale * side
        ax = LUNG_SEMI_X * scale * side
        mask = _ellipse_mask(side, cy, cx, ay, ax)
        img[mask] = lung_level + rng.normal(0.0, TEXTURE_SIGMA, int(mask.sum()))
        lungs.append((cy, cx, ay, ax, mask))

    hy = (HEART_CENTER_Y + rng.uniform(-LUNG_CENTER_JITTER, LUNG_CENTER_JITTER)) * side
    hx = (HEART_CENTER_X + rng.uniform(-LUNG_CENTER_JITTER, LUNG_CENTER_JITTER)) * side
    heart = _ellipse_mask(side, hy, hx, HEART_SEMI_Y * side, HEART_SEMI_X * side)
    img[heart] = HEART_LEVEL + rng.normal(0.0, TEXTURE_SIGMA, int(heart.sum()))
    lungs = [(cy, cx, ay, ax, mask & ~heart) for cy, cx, ay, ax, mask in lungs]

    if infected and cls == PatientClass.COVID:
        n_blobs = int(rng.integers(COVID_BLOB_COUNT[0], COVID_BLOB_COUNT[1] + 1))
        for _ in range(n_blobs):
            _paint_blob(img, rng, lungs, COVID_BLOB_PLACEMENT, COVID_BLOB_RADIUS, COVID_BLOB_LEVEL)
    elif infected and cls == PatientClass.CAP:
        _paint_blob(img, rng, lungs, CAP_BLOB_PLACEMENT, CAP_BLOB_RADIUS, CAP_BLOB_LEVEL)

    return img


def _paint_blob(img, rng, lungs, placement, radius, level, tries: int = 20):
    """Paint one blob clipped to lung tissue, resampling until it is visible.

    A blob that lands mostly on the heart bite or outside the lung would
    silently vanish and leave a slice labeled positive with nothing to
    see, so placements keeping fewer than a handful of pixels are
    rejected.
    """
    side = img.shape[0]
    min_px = max(3, round(0.003 * side * side))
    blob = None
    for _ in range(tries):
        cy, cx, ay, ax, lung = lungs[int(rng.integers(0, 2))]
        theta = rng.uniform(0.0, 2.0 * np.pi)
        rad = rng.uniform(*placement)
        by = cy + rad * ay * np.sin(theta)
        bx = cx + rad * ax * np.cos(theta)
        r = rng.uniform(*radius) * side
        candidate = _disk_mask(side, by, bx, r) & lung
        if int(candidate.sum()) >= min_px:
            blob = candidate
            break
        blob = candidate if blob is None else blob
    img[blob] = rng.uniform(*level)


def apply_shift(img: np.ndarray, shift: ShiftParams, rng) -> np.ndarray:
    """Blur, brighten, add noise, overlay the streak, then clamp to [0, 1]."""
    out = np.asarray(img, dtype=np.float64)
    if shift.blur_radius > 0:
        out = gaussian_filter(out, sigma=shift.blur_radius, mode="nearest")
    if shift.brightness_delta != 0.0:
        out = out + shift.brightness_delta
    if shift.noise_sigma > 0:
        out = out + rng.normal(0.0, shift.noise_sigma, out.shape)
    if shift.artifact:
        width = max(1, round(0.06 * out.shape[0]))
        row = int(rng.integers(0, out.shape[0] - width + 1))
        out[row : row + width, :] = STREAK_LEVEL
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gen_patient(cls: PatientClass, cfg: GenConfig, rng, patient_id: str = "p0") -> Patient:
    """One synthetic patient; a pure function of the rng state."""
    if cls not in cfg.classes_present:
        raise ConfigError(f"class {cls.value} not present in this configuration")
    side = cfg.image_side
    lo, hi = cfg.slices_per_patient
    n_slices = int(rng.integers(lo, hi + 1))
    n_lungless = min(cfg.lungless_slices_per_patient, n_slices - 1)
    lungless_at = set(rng.choice(n_slices, size=n_lungless, replace=False).tolist())

    sick = cls in (PatientClass.COVID, PatientClass.CAP)
    lung_positions = [i for i in range(n_slices) if i not in lungless_at]
    infected_at: set[int] = set()
    if sick:
        flags = rng.random(len(lung_positions)) < INFECTED_SLICE_PROB
        infected_at = {i for i, f in zip(lung_positions, flags) if f}
        if not infected_at:
            infected_at = {lung_positions[0]}

    slices, labels = [], []
    for i in range(n_slices):
        if i in lungless_at:
            img = _lungless_slice(side, rng)
            labels.append(SliceLabel.NEGATIVE)
        else:
            img = _lung_slice(side, rng, cls, infected=i in infected_at)
            labels.append(SliceLabel.POSITIVE if i in infected_at else SliceLabel.NEGATIVE)
        img = np.clip(img, 0.0, 1.0)
        slices.append(apply_shift(img, cfg.shift, rng))

    return Patient(
        id=patient_id,
        slices=slices,
        label=cls,
        slice_labels=labels if sick else None,
    )


def _patient_rng(seed: int, class_idx: int, patient_idx: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(class_idx, patient_idx)))


def gen_dataset(cfg: GenConfig, id_prefix: str = "") -> list[Patient]:
    """Generate all patients for one dataset and shuffle the arrival order.

    Every patient draws from its own derived seed, so the content of a
    patient depends only on (seed, class, index within class).
    """
    patients = []
    for class_idx, cls in enumerate(CLASS_ORDER):
        for j in range(cfg.patients_per_class.get(cls, 0)):
            rng = _patient_rng(cfg.seed, class_idx, j)
            pid = f"{id_prefix}{cls.value.lower()}{j:03d}"
            patients.append(gen_patient(cls, cfg, rng, pid))
    order_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(101,)))
    order = order_rng.permutation(len(patients))
    return [patients[i] for i in order]


# --- the five-dataset suite ---------------------------------------------------

SUITE_COUNTS = {
    "train": {PatientClass.HEALTHY: 26, PatientClass.COVID: 19, PatientClass.CAP: 19},
    "val": {PatientClass.HEALTHY: 13, PatientClass.COVID: 10, PatientClass.CAP: 10},
    "test1": {PatientClass.HEALTHY: 10, PatientClass.COVID: 10, PatientClass.CAP: 10},
    "test2": {PatientClass.HEALTHY: 15, PatientClass.COVID: 15},
    "test3": {PatientClass.HEALTHY: 10, PatientClass.COVID: 10, PatientClass.CAP: 10},
}

# Calibrated so the shift visibly hurts the frozen cascade (errors are
# healthy patients tipping unhealthy) while staying mild enough that most
# pseudo-labels are still right and online retraining can close the gap.
# Much above ~0.2 the frozen cascade collapses and confident wrong labels
# poison the pool instead.
TEST2_SHIFT = ShiftParams(noise_sigma=0.18)
TEST3_SHIFT = ShiftParams(noise_sigma=0.10, blur_radius=0.8, brightness_delta=-0.06, artifact=True)

SUITE_SHIFTS = {
    "train": ShiftParams(),
    "val": ShiftParams(),
    "test1": ShiftParams(),
    "test2": TEST2_SHIFT,
    "test3": TEST3_SHIFT,
}


def gen_suite(
    seed: int,
    *,
    image_side: int = 32,
    counts: dict | None = None,
    shifts: dict | None = None,
    slices_per_patient: tuple[int, int] = (9, 12),
    lungless_slices_per_patient: int = 2,
) -> dict[str, list[Patient]]:
    """Training/validation sets plus the three shifted test sets.

    test1 shares the train/val generator parameters (no shift), test2
    drops the cap class and raises pixel noise, test3 turns every knob
    on.  Each dataset derives an independent seed from ``seed``.
    """
    counts = dict(SUITE_COUNTS, **(counts or {}))
    shifts = dict(SUITE_SHIFTS, **(shifts or {}))
    suite = {}
    for set_idx, name in enumerate(("train", "val", "test1", "test2", "test3")):
        set_seed = int(
            np.random.SeedSequence(seed, spawn_key=(500 + set_idx,)).generate_state(1, np.uint64)[0]
        )
        cfg = GenConfig(
            patients_per_class=counts[name],
            image_side=image_side,
            slices_per_patient=slices_per_patient,
            lungless_slices_per_patient=lungless_slices_per_patient,
            seed=set_seed,
            shift=shifts[name],
        )
        suite[name] = gen_dataset(cfg, id_prefix=f"{name}-")
    return suite


# --- auxiliary image sets for the flip pretext -------------------------------


def gen_marker_images(n: int, side: int, seed: int) -> list[np.ndarray]:
    """Noise images with a bright block on the left; trivially flip-detectable."""
    rng = np.random.default_rng(seed)
    out = []
    bar_w = max(2, side // 8)
    for _ in range(n):
        img = rng.uniform(0.3, 0.7, (side, side))
        img[side // 4 : 3 * side // 4, 2 : 2 + bar_w] = STREAK_LEVEL
        out.append(img.astype(np.float32))
    return out


def gen_symmetric_images(n: int, side: int, seed: int) -> list[np.ndarray]:
    """Left-right mirror-symmetric noise; flips are pixel-identical."""
    rng = np.random.default_rng(seed)
    out = []
    half_w = side // 2
    for _ in range(n):
        half = rng.uniform(0.2, 0.8, (side, half_w))
        img = np.concatenate([half, half[:, ::-1]], axis=1)
        if img.shape[1] < side:  # odd side: duplicate the centre column
            img = np.concatenate([half, half[:, -1:], half[:, ::-1]], axis=1)
        out.append(img.astype(np.float32))
    return out
