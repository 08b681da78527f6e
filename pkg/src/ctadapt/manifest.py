"""Dataset persistence: one PGM file per slice plus a JSON manifest.

Layout under a dataset directory::

    manifest.json
    <patient_id>/000.pgm
    <patient_id>/001.pgm
    ...

The manifest stores patient order, per-patient slice order, and the
optional patient/slice labels.  Slice paths are relative to the
manifest's directory so a dataset directory can be moved wholesale.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import DataError
from .imaging import read_pgm, rescale_u8, write_pgm
from .pipeline import Patient, PatientClass, SliceLabel

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class ManifestPatient:
    id: str
    slice_files: list[str]
    label: str | None = None
    slice_labels: list[str] | None = None


@dataclass
class DatasetManifest:
    format_version: int
    patients: list[ManifestPatient]


def _validate_manifest(manifest: DatasetManifest, base: Path) -> None:
    if manifest.format_version != MANIFEST_VERSION:
        raise DataError(
            f"unsupported manifest format_version {manifest.format_version}, "
            f"expected {MANIFEST_VERSION}"
        )
    allowed_labels = {c.value for c in PatientClass}
    allowed_slice_labels = {s.value for s in SliceLabel}
    seen = set()
    for p in manifest.patients:
        if p.id in seen:
            raise DataError(f"duplicate patient id {p.id!r} in manifest")
        seen.add(p.id)
        if not p.slice_files:
            raise DataError(f"patient {p.id!r} lists no slice files")
        if p.label is not None and p.label not in allowed_labels:
            raise DataError(f"patient {p.id!r} has unknown label {p.label!r}")
        if p.slice_labels is not None:
            if len(p.slice_labels) != len(p.slice_files):
                raise DataError(
                    f"patient {p.id!r}: {len(p.slice_labels)} slice labels "
                    f"for {len(p.slice_files)} slices"
                )
            for sl in p.slice_labels:
                if sl not in allowed_slice_labels:
                    raise DataError(f"patient {p.id!r} has unknown slice label {sl!r}")
        for rel in p.slice_files:
            if not (base / rel).exists():
                raise DataError(f"manifest references missing file {base / rel}")


def save_dataset(patients: list[Patient], out_dir) -> Path:
    """Write every slice as PGM plus the manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in patients:
        pdir = out / p.id
        pdir.mkdir(parents=True, exist_ok=True)
        files = []
        for i, img in enumerate(p.slices):
            rel = f"{p.id}/{i:03d}.pgm"
            write_pgm(out / rel, img)
            files.append(rel)
        entries.append(
            ManifestPatient(
                id=p.id,
                slice_files=files,
                label=p.label.value if p.label is not None else None,
                slice_labels=(
                    [sl.value for sl in p.slice_labels]
                    if p.slice_labels is not None
                    else None
                ),
            )
        )
    manifest = DatasetManifest(format_version=MANIFEST_VERSION, patients=entries)
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {p} is not valid JSON: {exc}") from exc
    try:
        patients = [ManifestPatient(**entry) for entry in payload["patients"]]
        manifest = DatasetManifest(payload["format_version"], patients)
    except (KeyError, TypeError) as exc:
        raise DataError(f"manifest {p} has malformed structure: {exc}") from exc
    _validate_manifest(manifest, p.parent)
    return manifest


def load_dataset(path) -> list[Patient]:
    """Read a manifest plus its PGM slices back into Patient values."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    manifest = load_manifest(p)
    base = p.parent
    patients = []
    for entry in manifest.patients:
        slices = [rescale_u8(read_pgm(base / rel)) for rel in entry.slice_files]
        patients.append(
            Patient(
                id=entry.id,
                slices=slices,
                label=PatientClass(entry.label) if entry.label is not None else None,
                slice_labels=(
                    [SliceLabel(sl) for sl in entry.slice_labels]
                    if entry.slice_labels is not None
                    else None
                ),
            )
        )
    return patients


def ingest_directory(directory, manifest_out) -> Path:
    """Scan per-patient PGM folders into a manifest for unlabeled data.

    Each immediate subdirectory is one patient; its ``*.pgm`` files,
    sorted by name, become the slice order.  Subdirectories without any
    PGM file are skipped with a warning.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    out = Path(manifest_out)
    base = out.parent if out.suffix else out
    entries = []
    for sub in sorted(d for d in root.iterdir() if d.is_dir()):
        pgms = sorted(sub.glob("*.pgm"))
        if not pgms:
            logger.warning("patient folder %s has no PGM files; skipped", sub)
            continue
        rel_files = []
        for f in pgms:
            read_pgm(f)  # malformed slice -> fail now, not at training time
            rel_files.append(str(f.resolve().relative_to(base.resolve())) if _is_within(f, base) else str(f.resolve()))
        entries.append(ManifestPatient(id=sub.name, slice_files=rel_files))
    if not entries:
        raise DataError(f"no patient folders with PGM files under {root}")
    manifest = DatasetManifest(format_version=MANIFEST_VERSION, patients=entries)
    if out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
    else:
        out.mkdir(parents=True, exist_ok=True)
        out = out / MANIFEST_NAME
    out.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return out


def _is_within(path: Path, base: Path) -> bool:
    try:
        path.resolve().relative_to(base.resolve())
        return True
    except ValueError:
        return False
