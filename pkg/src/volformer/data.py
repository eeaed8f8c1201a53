"""Volume I/O, manifests, padding, FC extraction, folds, synthetic data.

Volume files are a little-endian container: magic ``VFV1``, u32 rank, u32
extents, raw float32 row-major payload, trailing u32 CRC32 of the payload.
Manifests are CSV with header ``subject_id,site_id,label,modality,path,
pheno_0..pheno_m``; volume paths are relative to the manifest's directory,
``modality`` is ``fmri``, ``smri`` or ``fc``, and empty phenotype cells are
treated as masked-absent.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, ParseError, PlanError

VOLUME_MAGIC = b"VFV1"
MAX_RANK = 8


# ---------------------------------------------------------------------------
# domain types


@dataclass
class VolumeSample:
    subject_id: str
    site_id: str
    label: int
    modality: str
    volume: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        if self.modality not in ("fmri", "smri"):
            raise DataError(f"unknown modality {self.modality!r}")
        if self.volume.size == 0 or any(e < 1 for e in self.volume.shape):
            raise DataError(f"volume extents must be positive, got {self.volume.shape}")
        if self.label < 0:
            raise DataError(f"label must be a class index, got {self.label}")


@dataclass
class SubjectRecord:
    subject_id: str
    site_id: str
    label: int
    fmri_volumes: list[VolumeSample] = field(default_factory=list)
    smri: VolumeSample | None = None
    fc_vector: np.ndarray | None = None
    phenotype: np.ndarray | None = None
    pheno_mask: np.ndarray | None = None

    def validate(self) -> None:
        for s in self.fmri_volumes:
            if s.subject_id != self.subject_id or s.label != self.label:
                raise DataError(
                    f"volume of subject {s.subject_id!r} (label {s.label}) filed "
                    f"under subject {self.subject_id!r} (label {self.label})")
        if self.fc_vector is not None:
            fc = np.asarray(self.fc_vector)
            if fc.min(initial=0.0) < -1 - 1e-9 or fc.max(initial=0.0) > 1 + 1e-9:
                raise DataError(
                    f"fc entries for {self.subject_id!r} fall outside [-1, 1]")


@dataclass
class FoldPlan:
    fold_count: int
    assignments: dict[str, int]
    seed: int

    def fold_of(self, subject_id: str) -> int:
        return self.assignments[subject_id]

    def split(self, records: list[SubjectRecord], fold: int
              ) -> tuple[list[SubjectRecord], list[SubjectRecord]]:
        if not 0 <= fold < self.fold_count:
            raise PlanError(f"fold {fold} out of range for {self.fold_count} folds")
        train, test = [], []
        for rec in records:
            if rec.subject_id not in self.assignments:
                raise PlanError(f"subject {rec.subject_id!r} is not in the fold plan")
            (test if self.assignments[rec.subject_id] == fold else train).append(rec)
        return train, test


@dataclass(frozen=True)
class SyntheticSpec:
    """Multi-site synthetic volumes with a planted class-specific blob.

    Each subject has one smooth underlying volume (filtered Gaussian noise
    plus a Gaussian-falloff blob at the class center); each of the subject's
    volumes adds i.i.d. jitter (sigma = jitter_fraction * noise_sigma); each
    site applies an affine intensity transform gain*v + offset whose
    parameters are spread evenly across the configured ranges. Subjects with
    the same class and index at different sites share the underlying volume,
    so site pairs differ only by the affine map.
    """

    site_count: int = 2
    class_count: int = 2
    volume_extent: tuple[int, int, int] = (16, 18, 16)
    blob_centers: tuple[tuple[int, int, int], ...] = ((4, 4, 4), (11, 13, 11))
    blob_radius: tuple[float, ...] = (2.0, 2.0)
    blob_amplitude: float = 5.0
    noise_sigma: float = 1.0
    smoothness: float = 1.5
    jitter_fraction: float = 1.0
    gain_range: tuple[float, float] = (0.5, 2.0)
    offset_range: tuple[float, float] = (-3.0, 3.0)
    subjects_per_class_per_site: int = 5
    volumes_per_subject: int = 6
    with_smri: bool = False
    with_fc: bool = False
    fc_parcels: int = 8
    with_pheno: bool = False
    pheno_dim: int = 4
    pheno_signal: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.site_count < 1 or self.class_count < 2:
            raise ConfigError(
                f"need >=1 site and >=2 classes, got {self.site_count}/{self.class_count}")
        if len(self.volume_extent) != 3 or any(e < 2 for e in self.volume_extent):
            raise ConfigError(f"volume_extent must be three extents >= 2, got "
                              f"{self.volume_extent}")
        if len(self.blob_centers) != self.class_count:
            raise ConfigError(
                f"{self.class_count} classes need {self.class_count} blob centers, "
                f"got {len(self.blob_centers)}")
        if len(self.blob_radius) != self.class_count:
            raise ConfigError("blob_radius needs one entry per class")
        for c, center in enumerate(self.blob_centers):
            if any(not 0 <= x < e for x, e in zip(center, self.volume_extent)):
                raise ConfigError(
                    f"class {c} blob center {center} outside volume {self.volume_extent}")
        if self.blob_amplitude <= 0:
            raise ConfigError(f"blob amplitude must be > 0, got {self.blob_amplitude}")
        if any(r <= 0 for r in self.blob_radius):
            raise ConfigError(f"blob radius must be > 0, got {self.blob_radius}")
        if self.noise_sigma < 0 or self.smoothness < 0 or self.jitter_fraction < 0:
            raise ConfigError("noise sigma, smoothness and jitter must be >= 0")
        if not (0 < self.gain_range[0] <= self.gain_range[1]):
            raise ConfigError(f"gain range must be positive and ordered, got "
                              f"{self.gain_range}")
        if self.offset_range[0] > self.offset_range[1]:
            raise ConfigError(f"offset range is reversed: {self.offset_range}")
        if self.subjects_per_class_per_site < 1 or self.volumes_per_subject < 1:
            raise ConfigError("need >=1 subject per class per site and >=1 volume each")
        if self.with_fc and self.fc_parcels < 2:
            raise ConfigError("fc_parcels must be >= 2 when with_fc is set")
        if self.with_pheno and self.pheno_dim < 1:
            raise ConfigError("pheno_dim must be >= 1 when with_pheno is set")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        if not isinstance(doc, dict):
            raise ConfigError(f"synthetic spec must be an object, got {type(doc).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in doc:
                continue
            v = doc[f.name]
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            kwargs[f.name] = v
        try:
            spec = cls(**kwargs)
        except TypeError as err:
            raise ConfigError(str(err)) from None
        spec.validate()
        return spec


# ---------------------------------------------------------------------------
# volume file format


def write_volume(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise DataError(f"volume rank {arr.ndim} outside 1..{MAX_RANK}")
    payload = arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_volume(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise DataError(f"cannot read volume file {path}: {err}") from None
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise ParseError(f"volume file truncated while reading {what}", offset)
        piece = blob[offset:offset + n]
        offset += n
        return piece

    magic = take(4, "magic")
    if magic != VOLUME_MAGIC:
        raise ParseError(f"bad volume magic {magic!r}", 0)
    rank, = struct.unpack("<I", take(4, "rank"))
    if not 1 <= rank <= MAX_RANK:
        raise ParseError(f"volume rank {rank} outside 1..{MAX_RANK}", 4)
    shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
    if any(e < 1 for e in shape):
        raise ParseError(f"non-positive extent in {shape}", 8)
    count = int(np.prod(shape, dtype=np.int64))
    payload = take(4 * count, "payload")
    crc_offset = offset
    stored_crc, = struct.unpack("<I", take(4, "checksum"))
    if (zlib.crc32(payload) & 0xFFFFFFFF) != stored_crc:
        raise ParseError("payload checksum mismatch", crc_offset)
    if offset != len(blob):
        raise ParseError(f"{len(blob) - offset} trailing bytes", offset)
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def load_volume(path, subject_id: str = "", site_id: str = "", label: int = 0,
                modality: str = "fmri") -> VolumeSample:
    arr = read_volume(path)
    degenerate = bool(arr.max() == arr.min())
    return VolumeSample(subject_id, site_id, label, modality, arr, degenerate)


# ---------------------------------------------------------------------------
# padding


def pad_volume(v, target: tuple[int, int, int] = (64, 72, 64),
               allow_crop: bool = False) -> np.ndarray:
    """Zero-pad a volume to ``target``, centered with floor offsets.

    Oversized axes are an error by default; ``allow_crop=True`` opts in to a
    centered crop for data whose extent exceeds the target on some axis.
    """
    arr = np.asarray(v.data if hasattr(v, "data") else v, dtype=np.float32)
    if arr.ndim != len(target):
        raise DataError(f"volume rank {arr.ndim} does not match target rank {len(target)}")
    for axis, (src, dst) in enumerate(zip(arr.shape, target)):
        if src > dst and not allow_crop:
            raise DataError(
                f"volume extent {src} exceeds padding target {dst} on axis {axis}; "
                f"padding cannot shrink (pass allow_crop to center-crop instead)")
    if allow_crop:
        slices = []
        for src, dst in zip(arr.shape, target):
            if src > dst:
                lo = (src - dst) // 2
                slices.append(slice(lo, lo + dst))
            else:
                slices.append(slice(None))
        arr = arr[tuple(slices)]
    out = np.zeros(target, dtype=np.float32)
    offsets = tuple((dst - src) // 2 for src, dst in zip(arr.shape, target))
    region = tuple(slice(o, o + s) for o, s in zip(offsets, arr.shape))
    out[region] = arr
    return out


# ---------------------------------------------------------------------------
# functional connectivity


def compute_fc(series: np.ndarray, parcellation: np.ndarray, p: int
               ) -> tuple[np.ndarray, list[int]]:
    """Pearson correlation (population covariance) between ROI-mean series.

    Returns the p x p matrix and the 1-based ids of zero-variance ROIs whose
    rows/columns (including diagonal) were zeroed.
    """
    series = np.asarray(series, dtype=np.float64)
    parcellation = np.asarray(parcellation)
    if series.ndim != 4:
        raise DataError(f"series must be (T, D, H, W), got {series.shape}")
    if series.shape[0] < 3:
        raise DataError(f"need at least 3 time points, got {series.shape[0]}")
    if parcellation.shape != series.shape[1:]:
        raise DataError(
            f"parcellation shape {parcellation.shape} does not match volume "
            f"extents {series.shape[1:]}")
    t = series.shape[0]
    flat = series.reshape(t, -1)
    labels = parcellation.reshape(-1)
    roi_series = np.zeros((t, p))
    for roi in range(1, p + 1):
        mask = labels == roi
        if not mask.any():
            raise DataError(f"ROI id {roi} has no voxels in the parcellation")
        roi_series[:, roi - 1] = flat[:, mask].mean(axis=1)
    centered = roi_series - roi_series.mean(axis=0, keepdims=True)
    std = np.sqrt((centered ** 2).mean(axis=0))
    flagged = [i + 1 for i in np.nonzero(std == 0)[0]]
    safe = np.where(std == 0, 1.0, std)
    normed = centered / safe
    fc = (normed.T @ normed) / t
    alive = (std > 0).astype(np.float64)
    fc *= np.outer(alive, alive)
    np.fill_diagonal(fc, alive)
    return np.clip(fc, -1.0, 1.0).astype(np.float32), flagged


# ---------------------------------------------------------------------------
# fold planning


def plan_folds(records: list[SubjectRecord], k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified subject-level fold assignment, deterministic under seed."""
    if k < 2:
        raise PlanError(f"need at least 2 folds, got {k}")
    by_class: dict[int, list[str]] = {}
    seen: dict[str, int] = {}
    for rec in records:
        if rec.subject_id in seen:
            if seen[rec.subject_id] != rec.label:
                raise PlanError(f"subject {rec.subject_id!r} appears with two labels")
            continue
        seen[rec.subject_id] = rec.label
        by_class.setdefault(rec.label, []).append(rec.subject_id)
    assignments: dict[str, int] = {}
    rng = np.random.default_rng(seed)
    for label in sorted(by_class):
        subjects = sorted(by_class[label])
        if len(subjects) < k:
            raise PlanError(
                f"class {label} has {len(subjects)} subjects, fewer than {k} folds")
        order = rng.permutation(len(subjects))
        for slot, idx in enumerate(order):
            assignments[subjects[idx]] = slot % k
    return FoldPlan(fold_count=k, assignments=assignments, seed=seed)


# ---------------------------------------------------------------------------
# synthetic generation


def _site_affines(spec: SyntheticSpec) -> list[tuple[float, float]]:
    """Per-site (gain, offset), spread evenly across the configured ranges."""
    out = []
    for i in range(spec.site_count):
        frac = i / max(1, spec.site_count - 1)
        gain = spec.gain_range[0] + frac * (spec.gain_range[1] - spec.gain_range[0])
        offset = spec.offset_range[0] + frac * (spec.offset_range[1] - spec.offset_range[0])
        out.append((gain, offset))
    return out


def _blob(spec: SyntheticSpec, label: int) -> np.ndarray:
    center = spec.blob_centers[label]
    radius = spec.blob_radius[label]
    grids = np.meshgrid(*[np.arange(e, dtype=np.float64) for e in spec.volume_extent],
                        indexing="ij")
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return (spec.blob_amplitude * np.exp(-r2 / (2.0 * radius ** 2))).astype(np.float64)


def _smooth_noise(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    noise = rng.normal(0.0, spec.noise_sigma, size=spec.volume_extent)
    if spec.smoothness > 0 and spec.noise_sigma > 0:
        noise = gaussian_filter(noise, sigma=spec.smoothness)
    return noise


def generate_synthetic(spec: SyntheticSpec) -> list[SubjectRecord]:
    """Deterministic multi-site cohort with a planted class-specific blob."""
    spec.validate()
    affines = _site_affines(spec)
    records: list[SubjectRecord] = []
    jitter_sigma = spec.jitter_fraction * spec.noise_sigma
    for site in range(spec.site_count):
        gain, offset = affines[site]
        site_id = f"site{site:02d}"
        for label in range(spec.class_count):
            blob = _blob(spec, label)
            for idx in range(spec.subjects_per_class_per_site):
                subject_id = f"s{site:02d}c{label}n{idx:03d}"
                base_rng = np.random.default_rng((spec.seed, label, idx, 0))
                underlying = _smooth_noise(base_rng, spec) + blob
                volumes = []
                for vol in range(spec.volumes_per_subject):
                    vol_rng = np.random.default_rng((spec.seed, label, idx, 1, vol))
                    jitter = (vol_rng.normal(0.0, jitter_sigma, size=spec.volume_extent)
                              if jitter_sigma > 0 else 0.0)
                    raw = gain * (underlying + jitter) + offset
                    arr = raw.astype(np.float32)
                    volumes.append(VolumeSample(
                        subject_id, site_id, label, "fmri", arr,
                        degenerate=bool(arr.max() == arr.min())))
                record = SubjectRecord(subject_id, site_id, label, volumes)
                if spec.with_smri:
                    smri_rng = np.random.default_rng((spec.seed, label, idx, 2))
                    raw = gain * _smooth_noise(smri_rng, spec) + offset
                    record.smri = VolumeSample(subject_id, site_id, label, "smri",
                                               raw.astype(np.float32))
                if spec.with_fc:
                    fc_rng = np.random.default_rng((spec.seed, label, idx, 3))
                    latent = fc_rng.normal(size=(24, spec.fc_parcels))
                    centered = latent - latent.mean(axis=0, keepdims=True)
                    std = np.sqrt((centered ** 2).mean(axis=0))
                    normed = centered / np.where(std == 0, 1.0, std)
                    fc = np.clip((normed.T @ normed) / 24.0, -1.0, 1.0)
                    np.fill_diagonal(fc, 1.0)
                    record.fc_vector = fc.astype(np.float32).reshape(-1)
                if spec.with_pheno:
                    ph_rng = np.random.default_rng((spec.seed, label, idx, 4))
                    values = ph_rng.normal(size=spec.pheno_dim)
                    if spec.pheno_signal > 0:
                        values[0] += (label - (spec.class_count - 1) / 2.0) * spec.pheno_signal
                    record.phenotype = values.astype(np.float32)
                    record.pheno_mask = np.ones(spec.pheno_dim, dtype=np.float32)
                record.validate()
                records.append(record)
    return records


# ---------------------------------------------------------------------------
# manifests


def write_dataset(records: list[SubjectRecord], out_dir) -> Path:
    """Write volumes plus a manifest CSV; returns the manifest path."""
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    pheno_dim = 0
    for rec in records:
        if rec.phenotype is not None:
            pheno_dim = max(pheno_dim, len(rec.phenotype))
    header = ["subject_id", "site_id", "label", "modality", "path"]
    header += [f"pheno_{i}" for i in range(pheno_dim)]
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)

        def pheno_cells(rec, first_row: bool) -> list[str]:
            if not first_row or rec.phenotype is None:
                return [""] * pheno_dim
            cells = []
            for i in range(pheno_dim):
                present = (i < len(rec.phenotype)
                           and (rec.pheno_mask is None or rec.pheno_mask[i] > 0))
                cells.append(repr(float(rec.phenotype[i])) if present else "")
            return cells

        for rec in records:
            first = True
            for i, sample in enumerate(rec.fmri_volumes):
                name = f"{rec.subject_id}_fmri{i:02d}.vfv"
                write_volume(vol_dir / name, sample.volume)
                writer.writerow([rec.subject_id, rec.site_id, rec.label, "fmri",
                                 f"volumes/{name}"] + pheno_cells(rec, first))
                first = False
            if rec.smri is not None:
                name = f"{rec.subject_id}_smri.vfv"
                write_volume(vol_dir / name, rec.smri.volume)
                writer.writerow([rec.subject_id, rec.site_id, rec.label, "smri",
                                 f"volumes/{name}"] + pheno_cells(rec, first))
                first = False
            if rec.fc_vector is not None:
                name = f"{rec.subject_id}_fc.vfv"
                p = int(round(len(rec.fc_vector) ** 0.5))
                write_volume(vol_dir / name, rec.fc_vector.reshape(p, p))
                writer.writerow([rec.subject_id, rec.site_id, rec.label, "fc",
                                 f"volumes/{name}"] + pheno_cells(rec, first))
                first = False
    return manifest


def load_manifest(manifest_path) -> list[SubjectRecord]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"manifest {manifest_path} is empty") from None
        required = ["subject_id", "site_id", "label", "modality", "path"]
        if header[:5] != required:
            raise DataError(
                f"manifest header must start with {','.join(required)}, got {header[:5]}")
        pheno_cols = header[5:]
        for i, name in enumerate(pheno_cols):
            if name != f"pheno_{i}":
                raise DataError(f"phenotype columns must be pheno_0..; got {name!r}")
        order: list[str] = []
        by_subject: dict[str, SubjectRecord] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"manifest line {lineno}: expected {len(header)} cells, got {len(row)}")
            subject_id, site_id, label_text, modality, rel_path = row[:5]
            try:
                label = int(label_text)
            except ValueError:
                raise DataError(
                    f"manifest line {lineno}: label {label_text!r} is not an int") from None
            rec = by_subject.get(subject_id)
            if rec is None:
                rec = SubjectRecord(subject_id, site_id, label)
                by_subject[subject_id] = rec
                order.append(subject_id)
            elif rec.label != label or rec.site_id != site_id:
                raise DataError(
                    f"manifest line {lineno}: subject {subject_id!r} changes "
                    f"label/site mid-manifest")
            full = base / rel_path
            if modality in ("fmri", "smri"):
                sample = load_volume(full, subject_id, site_id, label, modality)
                if modality == "fmri":
                    rec.fmri_volumes.append(sample)
                else:
                    rec.smri = sample
            elif modality == "fc":
                fc = read_volume(full)
                if fc.ndim != 2 or fc.shape[0] != fc.shape[1]:
                    raise DataError(
                        f"manifest line {lineno}: fc file must hold a square matrix, "
                        f"got shape {fc.shape}")
                rec.fc_vector = fc.reshape(-1)
            else:
                raise DataError(f"manifest line {lineno}: unknown modality {modality!r}")
            cells = row[5:]
            if any(c.strip() for c in cells):
                values = np.zeros(len(cells), dtype=np.float32)
                mask = np.zeros(len(cells), dtype=np.float32)
                for i, cell in enumerate(cells):
                    if cell.strip():
                        try:
                            values[i] = float(cell)
                        except ValueError:
                            raise DataError(
                                f"manifest line {lineno}: bad phenotype cell {cell!r}"
                            ) from None
                        mask[i] = 1.0
                rec.phenotype = values
                rec.pheno_mask = mask
    records = [by_subject[sid] for sid in order]
    for rec in records:
        rec.validate()
    return records
