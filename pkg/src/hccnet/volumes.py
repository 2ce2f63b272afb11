"""Longitudinal volume records with the ``.lsv`` file format and a synthetic cohort generator.

A :class:`PatientRecord` holds one subject's chronologically ordered
:class:`StudyVisit` objects, each carrying one single-channel
:class:`Volume` per acquired series, plus an optional diagnosis date in
months.  Fine-tuning works on :class:`LabeledSequence` objects derived from
records with :func:`subset_for_finetune`.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

MAGIC = b"LSV1"
_HEADER = struct.Struct("<4sIIII3f")
# Guard against headers that would request absurd allocations.
MAX_VOXELS = 2**31


class VolumeFormatError(ValueError):
    """Base class for ``.lsv`` decoding failures."""


class MalformedHeaderError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimensionOverflowError(VolumeFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    """Multi-channel 3D scalar field stored as float32 ``(C, D, H, W)``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (C, D, H, W), got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite intensities")
        if data is self.data:
            data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def channel(self, c: int) -> "Volume":
        return Volume(self.data[c : c + 1], self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class StudyVisit:
    timestamp: float
    series: tuple[Volume, ...]
    series_labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "series", tuple(self.series))
        object.__setattr__(self, "series_labels", tuple(self.series_labels))
        if not self.series:
            raise ValueError("a visit needs at least one series")
        if len(self.series) != len(self.series_labels):
            raise ValueError("series and series_labels differ in length")
        if len(set(self.series_labels)) != len(self.series_labels):
            raise ValueError("duplicate series labels")
        if not (math.isfinite(self.timestamp) and self.timestamp >= 0):
            raise ValueError(f"invalid timestamp {self.timestamp}")
        ref = self.series[0]
        for s in self.series:
            if s.channels != 1:
                raise ValueError("series volumes must be single-channel")
            if s.dims != ref.dims or s.spacing != ref.spacing:
                raise ValueError("all series of a visit must share dims and spacing")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.series[0].dims


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[StudyVisit, ...]
    diagnosis_date: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))
        times = [v.timestamp for v in self.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"{self.patient_id}: visit timestamps must strictly increase")
        if self.diagnosis_date is not None and times and self.diagnosis_date < times[0]:
            raise ValueError(f"{self.patient_id}: diagnosis precedes the first visit")


@dataclass(frozen=True)
class LabeledSequence:
    patient_id: str
    visits: tuple[StudyVisit, ...]
    label: int
    anchor: float

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if self.label == 1 and any(v.timestamp >= self.anchor for v in self.visits):
            raise ValueError("positive sequences must end strictly before the diagnosis")

    @property
    def timestamps(self) -> list[float]:
        return [v.timestamp for v in self.visits]


# ---------------------------------------------------------------------------
# .lsv file format


def encode_volume(v: Volume) -> bytes:
    c, d, h, w = v.data.shape
    header = _HEADER.pack(MAGIC, c, d, h, w, *v.spacing)
    return header + v.data.astype("<f4", copy=False).tobytes(order="C")


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < _HEADER.size:
        raise MalformedHeaderError(f"header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, c, d, h, w, sz, sy, sx = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if 0 in (c, d, h, w):
        raise MalformedHeaderError(f"zero-sized dimension in {(c, d, h, w)}")
    n = c * d * h * w
    if n > MAX_VOXELS:
        raise DimensionOverflowError(f"{(c, d, h, w)} exceeds {MAX_VOXELS} voxels")
    payload = len(buf) - _HEADER.size
    if payload < 4 * n:
        raise TruncatedPayloadError(f"expected {4 * n} payload bytes, found {payload}")
    if payload > 4 * n:
        raise MalformedHeaderError(f"{payload - 4 * n} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size)
    return Volume(data.astype(np.float32).reshape(c, d, h, w), (sz, sy, sx))


def save_volume(v: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(v))


def load_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# synthetic cohort


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic longitudinal cohort.

    Intervals are in months.  ``series_bvalues`` drives the per-series
    intensity remapping (diffusion-like attenuation); labels default to
    ``b<value>``.
    """

    patient_count: int = 60
    positive_fraction: float = 0.25
    visits_min: int = 1
    visits_max: int = 5
    interval_mean: float = 9.0
    interval_min: float = 1.0
    interval_max: float = 78.0
    diagnosis_gap: tuple[float, float] = (1.0, 6.0)
    diagnosis_visit_prob: float = 0.5
    dims: tuple[int, int, int] = (72, 72, 72)
    spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)
    series_bvalues: tuple[float, ...] = (0.0, 150.0, 400.0, 800.0)
    series_labels: Optional[tuple[str, ...]] = None
    lesion_amplitude: float = 1.5
    lesion_radius: float = 0.12
    growth_exponent: float = 1.5
    noise_level: float = 0.05
    anatomy_smoothing: float = 3.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "series_bvalues", tuple(float(b) for b in self.series_bvalues))
        object.__setattr__(self, "diagnosis_gap", tuple(float(g) for g in self.diagnosis_gap))
        if self.series_labels is not None:
            object.__setattr__(self, "series_labels", tuple(self.series_labels))

    @property
    def labels(self) -> tuple[str, ...]:
        if self.series_labels is not None:
            return self.series_labels
        return tuple(f"b{b:g}" for b in self.series_bvalues)

    @property
    def positive_count(self) -> int:
        return int(math.floor(self.patient_count * self.positive_fraction + 0.5))

    def validate(self) -> None:
        problems = []
        if self.patient_count < 1:
            problems.append("patient_count must be >= 1")
        if not 0.0 <= self.positive_fraction <= 1.0:
            problems.append("positive_fraction must lie in [0, 1]")
        if self.visits_min < 1 or self.visits_max < self.visits_min:
            problems.append("need 1 <= visits_min <= visits_max")
        if not 0 < self.interval_min <= self.interval_max:
            problems.append("need 0 < interval_min <= interval_max")
        if self.interval_mean <= 0:
            problems.append("interval_mean must be positive")
        lo, hi = self.diagnosis_gap
        if not 0 < lo <= hi:
            problems.append("diagnosis_gap must be a positive interval")
        if not 0.0 <= self.diagnosis_visit_prob <= 1.0:
            problems.append("diagnosis_visit_prob must lie in [0, 1]")
        if len(self.dims) != 3 or any(d < 3 or d % 3 for d in self.dims):
            problems.append(f"dims must be three positive multiples of 3, got {self.dims}")
        if not self.series_bvalues:
            problems.append("at least one series is required")
        if len(set(self.labels)) != len(self.series_bvalues):
            problems.append("series labels must be unique and match series_bvalues")
        if self.lesion_amplitude < 0 or self.noise_level < 0:
            problems.append("lesion_amplitude and noise_level must be non-negative")
        if not 0 < self.lesion_radius < 0.5:
            problems.append("lesion_radius is a fraction of the smallest dim in (0, 0.5)")
        if self.growth_exponent <= 0:
            problems.append("growth_exponent must be positive")
        if problems:
            raise ValueError("invalid SyntheticConfig: " + "; ".join(problems))


def _anatomy(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(cfg.dims), cfg.anatomy_smoothing)
    noise /= noise.std() + 1e-12
    grid = np.stack(np.meshgrid(*[np.linspace(-1, 1, d) for d in cfg.dims], indexing="ij"))
    radii = rng.uniform(0.55, 0.8, size=3)
    shift = rng.uniform(-0.1, 0.1, size=3)
    r2 = sum(((grid[i] - shift[i]) / radii[i]) ** 2 for i in range(3))
    organ = 1.0 / (1.0 + np.exp((r2 - 1.0) * 8.0))
    return 0.2 + 0.6 * organ + 0.15 * noise


def _lesion(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    dims = np.asarray(cfg.dims, dtype=float)
    r = cfg.lesion_radius * dims.min()
    radii = r * rng.uniform(0.75, 1.25, size=3)
    lo = np.ceil(radii + 1)
    center = rng.uniform(lo, dims - 1 - lo)
    idx = np.indices(cfg.dims, dtype=float)
    r2 = sum(((idx[i] - center[i]) / radii[i]) ** 2 for i in range(3))
    return np.exp(-2.0 * r2)


def _render(field_: np.ndarray, cfg: SyntheticConfig, rng: np.random.Generator) -> list[np.ndarray]:
    # diffusion-style attenuation: bright tissue has restricted diffusion
    rho = np.logaddexp(0.0, 3.0 * field_) / 3.0
    adc = 1.2 * np.exp(-0.8 * field_)
    out = []
    for b in cfg.series_bvalues:
        s = rho * np.exp(-(b / 1000.0) * adc)
        s = s + cfg.noise_level * rng.standard_normal(cfg.dims)
        out.append(s.astype(np.float32))
    return out


def _visit_times(rng: np.random.Generator, cfg: SyntheticConfig, n: int) -> list[float]:
    shape = 2.0
    gaps = rng.gamma(shape, cfg.interval_mean / shape, size=max(n - 1, 0))
    gaps = np.clip(gaps, cfg.interval_min, cfg.interval_max)
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    return [round(float(t), 3) for t in times]


def synthesize_patient(
    cfg: SyntheticConfig, index: int, positive: bool
) -> tuple[PatientRecord, Optional[np.ndarray]]:
    """Render one patient; also returns the soft lesion mask for positives."""
    rng = np.random.default_rng([cfg.seed, index])
    n = int(rng.integers(cfg.visits_min, cfg.visits_max + 1))
    if positive:
        n = max(n, min(2, cfg.visits_max))
    times = _visit_times(rng, cfg, n)
    anatomy = _anatomy(rng, cfg)
    lesion = None
    diagnosis = None
    if positive:
        gap = rng.uniform(*cfg.diagnosis_gap)
        diagnosis = round(times[-1] + gap, 3)
        if rng.random() < cfg.diagnosis_visit_prob:
            times.append(diagnosis)
        lesion = _lesion(rng, cfg)
    labels = cfg.labels
    visits = []
    for t in times:
        field_ = anatomy
        if lesion is not None:
            span = diagnosis - times[0]
            contrast = (min(t, diagnosis) - times[0]) / span
            field_ = anatomy + cfg.lesion_amplitude * contrast**cfg.growth_exponent * lesion
        series = tuple(Volume(s, cfg.spacing) for s in _render(field_, cfg, rng))
        visits.append(StudyVisit(t, series, labels))
    record = PatientRecord(f"P{index:04d}", tuple(visits), diagnosis)
    return record, lesion


def generate_cohort(cfg: SyntheticConfig) -> list[PatientRecord]:
    """Deterministic synthetic cohort; each patient uses its own seeded stream."""
    cfg.validate()
    # own stream: must not coincide with the split's permutation for the same seed
    order = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,))).permutation(cfg.patient_count)
    positives = set(order[: cfg.positive_count].tolist())
    return [synthesize_patient(cfg, i, i in positives)[0] for i in range(cfg.patient_count)]


# ---------------------------------------------------------------------------
# cohort manifest


def save_cohort(records: Sequence[PatientRecord], out_dir, extra: Optional[dict] = None) -> Path:
    """Write one multi-channel ``.lsv`` per visit plus ``manifest.json``."""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    patients = []
    for rec in records:
        visits = []
        for k, visit in enumerate(rec.visits):
            rel = f"volumes/{rec.patient_id}_v{k:02d}.lsv"
            stacked = Volume(np.concatenate([s.data for s in visit.series]), visit.series[0].spacing)
            save_volume(stacked, out_dir / rel)
            visits.append(
                {"timestamp": visit.timestamp, "series_labels": list(visit.series_labels), "path": rel}
            )
        patients.append(
            {"patient_id": rec.patient_id, "diagnosis_date": rec.diagnosis_date, "visits": visits}
        )
    manifest = {"format": "lsv-cohort", "version": 1, "patients": patients}
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_cohort(cohort_dir) -> list[PatientRecord]:
    cohort_dir = Path(cohort_dir)
    manifest = json.loads((cohort_dir / "manifest.json").read_text())
    records = []
    for p in manifest["patients"]:
        visits = []
        for v in p["visits"]:
            vol = load_volume(cohort_dir / v["path"])
            labels = tuple(v["series_labels"])
            if vol.channels != len(labels):
                raise VolumeFormatError(f"{v['path']}: {vol.channels} channels, {len(labels)} labels")
            visits.append(StudyVisit(v["timestamp"], [vol.channel(c) for c in range(vol.channels)], labels))
        records.append(PatientRecord(p["patient_id"], tuple(visits), p["diagnosis_date"]))
    return records


def config_to_dict(cfg: SyntheticConfig) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------------------
# subsetting and splits


def split_dataset(records: Sequence, dev_fraction: float = 0.75, seed: int = 0):
    """Patient-level random split into (dev, test), preserving input order."""
    if not 0.0 < dev_fraction < 1.0:
        raise ValueError(f"dev_fraction must lie in (0, 1), got {dev_fraction}")
    if not records:
        raise ValueError("cannot split an empty record list")
    n = len(records)
    n_dev = int(math.floor(n * dev_fraction + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    dev_idx = set(perm[:n_dev].tolist())
    dev = [r for i, r in enumerate(records) if i in dev_idx]
    test = [r for i, r in enumerate(records) if i not in dev_idx]
    return dev, test


def subset_for_finetune(record: PatientRecord) -> Optional[LabeledSequence]:
    if record.diagnosis_date is not None:
        kept = tuple(v for v in record.visits if v.timestamp < record.diagnosis_date)
        if not kept:
            return None
        return LabeledSequence(record.patient_id, kept, 1, float(record.diagnosis_date))
    if not record.visits:
        return None
    return LabeledSequence(record.patient_id, record.visits, 0, float(record.visits[-1].timestamp))


def truncate_sequence(seq: LabeledSequence, max_len: int = 8) -> LabeledSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if len(seq.visits) <= max_len:
        return seq
    return LabeledSequence(seq.patient_id, seq.visits[-max_len:], seq.label, seq.anchor)


def finetune_sequences(records: Sequence[PatientRecord], max_len: int = 8) -> list[LabeledSequence]:
    out = []
    for rec in records:
        seq = subset_for_finetune(rec)
        if seq is not None:
            out.append(truncate_sequence(seq, max_len))
    return out


def pretrain_sequence(record: PatientRecord, max_len: int = 8) -> LabeledSequence:
    """Unlabeled view of a full record, anchored at its last visit."""
    seq = LabeledSequence(record.patient_id, record.visits, 0, float(record.visits[-1].timestamp))
    return truncate_sequence(seq, max_len)
