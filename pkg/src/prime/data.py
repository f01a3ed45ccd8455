"""Patient records, synthetic multimodal cohorts, and embedding-file ingest.

A cohort is a list of patients, each with up to three precomputed embedding
matrices (Image, Rna, Text), an availability mask, and survival outcomes.
The synthetic generator plants a shared latent state that drives every
modality and the hazard, so downstream claims can be checked against a
known signal.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DimMismatch, FormatError, InvalidConfig, MissingFile

HORIZON_MONTHS = 36.0  # fixed 3-year horizon for the binary endpoints
LATENT_DIM = 8


class Modality(Enum):
    IMAGE = "I"
    RNA = "R"
    TEXT = "T"


# fixed order everywhere (concatenation order of the fused sequence)
MODALITIES = (Modality.IMAGE, Modality.RNA, Modality.TEXT)

DEFAULT_DIMS = {
    Modality.IMAGE: (128, 32),
    Modality.RNA: (1, 64),
    Modality.TEXT: (200, 48),
}


def three_year_label(time_months: float, censored: bool) -> bool | None:
    """True = event within 3 years, False = event-free past 3 years.

    Patients censored before the horizon get no label (excluded).
    """
    if time_months >= HORIZON_MONTHS:
        return False
    return None if censored else True


@dataclass
class PatientRecord:
    patient_id: str
    availability: dict[Modality, bool]
    embeddings: dict[Modality, np.ndarray | None]
    time_months: float
    censored: bool
    pfi_time_months: float | None = None
    pfi_censored: bool | None = None
    site: int = 0

    def validate(self) -> None:
        for m in MODALITIES:
            has_emb = self.embeddings.get(m) is not None
            if has_emb != self.availability.get(m, False):
                raise InvalidConfig(
                    f"{self.patient_id}: embedding presence disagrees with "
                    f"availability flag for {m.value}"
                )
        if not any(self.availability.values()):
            raise InvalidConfig(f"{self.patient_id}: no modality available")
        if self.time_months < 0:
            raise InvalidConfig(f"{self.patient_id}: negative follow-up time")

    @property
    def label_3y_mortality(self) -> bool | None:
        return three_year_label(self.time_months, self.censored)

    @property
    def label_3y_recurrence(self) -> bool | None:
        # absent PFI annotation means no label for the recurrence task
        if self.pfi_time_months is None or self.pfi_censored is None:
            return None
        return three_year_label(self.pfi_time_months, self.pfi_censored)

    def observed(self) -> list[Modality]:
        return [m for m in MODALITIES if self.availability[m]]


@dataclass
class CohortManifest:
    patients: list[PatientRecord]
    dims: dict[Modality, tuple[int, int]]
    # synthetic ground truth, absent for cohorts loaded from disk
    latents: np.ndarray | None = None
    oracle_risk: np.ndarray | None = None

    def __post_init__(self):
        self.patients.sort(key=lambda p: p.patient_id)

    @property
    def n(self) -> int:
        return len(self.patients)

    def tri_modal(self) -> list[PatientRecord]:
        return [p for p in self.patients if all(p.availability.values())]


# ---------------------------------------------------------------------------
# synthetic cohort generation


def generate_synthetic_cohort(
    seed: int,
    n_patients: int,
    dims: dict[Modality, tuple[int, int]] | None = None,
    missing_rates: tuple[float, float, float] = (0.0, 0.0, 0.0),
    hazard_coupling: float = 1.0,
    n_sites: int = 4,
    noise: float = 0.3,
    survival_median: float = 30.0,
    censor_median: float = 60.0,
    rec_median: float = 28.0,
    rec_coupling: float | None = None,
) -> CohortManifest:
    """Draw a cohort whose modalities all render a shared latent state.

    Each patient draws z in R^8; every modality is an independent random
    linear+tanh rendering of z plus noise; survival times are exponential
    with log-hazard ``hazard_coupling * (w.z)``; censoring is independent.
    The availability mask is sampled per modality and repaired so that no
    patient is left fully empty.
    """
    dims = dict(dims or DEFAULT_DIMS)
    if n_patients < 1:
        raise InvalidConfig("n_patients must be positive")
    if len(missing_rates) != 3 or any(r < 0 or r >= 1 for r in missing_rates):
        raise InvalidConfig("missing rates must lie in [0, 1)")
    if n_sites < 1:
        raise InvalidConfig("n_sites must be positive")
    for m in MODALITIES:
        L, D = dims[m]
        if L < 1 or D < 1:
            raise InvalidConfig(f"dims for {m.value} must be positive")
    if rec_coupling is None:
        rec_coupling = 0.9 * hazard_coupling

    rng = np.random.default_rng(seed)
    w_os = rng.normal(size=LATENT_DIM)
    w_os /= np.linalg.norm(w_os)
    w_rec = 0.6 * w_os + rng.normal(size=LATENT_DIM) * 0.5
    w_rec /= np.linalg.norm(w_rec)
    site_mu = rng.normal(0.0, 0.5, size=(n_sites, LATENT_DIM))
    render = {}
    for m in MODALITIES:
        L, D = dims[m]
        G = rng.normal(0.0, 1.0 / np.sqrt(LATENT_DIM), size=(LATENT_DIM, D))
        row_off = rng.normal(0.0, 0.6, size=(L, D))
        render[m] = (G, row_off)

    base_rate = np.log(2.0) / survival_median
    censor_rate = np.log(2.0) / censor_median
    rec_rate = np.log(2.0) / rec_median

    patients = []
    latents = np.empty((n_patients, LATENT_DIM))
    oracle = np.empty(n_patients)
    width = len(str(n_patients - 1))
    for i in range(n_patients):
        site = int(rng.integers(n_sites))
        z = rng.normal(size=LATENT_DIM)
        latents[i] = z
        zz = z + site_mu[site]

        embeddings: dict[Modality, np.ndarray | None] = {}
        avail: dict[Modality, bool] = {}
        for m, rate in zip(MODALITIES, missing_rates):
            L, D = dims[m]
            clean = np.tanh(zz @ render[m][0] + render[m][1])
            emb = clean + noise * rng.normal(size=(L, D))
            present = bool(rng.random() >= rate)
            avail[m] = present
            embeddings[m] = emb if present else None
        if not any(avail.values()):
            keep = MODALITIES[int(rng.integers(3))]
            avail[keep] = True
            L, D = dims[keep]
            clean = np.tanh(zz @ render[keep][0] + render[keep][1])
            embeddings[keep] = clean + noise * rng.normal(size=(L, D))

        lin = float(w_os @ z)
        oracle[i] = lin  # planted linear risk direction (scale-free)
        t_event = rng.exponential(1.0 / (base_rate * np.exp(hazard_coupling * lin)))
        t_censor = rng.exponential(1.0 / censor_rate)
        time = min(t_event, t_censor)
        censored = t_censor < t_event

        lin_rec = float(w_rec @ z)
        t_rec = rng.exponential(1.0 / (rec_rate * np.exp(rec_coupling * lin_rec)))
        pfi_time = min(t_rec, t_censor)
        pfi_censored = t_censor < t_rec

        rec = PatientRecord(
            patient_id=f"P{i:0{width}d}",
            availability=avail,
            embeddings=embeddings,
            time_months=float(time),
            censored=bool(censored),
            pfi_time_months=float(pfi_time),
            pfi_censored=bool(pfi_censored),
            site=site,
        )
        rec.validate()
        patients.append(rec)

    return CohortManifest(patients, dims, latents=latents, oracle_risk=oracle)


# ---------------------------------------------------------------------------
# embedding container format
#
# magic "PRIMEMB1" | u8 dtype (0=f32, 1=f64) | u32 rank | u32 dims[rank]
# | row-major little-endian payload

MAGIC = b"PRIMEMB1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {"f4": 0, "f8": 1}


def write_matrix(path: Path, arr: np.ndarray, dtype: str = "f4") -> None:
    if dtype not in _DTYPE_CODES:
        raise InvalidConfig(f"unsupported dtype {dtype!r} (use 'f4' or 'f8')")
    code = _DTYPE_CODES[dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", code))
        fh.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<I", d))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_matrix(path: Path) -> np.ndarray:
    """Read a PRIMEMB1 container; errors name the failing byte offset."""
    with open(path, "rb") as fh:
        buf = fh.read()

    def need(offset: int, count: int, what: str) -> bytes:
        if offset + count > len(buf):
            raise FormatError(
                f"{path}: truncated while reading {what} at byte offset {offset}"
            )
        return buf[offset : offset + count]

    if need(0, 8, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    code = need(8, 1, "dtype code")[0]
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code} at byte offset 8")
    rank = struct.unpack("<I", need(9, 4, "rank"))[0]
    if rank == 0 or rank > 8:
        raise FormatError(f"{path}: implausible rank {rank} at byte offset 9")
    shape = []
    off = 13
    for i in range(rank):
        shape.append(struct.unpack("<I", need(off, 4, f"dim {i}"))[0])
        off += 4
    dt = _DTYPES[code]
    count = int(np.prod(shape))
    payload = need(off, count * dt.itemsize, "payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    return arr.astype(np.float64)


# ---------------------------------------------------------------------------
# manifest CSV + cohort round trip

MANIFEST_FIELDS = [
    "patient_id", "time_months", "censored", "has_I", "has_R", "has_T",
    "pfi_time_months", "pfi_censored", "site",
]


def _emb_filename(patient_id: str, m: Modality) -> str:
    return f"emb_{patient_id}_{m.value}.bin"


def save_cohort(manifest: CohortManifest, out_dir: Path, dtype: str = "f4") -> Path:
    """Write manifest.csv plus one embedding file per available modality."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(MANIFEST_FIELDS)
        for p in manifest.patients:
            wr.writerow([
                p.patient_id,
                repr(p.time_months),
                int(p.censored),
                int(p.availability[Modality.IMAGE]),
                int(p.availability[Modality.RNA]),
                int(p.availability[Modality.TEXT]),
                "" if p.pfi_time_months is None else repr(p.pfi_time_months),
                "" if p.pfi_censored is None else int(p.pfi_censored),
                p.site,
            ])
            for m in MODALITIES:
                if p.availability[m]:
                    write_matrix(out_dir / _emb_filename(p.patient_id, m),
                                 p.embeddings[m], dtype=dtype)
    return path


def load_embeddings(manifest_path: Path, data_dir: Path | None = None) -> CohortManifest:
    """Load a cohort; availability is inferred from which files exist."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(f"manifest not found: {manifest_path}")
    data_dir = Path(data_dir) if data_dir is not None else manifest_path.parent

    patients = []
    dims: dict[Modality, tuple[int, int]] = {}
    with open(manifest_path, newline="") as fh:
        rd = csv.DictReader(fh)
        required = {"patient_id", "time_months", "censored"}
        if rd.fieldnames is None or not required.issubset(rd.fieldnames):
            raise FormatError(
                f"{manifest_path}: manifest needs columns {sorted(required)}"
            )
        for row in rd:
            pid = row["patient_id"]
            embeddings: dict[Modality, np.ndarray | None] = {}
            avail: dict[Modality, bool] = {}
            for m in MODALITIES:
                fpath = data_dir / _emb_filename(pid, m)
                if fpath.exists():
                    arr = read_matrix(fpath)
                    if arr.ndim != 2:
                        raise DimMismatch(f"{fpath}: expected a 2-d matrix")
                    if m in dims and dims[m] != arr.shape:
                        raise DimMismatch(
                            f"{fpath}: shape {arr.shape} != cohort dims {dims[m]}"
                        )
                    dims.setdefault(m, arr.shape)
                    embeddings[m] = arr
                    avail[m] = True
                else:
                    embeddings[m] = None
                    avail[m] = False
            pfi_t = row.get("pfi_time_months") or None
            pfi_c = row.get("pfi_censored") or None
            rec = PatientRecord(
                patient_id=pid,
                availability=avail,
                embeddings=embeddings,
                time_months=float(row["time_months"]),
                censored=bool(int(row["censored"])),
                pfi_time_months=None if pfi_t is None else float(pfi_t),
                pfi_censored=None if pfi_c is None else bool(int(pfi_c)),
                site=int(row.get("site") or 0),
            )
            rec.validate()
            patients.append(rec)
    if not patients:
        raise FormatError(f"{manifest_path}: empty cohort")
    return CohortManifest(patients, dims)


# ---------------------------------------------------------------------------
# cohort statistics (event/censored and pos/neg tallies per task)


def cohort_stats(manifest: CohortManifest) -> dict[str, int]:
    events = sum(1 for p in manifest.patients if not p.censored)
    mort = [p.label_3y_mortality for p in manifest.patients]
    rec = [p.label_3y_recurrence for p in manifest.patients]
    return {
        "n": manifest.n,
        "os_events": events,
        "os_censored": manifest.n - events,
        "mort_pos": sum(1 for x in mort if x is True),
        "mort_neg": sum(1 for x in mort if x is False),
        "mort_excluded": sum(1 for x in mort if x is None),
        "rec_pos": sum(1 for x in rec if x is True),
        "rec_neg": sum(1 for x in rec if x is False),
        "rec_excluded": sum(1 for x in rec if x is None),
    }


def format_pair(a: int, b: int) -> str:
    return f"{a} / {b}"


def parse_pair(text: str) -> tuple[int, int]:
    """Parse an 'a / b' tally cell, e.g. '80 / 419' -> (80, 419)."""
    left, _, right = text.partition("/")
    return int(left.strip()), int(right.strip())


def stats_csv(manifest: CohortManifest, cohort_name: str = "all") -> str:
    s = cohort_stats(manifest)
    lines = ["cohort,N,OS,3yOS,3yRec"]
    lines.append(
        f"{cohort_name},{s['n']},"
        f"{format_pair(s['os_events'], s['os_censored'])},"
        f"{format_pair(s['mort_pos'], s['mort_neg'])},"
        f"{format_pair(s['rec_pos'], s['rec_neg'])}"
    )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# cross-validation folds (70/10/20 within each fold)


@dataclass
class FoldSplit:
    train: list[str]
    val: list[str]
    test: list[str]


def make_folds(manifest: CohortManifest, k: int = 5, seed: int = 0,
               patient_ids: list[str] | None = None) -> list[FoldSplit]:
    """Partition patients into k folds; each fold realizes 70/10/20.

    Test chunks partition the cohort; validation is carved from the
    non-test patients in cyclic order so folds get distinct val sets.
    """
    if k < 2:
        raise InvalidConfig("k must be at least 2")
    ids = sorted(patient_ids if patient_ids is not None else
                 [p.patient_id for p in manifest.patients])
    if len(ids) < k:
        raise InvalidConfig(f"cannot make {k} folds from {len(ids)} patients")
    rng = np.random.default_rng(seed)
    shuffled = list(np.array(ids)[rng.permutation(len(ids))])
    chunks = [list(c) for c in np.array_split(np.array(shuffled), k)]
    n_val = int(round(0.1 * len(ids)))
    folds = []
    for f in range(k):
        test = chunks[f]
        rest: list[str] = []
        for j in range(1, k):
            rest.extend(chunks[(f + j) % k])
        val = rest[:n_val]
        train = rest[n_val:]
        folds.append(FoldSplit(train=train, val=val, test=test))
    return folds
