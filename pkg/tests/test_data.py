import hashlib
from pathlib import Path

import numpy as np
import pytest

from prime import data as dt
from prime.data import MODALITIES, Modality
from prime.errors import DimMismatch, FormatError, InvalidConfig, MissingFile

SMALL_DIMS = {
    Modality.IMAGE: (12, 6),
    Modality.RNA: (1, 8),
    Modality.TEXT: (15, 5),
}


def brute_c_index(times, events, risks):
    num = den = 0.0
    n = len(times)
    for i in range(n):
        for j in range(n):
            if times[i] < times[j] and events[i]:
                den += 1
                if risks[i] > risks[j]:
                    num += 1
                elif risks[i] == risks[j]:
                    num += 0.5
    return num / den


class TestGenerator:
    def test_no_missing_means_trimodal(self):
        man = dt.generate_synthetic_cohort(0, 30, SMALL_DIMS, (0, 0, 0))
        assert all(all(p.availability.values()) for p in man.patients)

    def test_null_signal_cindex_near_half(self):
        man = dt.generate_synthetic_cohort(3, 2000, SMALL_DIMS, (0, 0, 0),
                                           hazard_coupling=0.0)
        times = np.array([p.time_months for p in man.patients])
        events = np.array([not p.censored for p in man.patients])
        c = brute_c_index(times, events, man.oracle_risk)
        assert abs(c - 0.5) < 0.03

    def test_planted_signal_is_learnable(self):
        man = dt.generate_synthetic_cohort(4, 2000, SMALL_DIMS, (0, 0, 0),
                                           hazard_coupling=1.0)
        times = np.array([p.time_months for p in man.patients])
        events = np.array([not p.censored for p in man.patients])
        c = brute_c_index(times, events, man.oracle_risk)
        assert c > 0.65

    def test_fixed_seed_regenerates_identically(self, tmp_path):
        digests = []
        for run in range(2):
            man = dt.generate_synthetic_cohort(11, 8, SMALL_DIMS, (0.3, 0.3, 0.3))
            out = tmp_path / f"run{run}"
            dt.save_cohort(man, out)
            h = hashlib.sha256()
            for f in sorted(out.iterdir()):
                h.update(f.name.encode())
                h.update(f.read_bytes())
            digests.append(h.hexdigest())
        assert digests[0] == digests[1]

    def test_repair_guarantees_one_modality(self):
        man = dt.generate_synthetic_cohort(5, 200, SMALL_DIMS, (0.9, 0.9, 0.9))
        assert all(len(p.observed()) >= 1 for p in man.patients)

    def test_invalid_rates_rejected(self):
        with pytest.raises(InvalidConfig):
            dt.generate_synthetic_cohort(0, 10, SMALL_DIMS, (1.0, 0.0, 0.0))


class TestMatrixFormat:
    def test_round_trip(self, tmp_path):
        arr = np.arange(12.0).reshape(3, 4)
        for code in ("f4", "f8"):
            p = tmp_path / f"m_{code}.bin"
            dt.write_matrix(p, arr, dtype=code)
            back = dt.read_matrix(p)
            assert back.dtype == np.float64
            assert np.allclose(back, arr)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"NOTMAGIC" + b"\0" * 20)
        with pytest.raises(FormatError, match="byte offset 0"):
            dt.read_matrix(p)

    def test_truncated_payload_names_offset(self, tmp_path):
        p = tmp_path / "t.bin"
        dt.write_matrix(p, np.ones((4, 4)), dtype="f8")
        blob = p.read_bytes()
        p.write_bytes(blob[: len(blob) - 17])
        with pytest.raises(FormatError, match="byte offset"):
            dt.read_matrix(p)


class TestLoad:
    def make_cohort_on_disk(self, tmp_path):
        man = dt.generate_synthetic_cohort(7, 6, SMALL_DIMS, (0.0, 0.0, 0.0))
        dt.save_cohort(man, tmp_path)
        return man

    def test_all_files_present(self, tmp_path):
        self.make_cohort_on_disk(tmp_path)
        back = dt.load_embeddings(tmp_path / "manifest.csv")
        assert all(all(p.availability.values()) for p in back.patients)

    def test_missing_rna_file_is_expected(self, tmp_path):
        man = self.make_cohort_on_disk(tmp_path)
        pid = man.patients[2].patient_id
        (tmp_path / f"emb_{pid}_R.bin").unlink()
        back = dt.load_embeddings(tmp_path / "manifest.csv")
        rec = next(p for p in back.patients if p.patient_id == pid)
        assert [rec.availability[m] for m in MODALITIES] == [True, False, True]

    def test_round_trip_preserves_values(self, tmp_path):
        man = dt.generate_synthetic_cohort(9, 4, SMALL_DIMS, (0.4, 0.4, 0.4))
        dt.save_cohort(man, tmp_path, dtype="f8")
        back = dt.load_embeddings(tmp_path / "manifest.csv")
        for a, b in zip(man.patients, back.patients):
            assert a.patient_id == b.patient_id
            assert a.availability == b.availability
            assert a.time_months == b.time_months
            assert a.label_3y_recurrence == b.label_3y_recurrence
            for m in MODALITIES:
                if a.availability[m]:
                    assert np.array_equal(a.embeddings[m], b.embeddings[m])

    def test_truncated_matrix_raises(self, tmp_path):
        man = self.make_cohort_on_disk(tmp_path)
        pid = man.patients[0].patient_id
        f = tmp_path / f"emb_{pid}_I.bin"
        f.write_bytes(f.read_bytes()[:-5])
        with pytest.raises(FormatError):
            dt.load_embeddings(tmp_path / "manifest.csv")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFile):
            dt.load_embeddings(tmp_path / "nope.csv")

    def test_dim_mismatch_across_patients(self, tmp_path):
        self.make_cohort_on_disk(tmp_path)
        pid = dt.load_embeddings(tmp_path / "manifest.csv").patients[0].patient_id
        dt.write_matrix(tmp_path / f"emb_{pid}_I.bin", np.ones((3, 6)))
        with pytest.raises(DimMismatch):
            dt.load_embeddings(tmp_path / "manifest.csv")


class TestStats:
    def make_patient(self, pid, time, censored, pfi=None):
        emb = {m: np.ones(SMALL_DIMS[m]) for m in MODALITIES}
        return dt.PatientRecord(
            patient_id=pid,
            availability={m: True for m in MODALITIES},
            embeddings=emb,
            time_months=time,
            censored=censored,
            pfi_time_months=pfi[0] if pfi else None,
            pfi_censored=pfi[1] if pfi else None,
        )

    def test_all_censored_early_excludes_everyone(self):
        pts = [self.make_patient(f"p{i}", 1.0, True) for i in range(5)]
        man = dt.CohortManifest(pts, dict(SMALL_DIMS))
        s = dt.cohort_stats(man)
        assert s["mort_pos"] == 0 and s["mort_neg"] == 0
        assert s["mort_excluded"] == 5

    def test_hand_tally(self):
        # 6 patients: died@12, died@40, censored@50, censored@10,
        # died@35, censored@36 (exactly at horizon -> labeled negative)
        spec = [(12, False), (40, False), (50, True), (10, True), (35, False), (36, True)]
        pts = [self.make_patient(f"p{i}", t, c) for i, (t, c) in enumerate(spec)]
        man = dt.CohortManifest(pts, dict(SMALL_DIMS))
        s = dt.cohort_stats(man)
        assert s["os_events"] == 3 and s["os_censored"] == 3
        assert s["mort_pos"] == 2  # died at 12 and 35
        assert s["mort_neg"] == 3  # 40, 50, 36
        assert s["mort_excluded"] == 1  # censored at 10

    def test_pair_round_trip(self):
        assert dt.parse_pair("80 / 419") == (80, 419)
        assert dt.parse_pair(dt.format_pair(7, 9)) == (7, 9)

    def test_stats_csv_parses_back(self):
        man = dt.generate_synthetic_cohort(1, 25, SMALL_DIMS, (0, 0, 0))
        text = dt.stats_csv(man)
        header, row = text.strip().split("\n")
        cells = row.split(",")
        ev, cen = dt.parse_pair(cells[2])
        assert ev + cen == 25


class TestFolds:
    def test_ten_patients_five_folds(self):
        man = dt.generate_synthetic_cohort(2, 10, SMALL_DIMS, (0, 0, 0))
        folds = dt.make_folds(man, k=5, seed=1)
        for f in folds:
            assert len(f.test) == 2
            assert len(f.val) == 1
            assert len(f.train) == 7

    def test_partition_property(self):
        man = dt.generate_synthetic_cohort(2, 53, SMALL_DIMS, (0, 0, 0))
        folds = dt.make_folds(man, k=5, seed=3)
        all_ids = {p.patient_id for p in man.patients}
        seen = []
        for f in folds:
            assert not (set(f.train) & set(f.val))
            assert not (set(f.train) & set(f.test))
            assert not (set(f.val) & set(f.test))
            assert set(f.train) | set(f.val) | set(f.test) == all_ids
            seen.extend(f.test)
        assert sorted(seen) == sorted(all_ids)

    def test_fraction_tolerance(self):
        man = dt.generate_synthetic_cohort(2, 101, SMALL_DIMS, (0, 0, 0))
        for f in dt.make_folds(man, k=5, seed=0):
            assert abs(len(f.test) - 0.2 * 101) <= 1
            assert abs(len(f.val) - 0.1 * 101) <= 1

    def test_same_seed_same_folds(self):
        man = dt.generate_synthetic_cohort(2, 40, SMALL_DIMS, (0, 0, 0))
        a = dt.make_folds(man, k=5, seed=9)
        b = dt.make_folds(man, k=5, seed=9)
        assert all(x.train == y.train and x.val == y.val and x.test == y.test
                   for x, y in zip(a, b))
