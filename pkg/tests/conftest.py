from contextlib import contextmanager

import numpy as np
import pytest
import torch

from hccnet.volumes import PatientRecord, StudyVisit, SyntheticConfig, Volume, generate_cohort

torch.set_num_threads(1)


def make_visit(t, dims=(6, 6, 6), n_series=1, fill=None, seed=0):
    rng = np.random.default_rng(seed)
    series = []
    for k in range(n_series):
        data = np.full(dims, fill, np.float32) if fill is not None else rng.standard_normal(dims).astype(np.float32)
        series.append(Volume(data))
    return StudyVisit(float(t), series, [f"s{k}" for k in range(n_series)])


def make_record(times, diagnosis=None, pid="P0", **kw):
    return PatientRecord(pid, [make_visit(t, **kw) for t in times], diagnosis)


@pytest.fixture(scope="session")
def small_cohort():
    cfg = SyntheticConfig(patient_count=10, positive_fraction=0.3, dims=(12, 12, 12), seed=3)
    return cfg, generate_cohort(cfg)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
_CRITERIA: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        notes.append(f"{type(exc).__name__}: {str(exc).splitlines()[0][:160] if str(exc) else ''}")
        _log(number, title, False, notes)
        raise
    _log(number, title, True, notes)


def _log(number, title, ok, notes):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
    if notes:
        line += " | " + "; ".join(notes)
    _CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
