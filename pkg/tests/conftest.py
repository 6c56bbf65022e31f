import numpy as np
import pytest

from tokenlab.events import Cohort, Event, PatientSequence, TaskLabel, Vocabulary

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}"
    ACCEPTANCE_LINES.append(line + (f" -- {detail}" if detail else ""))
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_cohort(rng: np.random.Generator, n_subjects: int = 4, vocab_size: int = 6,
                  tasks=("t1", "t2")) -> Cohort:
    vocab = Vocabulary(tuple(f"FAM//{i}" for i in range(vocab_size)))
    seqs, labels = [], []
    for s in range(n_subjects):
        n = int(rng.integers(1, 8))
        times = np.sort(np.round(rng.uniform(0, 500, n), int(rng.integers(0, 4))))
        codes = rng.integers(0, vocab_size, n).tolist()
        values = [None if rng.random() < 0.4 else float(np.round(rng.normal(), 3)) for _ in range(n)]
        pred = float(times[-1] + rng.uniform(0, 100))
        seqs.append(PatientSequence.from_times(f"P{s:03d}", times.tolist(), codes, values, pred))
        labels += [TaskLabel(f"P{s:03d}", t, bool(rng.integers(2))) for t in tasks]
    return Cohort(tuple(seqs), tuple(labels), vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
