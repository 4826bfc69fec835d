import numpy as np
import pytest

from gnmr.channels import N_CHANNELS


def synthetic_run(unit, n_cycles, rng, failure_cycle=None):
    """One engine run in raw C-MAPSS row layout with a degradation drift."""
    failure_cycle = n_cycles if failure_cycle is None else failure_cycle
    cycles = np.arange(1, n_cycles + 1)
    base = rng.normal(size=N_CHANNELS) * 5 + 50
    wear = np.exp((cycles - failure_cycle) / 40.0)[:, None] * rng.normal(size=N_CHANNELS)
    noise = rng.normal(scale=0.3, size=(n_cycles, N_CHANNELS))
    values = base + wear + noise
    values[:, 0:3] = rng.choice([0.0, 10.0, 20.0], size=(n_cycles, 3))
    return np.column_stack([np.full(n_cycles, unit), cycles, values])


def write_cmapss(directory, dataset, train_lengths, test_lengths, test_rul, seed=0):
    rng = np.random.default_rng(seed)
    train = np.vstack([synthetic_run(u + 1, n, rng) for u, n in enumerate(train_lengths)])
    test = np.vstack(
        [synthetic_run(u + 1, n, rng, failure_cycle=n + r) for u, (n, r) in enumerate(zip(test_lengths, test_rul))]
    )
    fmt = ["%d", "%d"] + ["%.4f"] * N_CHANNELS
    np.savetxt(directory / f"train_{dataset}.txt", train, fmt=fmt)
    np.savetxt(directory / f"test_{dataset}.txt", test, fmt=fmt)
    np.savetxt(directory / f"RUL_{dataset}.txt", np.asarray(test_rul), fmt="%d")
    return directory


@pytest.fixture
def small_cmapss(tmp_path):
    """Tiny FD001-format dataset: 10 train units, 6 test units (two shorter than T)."""
    rng = np.random.default_rng(42)
    train_lengths = rng.integers(128, 260, size=10).tolist()
    test_lengths = [31, 80, 120, 150, 200, 95]
    test_rul = [112, 98, 69, 82, 10, 140]
    write_cmapss(tmp_path, "FD001", train_lengths, test_lengths, test_rul)
    return tmp_path, train_lengths, test_lengths, test_rul


@pytest.fixture
def tiny_dataset(small_cmapss):
    """Prepared windows of length 20 from the synthetic set, cheap enough to train on."""
    from gnmr.cmapss import prepare_dataset

    return prepare_dataset("FD001", small_cmapss[0], window_length=20, shift=5)


def pytest_terminal_summary(terminalreporter):
    from . import _acceptance_log

    if not _acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance_log.RESULTS):
        title, ok, detail = _acceptance_log.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
