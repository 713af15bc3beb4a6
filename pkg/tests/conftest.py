from __future__ import annotations

import functools

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line: (number, title, passed, detail)."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        _CRITERIA.append((number, title, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")


@functools.lru_cache(maxsize=None)
def default_synthetic():
    """The default synthetic benchmark, built once per session (about 10 s)."""
    from audioret.data import SyntheticDatasetSpec, synthetic_dataset

    return synthetic_dataset(SyntheticDatasetSpec())


@pytest.fixture(scope="session")
def synthetic_data():
    return default_synthetic()


@pytest.fixture(scope="session")
def small_synthetic():
    from audioret.data import SyntheticDatasetSpec, synthetic_dataset

    return synthetic_dataset(SyntheticDatasetSpec(num_classes=6, pairs_per_class=8, seed=3))
