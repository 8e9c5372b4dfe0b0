import numpy as np
import pytest

from gaitlrp.data import AGE_RANGES, AgeGroup, CohortSpec, Dataset, GrfTrial, synth_generate


def make_dataset(per_class, trials_per_subject=1, T=4, seed=0):
    """Tiny dataset with ``per_class[c]`` subjects in class ``c`` and random curves."""
    rng = np.random.default_rng(seed)
    trials = []
    for group, n in zip(AgeGroup, per_class):
        lo, _ = AGE_RANGES[group]
        for s in range(n):
            for t in range(trials_per_subject):
                trials.append(GrfTrial(f"{group.name}-{s}", lo, rng.normal(size=(2, 3, T)), str(t)))
    return Dataset(tuple(trials))


@pytest.fixture(scope="session")
def small_cohort():
    return synth_generate(CohortSpec(10, 3, T=40, noise=0.05), seed=11)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
