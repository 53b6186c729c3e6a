import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bilin_sysid.evaluation import McConfig, run_monte_carlo  # noqa: E402

# Example-1 EM study shared by the EM tests and the acceptance suite:
# n_d = 1000, 20 dB, half-truth initialization, 100 noise realizations.
EM_STUDY = McConfig(trials=100, snr_db_levels=(20.0,), dataset_lengths=(1000,), validation_length=100, seed=2024)


@pytest.fixture(scope="session")
def em_example1_summary():
    return run_monte_carlo(EM_STUDY, "em")


@pytest.fixture(scope="session")
def em_example1_runs(em_example1_summary):
    return [r for r in em_example1_summary.records if r.ok]


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    lines = acceptance_log.summary_lines()
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
