import pytest

from gamlm import pfsa
from gamlm.armodel import TrainConfig, train_ar

TOY_MOTIF = "1011"
TOY_N = 10

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_process():
    return pfsa.normalize(pfsa.build_motif_automaton(TOY_MOTIF, TOY_N))


@pytest.fixture(scope="session")
def toy_data(toy_process):
    return pfsa.sample(toy_process, 2000, 11), pfsa.sample(toy_process, 500, 12)


@pytest.fixture(scope="session")
def toy_r(toy_data):
    """A deliberately weak base model for the n=10 toy task."""
    D, V = toy_data
    cfg = TrainConfig(hidden_dim=8, embed_dim=4, max_epochs=2, patience=2, seed=5)
    return train_ar(D[:200], V, cfg)


@pytest.fixture(scope="session")
def toy_r_default(toy_data):
    """Default architecture and training settings on 200 toy strings."""
    D, V = toy_data
    return train_ar(D[:200], V, TrainConfig(seed=5))
