import time

import pytest

from irisadv import io
from irisadv.harness import ExperimentConfig, cmd_gen_data, cmd_train, read_corpus

# (criterion, passed, detail) lines printed at the end of the session
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((number, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")


class DeskRun:
    """A generated desk corpus plus a surrogate trained on it."""

    def __init__(self, config, corpus_stats, report, seconds):
        self.config = config
        self.corpus_stats = corpus_stats
        self.report = report
        self.train_seconds = seconds
        self.corpus = read_corpus(config.corpus_dir)
        self.net = io.load_checkpoint(config.checkpoint_path)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    cfg = ExperimentConfig(profile="desk", out=str(tmp_path_factory.mktemp("desk")), master_seed=2)
    start = time.perf_counter()
    corpus = cmd_gen_data(cfg)
    report = cmd_train(cfg)
    return DeskRun(cfg, corpus.stats, report, time.perf_counter() - start)
