"""Shared fixtures: lazily trained full-size reference runs for the
acceptance suite, and a terminal section summarizing criterion outcomes."""

import dataclasses

import pytest

from mixnn.harness import evaluate, reference_config, train

ACCEPTANCE_LINES: list[str] = []


class ReferenceRuns:
    """Train-once cache of evaluated reference-config runs keyed by
    (method, k, seed). Criteria 8-10 share these."""

    def __init__(self, root):
        self.root = root
        self._cache = {}

    def get(self, method: str = "mnn", k: int = 5, seed: int = 1):
        key = (method, k, seed)
        if key not in self._cache:
            cfg = dataclasses.replace(
                reference_config(seed=seed, out_dir=str(self.root / f"{method}_k{k}_s{seed}")),
                method=method,
                k=k,
            )
            self._cache[key] = evaluate(train(cfg))
        return self._cache[key]

    def knn_mean(self, method: str, k: int = 5, seeds=(1, 2, 3)) -> float:
        return sum(self.get(method, k, s).knn_acc for s in seeds) / len(seeds)

    def final_purity_mean(self, method: str, k: int, seeds=(1, 2, 3)) -> float:
        return sum(self.get(method, k, s).epoch_metrics["purity"][-1] for s in seeds) / len(seeds)


@pytest.fixture(scope="session")
def ref_runs(tmp_path_factory):
    return ReferenceRuns(tmp_path_factory.mktemp("acceptance_runs"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
