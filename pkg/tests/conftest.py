import time
from dataclasses import dataclass

import pytest
import torch

from xsketch.dataset import Dataset, collate, prepare, split_pieces
from xsketch.seqcvae import ModelConfig, PerformanceVAE
from xsketch.synthworld import WorldSpec, generate_world, write_world
from xsketch.trainer import FitResult, TrainConfig, fit

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_ds():
    pieces, _ = generate_world(WorldSpec(seed=11, n_pieces=8))
    return prepare(pieces)


@pytest.fixture(scope="session")
def small_batch(small_ds):
    return collate(small_ds.items[:4], torch.float64)


def make_model(arch="hier", profile="tiny", seed=0, dtype=torch.float64):
    return PerformanceVAE(ModelConfig.from_profile(profile, arch=arch, seed=seed)).to(dtype)


@dataclass
class DeskRuns:
    notes: object  # path of the world's notes.jsonl
    train: Dataset
    test: Dataset
    full: FitResult
    ablated: FitResult
    train_seconds: float


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Desk-preset training on the default 200-piece world: full objective and all lambdas at 0."""
    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("desk")
    notes = write_world(WorldSpec(seed=0), root / "world")
    pieces, _ = generate_world(WorldSpec(seed=0))
    train, test = split_pieces(prepare(pieces), 0.1, 0)
    mc = ModelConfig.from_profile("desk")
    t0 = time.process_time()
    full = fit(train, mc, TrainConfig.desk(), root / "full")
    ablated = fit(train, mc, TrainConfig.desk().without("pln", "str", "fac", "reg"), root / "ablated")
    return DeskRuns(notes, train, test, full, ablated, time.process_time() - t0)
