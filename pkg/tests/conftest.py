import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from concept_probe.datasets import PURPOSE, RANDOM_PURPOSE_BASE, synth_excerpts  # noqa: E402
from concept_probe.model import Classifier, ModelConfig, TrainConfig, TrainResult, train  # noqa: E402

CRITERIA_LINES: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line; the body fills ``detail`` and asserts."""
    detail: dict = {}
    ok = False
    try:
        yield detail
        ok = True
    finally:
        extras = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({extras})" if extras else "")
        CRITERIA_LINES.append(line)
        print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@dataclass
class Planted:
    """Two-class synthetic setup: class 0 over alberti bass, class 1 random."""

    model: Classifier
    result: TrainResult
    train_seconds: float
    eval_pieces: dict[int, np.ndarray]
    concept: np.ndarray
    randoms: list[np.ndarray] = field(default_factory=list)


def _grids(kind: str, count: int, purpose: int, seed: int = 0) -> np.ndarray:
    return np.stack([r.grid for r in synth_excerpts(kind, count, seed, purpose)])


@pytest.fixture(scope="session")
def planted() -> Planted:
    start = time.perf_counter()
    tx = np.concatenate([_grids("alberti", 200, PURPOSE["train"]), _grids("random", 200, PURPOSE["train"])])
    vx = np.concatenate([_grids("alberti", 50, PURPOSE["val"]), _grids("random", 50, PURPOSE["val"])])
    ty = np.repeat([0, 1], 200)
    vy = np.repeat([0, 1], 50)
    model = Classifier(ModelConfig(seed=0), ["alberti", "random"])
    result = train(model, tx, ty, vx, vy, TrainConfig())
    elapsed = time.perf_counter() - start
    return Planted(
        model=model,
        result=result,
        train_seconds=elapsed,
        eval_pieces={0: _grids("alberti", 50, PURPOSE["eval"]), 1: _grids("random", 50, PURPOSE["eval"])},
        concept=_grids("alberti", 30, PURPOSE["concept"]),
        randoms=[_grids("random", 30, RANDOM_PURPOSE_BASE + j) for j in range(10)],
    )
