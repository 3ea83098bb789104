import time
from dataclasses import dataclass

import pytest

from dida.encoder import Encoder, EncoderConfig, init_encoder
from dida.scenes import DataConfig, generate_dataset
from dida.train import TrainConfig, TrainReport, train

# the default grounding run: 256 training and 64 held-out 32x32 scenes
DEFAULT_SCENES = 320
DEFAULT_STEPS = 1000


def pytest_addoption(parser):
    parser.addoption("--bless", action="store_true", default=False,
                     help="rewrite the golden files under tests/golden instead of comparing")


@pytest.fixture(scope="session")
def bless(request):
    return request.config.getoption("--bless")


@dataclass
class TrainedRun:
    encoder: Encoder
    untrained: Encoder
    report: TrainReport
    train_scenes: list
    heldout: list
    seconds: float


def run_training(seed=0, lambda_dida=1.0, lambda_contrastive=1.0, steps=DEFAULT_STEPS,
                 count=DEFAULT_SCENES, checkpoint=None) -> TrainedRun:
    data = generate_dataset(DataConfig(seed=seed), count)
    config = TrainConfig(steps=steps, lambda_dida=lambda_dida,
                         lambda_contrastive=lambda_contrastive, seed=seed, checkpoint=checkpoint)
    t0 = time.perf_counter()
    encoder, report = train(init_encoder(EncoderConfig(seed=seed)), data, config)
    n_train = count - round(count * config.holdout_fraction)
    return TrainedRun(encoder, init_encoder(EncoderConfig(seed=seed)), report,
                      data[:n_train], data[n_train:], time.perf_counter() - t0)


@pytest.fixture(scope="session")
def default_run() -> TrainedRun:
    """One full default training run, shared by every test that needs a trained model."""
    return run_training()


# -- acceptance verdicts, printed once at the end of the run --------------------------

VERDICTS = []


def record_verdict(name: str, passed: bool, detail: str) -> None:
    VERDICTS.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
