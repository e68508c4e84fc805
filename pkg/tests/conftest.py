import numpy as np
import pytest

from fseb.model import MlpConfig, ModelParams, init_params


def rel_err(a, b) -> float:
    """Norm-wise relative error, symmetric in its arguments."""
    a = np.concatenate([np.ravel(v) for v in a.values()]) if isinstance(a, dict) else np.ravel(a)
    b = np.concatenate([np.ravel(v) for v in b.values()]) if isinstance(b, dict) else np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def random_net(seed: int, widths=(8, 4), d_in: int = 2, k: int = 2, activation: str = "tanh",
               scale: float = 1.0) -> ModelParams:
    """Net with nonzero biases, so that every parameter influences the output."""
    cfg = MlpConfig(d_in, widths, k, activation, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    return init_params(cfg).map(lambda _, v: v + scale * 0.3 * rng.standard_normal(np.shape(v)))


def random_batch(seed: int, n: int = 6, d_in: int = 2, k: int = 2):
    rng = np.random.default_rng(seed + 2000)
    return rng.normal(size=(n, d_in)), rng.integers(0, k, size=n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
