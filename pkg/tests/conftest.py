import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from skillgraft import nncore, synthtasks as st
from skillgraft.nncore import ModelSpec

settings.register_profile("default", deadline=None, max_examples=100, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_batch(spec: ModelSpec, n: int, seed: int):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, spec.input_dim)), rng.integers(0, spec.num_classes, n)


@pytest.fixture(scope="session")
def small_world():
    return st.make_world(3, 8, 0.1, 0)


@pytest.fixture(scope="session")
def small_task(small_world):
    return st.make_task(small_world, 3, 0, seed=1)


@pytest.fixture(scope="session")
def small_spec():
    return ModelSpec(8, (12,), 3, "tanh", True)


@pytest.fixture(scope="session")
def small_pair(small_spec, small_task):
    """(pre, ft, spec, train, test) on a tiny task."""
    pre = nncore.init_model(small_spec, 0)
    train = st.sample_kshot(small_task, 16, "train", 0)
    test = st.sample_kshot(small_task, 64, "test", 0)
    cfg = nncore.OptimizerConfig(learning_rate=0.2, batch_size=8, steps=300, seed=0)
    ft = nncore.train(pre, small_spec, train, cfg).final
    return pre, ft, small_spec, train, test


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            name = nodeid.split("::test_criterion_")[1]
            lines.append((name, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict in sorted(lines):
            num, _, label = name.partition("_")
            terminalreporter.write_line(f"criterion {int(num):2d} {verdict}  {label.replace('_', ' ')}")
