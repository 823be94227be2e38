import numpy as np
import pytest

from grouptesting import AssumedParams, NoiseModel, generate_design, generate_states, observe, true_pool_states


def make_instance(n, m, ng, rho, p_tp, p_fp, seed):
    """Design, true states and noisy outcomes from three independent streams."""
    s_design, s_states, s_obs = np.random.SeedSequence(seed).spawn(3)
    d = generate_design(n, m, ng, s_design)
    x = generate_states(n, rho, s_states)
    y = observe(true_pool_states(d, x), NoiseModel(p_tp, p_fp), s_obs)
    return d, x, y


@pytest.fixture
def small_instance():
    d, x, y = make_instance(12, 6, 4, 0.2, 0.9, 0.05, seed=3)
    return d, x, y, AssumedParams.of(0.2, 0.9, 0.05)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def record(number, title, ok, detail):
        line = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
