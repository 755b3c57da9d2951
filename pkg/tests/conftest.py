import logging
from dataclasses import dataclass

import numpy as np
import pytest

from vcmm import simgen

ONESTEP_REPS = 50


@dataclass
class OnestepRun:
    N: int
    central: np.ndarray  # (reps, d) theta of the centralized fit
    onestep: np.ndarray  # (reps, d) theta of the one-step fit (nan where it failed)
    beta_corr: np.ndarray
    alpha_corr: np.ndarray
    beta0: np.ndarray  # (reps, 2) one-step and central intercept estimates
    curves: np.ndarray  # (reps, 2, grid) one-step and central beta1 curves
    failures: int

    def rel_errors(self) -> np.ndarray:
        scale = np.max(np.abs(self.central), axis=1)
        return np.max(np.abs(self.onestep - self.central), axis=1) / scale


def _onestep_run(N: int, reps: int) -> OnestepRun:
    cen, one, bc, ac, b0, cur = [], [], [], [], [], []
    failures = 0
    for r in range(reps):
        spec = simgen.ScenarioSpec(example=3, N=N, seed=1000 + r)
        parts, truth, init = simgen.prepare(spec)
        c = simgen.fit_method(parts, truth.basis, init, simgen.scenario_config(spec, "central"))
        try:
            o = simgen.fit_method(parts, truth.basis, init, simgen.scenario_config(spec, "onestep"))
        except simgen.VCMMError:
            failures += 1
            continue
        cen.append(c.theta.theta)
        one.append(o.theta.theta)
        bc.append(simgen.safe_corr(o.theta.beta, c.theta.beta))
        ac.append(simgen.safe_corr(o.theta.alpha, c.theta.alpha))
        mo, mc = simgen.evaluate(o, truth), simgen.evaluate(c, truth)
        b0.append((mo.beta0_hat, mc.beta0_hat))
        cur.append((mo.beta1_curve, mc.beta1_curve))
    return OnestepRun(N, np.array(cen), np.array(one), np.array(bc), np.array(ac), np.array(b0), np.array(cur), failures)


@pytest.fixture(scope="session")
def onestep_study():
    """Example 3 at N = 1e4 and N = 1e3 (K = 8), central and one-step fits per replication."""
    logging.disable(logging.WARNING)
    try:
        return {N: _onestep_run(N, ONESTEP_REPS) for N in (10_000, 1_000)}
    finally:
        logging.disable(logging.NOTSET)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number!s:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
