import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rflab.fields import GmmSpec

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def gmm3():
    """Three-component mixture in d=2 used by the conversion proofs."""
    return GmmSpec([0.2, 0.5, 0.3],
                   [[1.5, -0.5], [-1.0, 2.0], [0.5, 0.5]],
                   [0.25, 0.49, 0.09])


@pytest.fixture
def gmm2():
    """Well-separated two-component mixture, the standard toy target."""
    return GmmSpec([0.5, 0.5], [[2.0, 2.0], [-2.0, -2.0]], [0.25, 0.25])


@pytest.fixture
def single_gaussian():
    return GmmSpec([1.0], [[0.0, 0.0]], [1.0])


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


class DeskRun:
    """One tuned two-round run shared by the end-to-end tests."""

    def __init__(self):
        from rflab.losses import LossSpec, TimestepDistribution
        from rflab.pipeline import (IndependentCoupling, ModelSpec,
                                    PairedCoupling, TrainConfig, generate_pairs,
                                    train_flow)

        started = time.time()
        self.target = GmmSpec([0.5, 0.5], [[2.0, 2.0], [-2.0, -2.0]],
                              [0.25, 0.25])
        model = ModelSpec(hidden=(96, 96))

        def cfg(seed, tdist, iters):
            return TrainConfig(batch_size=256, iterations=iters, seed=seed,
                               loss=LossSpec(parameterization="v"),
                               timesteps=tdist, learning_rate=1e-3,
                               warmup_iters=100, ema_decay=0.999, model=model)

        uniform = TimestepDistribution(kind="uniform")
        u_shaped = TimestepDistribution(kind="u_shaped", a=4.0)
        self.stage1 = train_flow(IndependentCoupling(self.target, seed=11),
                                 cfg(11, uniform, 10_000))
        self.pairs = generate_pairs(self.stage1.field(), 2, 20_000, 63, "heun",
                                    seed=12)
        coupling = PairedCoupling(self.pairs.xs, self.pairs.zs, seed=13)
        self.stage2 = train_flow(coupling, cfg(13, u_shaped, 6_000),
                                 init=self.stage1.params)
        self.stage2_uniform = train_flow(coupling, cfg(13, uniform, 6_000),
                                         init=self.stage1.params)
        self.train_seconds = time.time() - started

    def one_step_swd(self, result):
        from rflab.diagnostics import sliced_wasserstein
        from rflab.rng import substream
        from rflab.samplers import SolverConfig, TimeSchedule, integrate

        fld = result.field()
        zs = substream(99, "eval").standard_normal((8192, 2))
        ref = self.target.sample(8192, substream(99, "ref"))
        out = integrate(fld, zs, TimeSchedule.default(1).points,
                        SolverConfig()).endpoint
        return sliced_wasserstein(out, ref, 128, seed=5)

    def straightness_of(self, result):
        from rflab.diagnostics import straightness
        from rflab.rng import substream
        from rflab.samplers import SolverConfig, TimeSchedule, integrate

        fld = result.field()
        zs = substream(98, "traj").standard_normal((256, 2))
        res = integrate(fld, zs, TimeSchedule.uniform(32).points,
                        SolverConfig(record_trajectory=True))
        return straightness(np.asarray(res.times), res.trajectory)


@pytest.fixture(scope="session")
def desk_run():
    return DeskRun()
