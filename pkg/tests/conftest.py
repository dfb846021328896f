import numpy as np
import pytest

from reverbfl import data as D
from reverbfl import experiment as E
from reverbfl import model as M

MICRO = M.ModelArch(input_shape=(8, 8, 2), num_classes=3, conv_channels=(2, 3, 4),
                    dense_units=5, dropout_p=0.5)


@pytest.fixture
def micro_arch():
    return MICRO


@pytest.fixture(scope="session")
def desk_cfg():
    return E.build_config(E.resolve(profile="desk"))


@pytest.fixture(scope="session")
def desk_data(desk_cfg):
    """Desk-profile synthetic data split into (train, test)."""
    ds = E.load_dataset(desk_cfg)
    return D.train_test_split(ds, 0.2, 0)


@pytest.fixture(scope="session")
def trained_desk(desk_data):
    """A desk CNN trained centrally for 3 epochs: (arch, params, train, test)."""
    train, test = desk_data
    arch = M.ModelArch(train.feature_shape, 4)
    params = M.init_params(arch, 0)
    state = M.OptimizerState(lr=1e-3)
    rng = np.random.default_rng(0)
    for _ in range(3):
        order = rng.permutation(len(train))
        for i in range(0, len(order), 16):
            idx = order[i:i + 16]
            params, state, _ = M.train_step(arch, params, state, train.x[idx], train.y[idx], rng)
    return arch, params, train, test


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


class DeskRuns:
    """Desk-profile federated runs cached by (variant, attack, seed) for the whole session."""

    def __init__(self):
        self._runs = {}

    def get(self, variant, attack, seed):
        key = (variant, attack, seed)
        if key not in self._runs:
            import time
            cfg = E.load_config(profile="desk", overrides={"experiment.variant": variant,
                                                           "attack.kind": attack,
                                                           "experiment.seed": str(seed)})
            start = time.perf_counter()
            _, records, _ = E.train(cfg)
            self._runs[key] = (records, time.perf_counter() - start)
        return self._runs[key]

    def final_accuracy(self, variant, attack, seed):
        return self.get(variant, attack, seed)[0][-1].test_accuracy

    def seconds(self, variant, attack, seed):
        return self.get(variant, attack, seed)[1]


@pytest.fixture(scope="session")
def desk_runs():
    return DeskRuns()
