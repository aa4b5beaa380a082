import numpy as np
import pytest

from genclassify.data import make_synthetic, make_synthetic_ood, split
from genclassify.models import ModelBundle, VaeConfig, fit_linear_generator, train_softmax, train_vae

# acceptance lines collected during the run, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synthetic():
    return make_synthetic()


@pytest.fixture(scope="session")
def splits(synthetic):
    return split(synthetic, 0.5, 0)


@pytest.fixture(scope="session")
def ood_set():
    return make_synthetic_ood(900)


@pytest.fixture(scope="session")
def linear_bundle(splits):
    train, _ = splits
    gens = [fit_linear_generator(train.class_pixels(k), 8) for k in range(train.num_classes)]
    return ModelBundle(gens, "linear", train.height, train.width, train.num_classes)


@pytest.fixture(scope="session")
def softmax_model(splits):
    return train_softmax(splits[0])


@pytest.fixture(scope="session")
def vae_bundle(splits):
    train, _ = splits
    gens = [train_vae(train.class_pixels(k), VaeConfig(epochs=60)) for k in range(train.num_classes)]
    return ModelBundle(gens, "vae", train.height, train.width, train.num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
