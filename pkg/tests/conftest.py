import numpy as np
import pytest

from satm.diffmodels import LabeledBatch, ModelSpec


def random_instance(spec, rng, n=7, scale=1.0):
    theta = rng.normal(size=spec.param_count) * scale
    X = rng.normal(size=(n, spec.d))
    y = rng.integers(0, spec.C, size=n)
    return theta, LabeledBatch(X, y)


def central_diff(f, x, direction, h=1e-5):
    return (f(x + h * direction) - f(x - h * direction)) / (2 * h)


SPECS = [
    ModelSpec.softmax_regression(4, 3),
    ModelSpec.softmax_regression(3, 2, ridge=0.3),
    ModelSpec.mlp1(3, 5, 4),
    ModelSpec.mlp1(3, 4, 3, activation="softplus"),
    ModelSpec.mlp1(2, 3, 2, activation="sigmoid"),
]


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def quadratic_problem(alpha=0.5, phi=1.0, theta0=0.0, target=0.0, delta=2.0):
    """Scalar surrogate L = (theta - phi)^2 / 2. With delta = 2 the outer
    gradient at theta_N is theta_N - target."""
    from satm.data import SyntheticDataset
    from satm.trajectory import Segment

    spec = ModelSpec.quadratic(1)
    ds = SyntheticDataset(np.array([[phi]]), (0,), 1, alpha)
    seg = Segment(0, 1, np.array([theta0 + 2.0]), np.array([target]), delta)
    return spec, ds, seg


def small_problem(seed=0, d=3, C=2, ipc=1, alpha=0.3):
    from satm.data import SyntheticDataset
    from satm.trajectory import Segment

    g = np.random.default_rng(seed)
    spec = ModelSpec.softmax_regression(d, C)
    ds = SyntheticDataset(g.normal(size=(C * ipc, d)), tuple(range(C)), ipc, alpha)
    theta0 = g.normal(size=spec.param_count) * 0.3
    target = theta0 + g.normal(size=spec.param_count)
    diff = theta0 - target
    return spec, ds, theta0, Segment(0, 1, theta0, target, float(diff @ diff))


# acceptance reporting: one line per criterion, echoed live and in the summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
