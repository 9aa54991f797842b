import numpy as np
import pytest
from hypothesis import settings

from hemm.core import MixtureParams, ModelParams, OutcomeParams
from hemm.data import Dataset
from hemm.nn import Network

settings.register_profile("hemm", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("hemm")


def random_params(rng, K=2, d_cont=2, d_disc=1, hidden=(), mode="separate", kind="binary", sigma_y=1.0):
    """ModelParams with random but well-conditioned values."""
    mix = MixtureParams(
        mu=rng.normal(size=(K, d_cont)),
        sigma2=rng.uniform(0.5, 2.0, size=(K, d_cont)),
        pi=rng.uniform(0.1, 0.9, size=(K, d_disc)),
    )
    net = Network(d_cont + d_disc, hidden, mode, rng=rng)
    for name in net.params:
        if ".b" in name:
            net.params[name] = rng.normal(scale=0.3, size=net.params[name].shape)
    return ModelParams(mix, OutcomeParams(rng.normal(size=K), net, kind, sigma_y))


def random_dataset(rng, n=50, d_cont=2, d_disc=1, kind="binary"):
    x_cont = rng.normal(size=(n, d_cont))
    x_disc = (rng.uniform(size=(n, d_disc)) < 0.5).astype(float)
    t = (rng.uniform(size=n) < 0.5).astype(int)
    y = (rng.uniform(size=n) < 0.5).astype(float) if kind == "binary" else rng.normal(size=n)
    return Dataset(x_cont, x_disc, t, y, outcome_kind=kind)


def linear_net(d, w0=None, b0=0.0, w1=None, b1=0.0):
    net = Network(d, (), "separate", rng=np.random.default_rng(0))
    net.params["arm0.W0"] = np.asarray(w0 if w0 is not None else np.zeros(d), dtype=float).reshape(d, 1)
    net.params["arm0.b0"] = np.array([b0], dtype=float)
    net.params["arm1.W0"] = np.asarray(w1 if w1 is not None else np.zeros(d), dtype=float).reshape(d, 1)
    net.params["arm1.b0"] = np.array([b1], dtype=float)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    """Remember one acceptance outcome for the end-of-run summary."""
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
