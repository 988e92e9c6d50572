import numpy as np
import pytest


def random_intensity(rng, n, scale=1.0, sub=False):
    """Random intensity (or sub-intensity with positive exit rates) matrix."""
    a = rng.uniform(0, scale, (n, n))
    np.fill_diagonal(a, 0.0)
    exit_ = rng.uniform(0.1, scale, n) if sub else np.zeros(n)
    np.fill_diagonal(a, -(a.sum(axis=1) + exit_))
    return a


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_product(rng, q, p, lumps=True, horizon=None, pieces=2, theta=False):
    """Random independent biometric x rate product with piecewise-constant inputs."""
    from markovlife.bondmarket import ShortRateModel
    from markovlife.lifeval import PaymentSpec, build_product_model
    from markovlife.matrixcore import PiecewiseMatrixFunction

    horizon = horizon or float(rng.uniform(2, 5))
    bp = np.linspace(0, horizon, pieces + 1)
    Lb = np.stack([random_intensity(rng, q, 0.6) for _ in range(pieces)])
    b = rng.uniform(-0.5, 1.0, (pieces, 1, q))
    pw = lambda v: PiecewiseMatrixFunction(bp, v)
    kw = {}
    if lumps and q > 1:
        frac = rng.uniform(0, 1, (pieces, q, q)) * (rng.random((pieces, q, q)) < 0.7)
        L1 = np.where(Lb > 0, Lb * frac, 0.0)
        idx = np.arange(q)
        L1[:, idx, idx] = rng.uniform(0, 0.3, (pieces, q)) * (rng.random((pieces, q)) < 0.5)
        kw = dict(lumps=pw(rng.uniform(0.0, 2.0, (pieces, q, q))), lump_intensity=pw(L1))
    if theta:
        kw["rates_theta"] = pw(-rng.uniform(0.1, 0.5, (pieces, 1, q)))
    pay = PaymentSpec(pw(b), **kw)
    Lr = random_intensity(rng, p, 0.8)
    rates = rng.uniform(0.0, 0.08, p)
    rm = ShortRateModel.constant(Lr, rates, rng.dirichlet(np.ones(p)))
    return build_product_model(pw(Lb), pay, rm, horizon)


# verdict lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
