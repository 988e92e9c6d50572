import math

import numpy as np
import pytest

from markovlife.bondmarket import ShortRateModel
from markovlife.errors import DomainError
from markovlife.io import data_path, read_model_json, read_product_json
from markovlife.lifeval import (PaymentSpec, build_product_model, raw_moments_of_pv,
                                state_reserves)
from markovlife.mcsim import (PVSample, SimulationConfig, empirical_quantiles, read_raw,
                              simulate_pv, write_raw)

from conftest import random_product


def test_deterministic_annuity():
    rm = ShortRateModel.constant([[0.0]], [0.05])
    m = build_product_model([[0.0]], PaymentSpec([1.0]), rm, 10.0)
    s = simulate_pv(m, 0, SimulationConfig(1000, seed=1))
    assert np.allclose(s.values, (1 - math.exp(-0.5)) / 0.05, rtol=0, atol=1e-12)


def test_quantile_basics():
    assert empirical_quantiles(PVSample(np.full(10, 3.0)), [0.1, 0.9]).tolist() == [3.0, 3.0]
    assert empirical_quantiles(PVSample(np.arange(1, 101.0)), [0.95])[0] == 95.0
    u = np.random.default_rng(0).random(10**6)
    assert abs(empirical_quantiles(PVSample(u), [0.5])[0] - 0.5) < 0.002
    with pytest.raises(DomainError):
        empirical_quantiles(PVSample(u), [1.0])
    with pytest.raises(DomainError):
        SimulationConfig(0)


def test_quantiles_monotone(rng):
    m = random_product(rng, 2, 2)
    s = simulate_pv(m, 0, SimulationConfig(5000, seed=3))
    q = list(s.summary["quantiles"].values())
    assert q == sorted(q)


def test_seed_determinism(rng):
    m = random_product(rng, 2, 2)
    a = simulate_pv(m, (0, None), SimulationConfig(3000, seed=9, workers=2))
    b = simulate_pv(m, (0, None), SimulationConfig(3000, seed=9, workers=2))
    c = simulate_pv(m, (0, None), SimulationConfig(3000, seed=10, workers=2))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_worker_split_concatenates_in_order(rng):
    m = random_product(rng, 2, 1)
    cfg = SimulationConfig(1001, seed=5, workers=3)
    assert cfg.split() == [334, 334, 333]
    s = simulate_pv(m, 0, cfg)
    from markovlife.mcsim import _tables, _simulate_block
    tb = _tables(m, 0.0)
    kids = np.random.SeedSequence(5).spawn(3)
    first = _simulate_block(m, tb, m.start_vector(0), 334, np.random.default_rng(kids[0]))
    assert np.array_equal(s.values[:334], first)


def test_raw_roundtrip(tmp_path):
    s = PVSample(np.random.default_rng(1).normal(size=17))
    write_raw(tmp_path / "pv.bin", s)
    raw = (tmp_path / "pv.bin").read_bytes()
    assert len(raw) == 8 + 17 * 8 and int.from_bytes(raw[:8], "little") == 17
    assert np.array_equal(read_raw(tmp_path / "pv.bin").values, s.values)
    (tmp_path / "short.bin").write_bytes(raw[:40])
    with pytest.raises(DomainError):
        read_raw(tmp_path / "short.bin")


def test_lump_triggers_always_fire():
    # one transition alive -> dead with trigger intensity equal to the full intensity:
    # every death pays exactly one lump of 1
    L = np.array([[-0.3, 0.3], [0.0, 0.0]])
    pay = PaymentSpec([0.0, 0.0], lumps=[[0, 1.0], [0, 0]], lump_intensity=L.clip(0))
    rm = ShortRateModel.constant([[0.0]], [0.0])
    m = build_product_model(L, pay, rm, 4.0)
    s = simulate_pv(m, 0, SimulationConfig(20000, seed=2))
    assert set(np.unique(s.values)) <= {0.0, 1.0}
    p = 1 - math.exp(-1.2)
    assert abs(s.values.mean() - p) < 3 * math.sqrt(p * (1 - p) / s.n)


def test_poisson_self_lumps():
    # diagonal trigger intensity pays a Poisson number of lumps without a state change
    pay = PaymentSpec([0.0], lumps=[[2.0]], lump_intensity=[[0.5]])
    rm = ShortRateModel.constant([[0.0]], [0.0])
    m = build_product_model([[0.0]], pay, rm, 3.0)
    s = simulate_pv(m, 0, SimulationConfig(40000, seed=4))
    counts = s.values / 2.0
    assert np.allclose(counts, np.round(counts))
    assert abs(counts.mean() - 1.5) < 3 * math.sqrt(1.5 / s.n)
    assert abs(counts.var() - 1.5) < 0.05


def test_moments_match_analytic_toy():
    rng = np.random.default_rng(21)
    m = random_product(rng, 2, 2, lumps=True, horizon=3.0)
    start = (0, None)
    mom = raw_moments_of_pv(m, start, 4)
    s = simulate_pv(m, start, SimulationConfig(100_000, seed=8))
    for k in range(1, 5):
        est, se = s.raw_moment(k)
        assert abs(est - mom[k]) < 3 * se, k


def test_disability_mean_against_reserve():
    prod = read_product_json(data_path("disability_product.json"))
    rate = read_model_json(data_path("rate_model_p4.json"))
    m = build_product_model(prod.intensity, prod.payments, rate, prod.horizon)
    theta = 0.17
    s = simulate_pv(m, (0, 0), SimulationConfig(100_000, seed=1), theta)
    est, se = s.raw_moment(1)
    assert abs(est - state_reserves(m, 0.0, theta)[0]) < 3 * se


def test_histogram_integrates_to_one(rng):
    s = PVSample(rng.normal(size=5000))
    h = s.histogram(50)
    assert abs(h[:, 1].sum() * (h[1, 0] - h[0, 0]) - 1) < 1e-12
