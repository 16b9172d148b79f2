import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gamlm.armodel import ArModel
from gamlm.features import FeatureSpec, empirical_moments, encode
from gamlm.gam import (
    DegenerateWeightsError, Gam, LowAcceptanceError, ProposalPool, SnisBuffer, Training1Config,
    estimate_moments_rs, estimate_moments_snis, exact_distribution, exact_log_likelihood,
    exact_log_partition, exact_moments, load_gam, log_potential, save_gam, train_gam,
    write_training_log,
)

from conftest import TOY_MOTIF, TOY_N


def naive_phi(spec, x):
    out = []
    for name, pat in zip(("m", "m+0", "m/2", "d0", "d1", "d2", "d3"), spec.patterns):
        if spec.ft[("m", "m+0", "m/2", "d0", "d1", "d2", "d3").index(name)] != "1":
            continue
        out.append(float(x[0] != "0") if name == "d0" else float(pat not in x))
    return np.array(out)


def random_gam(seed, n=TOY_N, ft="1001111", scale=2.0):
    rng = np.random.default_rng(seed)
    r = ArModel.init(n, 4, 6, seed=seed, scale=0.6, dtype="float64")
    spec = FeatureSpec.create(TOY_MOTIF, ft, seed=seed)
    return Gam(r, spec, rng.normal(0, scale, spec.dim))


def brute_partition(g):
    total = 0.0
    for t in itertools.product("01", repeat=g.n):
        x = "".join(t)
        total += math.exp(g.r.log_prob(x) + naive_phi(g.spec, x) @ g.lam)
    return total


def test_log_potential_definition(toy_r):
    spec = FeatureSpec.create(TOY_MOTIF, "1001111")
    g = Gam(toy_r, spec, np.array([-10.1, 0.3, -0.2, 0.0, 1.5]))
    for x in ["0000000000", "1011000000", "1110000011"]:
        assert log_potential(g, x) == pytest.approx(toy_r.log_prob(x) + naive_phi(spec, x) @ g.lam, abs=1e-12)
    g0 = Gam(toy_r, spec, np.zeros(5))
    assert log_potential(g0, "0101010101") == toy_r.log_prob("0101010101")
    only_m = Gam(toy_r, spec, np.array([-10.1, 0, 0, 0, 0]))
    x = "0" * 10
    assert log_potential(only_m, x) - toy_r.log_prob(x) == pytest.approx(-10.1)
    with pytest.raises(ValueError):
        log_potential(g, "0101")
    with pytest.raises(ValueError):
        Gam(toy_r, spec, np.zeros(3))


def test_partition_by_enumeration():
    g = random_gam(1, n=8)
    assert exact_log_partition(g) == pytest.approx(math.log(brute_partition(g)), abs=1e-10)
    g0 = Gam(g.r, g.spec, np.zeros(g.spec.dim))
    assert exact_log_partition(g0) == pytest.approx(0.0, abs=1e-12)


def test_exact_oracle_limits(toy_r):
    spec = FeatureSpec.create(TOY_MOTIF, "1001111")
    g0 = Gam(toy_r, spec, np.zeros(5))
    x = encode(["".join(t) for t in itertools.product("01", repeat=TOY_N)])
    r_prob = np.exp(toy_r.log_probs(x))
    assert np.allclose(exact_moments(g0), r_prob @ g0.phi(x), atol=1e-12)
    single = FeatureSpec.create(TOY_MOTIF, "1000000")
    assert exact_moments(Gam(toy_r, single, np.array([30.0])))[0] > 1 - 1e-9
    big = Gam(ArModel.init(13, 2, 2), FeatureSpec.create(TOY_MOTIF, "1000000"), np.zeros(1))
    with pytest.raises(ValueError):
        exact_moments(big)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_likelihood_gradient_finite_differences(seed):
    g = random_gam(seed)
    rng = np.random.default_rng(seed)
    data = encode(["".join(rng.choice(["0", "1"], TOY_N)) for _ in range(7)])
    analytic = g.phi(data).mean(axis=0) - exact_moments(g)
    h = 1e-5
    for i in range(g.spec.dim):
        lam = g.lam.copy()
        lam[i] += h
        up = exact_log_likelihood(Gam(g.r, g.spec, lam), data)
        lam[i] -= 2 * h
        down = exact_log_likelihood(Gam(g.r, g.spec, lam), data)
        num = (up - down) / (2 * h)
        assert abs(num - analytic[i]) <= 1e-6 * max(abs(num), abs(analytic[i]), 1e-3)


def test_rs_zero_lambda_accepts_everything(toy_r):
    spec = FeatureSpec.create(TOY_MOTIF, "1001111")
    g = Gam(toy_r, spec, np.zeros(5))
    assert g.log_beta == 0.0
    mom, rate = estimate_moments_rs(g, 500, 3)
    assert rate == 1.0
    plain = g.phi(toy_r.sample_matrix(4096, np.random.default_rng(3)))[:500].mean(axis=0)
    assert np.array_equal(mom, plain)


def test_rs_bound_nonpositive_lambda(toy_r):
    spec = FeatureSpec.create(TOY_MOTIF, "1001111")
    assert Gam(toy_r, spec, -np.ones(5)).log_beta == 0.0
    assert Gam(toy_r, spec, np.array([-1.0, 2.0, 0.5, -3.0, 0.0])).log_beta == 2.5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rs_unbiased_1e5(seed):
    g = random_gam(seed, scale=1.0)
    x, p = exact_distribution(g)
    phi = g.phi(x)
    mean = p @ phi
    sd = np.sqrt(p @ (phi - mean) ** 2)
    k = 100_000
    est, rate = estimate_moments_rs(g, k, seed)
    assert 0 < rate <= 1
    assert np.all(np.abs(est - mean) <= 4 * sd / math.sqrt(k) + 1e-12)


def test_rs_matches_exact_1e6():
    g = random_gam(7, scale=1.0)
    x, p = exact_distribution(g)
    phi = g.phi(x)
    mean = p @ phi
    sd = np.sqrt(p @ (phi - mean) ** 2)
    est, _ = estimate_moments_rs(g, 1_000_000, 7)
    assert np.all(np.abs(est - mean) <= 4 * sd / 1000 + 1e-12)


def test_rs_draw_cap(toy_r):
    spec = FeatureSpec.create(TOY_MOTIF, "1000000")
    g = Gam(toy_r, spec, np.array([-1.0]))
    with pytest.raises(LowAcceptanceError, match="acceptance too low"):
        estimate_moments_rs(g, 50, 0, draw_cap=20)


def test_pool_never_reuses_draws(toy_r):
    spec = FeatureSpec.create(TOY_MOTIF, "1001111")
    pool = ProposalPool(toy_r, spec, 0, chunk=100)
    g = Gam(toy_r, spec, np.zeros(5))
    for _ in range(7):
        estimate_moments_rs(g, 30, 0, pool=pool)
    assert pool.total_draws == 210


def test_snis_zero_lambda_is_plain_mean(toy_r):
    spec = FeatureSpec.create(TOY_MOTIF, "1001111")
    buf = SnisBuffer.fill(toy_r, spec, 1000, 0)
    assert np.allclose(estimate_moments_snis(Gam(toy_r, spec, np.zeros(5)), buf), buf.phi.mean(axis=0),
                       rtol=0, atol=1e-15)


def test_snis_identical_buffer(toy_r):
    spec = FeatureSpec.create(TOY_MOTIF, "1001111")
    row = Gam(toy_r, spec, np.zeros(5)).phi(["1011000001"])[0]
    buf = SnisBuffer(np.tile(row, (50, 1)))
    for lam in (np.zeros(5), np.array([3.0, -2.0, 1.0, 0.5, -7.0])):
        assert np.allclose(estimate_moments_snis(Gam(toy_r, spec, lam), buf), row)


def test_snis_consistency():
    g = random_gam(3)
    exact = exact_moments(g)
    big = SnisBuffer.fill(g.r, g.spec, 100_000, 1)
    err_big = np.abs(estimate_moments_snis(g, big) - exact).max()
    assert err_big < 0.01
    small_errs = [np.abs(estimate_moments_snis(g, SnisBuffer.fill(g.r, g.spec, 500, s)) - exact).max()
                  for s in range(20)]
    assert np.mean(small_errs) > err_big


def test_snis_degenerate(toy_r):
    spec = FeatureSpec.create(TOY_MOTIF, "1000000")
    buf = SnisBuffer(np.ones((10, 1)))
    with pytest.raises(DegenerateWeightsError, match="degenerate weights"):
        estimate_moments_snis(Gam(toy_r, spec, np.array([np.inf])), buf)


def toy_spec():
    return FeatureSpec.create(TOY_MOTIF, "1001111")


def test_exact_regime_l1_non_increasing(toy_r, toy_data):
    D, V = toy_data
    g = train_gam(toy_r, D, V, Training1Config(treg="exact", patience=10, max_epochs=40), toy_spec())
    l1 = [h["l1_mom"] for h in g.history]
    # the first epochs take alpha = 10, 5 steps that may overshoot; afterwards descent is monotone
    assert all(b <= a + 1e-3 for a, b in zip(l1[2:], l1[3:]))
    assert min(l1) < 1e-3


@pytest.mark.parametrize("treg", ["exact", "snis"])
def test_moment_matching_per_component(treg, toy_r, toy_data):
    D, V = toy_data
    g = train_gam(toy_r, D, V, Training1Config(treg=treg), toy_spec())
    gap = np.abs(exact_moments(g) - empirical_moments(toy_spec(), D))
    assert gap.max() < 0.02


def test_rs_training_reduces_gap(toy_r, toy_data):
    D, V = toy_data
    spec = toy_spec()
    target = empirical_moments(spec, D)
    before = np.abs(exact_moments(Gam(toy_r, spec, np.zeros(spec.dim))) - target).sum()
    g = train_gam(toy_r, D, V, Training1Config(treg="rs"), spec)
    after = np.abs(exact_moments(g) - target).sum()
    assert after < before / 5
    assert g.lam[0] < -5
    assert set(g.history[0]) == {"epoch", "l1_mom", "acceptance_rate", "lambda_m", "lambda_d0",
                                 "lambda_d1", "lambda_d2", "lambda_d3"}


def test_data_from_r_keeps_lambda_small(toy_r):
    spec = toy_spec()
    D = toy_r.sample(20_000, 5)
    g = train_gam(toy_r, D, D[:100], Training1Config(treg="snis"), spec)
    assert g.history[0]["l1_mom"] < 0.03
    assert np.abs(g.lam).max() < 0.25


def test_training_deterministic(toy_r, toy_data):
    D, V = toy_data
    a = train_gam(toy_r, D, V, Training1Config(treg="rs", seed=4, max_epochs=5), toy_spec())
    b = train_gam(toy_r, D, V, Training1Config(treg="rs", seed=4, max_epochs=5), toy_spec())
    assert np.array_equal(a.lam, b.lam) and a.history == b.history


def test_empty_feature_set(toy_r, toy_data):
    D, V = toy_data
    g = train_gam(toy_r, D, V, Training1Config(), toy_spec().with_ft("0000000"))
    assert g.lam.shape == (0,) and g.log_beta == 0.0


def test_include_val_flag(toy_r, toy_data):
    D, V = toy_data
    spec = toy_spec()
    g = train_gam(toy_r, D[:50], ["1111111111"] * 50, Training1Config(treg="exact", include_val=True), spec)
    target = empirical_moments(spec, D[:50] + ["1111111111"] * 50)
    assert np.abs(exact_moments(g) - target).max() < 0.02


def test_config_validation():
    with pytest.raises(ValueError):
        Training1Config(treg="mcmc")
    with pytest.raises(ValueError):
        Training1Config(patience=0)
    with pytest.raises(ValueError):
        train_gam(None, [], [], Training1Config(), toy_spec())


def test_persistence(tmp_path, toy_r, toy_data):
    D, V = toy_data
    g = train_gam(toy_r, D, V, Training1Config(treg="snis", max_epochs=3), toy_spec())
    toy_r.save(tmp_path / "r.npz")
    save_gam(g, tmp_path / "g.json", tmp_path / "r.npz")
    back = load_gam(tmp_path / "g.json")
    assert np.array_equal(back.lam, g.lam) and back.spec == g.spec
    assert back.log_potential(D[0]) == g.log_potential(D[0])
    write_training_log(tmp_path / "log.csv", g.history)
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and list(rows[0])[:3] == ["epoch", "l1_mom", "ess"]
