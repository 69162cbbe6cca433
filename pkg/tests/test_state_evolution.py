import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relaxed_bp.errors import DomainError
from relaxed_bp.scalar_io import (
    Awgn,
    BoundedUniform,
    Discrete,
    Gaussian,
    GaussBernoulli,
    Logistic,
    QuadratureSpec,
    posterior_moments,
    score_derivatives,
)
from relaxed_bp.state_evolution import (
    MonteCarlo,
    Quadrature,
    ScaleModel,
    SEConfig,
    fixed_point_nse_db,
    fixed_point_summary,
    mse_in_bar,
    mse_out_bar,
    mu_z_init,
    predicted_curve,
    predicted_nse_db,
    run_se,
    se_map,
    trajectory_csv,
)

GOLDEN = (math.sqrt(5) - 1) / 2


def awgn_gauss(beta=1.0, var=1.0, noise=1.0):
    return SEConfig(beta, Gaussian(0, var), Awgn(noise), ScaleModel())


def test_mu_z_init_examples():
    assert mu_z_init(SEConfig(2.0, GaussBernoulli(0.1, 10.0), Awgn(1), ScaleModel())) == pytest.approx(2.0)
    assert mu_z_init(SEConfig(1.0, Gaussian(0, 3), Awgn(1), ScaleModel())) == pytest.approx(3.0)
    assert mu_z_init(SEConfig(0.5, Gaussian(0, 1), Awgn(1), ScaleModel(((1, 0.5), (3, 0.5))))) == pytest.approx(1.0)


def test_scale_model_validation():
    with pytest.raises(ValueError):
        ScaleModel(((1.0, 0.5), (2.0, 0.4)))
    with pytest.raises(ValueError):
        ScaleModel(((0.0, 1.0),))


def test_mse_in_limits():
    cfg = SEConfig(1.0, GaussBernoulli(0.1), Awgn(1), ScaleModel(((1, 0.5), (3, 0.5))))
    assert mse_in_bar(np.inf, cfg)[0] == pytest.approx(2.0)
    assert mse_in_bar(0.0, cfg)[0] == 0.0
    with pytest.raises(DomainError):
        mse_in_bar(-1.0, cfg)


@pytest.mark.parametrize("mu", [0.01, 0.5, 3.0, 40.0])
def test_mse_in_gaussian_mmse(mu):
    assert mse_in_bar(mu, awgn_gauss(var=2.0))[0] == pytest.approx(2.0 * mu / (2.0 + mu), rel=1e-12)


def test_mse_in_gauss_bernoulli_monte_carlo():
    prior = GaussBernoulli(0.1, 10.0)
    cfg = SEConfig(1.0, prior, Awgn(1), ScaleModel())
    rng = np.random.default_rng(20240101)
    x = prior.sample(rng, 1_000_000)
    q = x + math.sqrt(0.5) * rng.standard_normal(x.size)
    v = posterior_moments(q, 0.5, prior)[1]
    se = v.std() / math.sqrt(v.size)
    assert abs(mse_in_bar(0.5, cfg)[0] - v.mean()) <= 3 * se


def test_mse_in_discrete_prior_quadrature():
    prior = Discrete((-1.0, 1.0), (0.5, 0.5))
    cfg = SEConfig(1.0, prior, Awgn(1), ScaleModel())
    rng = np.random.default_rng(3)
    x = prior.sample(rng, 400_000)
    q = x + rng.standard_normal(x.size)
    v = posterior_moments(q, 1.0, prior)[1]
    assert abs(mse_in_bar(1.0, cfg)[0] - v.mean()) <= 4 * v.std() / math.sqrt(v.size)


def test_mse_out_awgn():
    cfg = awgn_gauss(noise=0.3)
    assert mse_out_bar(0.7, 1.0, cfg) == pytest.approx(1.0)
    assert mse_out_bar(0.0, 1.0, cfg) == pytest.approx(0.3)
    with pytest.raises(DomainError):
        mse_out_bar(1.5, 1.0, cfg)


def test_mse_out_bounded_monte_carlo():
    ch = BoundedUniform(math.sqrt(0.3))
    cfg = SEConfig(2.0, Gaussian(0, 1), ch, ScaleModel())
    rng = np.random.default_rng(99)
    n = 1_000_000
    zhat = math.sqrt(2.0 - 0.3) * rng.standard_normal(n)
    z = zhat + math.sqrt(0.3) * rng.standard_normal(n)
    y = ch.sample(z, rng)
    d2 = score_derivatives(y, zhat, 0.3, ch)[1]
    fisher, se = d2.mean(), d2.std() / math.sqrt(n)
    got = mse_out_bar(0.3, 2.0, cfg)
    assert abs(1.0 / got - fisher) <= 3 * se


def test_mse_out_logistic_quadrature_vs_monte_carlo():
    ch = Logistic(1.0)
    quad = SEConfig(1.0, Gaussian(0, 1), ch, ScaleModel(), expectation_method=Quadrature(QuadratureSpec(201)))
    mc = SEConfig(1.0, Gaussian(0, 1), ch, ScaleModel(), expectation_method=MonteCarlo(200_000, seed=5))
    a, b = mse_out_bar(0.4, 1.0, quad), mse_out_bar(0.4, 1.0, mc)
    assert a == pytest.approx(b, rel=0.02)


def test_awgn_fixed_point_is_root_of_closed_form():
    cfg = awgn_gauss()
    hi, lo = run_se(cfg, "hi"), run_se(cfg, "lo")
    assert hi.fixed_point_mu_z == pytest.approx(GOLDEN, abs=1e-6)
    assert lo.fixed_point_mu_z == pytest.approx(GOLDEN, abs=1e-6)
    # mu = (mu_w + mu) / (2 + mu) at beta = sigma^2 = mu_w = 1
    assert se_map(GOLDEN, cfg) == pytest.approx(GOLDEN, abs=1e-12)
    assert se_map(1.0, cfg) == pytest.approx(2.0 / 3.0)


def test_awgn_fixed_point_nse():
    cfg = awgn_gauss()
    hi = run_se(cfg, "hi")
    assert fixed_point_nse_db(hi, cfg) == pytest.approx(10 * math.log10(GOLDEN), abs=1e-6)


def test_lo_branch_first_step():
    cfg = awgn_gauss(noise=0.25)
    lo = run_se(cfg, "lo")
    assert lo.mu_q[0] == pytest.approx(0.25)


def test_unique_fixed_point_sparse_awgn():
    cfg = SEConfig(2.0, GaussBernoulli(0.1), Awgn(0.1), ScaleModel())
    hi, lo = run_se(cfg, "hi"), run_se(cfg, "lo")
    summary = fixed_point_summary(hi, lo, cfg)
    assert summary["unique"]
    assert summary["mu_z_lo"] <= summary["mu_z_hi"] + 1e-12


def test_predicted_nse_starts_at_zero_and_decreases():
    cfg = SEConfig(2.0, GaussBernoulli(0.1), Awgn(0.1), ScaleModel())
    hi = run_se(cfg, "hi")
    db = predicted_nse_db(hi, cfg)
    assert db[0] == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.diff(db) <= 1e-9)
    curve = predicted_curve(hi, cfg, 150)
    assert curve.size == 151 and curve[-1] == db[-1]


def test_per_atom_tracking():
    cfg = SEConfig(1.0, Gaussian(0, 1), Awgn(0.5), ScaleModel(((0.5, 0.5), (1.5, 0.5))))
    hi = run_se(cfg, "hi")
    assert hi.mu_x[-1].shape == (2,)
    # the weaker column (smaller scale) keeps more error
    assert hi.mu_x[-1][0] > hi.mu_x[-1][1]


CHANNELS = [Awgn(0.1), BoundedUniform(0.5), Logistic(1.0)]


@pytest.mark.parametrize("ch", CHANNELS, ids=["awgn", "bounded", "logistic"])
def test_se_map_monotone_and_bounded(ch):
    method = Quadrature(QuadratureSpec(201)) if isinstance(ch, Logistic) else Quadrature()
    cfg = SEConfig(1.5, GaussBernoulli(0.2), ch, ScaleModel(), expectation_method=method)
    init = mu_z_init(cfg)
    grid = np.linspace(0, init, 25)
    g = np.array([se_map(v, cfg) for v in grid])
    assert np.all(g >= 0) and np.all(g <= init * (1 + 1e-12))
    assert np.all(np.diff(g) >= -1e-12 * max(1, init))


@settings(max_examples=10, deadline=None)
@given(beta=st.floats(0.2, 3.0), rho=st.floats(0.05, 1.0), noise=st.floats(0.01, 2.0))
def test_sandwich_awgn(beta, rho, noise):
    cfg = SEConfig(beta, GaussBernoulli(rho), Awgn(noise), ScaleModel(), max_iterations=300)
    hi, lo = run_se(cfg, "hi"), run_se(cfg, "lo")
    assert np.all(np.diff(hi.mu_z) <= 1e-12 * max(1, hi.mu_z_init))
    assert np.all(np.diff(lo.mu_z) >= -1e-12 * max(1, hi.mu_z_init))
    assert lo.fixed_point_mu_z <= hi.fixed_point_mu_z + 1e-12
    assert 0 <= lo.mu_z[-1] <= hi.mu_z_init


def test_trajectory_csv_columns():
    cfg = awgn_gauss()
    text = trajectory_csv([run_se(cfg, "hi"), run_se(cfg, "lo")], cfg)
    lines = text.splitlines()
    assert lines[0] == "t,branch,mu_z,mu_q,mu_x,nse_db"
    assert {ln.split(",")[1] for ln in lines[1:]} == {"hi", "lo"}


def test_config_validation():
    with pytest.raises(ValueError):
        SEConfig(0.0, Gaussian(), Awgn(1), ScaleModel())
    with pytest.raises(ValueError):
        SEConfig(1.0, Gaussian(), Awgn(1), ScaleModel(), fixed_point_tolerance=0.0)
