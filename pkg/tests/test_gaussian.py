import numpy as np
import pytest

from pvae.autodiff import ShapeError, Tensor
from pvae.gaussian import (LOG_2PI, DiagGaussian, kl_divergence, kl_to_standard,
                           log_prob, rbf_kernel, sample_reparam)
from pvae.gradcheck import check_grads


def gauss(mean, log_var, grad=False):
    return DiagGaussian(Tensor(np.asarray(mean, dtype=np.float64), requires_grad=grad),
                        Tensor(np.asarray(log_var, dtype=np.float64), requires_grad=grad))


def random_gauss(rng, d, grad=False):
    return gauss(rng.normal(size=d), rng.normal(scale=0.7, size=d), grad=grad)


# ------------------------------------------------------------ kl_divergence

def test_kl_equal_is_zero():
    q = gauss(np.zeros(4), np.zeros(4))
    assert kl_divergence(q, q).item() == pytest.approx(0.0, abs=1e-12)


def test_kl_unit_mean_shift():
    q = gauss([1.0], [0.0])
    p = gauss([0.0], [0.0])
    assert kl_divergence(q, p).item() == pytest.approx(0.5, abs=1e-12)


def test_kl_dimension_mismatch():
    with pytest.raises(ShapeError):
        kl_divergence(gauss(np.zeros(3), np.zeros(3)), gauss(np.zeros(4), np.zeros(4)))


def test_kl_nonnegative_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = random_gauss(rng, 8)
        p = random_gauss(rng, 8)
        assert kl_divergence(q, p).item() >= 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(1)
    d, n = 16, 10**5
    q = random_gauss(rng, d)
    p = random_gauss(rng, d)
    mu_q, sd_q = q.mean.data, np.exp(0.5 * q.log_var.data)
    mu_p, sd_p = p.mean.data, np.exp(0.5 * p.log_var.data)
    z = mu_q + sd_q * rng.standard_normal((n, d))

    def logpdf(z, mu, sd):
        return -0.5 * np.sum(((z - mu) / sd) ** 2 + 2 * np.log(sd) + LOG_2PI, axis=1)

    draws = logpdf(z, mu_q, sd_q) - logpdf(z, mu_p, sd_p)
    mc, se = draws.mean(), draws.std(ddof=1) / np.sqrt(n)
    assert abs(kl_divergence(q, p).item() - mc) <= 3 * se


def test_kl_batched_rows_match_loop():
    rng = np.random.default_rng(2)
    mq, lq = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    mp, lp = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    batched = kl_divergence(gauss(mq, lq), gauss(mp, lp)).data
    for i in range(5):
        row = kl_divergence(gauss(mq[i], lq[i]), gauss(mp[i], lp[i])).item()
        assert batched[i] == pytest.approx(row, rel=1e-12)


# ----------------------------------------------------------- kl_to_standard

def test_kl_to_standard_at_prior_is_zero():
    assert kl_to_standard(gauss(np.zeros(6), np.zeros(6))).item() == pytest.approx(0.0, abs=1e-12)


def test_kl_to_standard_logvar_one():
    got = kl_to_standard(gauss([0.0], [1.0])).item()
    assert got == pytest.approx(0.5 * (np.e - 1.0 - 1.0), abs=1e-12)
    assert got == pytest.approx(0.3591, abs=1e-4)


def test_kl_to_standard_equals_general_form():
    rng = np.random.default_rng(3)
    q = random_gauss(rng, 12)
    p = gauss(np.zeros(12), np.zeros(12))
    assert kl_to_standard(q).item() == pytest.approx(kl_divergence(q, p).item(), rel=1e-14)


def test_factorized_joint_kl_is_sum_of_parts():
    # KL over a concatenated (style, semantic) pair equals the sum of the
    # per-variable KLs, and both match a joint Monte-Carlo estimate.
    rng = np.random.default_rng(4)
    qa, qs = random_gauss(rng, 5), random_gauss(rng, 7)
    pa, ps = random_gauss(rng, 5), random_gauss(rng, 7)
    joint_q = gauss(np.concatenate([qa.mean.data, qs.mean.data]),
                    np.concatenate([qa.log_var.data, qs.log_var.data]))
    joint_p = gauss(np.concatenate([pa.mean.data, ps.mean.data]),
                    np.concatenate([pa.log_var.data, ps.log_var.data]))
    parts = kl_divergence(qa, pa).item() + kl_divergence(qs, ps).item()
    joint = kl_divergence(joint_q, joint_p).item()
    assert joint == pytest.approx(parts, rel=1e-12)

    n = 10**5
    z = joint_q.mean.data + np.exp(0.5 * joint_q.log_var.data) * rng.standard_normal((n, 12))

    def logpdf(z, g):
        sd = np.exp(0.5 * g.log_var.data)
        return -0.5 * np.sum(((z - g.mean.data) / sd) ** 2 + g.log_var.data + LOG_2PI, axis=1)

    draws = logpdf(z, joint_q) - logpdf(z, joint_p)
    se = draws.std(ddof=1) / np.sqrt(n)
    assert abs(joint - draws.mean()) <= 3 * se


# ------------------------------------------------------------ sample_reparam

def test_reparam_zero_eps_gives_mean():
    rng = np.random.default_rng(5)
    q = random_gauss(rng, 6)
    z = sample_reparam(q, np.zeros(6))
    assert np.allclose(z.data, q.mean.data)


def test_reparam_unit_variance_shifts_by_eps():
    rng = np.random.default_rng(6)
    mean = rng.normal(size=5)
    eps = rng.normal(size=5)
    z = sample_reparam(gauss(mean, np.zeros(5)), eps)
    assert np.allclose(z.data, mean + eps)


def test_reparam_sample_mean_converges():
    rng = np.random.default_rng(7)
    d, n = 4, 10**5
    q = random_gauss(rng, d)
    eps = rng.standard_normal((n, d))
    z = q.mean.data + np.exp(0.5 * q.log_var.data) * eps
    se = z.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(z.mean(axis=0) - q.mean.data) <= 3 * se)


def test_reparam_dimension_mismatch():
    with pytest.raises(ShapeError):
        sample_reparam(gauss(np.zeros(3), np.zeros(3)), np.zeros(4))


# ----------------------------------------------------------------- log_prob

def test_log_prob_at_mean_unit_variance():
    q = gauss([0.7], [0.0])
    assert log_prob(np.array([0.7]), q).item() == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)
    assert log_prob(np.array([0.7]), q).item() == pytest.approx(-0.9189, abs=1e-4)


def test_log_prob_one_dim_off_by_one():
    q = gauss(np.zeros(3), np.zeros(3))
    at_mean = log_prob(np.zeros(3), q).item()
    off = log_prob(np.array([0.0, 1.0, 0.0]), q).item()
    assert off == pytest.approx(at_mean - 0.5, abs=1e-12)


def test_log_prob_matches_quadrature():
    # numerically integrate the density on a 1-d grid; compare log values
    q = gauss([0.3], [0.4])
    xs = np.linspace(-12, 12, 2_000_001)
    dens = np.exp([log_prob(np.array([x]), q).item() for x in xs[::100_000]])
    # spot-check selected points against the trapezoid-normalized density
    fine = np.exp(-0.5 * ((xs - 0.3) ** 2 / np.exp(0.4) + 0.4 + LOG_2PI))
    total = np.trapezoid(fine, xs)
    assert total == pytest.approx(1.0, abs=1e-6)
    for x, d in zip(xs[::100_000], dens):
        expected = np.exp(-0.5 * ((x - 0.3) ** 2 / np.exp(0.4) + 0.4 + LOG_2PI)) / total
        assert d == pytest.approx(expected, abs=1e-6)


# --------------------------------------------------------------- rbf_kernel

def test_rbf_equal_inputs_is_one():
    rng = np.random.default_rng(8)
    mu = rng.normal(size=9)
    assert rbf_kernel(mu, mu).item() == pytest.approx(1.0, abs=1e-15)


def test_rbf_squared_distance_two():
    assert rbf_kernel(np.array([1.0, 1.0]), np.array([0.0, 0.0])).item() == \
        pytest.approx(np.exp(-1.0), abs=1e-12)
    assert rbf_kernel(np.array([1.0, 1.0]), np.array([0.0, 0.0])).item() == \
        pytest.approx(0.36788, abs=1e-5)


def test_rbf_symmetric_and_bounded():
    rng = np.random.default_rng(9)
    for _ in range(20):
        a, b = rng.normal(size=5), rng.normal(size=5)
        kab = rbf_kernel(a, b).item()
        assert kab == rbf_kernel(b, a).item()
        assert 0.0 < kab <= 1.0


# ---------------------------------------------------------------- gradients

def test_gaussian_op_grads_match_finite_differences():
    rng = np.random.default_rng(10)
    q = random_gauss(rng, 6, grad=True)
    p = random_gauss(rng, 6, grad=True)
    eps = rng.standard_normal(6)
    x = rng.normal(size=6)
    params = [q.mean, q.log_var, p.mean, p.log_var]

    assert check_grads(lambda: kl_divergence(q, p), params) <= 1e-6
    assert check_grads(lambda: kl_to_standard(q), [q.mean, q.log_var]) <= 1e-6
    assert check_grads(lambda: log_prob(x, q), [q.mean, q.log_var]) <= 1e-6
    assert check_grads(lambda: (sample_reparam(q, eps) * sample_reparam(q, eps)).sum(),
                       [q.mean, q.log_var]) <= 1e-6
    assert check_grads(lambda: rbf_kernel(q.mean, p.mean), [q.mean, p.mean]) <= 1e-6
