import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexilen import autodiff as ad
from flexilen.autodiff import Tensor, backward
from flexilen.mixture import (
    LOG_2PI,
    MixturePrediction,
    draw_samples,
    kl_distill,
    nll,
    nll_bruteforce,
)

from fdutil import assert_grad_close, finite_difference


def _random_pred(seed, n=3, t=4, k=2, requires_grad=False):
    r = np.random.default_rng(seed)
    return MixturePrediction(
        means=Tensor(r.normal(size=(n, t, k, 2)), requires_grad=requires_grad),
        scales=Tensor(r.uniform(0.3, 2.0, size=(n, t, k, 2)), requires_grad=requires_grad),
        logits=Tensor(r.normal(size=(n, k)), requires_grad=requires_grad),
    )


# ----------------------------------------------------------------------- nll


def test_nll_at_mean_unit_scale_is_log_2pi():
    n, t = 2, 5
    gt = np.random.default_rng(0).normal(size=(n, t, 2))
    pred = MixturePrediction(
        means=Tensor(gt[:, :, None, :]),
        scales=Tensor(np.ones((n, t, 1, 2))),
        logits=Tensor(np.zeros((n, 1))),
    )
    # per-step NLL for a unit Gaussian evaluated at its mean: 2 * 0.5 * ln(2*pi)
    assert nll(pred, gt).item() == pytest.approx(LOG_2PI, rel=1e-12)


def test_nll_mixture_of_identical_modes_collapses():
    r = np.random.default_rng(1)
    gt = r.normal(size=(3, 4, 2))
    mu = r.normal(size=(3, 4, 1, 2))
    sd = r.uniform(0.5, 1.5, size=(3, 4, 1, 2))
    single = MixturePrediction(Tensor(mu), Tensor(sd), Tensor(np.zeros((3, 1))))
    double = MixturePrediction(
        Tensor(np.repeat(mu, 2, axis=2)),
        Tensor(np.repeat(sd, 2, axis=2)),
        Tensor(np.zeros((3, 2))),  # equal weights [0.5, 0.5]
    )
    assert nll(double, gt).item() == pytest.approx(nll(single, gt).item(), rel=1e-12)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=50)
def test_nll_matches_bruteforce_density_sum(seed):
    pred = _random_pred(seed)
    gt = np.random.default_rng(seed + 1).normal(size=(3, 4, 2))
    assert nll(pred, gt).item() == pytest.approx(nll_bruteforce(pred, gt), abs=1e-10)


def test_nll_rejects_nonpositive_scale():
    pred = _random_pred(2)
    pred.scales.data[0, 0, 0, 0] = 0.0
    with pytest.raises(ad.DomainError):
        nll(pred, np.zeros((3, 4, 2)))


def test_nll_rejects_shape_mismatch():
    pred = _random_pred(3)
    with pytest.raises(ValueError):
        nll(pred, np.zeros((3, 5, 2)))


def test_nll_gradcheck():
    pred = _random_pred(4, n=2, t=3, k=2, requires_grad=True)
    gt = np.random.default_rng(5).normal(size=(2, 3, 2))
    backward(nll(pred, gt))
    for field in ("means", "scales", "logits"):
        tensor = getattr(pred, field)
        base = tensor.data

        def f(v):
            values = {f2: getattr(pred, f2).data for f2 in ("means", "scales", "logits")}
            values[field] = v
            p = MixturePrediction(
                Tensor(values["means"]), Tensor(values["scales"]), Tensor(values["logits"])
            )
            return nll(p, gt).item()

        assert_grad_close(tensor.grad, finite_difference(f, base))


# ---------------------------------------------------------------- kl_distill


def test_kl_identical_is_exact_zero():
    pred = _random_pred(6)
    assert kl_distill(pred, pred).item() == 0.0


def test_kl_unit_mean_shift_is_half_per_dimension():
    n, t, k = 1, 1, 1
    teacher = MixturePrediction(
        Tensor(np.zeros((n, t, k, 2))), Tensor(np.ones((n, t, k, 2))), Tensor(np.zeros((n, k)))
    )
    student = MixturePrediction(
        Tensor(np.ones((n, t, k, 2))), Tensor(np.ones((n, t, k, 2))), Tensor(np.zeros((n, k)))
    )
    # 0.5 per dimension, two dimensions
    assert kl_distill(teacher, student).item() == pytest.approx(1.0, rel=1e-12)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=100)
def test_kl_nonnegative(seed):
    teacher = _random_pred(seed)
    student = _random_pred(seed + 77)
    assert kl_distill(teacher, student).item() >= 0.0


def test_kl_matches_monte_carlo_single_mode():
    r = np.random.default_rng(12)
    mu_t, mu_s = r.normal(size=2), r.normal(size=2)
    sd_t, sd_s = r.uniform(0.5, 1.5, size=2), r.uniform(0.5, 1.5, size=2)
    teacher = MixturePrediction(
        Tensor(mu_t.reshape(1, 1, 1, 2)), Tensor(sd_t.reshape(1, 1, 1, 2)), Tensor(np.zeros((1, 1)))
    )
    student = MixturePrediction(
        Tensor(mu_s.reshape(1, 1, 1, 2)), Tensor(sd_s.reshape(1, 1, 1, 2)), Tensor(np.zeros((1, 1)))
    )
    closed = kl_distill(teacher, student).item()

    draws = r.normal(size=(1_000_000, 2)) * sd_t + mu_t

    def log_density(x, mu, sd):
        return np.sum(-np.log(sd) - 0.5 * LOG_2PI - 0.5 * ((x - mu) / sd) ** 2, axis=-1)

    mc = np.mean(log_density(draws, mu_t, sd_t) - log_density(draws, mu_s, sd_s))
    assert closed == pytest.approx(mc, abs=1e-2)


def test_kl_detach_teacher_blocks_gradient():
    teacher = _random_pred(13, requires_grad=True)
    student = _random_pred(14, requires_grad=True)
    backward(kl_distill(teacher, student, detach_teacher=True))
    assert teacher.means.grad is None
    assert teacher.scales.grad is None
    assert teacher.logits.grad is None
    assert student.means.grad is not None

    backward(kl_distill(teacher, student, detach_teacher=False))
    assert teacher.means.grad is not None


def test_kl_gradcheck_student_side():
    teacher = _random_pred(15, n=2, t=2, k=2)
    student = _random_pred(16, n=2, t=2, k=2, requires_grad=True)
    backward(kl_distill(teacher, student))
    for field in ("means", "scales", "logits"):
        tensor = getattr(student, field)

        def f(v):
            values = {f2: getattr(student, f2).data for f2 in ("means", "scales", "logits")}
            values[field] = v
            s = MixturePrediction(
                Tensor(values["means"]), Tensor(values["scales"]), Tensor(values["logits"])
            )
            return kl_distill(teacher, s).item()

        assert_grad_close(tensor.grad, finite_difference(f, tensor.data))


def test_kl_shape_mismatch_raises():
    with pytest.raises(ValueError):
        kl_distill(_random_pred(17, k=2), _random_pred(18, k=3))


# -------------------------------------------------------------- draw_samples


def test_mode_means_single_mode_is_exact():
    pred = _random_pred(20, k=1)
    out = draw_samples(pred, 1, mode="mode-means")
    np.testing.assert_array_equal(out[0], pred.means.data[:, :, 0, :])


def test_mode_means_ordering_by_weight():
    r = np.random.default_rng(21)
    means = r.normal(size=(2, 3, 2, 2))
    logits = np.array([[0.0, 2.0], [1.0, -1.0]])  # agent 0 prefers mode 1, agent 1 mode 0
    pred = MixturePrediction(Tensor(means), Tensor(np.ones_like(means)), Tensor(logits))
    out = draw_samples(pred, 2, mode="mode-means")
    np.testing.assert_array_equal(out[0, 0], means[0, :, 1, :])
    np.testing.assert_array_equal(out[0, 1], means[1, :, 0, :])


def test_mode_means_k_eval_limit():
    with pytest.raises(ValueError):
        draw_samples(_random_pred(22, k=2), 3, mode="mode-means")


def test_stochastic_degenerate_noise_converges_to_means():
    pred = _random_pred(23, k=1)
    pred.scales.data[:] = 1e-12
    out = draw_samples(pred, 4, mode="stochastic", seed=0)
    np.testing.assert_allclose(out, np.broadcast_to(pred.means.data[:, :, 0, :], out.shape), atol=1e-9)


def test_stochastic_seeded_determinism():
    pred = _random_pred(24)
    a = draw_samples(pred, 5, mode="stochastic", seed=42)
    b = draw_samples(pred, 5, mode="stochastic", seed=42)
    assert a.tobytes() == b.tobytes()
