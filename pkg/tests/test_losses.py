import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from acdis import losses as L
from acdis.errors import ProtocolError, ShapeError

RAW = L.WindowConfig(window=4, normalize=False)


def randn(seed, *shape, scale=1.0):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape) * scale)


# ---------------------------------------------------------------- window statistics


def test_constant_window_has_zero_moments():
    a = torch.full((1, 1, 4, 4, 4), 0.7, dtype=torch.float64)
    st_ = L.window_stats(a, a.clone(), RAW)
    assert float(st_.variances) == 0.0
    assert float(st_.covariances) == 0.0


def test_self_covariance_equals_variance():
    a = (torch.arange(64, dtype=torch.float64) % 2).reshape(1, 1, 4, 4, 4)
    st_ = L.window_stats(a, a, RAW)
    assert torch.equal(st_.covariances, st_.variances)
    assert float(st_.variances) == pytest.approx(16 / 63, rel=1e-14)  # sum (x-0.5)^2 = 64 * 0.25


def test_window_stats_match_double_loop():
    a, b = randn(11, 2, 3, 8, 8, 4), randn(12, 2, 3, 8, 8, 4)
    st_ = L.window_stats(a, b, RAW)
    ref = oracles.window_moments(a.numpy(), b.numpy(), 4)
    np.testing.assert_allclose(st_.means.numpy(), ref["mean_a"], rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(st_.variances.numpy(), ref["var_a"], rtol=1e-6)
    np.testing.assert_allclose(st_.variances_b.numpy(), ref["var_b"], rtol=1e-6)
    np.testing.assert_allclose(st_.covariances.numpy(), ref["cov"], rtol=1e-6, atol=1e-12)


def test_window_remainder_is_dropped():
    a = randn(1, 1, 1, 6, 6, 6)
    st_ = L.window_stats(a, cfg=RAW)
    assert st_.variances.shape == (1, 1, 1)
    ref = oracles.window_moments(a[..., :4, :4, :4].numpy(), a[..., :4, :4, :4].numpy(), 4)
    np.testing.assert_allclose(st_.variances.numpy(), ref["var_a"], rtol=1e-12)


def test_window_stats_shape_errors():
    with pytest.raises(ShapeError):
        L.window_stats(randn(0, 1, 1, 4, 4, 4), randn(0, 1, 2, 4, 4, 4))
    with pytest.raises(ShapeError):
        L.window_stats(randn(0, 1, 1, 2, 4, 4))
    with pytest.raises(ValueError):
        L.WindowConfig(window=1)


# ---------------------------------------------------------------- variance / covariance losses


def test_variance_loss_zero_for_identical():
    f = randn(3, 1, 2, 8, 8, 8)
    assert float(L.variance_loss(f, f.clone())) == pytest.approx(0, abs=1e-12)


def test_variance_loss_equal_sigma_different_maps():
    f = randn(3, 1, 2, 4, 4, 4)
    g = -f + 5.0  # same windowed sigma, unrelated values
    assert float(L.variance_loss(f, g, RAW)) == pytest.approx(0, abs=1e-12)


def test_variance_loss_constant_windows_is_zero():
    f = torch.full((1, 1, 4, 4, 4), 0.3, dtype=torch.float64)
    g = torch.full((1, 1, 4, 4, 4), -2.0, dtype=torch.float64)
    assert float(L.variance_loss(f, g)) == 0.0


def test_variance_loss_hand_value():
    # teacher window: +-a alternating over 8 voxels, unbiased variance 8 a^2 / 7 = 0.04
    a = math.sqrt(0.035)
    aux = torch.tensor([a, -a] * 4, dtype=torch.float64).reshape(1, 1, 2, 2, 2)
    f_m = torch.zeros_like(aux)
    cfg = L.WindowConfig(window=2, eps=1e-6, normalize=False)
    assert float(L.window_stats(aux, cfg=cfg).variances) == pytest.approx(0.04, rel=1e-14)
    expected = 1 - (0 + 1e-6) / (0.04 + 1e-6)  # 0.9999750006249843
    assert float(L.variance_loss(f_m, aux, cfg)) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.999975, abs=1e-9)


def test_covariance_loss_perfect_and_flipped():
    f = randn(4, 1, 2, 8, 8, 8)
    assert float(L.covariance_loss(f, f.clone())) == pytest.approx(0, abs=1e-12)
    pos = L.covariance_loss(f, f.clone(), RAW)
    neg = L.covariance_loss(f, -f, RAW)
    assert float(pos) == pytest.approx(0, abs=1e-12)
    assert float(neg) == float(pos)


def test_covariance_loss_matches_pearson():
    cfg = L.WindowConfig(window=4, normalize=False)
    f, g = randn(5, 1, 1, 4, 4, 4, scale=5.0), randn(6, 1, 1, 4, 4, 4, scale=5.0)
    r = oracles.pearson(f.numpy(), g.numpy())
    assert float(L.covariance_loss(f, g, cfg)) == pytest.approx(1 - abs(r), abs=1e-6)


def test_covariance_loss_exact_eps_formula():
    f, g = randn(7, 1, 1, 4, 4, 4), randn(8, 1, 1, 4, 4, 4)
    ref = oracles.window_moments(f.numpy(), g.numpy(), 4)
    expected = 1 - (abs(ref["cov"][0, 0, 0]) + 1e-6) / (math.sqrt(ref["var_a"][0, 0, 0] * ref["var_b"][0, 0, 0]) + 1e-6)
    assert float(L.covariance_loss(f, g, RAW)) == pytest.approx(expected, rel=1e-10)


def test_normalization_squashes_inputs():
    f, g = randn(9, 1, 1, 4, 4, 4), randn(10, 1, 1, 4, 4, 4)
    squashed = L.covariance_loss(torch.sigmoid(f), torch.sigmoid(g), RAW)
    assert float(L.covariance_loss(f, g)) == float(squashed)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), scale=st.floats(1e-3, 1e3), normalize=st.booleans())
def test_losses_in_unit_range(seed, scale, normalize):
    cfg = L.WindowConfig(window=4, normalize=normalize)
    rng = np.random.default_rng(seed)
    f = torch.from_numpy(rng.standard_normal((1, 2, 4, 4, 8)) * scale)
    g = torch.from_numpy(rng.standard_normal((1, 2, 4, 4, 8)) * rng.uniform(0, 2) * scale)
    for fn in (L.variance_loss_map, L.covariance_loss_map):
        v = fn(f, g, cfg)
        assert float(v.min()) >= -1e-12 and float(v.max()) <= 1 + 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_sign_flip_invariance(seed):
    f, g = randn(seed, 1, 2, 4, 8, 4), randn(seed + 1, 1, 2, 4, 8, 4)
    assert float(L.covariance_loss(f, -g, RAW)) == float(L.covariance_loss(f, g, RAW))


def test_block_permutation_invariance():
    f, g = randn(20, 1, 2, 8, 8, 8), randn(21, 1, 2, 8, 8, 8)

    def permute_blocks(x):
        blocks = x.reshape(1, 2, 2, 4, 2, 4, 2, 4).permute(0, 1, 2, 4, 6, 3, 5, 7).reshape(1, 2, 8, 4, 4, 4)
        blocks = blocks[:, :, [5, 2, 7, 0, 3, 6, 1, 4]]
        return blocks.reshape(1, 2, 2, 2, 2, 4, 4, 4).permute(0, 1, 2, 5, 3, 6, 4, 7).reshape(1, 2, 8, 8, 8)

    pf, pg = permute_blocks(f), permute_blocks(g)
    assert not torch.equal(pf, f)
    for fn in (L.variance_loss, L.covariance_loss):
        assert float(fn(pf, pg)) == pytest.approx(float(fn(f, g)), abs=1e-14)


@pytest.mark.parametrize("fn", [L.variance_loss, L.covariance_loss, L.synthesis_loss, L.baseline_kl_distill])
def test_no_gradient_into_teacher(fn):
    f = randn(1, 1, 2, 4, 4, 4).requires_grad_(True)
    t = randn(2, 1, 2, 4, 4, 4).requires_grad_(True)
    gf, gt = torch.autograd.grad(fn(f, t), [f, t], allow_unused=True)
    assert gt is None
    assert gf is not None and float(gf.abs().max()) > 0


def test_safe_sqrt_keeps_gradient_finite_on_flat_windows():
    f = torch.zeros(1, 1, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    g = randn(3, 1, 1, 4, 4, 4)
    (gf,) = torch.autograd.grad(L.variance_loss(f, g, RAW) + L.covariance_loss(f, g, RAW), [f])
    assert torch.isfinite(gf).all()


# ---------------------------------------------------------------- ACCT


def test_acct_zero_for_identical():
    f = randn(1, 1, 2, 8, 8, 8)
    total, parts = L.acct_loss(f, f.clone())
    assert float(total) == pytest.approx(0, abs=1e-12)


def test_acct_additivity_and_composition():
    f, g = randn(5, 1, 2, 8, 8, 8), randn(6, 1, 2, 8, 8, 8)
    total, parts = L.acct_loss(f, g)
    assert float(total) == float(parts["l_var"] + parts["l_covar"])
    assert float(parts["l_var"]) == float(L.variance_loss(f, g))
    assert float(parts["l_covar"]) == float(L.covariance_loss(f, g))
    assert float(total) == float(L.variance_loss(f, g)) + float(L.covariance_loss(f, g))


def test_acct_averages_over_pairs():
    fs = [randn(i, 1, 2, 4, 4, 4) for i in range(3)]
    gs = [randn(10 + i, 1, 2, 4, 4, 4) for i in range(3)]
    _, parts = L.acct_loss(fs, gs)
    assert float(parts["l_var"]) == pytest.approx(np.mean([float(L.variance_loss(a, b)) for a, b in zip(fs, gs)]), rel=1e-14)
    with pytest.raises(ShapeError):
        L.acct_loss(fs, gs[:2])


# ---------------------------------------------------------------- synthesis / baselines


def test_synthesis_loss_examples():
    t = randn(2, 1, 2, 4, 4, 4)
    assert float(L.synthesis_loss(t.clone(), t)) == 0.0
    assert float(L.synthesis_loss(t + 0.5, t)) == pytest.approx(0.25, abs=1e-15)
    s = randn(3, 1, 2, 4, 4, 4)
    assert float(L.synthesis_loss(s, t)) == pytest.approx(oracles.mse(s.numpy(), t.numpy()), abs=1e-7)
    with pytest.raises(ShapeError):
        L.synthesis_loss(s, t[:, :1])


def test_baselines():
    f = randn(4, 1, 3, 2, 2, 2)
    g = randn(5, 1, 3, 2, 2, 2)
    assert float(L.baseline_mse_distill(f, f.clone())) == 0.0
    assert float(L.baseline_kl_distill(f, f.clone())) == pytest.approx(0, abs=1e-15)
    assert float(L.baseline_kl_distill(f, g)) == pytest.approx(oracles.kl_channel_softmax(f.numpy(), g.numpy()), abs=1e-6)
    with pytest.raises(NotImplementedError):
        L.adversarial_loss()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), scale=st.floats(0.01, 100))
def test_kl_nonnegative(seed, scale):
    f, g = randn(seed, 1, 3, 2, 2, 2, scale=scale), randn(seed + 7, 1, 3, 2, 2, 2, scale=scale)
    assert float(L.baseline_kl_distill(f, g)) >= 0


# ---------------------------------------------------------------- segmentation


def test_dice_loss_perfect_prediction():
    label = torch.from_numpy(np.random.default_rng(0).integers(0, 4, (2, 4, 4, 4)))
    logits = 100.0 * torch.nn.functional.one_hot(label, 4).permute(0, 4, 1, 2, 3).double()
    assert float(L.dice_loss(logits, label, 4)) < 1e-3


def test_wce_uniform_logits_is_log4():
    logits = torch.zeros(1, 4, 4, 4, 4, dtype=torch.float64)
    label = torch.zeros(1, 4, 4, 4, dtype=torch.long)
    assert float(L.weighted_ce_loss(logits, label, torch.ones(4))) == pytest.approx(math.log(4), abs=1e-12)
    assert float(L.weighted_ce_loss(logits, label)) == pytest.approx(math.log(4), abs=1e-12)


def test_segmentation_losses_match_per_voxel_oracle():
    rng = np.random.default_rng(9)
    logits = torch.from_numpy(rng.standard_normal((1, 4, 4, 4, 4)))
    label = torch.from_numpy(rng.integers(0, 4, (1, 4, 4, 4)))
    w = oracles.inverse_frequency_weights(label.numpy(), 4)
    np.testing.assert_allclose(L.class_weights(label, 4).numpy(), w, rtol=1e-12)
    assert float(L.weighted_ce_loss(logits, label)) == pytest.approx(
        oracles.weighted_ce(logits.numpy(), label.numpy(), w), abs=1e-6)
    assert float(L.dice_loss(logits, label)) == pytest.approx(
        oracles.soft_dice_loss(logits.numpy(), label.numpy()), abs=1e-6)


def test_class_weights_clipped():
    label = torch.zeros(1, 10, 10, 10, dtype=torch.long)
    label[0, 0, 0, 0] = 3
    w = L.class_weights(label, 4)
    # background lands far below the floor; absent classes keep weight 1
    assert w.tolist() == pytest.approx(oracles.inverse_frequency_weights(label.numpy(), 4), rel=1e-12)
    assert float(w[0]) == 0.1 and float(w[1]) == 1.0
    # mean normalization bounds every weight by the number of present classes
    label = torch.from_numpy(np.repeat([0, 1, 2], 1000)).reshape(1, 3000, 1, 1)
    label[0, 0] = 3
    w = L.class_weights(label, 4)
    assert 3.9 < float(w[3]) < 4.0
    assert w.tolist() == pytest.approx(oracles.inverse_frequency_weights(label.numpy(), 4), rel=1e-12)


def test_segmentation_loss_contract():
    rng = np.random.default_rng(1)
    label = torch.from_numpy(rng.integers(0, 4, (1, 4, 4, 4)))
    heads = [torch.from_numpy(rng.standard_normal((1, 4, 4, 4, 4))) for _ in range(6)]
    total, parts = L.segmentation_loss(heads, label)
    expected = sum(float(L.weighted_ce_loss(h, label) + L.dice_loss(h, label)) for h in heads)
    assert float(total) == pytest.approx(expected, rel=1e-12)
    assert len(parts["heads"]) == 6
    with pytest.raises(ProtocolError):
        L.segmentation_loss(heads[:5], label)
    with pytest.raises(ValueError):
        L.segmentation_loss(heads, label + 4)


# ---------------------------------------------------------------- overall objective


def _terms(vals):
    return [torch.tensor(v, dtype=torch.float32) for v in vals]


@pytest.mark.parametrize("epoch", [1, 4, 20])
def test_synthesis_gated_before_start(epoch):
    lv, lc, ls, ly = _terms([0.123, 0.456, 3.21, 9.87])
    total, rep = L.overall_loss(lv, lc, ls, ly, epoch=epoch, syn_start=21)
    assert rep.syn_active == 0
    assert rep.l_overall == rep.l_acct + rep.l_seg
    assert rep.l_acct == rep.l_var + rep.l_covar
    assert float(total) == pytest.approx(rep.l_overall, rel=1e-6)


@pytest.mark.parametrize("epoch", [21, 22, 500])
def test_synthesis_included_from_start(epoch):
    lv, lc, ls, ly = _terms([0.123, 0.456, 3.21, 9.87])
    total, rep = L.overall_loss(lv, lc, ls, ly, epoch=epoch, syn_start=21)
    assert rep.syn_active == 1
    assert rep.l_overall == rep.l_acct + rep.l_seg + rep.l_syn
    assert float(total) == pytest.approx(rep.l_overall, rel=1e-6)


def test_zero_losses_in_zero_out():
    total, rep = L.overall_loss(*_terms([0, 0, 0, 0]), epoch=30, syn_start=1)
    assert float(total) == 0.0 and rep.l_overall == 0.0


def test_acct_switch():
    lv, lc, ls, ly = _terms([0.5, 0.25, 2.0, 1.0])
    total, rep = L.overall_loss(lv, lc, ls, ly, epoch=1, syn_start=1, acct_active=False)
    assert rep.l_overall == rep.l_seg + rep.l_syn
    assert float(total) == 3.0


def test_report_record_roundtrip():
    _, rep = L.overall_loss(*_terms([0.1, 0.2, 0.3, 0.4]), epoch=2, syn_start=1)
    rec = rep.to_record()
    assert list(rec)[:10] == ["step", "epoch", "l_var", "l_covar", "l_acct", "l_syn", "l_wce", "l_dice", "l_seg", "l_overall"]
    assert len(rec["heads"]) == 6
    assert L.LossReport.from_record(rec) == rep


# ---------------------------------------------------------------- gradients (spot checks; full suite in acceptance)


@pytest.mark.parametrize("fn", [L.variance_loss, L.covariance_loss])
def test_window_loss_gradients_match_central_differences(fn):
    f, g = randn(31, 1, 2, 4, 4, 4), randn(32, 1, 2, 4, 4, 4)
    x = f.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x, g), [x])
    numeric = oracles.central_difference(lambda a: float(fn(torch.from_numpy(a), g)), f.numpy(), 1e-3)
    err = np.abs(analytic.numpy() - numeric).max() / np.abs(numeric).max()
    assert err < 1e-4
