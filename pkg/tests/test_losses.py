import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from dwinformer import gradcheck
from dwinformer import tensor as T
from dwinformer.errors import ConfigError, DomainError
from dwinformer.losses import clamp_for_eval, compute_metrics, mean_report, MetricReport, si_loss

depths = hnp.arrays(np.float64, (2, 3), elements=st.floats(0.1, 50.0))


# ---------------------------------------------------------------- SI loss


def test_si_loss_zero_when_equal():
    gt = np.random.default_rng(0).uniform(1, 9, (4, 4, 1))
    assert si_loss(gt.copy(), gt).item() == 0.0


def test_si_loss_scale_shift_vanishes_at_lambda_one():
    gt = np.random.default_rng(1).uniform(1, 9, (4, 4, 1))
    assert si_loss(2 * gt, gt, lam=1.0).item() == pytest.approx(0.0, abs=1e-6)


def test_si_loss_closed_form_double():
    gt = np.random.default_rng(2).uniform(1, 9, (4, 4, 1))
    expected = 10 * math.log(2) * math.sqrt(0.15)
    assert si_loss(2 * gt, gt).item() == pytest.approx(expected, abs=1e-4)
    assert expected == pytest.approx(2.68452, abs=1e-4)


def test_si_loss_matches_loop_oracle():
    rng = np.random.default_rng(3)
    pred, gt = rng.uniform(0.5, 9, (3, 5)), rng.uniform(0.5, 9, (3, 5))
    assert si_loss(pred, gt).item() == pytest.approx(oracles.si_loss_ref(pred, gt), rel=1e-12)


def test_si_loss_mask_selects_pixels():
    pred = np.array([2.0, 3.0, 100.0])
    gt = np.array([1.0, 1.0, 0.0])  # gt 0 is invalid by default
    assert si_loss(pred, gt).item() == pytest.approx(oracles.si_loss_ref(pred[:2], gt[:2]), rel=1e-12)
    mask = np.array([True, False, False])
    assert si_loss(pred, gt, mask=mask).item() == pytest.approx(10 * math.log(2) * math.sqrt(0.15), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(pred=depths, gt=depths, s=st.floats(0.01, 100.0))
def test_si_loss_scale_invariant_property(pred, gt, s):
    a = si_loss(pred, gt, lam=1.0).item()
    b = si_loss(s * pred, gt, lam=1.0).item()
    assert b == pytest.approx(a, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(pred=depths, gt=depths, lam=st.floats(0.0, 1.0))
def test_si_loss_nonnegative(pred, gt, lam):
    assert si_loss(pred, gt, lam=lam).item() >= 0.0


@pytest.mark.parametrize("pred,gt,match", [
    (np.array([1.0, -1.0]), np.array([1.0, 1.0]), "predicted depth"),
    (np.array([1.0, 0.0]), np.array([1.0, 1.0]), "predicted depth"),
    (np.array([1.0, 1.0]), np.array([0.0, 0.0]), "no valid"),
])
def test_si_loss_domain_errors(pred, gt, match):
    with pytest.raises(DomainError, match=match):
        si_loss(pred, gt)


def test_si_loss_rejects_negative_gt_under_explicit_mask():
    with pytest.raises(DomainError, match="ground-truth"):
        si_loss(np.ones(2), np.array([1.0, -2.0]), mask=np.ones(2, bool))


def test_si_loss_gradient():
    cases = {name: (f, leaves) for name, f, leaves in gradcheck._block_cases(4, 4, 2, 1, seed=0)}
    f, leaves = cases["si_loss"]
    assert T.finite_diff_check(f, leaves, h=gradcheck.BLOCK_STEP) < gradcheck.SI_LOSS_TOL


def test_si_loss_gradient_finite_at_zero_loss():
    pred = T.Tensor(np.array([2.0, 4.0]), requires_grad=True, dtype=np.float64)
    T.backward(si_loss(pred, np.array([2.0, 4.0])))
    np.testing.assert_array_equal(pred.grad, 0.0)


def test_si_loss_gradient_ignores_masked_pixels():
    pred = T.Tensor(np.array([2.0, 3.0, 4.0]), requires_grad=True, dtype=np.float64)
    T.backward(si_loss(pred, np.array([1.0, 1.5, 0.0])))
    assert pred.grad[2] == 0.0 and np.all(pred.grad[:2] != 0)


# ---------------------------------------------------------------- metrics


def test_metrics_hand_case():
    r = compute_metrics(np.array([1.0, 5.0]), np.array([2.0, 4.0]))
    assert r.abs_rel == pytest.approx(0.375, abs=1e-9)
    assert r.rms == pytest.approx(1.0, abs=1e-9)
    assert r.delta1 == 0.0  # ratio 1.25 sits on the strict boundary
    assert r.delta2 == 0.5  # ratio 2 > 1.5625
    assert r.sq_rel == pytest.approx((1 / 2 + 1 / 4) / 2, abs=1e-12)
    assert r.log10 == pytest.approx((math.log10(2) + math.log10(1.25)) / 2, abs=1e-12)


def test_metrics_perfect_prediction():
    gt = np.random.default_rng(0).uniform(1, 9, (8, 8))
    r = compute_metrics(gt.copy(), gt)
    assert (r.abs_rel, r.rms, r.log10, r.sq_rel) == (0.0, 0.0, 0.0, 0.0)
    assert r.delta1 == r.delta2 == r.delta3 == 1.0


@settings(max_examples=50, deadline=None)
@given(pred=depths, gt=depths)
def test_metrics_properties(pred, gt):
    r = compute_metrics(pred, gt)
    assert 0 <= r.delta1 <= r.delta2 <= r.delta3 <= 1
    assert min(r.abs_rel, r.sq_rel, r.rms, r.log10) >= 0
    swapped = compute_metrics(gt, pred)
    assert (swapped.delta1, swapped.delta2, swapped.delta3) == (r.delta1, r.delta2, r.delta3)


def test_abs_rel_not_symmetric():
    pred, gt = np.array([1.0]), np.array([2.0])
    assert compute_metrics(pred, gt).abs_rel == 0.5
    assert compute_metrics(gt, pred).abs_rel == 1.0


def test_metrics_mask_and_errors():
    r = compute_metrics(np.array([2.0, 1.0]), np.array([2.0, 4.0]), mask=np.array([True, False]))
    assert r.abs_rel == 0.0
    with pytest.raises(DomainError, match="mask shape"):
        compute_metrics(np.ones(2), np.ones(2), mask=np.ones(3, bool))
    with pytest.raises(DomainError):
        compute_metrics(np.zeros(2), np.ones(2))


def test_report_row_order_and_mean():
    assert MetricReport.columns() == ["abs_rel", "sq_rel", "rms", "log10", "delta1", "delta2", "delta3"]
    a = MetricReport(1, 2, 3, 4, 0.0, 0.5, 1.0)
    b = MetricReport(3, 4, 5, 6, 1.0, 1.0, 1.0)
    assert mean_report([a, b]).as_row() == [2, 3, 4, 5, 0.5, 0.75, 1.0]


# ---------------------------------------------------------------- clamp


def test_clamp_for_eval():
    x = np.array([0.0, 5.0, 100.0])
    np.testing.assert_array_equal(clamp_for_eval(x, 1e-3, 80.0), [1e-3, 5.0, 80.0])
    np.testing.assert_array_equal(clamp_for_eval(np.array([2.0, 3.0])), [2.0, 3.0])
    with pytest.raises(ConfigError):
        clamp_for_eval(x, 5.0, 5.0)
    with pytest.raises(ConfigError):
        clamp_for_eval(x, 0.0, 5.0)
