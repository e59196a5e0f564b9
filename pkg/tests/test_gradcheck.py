"""Finite-difference gradient verification harness."""

import pytest
import torch

from tirdet.losses import check_gradients, gradient_gate


def test_quadratic_is_exact():
    coeff = torch.tensor([0.5, -1.5, 2.0, 3.0], dtype=torch.float64)
    theta = torch.tensor([1.0, -2.0, 0.3, 4.0], dtype=torch.float64,
                         requires_grad=True)
    res = check_gradients(lambda: (coeff * theta * theta).sum(), [theta],
                          epsilon=1e-3, n_coords=4)
    assert res.max_rel_error < 1e-8
    assert res.n_checked == 4


def test_corrupted_gradient_is_flagged():
    class BadScale(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x * x).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            grad = 2.0 * x * g
            grad = grad.clone()
            grad[2] += 0.7          # deliberate fault on coordinate 2
            return grad

    theta = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64,
                         requires_grad=True)
    res = check_gradients(lambda: BadScale.apply(theta), [theta],
                          epsilon=1e-3, n_coords=4)
    assert res.max_rel_error > 0.1
    assert res.worst_coord == (0, 2)


def test_nonfinite_loss_raises():
    theta = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(FloatingPointError):
        check_gradients(lambda: torch.log(theta).sum(), [theta])


def test_gate_on_tiny_detector_full_loss():
    res = gradient_gate(seed=0, n_coords=200, epsilon=1e-3)
    assert res.n_checked == 200
    assert res.max_rel_error < 1e-3, str(res)


def test_fusion_weights_have_correct_gradients(rng):
    from tirdet.runner import WeightedFusion
    mod = WeightedFusion(3, epsilon=1e-4).double()
    xs = [torch.from_numpy(rng.normal(size=(1, 4, 6, 6))) for _ in range(3)]
    res = check_gradients(lambda: (mod(xs) ** 2).sum(),
                          list(mod.parameters()), epsilon=1e-5, n_coords=3)
    assert res.max_rel_error < 1e-6
