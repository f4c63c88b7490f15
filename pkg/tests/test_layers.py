import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from waam_pino.layers import (Conv2d, Conv3d, ConvLSTMCell, ConvLSTMState, NonFiniteGradient,
                              ParamStore, ShapeError, adam_step, conv2d, conv3d, convlstm_step,
                              grad_check, load_tensors, save_tensors)

D = torch.float64


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


def test_identity_kernel():
    x = torch.randn(2, 5, 6, generator=_gen(), dtype=D)
    k = torch.zeros(2, 2, 3, 3, dtype=D)
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
    assert torch.equal(conv2d(x, k), x)


def test_one_hot_box_plateau():
    x = torch.zeros(1, 7, 7, dtype=D)
    x[0, 3, 3] = 1.0
    y = conv2d(x, torch.ones(1, 1, 3, 3, dtype=D))
    assert y[0, 2:5, 2:5].eq(1.0).all() and y.sum() == 9.0


def test_conv2d_stride_shape_and_batching():
    k = torch.zeros(4, 3, 3, 3, dtype=D)
    assert conv2d(torch.zeros(3, 8, 10, dtype=D), k, stride=2).shape == (4, 4, 5)
    assert conv2d(torch.zeros(5, 3, 8, 10, dtype=D), k).shape == (5, 4, 8, 10)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(torch.zeros(3, 4, 4), torch.zeros(1, 2, 3, 3))
    with pytest.raises(ShapeError):
        conv2d(torch.zeros(1, 4, 4), torch.zeros(1, 1, 2, 2))
    with pytest.raises(ShapeError):
        conv3d(torch.zeros(4, 4), torch.zeros(1, 1, 3, 3, 3))


def test_conv3d_temporal_box_valid_padding():
    L = 6
    x = torch.arange(L, dtype=D).view(1, L, 1, 1).expand(1, L, 3, 3).contiguous()
    k = torch.zeros(1, 1, 3, 3, 3, dtype=D)
    k[0, 0, :, 1, 1] = 1.0
    y = conv3d(x, k, pad=(0, 1, 1))
    # sum of three consecutive time indices
    expected = torch.tensor([0 + 1 + 2, 1 + 2 + 3, 2 + 3 + 4, 3 + 4 + 5], dtype=D)
    assert torch.equal(y[0, :, 1, 1], expected)


def test_conv3d_temporal_stride():
    k = torch.zeros(2, 1, 3, 3, 3, dtype=D)
    assert conv3d(torch.zeros(4, 1, 16, 6, 7, dtype=D), k, stride=(2, 1, 1)).shape == (4, 2, 8, 6, 7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16), st.floats(-3, 3), st.floats(-3, 3))
def test_conv2d_linearity(seed, a, b):
    g = _gen(seed)
    x1, x2 = torch.randn(2, 5, 5, generator=g, dtype=D), torch.randn(2, 5, 5, generator=g, dtype=D)
    k = torch.randn(3, 2, 3, 3, generator=g, dtype=D)
    lhs = conv2d(a * x1 + b * x2, k)
    rhs = a * conv2d(x1, k) + b * conv2d(x2, k)
    torch.testing.assert_close(lhs, rhs, rtol=1e-10, atol=1e-10)


def test_convlstm_zero_weights():
    hid = 3
    x = torch.randn(1, 2, 4, 4, generator=_gen(), dtype=D)
    s0 = ConvLSTMState.zeros(1, hid, 4, 4, like=x)
    s0.c.fill_(0.7)
    w_x, w_h = torch.zeros(4 * hid, 2, 3, 3, dtype=D), torch.zeros(4 * hid, hid, 3, 3, dtype=D)
    s1 = convlstm_step(x, s0, w_x, w_h, torch.zeros(4 * hid, dtype=D))
    # every gate sits at 0.5 and the candidate at 0
    torch.testing.assert_close(s1.c, torch.full_like(s1.c, 0.35))
    torch.testing.assert_close(s1.h, 0.5 * torch.tanh(s1.c))


def test_convlstm_saturated_forget_keeps_cell():
    hid = 2
    x = torch.randn(1, 1, 3, 3, generator=_gen(1), dtype=D)
    s0 = ConvLSTMState(torch.zeros(1, hid, 3, 3, dtype=D), torch.randn(1, hid, 3, 3, dtype=D))
    bias = torch.zeros(4 * hid, dtype=D)
    bias[:hid] = -100.0          # input gate closed
    bias[hid:2 * hid] = 100.0    # forget gate open
    s1 = convlstm_step(x, s0, torch.zeros(4 * hid, 1, 3, 3, dtype=D),
                       torch.zeros(4 * hid, hid, 3, 3, dtype=D), bias)
    torch.testing.assert_close(s1.c, s0.c, rtol=0, atol=1e-12)


def test_convlstm_shape_mismatch():
    s = ConvLSTMState.zeros(1, 2, 4, 4, like=torch.zeros(1, dtype=D))
    with pytest.raises(ShapeError):
        convlstm_step(torch.zeros(1, 1, 4, 4, dtype=D), s, torch.zeros(4, 1, 3, 3, dtype=D),
                      torch.zeros(4, 2, 3, 3, dtype=D), torch.zeros(4, dtype=D))
    with pytest.raises(ShapeError):
        convlstm_step(torch.zeros(1, 1, 5, 4, dtype=D), s, torch.zeros(8, 1, 3, 3, dtype=D),
                      torch.zeros(8, 2, 3, 3, dtype=D), torch.zeros(8, dtype=D))


def test_adam_first_step_is_signed_lr():
    p = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=D)
    g = torch.tensor([0.3, -40.0, 0.0, 1e-3], dtype=D)
    store = ParamStore({"p": p.clone()})
    adam_step(store, {"p": g}, lr=0.01)
    expected = p - 0.01 * g / (g.abs() + 1e-8)
    torch.testing.assert_close(store.params["p"], expected, rtol=0, atol=1e-12)
    assert store.params["p"][2] == 0.5


def test_adam_two_steps_hand_computed():
    store = ParamStore({"w": torch.tensor([0.0], dtype=D)})
    adam_step(store, {"w": torch.tensor([1.0], dtype=D)}, lr=0.1)
    adam_step(store, {"w": torch.tensor([3.0], dtype=D)}, lr=0.1)
    m = 0.9 * 0.1 + 0.1 * 3.0
    v = 0.999 * 0.001 + 0.001 * 9.0
    step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    step1 = 0.1 * 1.0 / (1.0 + 1e-8)
    assert store.params["w"].item() == pytest.approx(-step1 - step2, rel=1e-12)
    assert store.step == 2


def test_adam_rejects_non_finite():
    store = ParamStore({"layer.w": torch.zeros(2, dtype=D)})
    with pytest.raises(NonFiniteGradient, match="layer.w"):
        adam_step(store, {"layer.w": torch.tensor([1.0, float("nan")], dtype=D)})
    assert store.step == 0


def test_grad_check_linear_is_exact():
    w = torch.randn(5, generator=_gen(), dtype=D, requires_grad=True)
    x = torch.randn(5, generator=_gen(1), dtype=D)
    assert grad_check(lambda: (w * x).sum(), [w]) < 1e-9


def test_grad_check_detects_wrong_gradient():
    w = torch.randn(4, generator=_gen(), dtype=D, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x**2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(4, dtype=D)

    assert grad_check(lambda: Wrong.apply(w), [w]) > 0.1


def test_grad_check_convlstm_cell():
    g = _gen(2)
    cell = ConvLSTMCell(2, 3, 3, g)
    x = torch.randn(1, 2, 4, 5, generator=g, dtype=D)
    s = ConvLSTMState(torch.randn(1, 3, 4, 5, generator=g, dtype=D),
                      torch.randn(1, 3, 4, 5, generator=g, dtype=D))
    err = grad_check(lambda: (cell(x, s).h ** 2).sum(), list(cell.parameters()))
    assert err < 1e-4


def test_modules_seeded_init():
    a, b = Conv3d(2, 3, 3, _gen(7), t_stride=2), Conv3d(2, 3, 3, _gen(7), t_stride=2)
    assert torch.equal(a.weight, b.weight)
    bound = (1.0 / (2 * 27)) ** 0.5
    assert a.weight.abs().max() <= bound
    c = Conv2d(2, 3, 3, _gen(8))
    assert c(torch.zeros(2, 4, 4, dtype=D)).shape == (3, 4, 4)


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a.w": torch.randn(3, 2, 3, 3, generator=_gen()).float(),
               "b": torch.tensor([1.5, -2.25]), "scalar": torch.tensor(4.0)}
    save_tensors(tmp_path / "x.ckpt", tensors, {"seed": 3})
    back, meta = load_tensors(tmp_path / "x.ckpt")
    assert meta == {"seed": 3} and list(back) == list(tensors)
    for k in tensors:
        assert torch.equal(back[k], tensors[k])
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:4] == b"WPCK"


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE0000")
    with pytest.raises(ValueError):
        load_tensors(tmp_path / "bad")
