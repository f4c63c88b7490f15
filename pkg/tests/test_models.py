import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from waam_pino.layers import ShapeError, grad_check
from waam_pino.models import KINDS, DeepONetRNN, ModelSpec, build_model, fuse

D = torch.float64
MICRO = dict(window_i=8, horizon_m=3, enc_channels=(2, 3), lstm_layers=1, lstm_hidden=3,
             cnn_width=4)


def _hist(n=2, i=8, h=5, w=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, i, h, w, generator=g, dtype=D), torch.rand(n, i, h, w, generator=g, dtype=D)


@pytest.mark.parametrize("kind", KINDS)
def test_output_shapes(kind):
    model = build_model(ModelSpec(kind=kind, **MICRO), seed=0, dtype=D)
    t, u = _hist()
    out = model(t, u)
    assert out.u_hat.shape == (2, 3, 5, 6)
    assert out.u_hat.min() >= 0.0 and out.u_hat.max() <= 1.0
    if kind in ("deeponet_rnn", "pideeponet_rnn"):
        assert out.t_hat.shape == out.b_feat.shape == (2, 3, 5, 6)
    else:
        assert out.t_hat is None and out.b_feat is None


def test_default_loss_weights():
    assert (ModelSpec(kind="cnn").beta, ModelSpec(kind="cnn").lam) == (0.0, 0.0)
    assert (ModelSpec(kind="deeponet_rnn").beta, ModelSpec(kind="deeponet_rnn").lam) == (1.0, 0.0)
    assert ModelSpec(kind="pideeponet_rnn").lam == 0.1


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(kind="transformer")
    with pytest.raises(ValueError):
        ModelSpec(kind="cnn", lam=0.1)
    with pytest.raises(ValueError):
        ModelSpec(kind="deeponet_rnn", lam=0.1)
    with pytest.raises(ValueError):
        ModelSpec(window_i=3)
    with pytest.raises(ValueError):
        ModelSpec(enc_channels=(4, 8), lstm_hidden=16)
    spec = ModelSpec(kind="st_convlstm", **MICRO)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_short_history_is_rejected():
    model = build_model(ModelSpec(kind="pideeponet_rnn", **MICRO), dtype=D)
    t, u = _hist(i=3)
    with pytest.raises(ShapeError):
        model(t, u)
    with pytest.raises(ShapeError):
        model(_hist(i=8)[0], _hist(i=6)[1])


def test_cnn_horizon_is_fixed():
    model = build_model(ModelSpec(kind="cnn", **MICRO), dtype=D)
    with pytest.raises(ShapeError):
        model(*_hist(), m=5)


def test_recurrent_horizon_is_free():
    model = build_model(ModelSpec(kind="st_convlstm", **MICRO), dtype=D)
    assert model(*_hist(), m=7).u_hat.shape[1] == 7


def test_zero_weights_give_half():
    model = build_model(ModelSpec(kind="pideeponet_rnn", **MICRO), dtype=D)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    out = model(*_hist())
    assert torch.all(out.t_hat == 0.5)
    assert torch.all(out.b_feat == 0.0)
    assert torch.all(out.u_hat == 0.5)


def test_seeded_construction():
    spec = ModelSpec(kind="deeponet_rnn", **MICRO)
    a, b, c = build_model(spec, 1), build_model(spec, 1), build_model(spec, 2)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_decoupling(seed):
    model = build_model(ModelSpec(kind="pideeponet_rnn", **MICRO), seed=3, dtype=D)
    t, u = _hist(seed=seed)
    t2, u2 = _hist(seed=seed + 1)
    with torch.no_grad():
        base = model(t, u)
        pert_u = model(t, u2)
        pert_t = model(t2, u)
    assert torch.equal(base.t_hat, pert_u.t_hat)
    assert torch.equal(base.b_feat, pert_t.b_feat)
    assert not torch.equal(base.u_hat, pert_u.u_hat)


def test_fuse_values():
    b = torch.tensor([1.0, -2.0, 0.0], dtype=D)
    t = torch.tensor([1.0, 0.5, 0.9], dtype=D)
    out = fuse(b, t)
    assert out[0].item() == pytest.approx(0.7310585786, abs=1e-9)
    assert out[1].item() == pytest.approx(0.2689414214, abs=1e-9)
    assert out[2].item() == 0.5
    # sigma(-x) = 1 - sigma(x)
    torch.testing.assert_close(fuse(-b, t), 1 - out)
    with pytest.raises(ShapeError):
        fuse(b, t[:2])


@pytest.mark.parametrize("kind", KINDS)
def test_micro_grad_check(kind):
    model = build_model(ModelSpec(kind=kind, **MICRO), seed=5, dtype=D)
    t, u = _hist(n=1, h=4, w=4)
    target = torch.rand(1, 3, 4, 4, generator=torch.Generator().manual_seed(9), dtype=D)
    params = list(model.parameters())
    err = grad_check(lambda: ((model(t, u).u_hat - target) ** 2).mean(), params, n_samples=4)
    assert err < 1e-4


def test_deeponet_class_serves_both_kinds():
    assert isinstance(build_model(ModelSpec(kind="deeponet_rnn", **MICRO)), DeepONetRNN)
    assert isinstance(build_model(ModelSpec(kind="pideeponet_rnn", **MICRO)), DeepONetRNN)
