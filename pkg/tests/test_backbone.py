import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from noisynp.backbone import (
    Adam, BackboneConfig, MLP, MultiHeadCrossAttention, grad_check, init_params, mlp_apply,
    optimizer_step, positive_transform,
)
from noisynp.errors import ConfigError, TrainingError


@pytest.fixture(autouse=True)
def _float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


# -- mlp -----------------------------------------------------------------------


def test_zero_weights_give_bias():
    m = MLP(3, 2, 5, 2)
    with torch.no_grad():
        for layer in m.net:
            if isinstance(layer, torch.nn.Linear):
                layer.weight.zero_()
        m.net[-1].bias.copy_(torch.tensor([0.5, -1.5]))
    out = mlp_apply(m, torch.randn(7, 3))
    torch.testing.assert_close(out, torch.tensor([[0.5, -1.5]]).expand(7, 2), rtol=0, atol=0)


def test_identity_configuration():
    m = MLP(4, 4, 4, 1, activation="linear")
    with torch.no_grad():
        m.net[0].weight.copy_(torch.eye(4))
        m.net[0].bias.zero_()
    x = torch.randn(3, 4)
    assert torch.equal(mlp_apply(m, x), x)


def test_mlp_shape_mismatch():
    with pytest.raises(ConfigError):
        MLP(3, 2, 4, 2)(torch.randn(5, 4))


def test_mlp_depth_layout():
    m = MLP(3, 2, 8, 4)
    linears = [l for l in m.net if isinstance(l, torch.nn.Linear)]
    assert len(linears) == 4
    assert len(m.net) == 7


def test_mlp_gradients_match_finite_differences():
    torch.manual_seed(0)
    m = MLP(3, 2, 6, 3, activation="tanh")
    x = torch.randn(5, 3, requires_grad=True)
    params = list(m.parameters()) + [x]
    err = grad_check(lambda: (mlp_apply(m, x) ** 2).sum(), params)
    assert err < 1e-4


# -- attention -----------------------------------------------------------------


def make_attention(seed=0, heads=2):
    att = MultiHeadCrossAttention(3, 3, 4, 8, heads)
    init_params(att, seed)
    return att


def test_singleton_key_broadcasts_projected_value():
    att = make_attention()
    q = torch.randn(6, 3)
    k = torch.randn(1, 3)
    v = torch.randn(1, 4)
    out = att(q, k, v)
    expected = att.w_o(att.w_v(v))
    torch.testing.assert_close(out, expected.expand(6, -1), rtol=0, atol=1e-12)


def test_identical_keys_give_uniform_weights():
    att = make_attention(1)
    q = torch.randn(5, 3)
    k = torch.randn(1, 3).expand(4, 3)
    v = torch.randn(4, 4)
    out, w = att(q, k, v, return_weights=True)
    torch.testing.assert_close(w, torch.full_like(w, 0.25), rtol=0, atol=1e-12)
    torch.testing.assert_close(out, att.w_o(att.w_v(v).mean(0, keepdim=True)).expand(5, -1),
                               rtol=0, atol=1e-12)


def test_attention_independent_reference():
    """Loop-over-heads reimplementation from the raw weight matrices."""
    att = make_attention(2, heads=4)
    q, k, v = torch.randn(3, 3), torch.randn(5, 3), torch.randn(5, 4)
    Q = q @ att.w_q.weight.T + att.w_q.bias
    K = k @ att.w_k.weight.T + att.w_k.bias
    V = v @ att.w_v.weight.T + att.w_v.bias
    dh = 2
    heads = []
    for h in range(4):
        sl = slice(h * dh, (h + 1) * dh)
        s = Q[:, sl] @ K[:, sl].T / math.sqrt(dh)
        w = torch.exp(s - s.max(1, keepdim=True).values)
        w = w / w.sum(1, keepdim=True)
        heads.append(w @ V[:, sl])
    ref = torch.cat(heads, 1) @ att.w_o.weight.T + att.w_o.bias
    torch.testing.assert_close(att(q, k, v), ref, rtol=0, atol=1e-12)


def test_empty_keys_rejected():
    att = make_attention()
    with pytest.raises(ConfigError):
        att(torch.randn(2, 3), torch.zeros(0, 3), torch.zeros(0, 4))


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 6), n=st.integers(1, 9), b=st.integers(1, 3), seed=st.integers(0, 1000))
def test_attention_rows_sum_to_one_and_permutation_equivariance(m, n, b, seed):
    att = make_attention(seed)
    g = torch.Generator().manual_seed(seed)
    q, k, v = torch.randn(b, m, 3, generator=g), torch.randn(b, n, 3, generator=g), torch.randn(b, n, 4, generator=g)
    out, w = att(q, k, v, return_weights=True)
    torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)), rtol=0, atol=1e-6)
    perm = torch.randperm(n, generator=g)
    out_p = att(q, k[:, perm], v[:, perm])
    torch.testing.assert_close(out_p, out, rtol=0, atol=1e-12)


def test_attention_gradients_match_finite_differences():
    att = make_attention(3)
    q = torch.randn(4, 3, requires_grad=True)
    k = torch.randn(6, 3, requires_grad=True)
    v = torch.randn(6, 4, requires_grad=True)
    err = grad_check(lambda: att(q, k, v).sin().sum(), list(att.parameters()) + [q, k, v])
    assert err < 1e-4


# -- positive transform ---------------------------------------------------------


def test_positive_transform_closed_form():
    assert float(positive_transform(torch.tensor(0.0), 0.1)) == pytest.approx(0.1 + 0.9 * math.log(2), abs=1e-15)
    assert float(positive_transform(torch.tensor(-1e6), 0.1)) == pytest.approx(0.1, abs=1e-15)


def test_positive_transform_range_and_monotone():
    raw = torch.linspace(-1e6, 1e6, 200_001)
    s = positive_transform(raw, 0.1)
    assert torch.isfinite(s).all()
    assert (s >= 0.1).all()
    grid = torch.sort(torch.randn(1000) * 5).values
    assert (torch.diff(positive_transform(grid, 0.1)) > 0).all()


# -- optimizer ------------------------------------------------------------------


def test_zero_gradients_leave_params():
    p = {"w": torch.randn(3)}
    before = p["w"].clone()
    optimizer_step(p, {"w": torch.zeros(3)}, None, lr=0.1)
    assert torch.equal(p["w"], before)


def test_zero_lr_leaves_params():
    p = {"w": torch.randn(3)}
    before = p["w"].clone()
    state = None
    for _ in range(3):
        state = optimizer_step(p, {"w": torch.randn(3)}, state, lr=0.0)
    assert torch.equal(p["w"], before)


def test_constant_gradient_trajectory():
    """Hand-rolled moment recursion in plain Python floats."""
    g, lr, b1, b2, eps = 0.3, 0.01, 0.9, 0.999, 1e-8
    p = {"w": torch.tensor([1.0])}
    state = None
    w, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        state = optimizer_step(p, {"w": torch.tensor([g])}, state, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert float(p["w"][0]) == pytest.approx(w, abs=1e-10)


def test_nonfinite_gradient_names_parameter():
    p = {"enc.weight": torch.randn(2), "dec.bias": torch.randn(2)}
    with pytest.raises(TrainingError) as exc:
        optimizer_step(p, {"enc.weight": torch.zeros(2), "dec.bias": torch.tensor([1.0, float("nan")])},
                       None, lr=0.1)
    assert exc.value.name == "dec.bias"


def test_gradient_shape_mismatch():
    with pytest.raises(ConfigError):
        optimizer_step({"w": torch.randn(3)}, {"w": torch.randn(2)}, None, lr=0.1)


def test_adam_matches_torch_reference():
    torch.manual_seed(1)
    a = torch.randn(4, 3)
    b = a.clone().requires_grad_(True)
    mine = Adam([("a", a)], lr=1e-2)
    ref = torch.optim.Adam([b], lr=1e-2)
    for _ in range(5):
        g = torch.randn(4, 3)
        mine.step(grads={"a": g})
        b.grad = g.clone()
        ref.step()
    torch.testing.assert_close(a, b.detach(), rtol=0, atol=1e-12)


# -- grad check -------------------------------------------------------------------


def test_grad_check_quadratic():
    p = torch.randn(10, requires_grad=True)
    assert grad_check(lambda: 0.5 * (p ** 2).sum(), [p]) < 1e-8


def test_grad_check_detects_wrong_gradient():
    p = torch.randn(5, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    assert grad_check(lambda: Wrong.apply(p), [p]) > 0.3


def test_grad_check_subsampling():
    p = torch.randn(1000, requires_grad=True)
    calls = []

    def loss():
        calls.append(1)
        return (p.sin()).sum()

    assert grad_check(loss, [p], max_coords=10) < 1e-6
    assert len(calls) == 1 + 2 * 10


def test_backbone_config_validation():
    BackboneConfig()
    with pytest.raises(ConfigError):
        BackboneConfig(hidden_dim=30, n_heads=8)
    with pytest.raises(ConfigError):
        BackboneConfig(enc_depth=0)
    with pytest.raises(ConfigError):
        BackboneConfig(activation="swishy")
