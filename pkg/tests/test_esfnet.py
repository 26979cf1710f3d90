import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kser.esfnet import ESFNet, apply_weights, default_hidden, gate_input, gate_weights
from conftest import fd_rel_error
from oracles import gate_loops, weight_loops


def test_gate_input_column_major():
    k = torch.tensor([[[1.0, 3.0], [2.0, 4.0]]])
    z = gate_input(k, torch.tensor([[9.0]]))
    assert z.tolist() == [[1.0, 2.0, 3.0, 4.0, 9.0]]


def test_gate_input_rejects_empty_features():
    with pytest.raises(ValueError):
        gate_input(torch.zeros(1, 2, 2), torch.zeros(1, 0))


def test_zero_params_give_unit_weights():
    z = torch.randn(3, 5)
    w = gate_weights(z, torch.zeros(5, 4), torch.zeros(4), torch.zeros(4, 6), torch.zeros(6), 3, 2, 2.0)
    assert w.shape == (3, 3, 2) and (w == 1.0).all()


def test_large_bias_saturates_at_kappa():
    z = torch.randn(2, 5)
    w = gate_weights(z, torch.zeros(5, 4), torch.zeros(4), torch.zeros(4, 2), torch.full((2,), 40.0), 2, 1, 2.0)
    assert torch.allclose(w, torch.full_like(w, 2.0))


def test_toy_gate_matches_scalar_oracle():
    z = [1.0, -1.0]
    W1, b1 = [[0.5, -0.25], [0.75, 1.0]], [0.1, 0.2]
    W2, b2 = [[1.0, -2.0], [0.5, 0.3]], [0.0, 0.1]
    got = gate_weights(torch.tensor([z], dtype=torch.float64), torch.tensor(W1, dtype=torch.float64),
                       torch.tensor(b1, dtype=torch.float64), torch.tensor(W2, dtype=torch.float64),
                       torch.tensor(b2, dtype=torch.float64), 2, 1, 2.0)
    ref = gate_loops(z, W1, b1, W2, b2, 2, 1, 2.0)
    np.testing.assert_allclose(got[0].numpy(), np.array(ref), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_gate_reshape_is_field_major(C, L, d_e, seed):
    g = torch.Generator().manual_seed(seed)
    width = 2 * L + d_e
    z = torch.randn(1, width, generator=g, dtype=torch.float64)
    W1, b1 = torch.randn(width, 5, generator=g, dtype=torch.float64), torch.randn(5, generator=g, dtype=torch.float64)
    W2, b2 = torch.randn(5, C * L, generator=g, dtype=torch.float64), torch.randn(C * L, generator=g, dtype=torch.float64)
    got = gate_weights(z, W1, b1, W2, b2, C, L, 2.0)[0].numpy()
    ref = gate_loops(z[0].tolist(), W1.tolist(), b1.tolist(), W2.tolist(), b2.tolist(), C, L, 2.0)
    np.testing.assert_allclose(got, np.array(ref), atol=1e-12)


def test_apply_weights_examples():
    k = torch.arange(1.0, 9.0).reshape(1, 4, 2)
    assert torch.equal(apply_weights(k, torch.ones(1, 2, 2)), k)
    w = torch.tensor([[[2.0, 1.0], [0.0, 1.0]]])
    out = apply_weights(k, w)
    assert torch.equal(out[0, :2, 0], 2 * k[0, :2, 0]) and (out[0, 2:, 0] == 0).all()


@given(st.integers(0, 2**31 - 1))
def test_apply_weights_matches_loops(seed):
    rng = np.random.default_rng(seed)
    k, w = rng.standard_normal((6, 2)), rng.uniform(0, 2, (3, 2))
    got = apply_weights(torch.tensor(k)[None], torch.tensor(w)[None])[0].numpy()
    np.testing.assert_array_equal(got, np.array(weight_loops(k.tolist(), w.tolist())))


def test_fresh_module_is_identity():
    net = ESFNet(8, 2, 5, n_chunks=4)
    k = torch.randn(3, 8, 2)
    kbar, w = net(k, torch.randn(3, 5))
    assert (w == 1.0).all() and torch.equal(kbar, k)


def test_default_hidden_width():
    assert default_hidden(40) == 16 and default_hidden(200) == 50
    assert ESFNet(32, 2, 40).W1.shape == (104, 26)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_weights_in_open_interval(seed, scale):
    torch.manual_seed(seed)
    net = ESFNet(8, 2, 4, n_chunks=2, kappa=2.0).double()
    with torch.no_grad():
        net.W2.normal_(0, scale)
        net.b2.normal_(0, scale)
    k, f = torch.randn(16, 8, 2, dtype=torch.float64) * scale, torch.randn(16, 4, dtype=torch.float64)
    w = net.weights(k, f)
    assert (w >= 0).all() and (w <= 2.0).all()
    # strictly inside wherever the logit is representable away from the float64 sigmoid limits
    z = gate_input(k, f)
    logits = (torch.relu(z @ net.W1 + net.b1) @ net.W2 + net.b2).reshape(16, 2, 2).transpose(1, 2)
    inner = logits.abs() < 30
    assert (w[inner] > 0).all() and (w[inner] < 2.0).all()


def test_chunk_constancy():
    torch.manual_seed(0)
    net = ESFNet(12, 2, 3, n_chunks=3)
    with torch.no_grad():
        net.W2.normal_()
    k = torch.rand(4, 12, 2) + 0.5
    kbar, _ = net(k, torch.randn(4, 3))
    ratio = (kbar / k).reshape(4, 3, 4, 2)
    assert torch.allclose(ratio, ratio[:, :, :1, :].expand_as(ratio), rtol=1e-6)


def test_monotone_in_b2():
    torch.manual_seed(1)
    net = ESFNet(4, 1, 2, n_chunks=2)
    with torch.no_grad():
        net.W2.normal_()
    k, f = torch.randn(5, 4, 1), torch.randn(5, 2)
    before = net.weights(k, f)
    with torch.no_grad():
        net.b2[1] += 0.7
    after = net.weights(k, f)
    assert (after[:, 1, 0] >= before[:, 1, 0]).all() and torch.equal(after[:, 0], before[:, 0])


def test_stop_gradient_into_features():
    emb = torch.nn.Embedding(10, 3)
    net = ESFNet(4, 2, 3, n_chunks=2)
    with torch.no_grad():
        net.W2.normal_()
    feat = emb(torch.tensor([1, 2, 3]))
    k = torch.randn(3, 4, 2)
    kbar, w = net(k, feat)
    (w.sum() + kbar.sum()).backward()
    assert emb.weight.grad is None or (emb.weight.grad == 0).all()
    assert net.W1.grad is not None and net.W1.grad.abs().sum() > 0
    # the direct path still reaches the table
    emb.weight.grad = None
    net(k, feat)[0].sum().backward(retain_graph=True)
    (feat.sum()).backward()
    assert emb.weight.grad.abs().sum() > 0


def test_gradients_match_finite_differences():
    torch.manual_seed(3)
    net = ESFNet(6, 2, 3, n_chunks=3).double()
    with torch.no_grad():
        net.W2.normal_(0, 0.5)
        net.b2.normal_(0, 0.5)
    k = torch.randn(4, 6, 2, dtype=torch.float64)
    feat = torch.randn(4, 3, dtype=torch.float64)
    target = torch.randn(4, 6, 2, dtype=torch.float64)

    def loss():
        kbar, _ = net(k, feat)
        return ((kbar - target) ** 2).sum()

    assert fd_rel_error(loss, [net.W1, net.b1, net.W2, net.b2]) < 1e-4
