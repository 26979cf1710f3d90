import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kser.esa import ESA, DenseProjection, FieldAligner, SelfAttention, build_query, cross_attend, fuse_fields, \
    stack_chunks
from conftest import fd_rel_error
from oracles import cross_attention_loops, self_attention_loops

D = torch.float64


def test_refine_identity_on_nonnegative():
    fa = FieldAligner(3, 3, 3, d_x=2, k_chunks=1, n=2, m=2).double()
    with torch.no_grad():
        for lin in (fa.refine[0], fa.refine[2]):
            lin.weight.copy_(torch.eye(3, dtype=D))
            lin.bias.zero_()
    x = torch.tensor([[0.5, 2.0, 0.0]], dtype=D)
    assert torch.equal(fa.refine(x), x)
    assert (fa.refine(torch.zeros(1, 3, dtype=D)) == 0).all()


def test_refine_toy_oracle():
    fa = FieldAligner(3, 2, 2, d_x=2, k_chunks=1, n=2, m=2).double()
    W1, b1 = [[1.0, 0.5, -1.0], [0.2, -0.3, 0.4]], [0.1, -0.2]
    W2, b2 = [[1.0, -1.0], [0.5, 2.0]], [0.0, 0.3]
    with torch.no_grad():
        fa.refine[0].weight.copy_(torch.tensor(W1, dtype=D))
        fa.refine[0].bias.copy_(torch.tensor(b1, dtype=D))
        fa.refine[2].weight.copy_(torch.tensor(W2, dtype=D))
        fa.refine[2].bias.copy_(torch.tensor(b2, dtype=D))
    x = [1.0, -1.0, 2.0]
    h = [max(0.0, sum(W1[o][i] * x[i] for i in range(3)) + b1[o]) for o in range(2)]
    ref = [sum(W2[o][i] * h[i] for i in range(2)) + b2[o] for o in range(2)]
    got = fa.refine(torch.tensor([x], dtype=D))[0].tolist()
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_stack_chunks_examples():
    assert stack_chunks(torch.tensor([1.0, 2, 3, 4]), 2).tolist() == [[1, 2], [3, 4]]
    assert stack_chunks(torch.tensor([1.0, 2, 3]), 1).tolist() == [[1, 2, 3]]
    with pytest.raises(ValueError):
        stack_chunks(torch.zeros(6), 4)


@given(st.integers(1, 5), st.integers(1, 5))
def test_stack_then_flatten_is_identity(c, w):
    v = torch.randn(3, c * w)
    assert torch.equal(stack_chunks(v, c).reshape(3, -1), v)


def test_query_examples():
    hist = torch.tensor([[[1.0, 1.0], [3.0, 3.0], [9.0, 9.0]]])
    mask = torch.tensor([[True, True, False]])
    item = torch.tensor([[5.0, 5.0]])
    assert build_query(hist, mask, item).tolist() == [[2, 2, 5, 5]]
    assert build_query(hist, torch.zeros_like(mask), item).tolist() == [[0, 0, 5, 5]]
    feat = torch.randn(1, 7)
    assert torch.equal(build_query(None, None, None, "full_feature", feat), feat)
    with pytest.raises(ValueError):
        build_query(hist, mask, item, "bogus")


def test_single_key_attention_is_value_projection():
    x, k = torch.randn(1, 1, 3, dtype=D), torch.randn(1, 1, 4, dtype=D)
    WQ, WK, WV = torch.randn(3, 2, dtype=D), torch.randn(4, 2, dtype=D), torch.randn(4, 5, dtype=D)
    out, scores = cross_attend(x, k, WQ, WK, WV)
    assert torch.equal(scores, torch.ones_like(scores))
    assert torch.allclose(out, k @ WV)


def test_identical_rows_split_evenly():
    row = torch.randn(1, 1, 4, dtype=D)
    k = torch.cat([row, row], dim=1)
    WV = torch.randn(4, 3, dtype=D)
    out, scores = cross_attend(torch.randn(1, 2, 3, dtype=D), k, torch.randn(3, 2, dtype=D),
                               torch.randn(4, 2, dtype=D), WV)
    assert torch.allclose(scores, torch.full_like(scores, 0.5))
    assert torch.allclose(out[0, 0], (row @ WV)[0, 0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
       st.booleans(), st.integers(0, 2**31 - 1))
def test_cross_attention_matches_loops(cx, ck, dx, dk, n, scaled, seed):
    rng = np.random.default_rng(seed)
    x, k = rng.standard_normal((cx, dx)), rng.standard_normal((ck, dk))
    WQ, WK, WV = rng.standard_normal((dx, n)), rng.standard_normal((dk, n)), rng.standard_normal((dk, 3))
    out, scores = cross_attend(torch.tensor(x)[None], torch.tensor(k)[None], torch.tensor(WQ), torch.tensor(WK),
                               torch.tensor(WV), scaled=scaled)
    ref_out, ref_scores = cross_attention_loops(x.tolist(), k.tolist(), WQ.tolist(), WK.tolist(), WV.tolist(), scaled)
    np.testing.assert_allclose(out[0].numpy(), ref_out, atol=1e-6)
    np.testing.assert_allclose(scores[0].numpy(), ref_scores, atol=1e-6)
    np.testing.assert_allclose(scores.sum(-1).numpy(), 1.0, atol=1e-6)


@given(st.integers(0, 2**31 - 1))
def test_cross_attention_permutation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    x, k = torch.randn(1, 3, 2, generator=g, dtype=D), torch.randn(1, 4, 5, generator=g, dtype=D)
    W = [torch.randn(2, 3, generator=g, dtype=D), torch.randn(5, 3, generator=g, dtype=D),
         torch.randn(5, 6, generator=g, dtype=D)]
    perm = torch.randperm(4, generator=g)
    a, _ = cross_attend(x, k, *W)
    b, _ = cross_attend(x, k[:, perm], *W)
    assert torch.allclose(a, b, atol=1e-6)


def _self_attention_params(attn):
    return [t.detach().tolist() for lin in (attn.q, attn.k, attn.v, attn.out) for t in (lin.weight, lin.bias)]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.sampled_from([(2, 1), (4, 2), (6, 3), (4, 1)]), st.integers(0, 2**31 - 1))
def test_self_attention_matches_loops(rows, wh, seed):
    width, heads = wh
    torch.manual_seed(seed)
    attn = SelfAttention(width, heads).double()
    X = torch.randn(1, rows, width, dtype=D)
    out, scores = attn(X)
    ref = self_attention_loops(X[0].tolist(), *_self_attention_params(attn), heads)
    np.testing.assert_allclose(out[0].detach().numpy(), ref, atol=1e-6)
    np.testing.assert_allclose(scores.sum(-1).detach().numpy(), 1.0, atol=1e-6)


def test_fuse_single_row_is_value_then_output_projection():
    attn = SelfAttention(4, 2).double()
    row = torch.randn(1, 1, 4, dtype=D)
    fused, flat, _ = fuse_fields([row], attn)
    assert torch.allclose(fused, attn.out(attn.v(row)))
    assert flat.shape == (1, 4)


def test_flatten_row_major():
    class Ident(torch.nn.Module):
        def forward(self, x):
            return x, None

    a = torch.tensor([[[1.0, 2.0]]])
    b = torch.tensor([[[3.0, 4.0]]])
    fused, flat, _ = fuse_fields([a, b], Ident())
    assert fused.tolist() == [[[1, 2], [3, 4]]] and flat.tolist() == [[1, 2, 3, 4]]


def test_fuse_rejects_bad_inputs():
    attn = SelfAttention(2, 1)
    with pytest.raises(ValueError):
        fuse_fields([], attn)
    with pytest.raises(ValueError):
        fuse_fields([torch.zeros(1, 2, 2), torch.zeros(1, 3, 2)], attn)


@pytest.mark.parametrize("L,cx,ck,m,heads,out", [(1, 4, 4, 16, 2, None), (2, 2, 4, 8, 2, 0), (3, 4, 2, 4, 4, 0),
                                                 (2, 1, 1, 6, 3, None), (2, 4, 8, 16, 2, 12)])
def test_shape_contract(L, cx, ck, m, heads, out):
    d_k, qw = 16, 8
    esa = ESA(d_k, L, qw, x_chunks=cx, k_chunks=ck, n=5, m=m, heads=heads, out_width=out)
    res = esa(torch.randn(3, d_k, L), torch.randn(3, qw))
    assert res["flat"].shape == (3, L * cx * m)
    assert res["out"].shape == (3, out if out else L * cx * m)
    assert len(res["per_field"]) == L and all(p.shape == (3, cx, m) for p in res["per_field"])
    for s in res["cross_scores"]:
        assert s.shape == (3, cx, ck)
        assert torch.allclose(s.sum(-1), torch.ones(3, cx), atol=1e-6)
    assert torch.allclose(res["self_scores"].sum(-1), torch.ones_like(res["self_scores"][..., 0]), atol=1e-6)


def test_esa_gradients_match_finite_differences():
    torch.manual_seed(5)
    esa = ESA(8, 2, 4, x_chunks=2, k_chunks=2, n=3, m=4, heads=2, out_width=3).double()
    kbar, q = torch.randn(3, 8, 2, dtype=D), torch.randn(3, 4, dtype=D)
    target = torch.randn(3, 3, dtype=D)

    def loss():
        return ((esa(kbar, q)["out"] - target) ** 2).sum()

    # the self-attention key bias shifts every logit in a row equally, so its gradient is exactly zero
    params = [p for name, p in esa.named_parameters() if name != "fusion.k.bias"]
    assert fd_rel_error(loss, params) < 1e-4
    assert esa.fusion.k.bias.grad.abs().max() < 1e-12


def test_dense_projection_same_width():
    dp = DenseProjection(8, 2, 12)
    res = dp(torch.randn(5, 8, 2))
    assert res["out"].shape == (5, 12) and res["cross_scores"] == []
