import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lepdnet.cre import CRE, attention_weights, from_tokens, scaled_attention, to_tokens
from lepdnet.errors import ConfigError

import oracles

W_HI = 0.6697615493266569
W_LO = 0.3302384506733431


def t64(rows):
    return torch.tensor(rows, dtype=torch.float64)


def test_attention_worked_example():
    q, k, v = t64([[1, 0]]), t64([[1, 0], [0, 1]]), t64([[2, 0], [0, 2]])
    w = attention_weights(q, k)
    assert w[0, 0].item() == pytest.approx(W_HI, abs=1e-12)
    assert w[0, 1].item() == pytest.approx(W_LO, abs=1e-12)
    out = scaled_attention(q, k, v)
    assert out[0, 0].item() == pytest.approx(1.3395230986533138, abs=1e-12)
    assert out[0, 1].item() == pytest.approx(0.6604769013466862, abs=1e-12)
    ref = oracles.attention([[1, 0]], [[1, 0], [0, 1]], [[2, 0], [0, 2]])
    torch.testing.assert_close(out, t64(ref), atol=1e-12, rtol=0)
    assert w[0, 0].item() == pytest.approx(math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1), abs=1e-12)


def test_zero_query_averages_values():
    v = torch.randn(5, 3, dtype=torch.float64)
    out = scaled_attention(torch.zeros(4, 3, dtype=torch.float64), torch.randn(5, 3, dtype=torch.float64), v)
    torch.testing.assert_close(out, v.mean(0).expand(4, 3))


def test_equal_values_pass_through():
    v = torch.tensor([[0.3, -1.2]], dtype=torch.float64).expand(6, 2)
    out = scaled_attention(torch.randn(3, 2, dtype=torch.float64), torch.randn(6, 2, dtype=torch.float64), v)
    torch.testing.assert_close(out, v[:3])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 6), st.integers(0, 10_000), st.floats(0.1, 30))
def test_attention_rows_sum_to_one(n, m, d, seed, scale):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(n, d, generator=g) * scale
    k = torch.randn(m, d, generator=g) * scale
    w = attention_weights(q, k)
    assert torch.all(w >= 0)
    torch.testing.assert_close(w.sum(-1), torch.ones(n), atol=1e-6, rtol=0)


def test_attention_matches_oracle_random():
    g = torch.Generator().manual_seed(3)
    q, k, v = (torch.randn(4, 3, generator=g, dtype=torch.float64) for _ in range(3))
    ref = oracles.attention(q.tolist(), k.tolist(), v.tolist())
    torch.testing.assert_close(scaled_attention(q, k, v), t64(ref), atol=1e-12, rtol=0)


@pytest.mark.parametrize("q, k", [((0, 3), (2, 3)), ((2, 0), (2, 0)), ((2, 3), (0, 3)), ((2, 3), (2, 4))])
def test_attention_rejects_degenerate(q, k):
    with pytest.raises(ConfigError):
        attention_weights(torch.zeros(q), torch.zeros(k))


def test_token_roundtrip():
    x = torch.randn(2, 5, 3, 4)
    tok = to_tokens(x)
    assert tok.shape == (2, 12, 5)
    torch.testing.assert_close(from_tokens(tok, 3, 4), x)


def test_cre_shape_and_mismatch():
    cre = CRE(64)
    x = torch.randn(2, 64, 8, 8)
    assert cre(torch.randn_like(x), x).shape == (2, 64, 8, 8)
    with pytest.raises(ConfigError):
        cre(torch.randn(2, 64, 4, 4), x)


def test_cre_identity_when_attention_and_fusion_zeroed():
    cre = CRE(8).double().eval()
    with torch.no_grad():
        # LN(kv) = 0 makes the values zero, so attention outputs zero
        cre.norm_kv.weight.zero_()
        cre.fusion.body[-1].weight.zero_()
    x = torch.randn(2, 8, 3, 3, dtype=torch.float64)
    torch.testing.assert_close(cre(torch.randn_like(x), x), x, atol=0, rtol=0)


def test_cre_gradients_match_finite_differences():
    torch.manual_seed(0)
    cre = CRE(4).double().eval()
    with torch.no_grad():
        for p in cre.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x_seg = torch.randn(1, 4, 2, 3, dtype=torch.float64, requires_grad=True)
    x = torch.randn(1, 4, 2, 3, dtype=torch.float64, requires_grad=True)
    cre(x_seg, x).sum().backward()
    for tensor in (x_seg, x):
        data = tensor.detach().numpy().copy()
        flat = data.reshape(-1)
        numeric = []

        def f():
            args = [torch.from_numpy(data) if t is tensor else t.detach() for t in (x_seg, x)]
            with torch.no_grad():
                return cre(*args).sum().item()

        for i in range(flat.size):
            numeric.append(oracles.central_difference(f, flat, i))
        assert oracles.rel_error(tensor.grad.reshape(-1).numpy(), numeric) <= 1e-4
