"""Latent attention: reference MLA, PMLA, block wrapper, and the gate probe."""

import numpy as np
import pytest

import pointseq.attention as attn
import pointseq.autodiff as ad
import pointseq.ssm as ssm
from pointseq.autodiff import Tensor

from conftest import assert_grads_close


def plain_mha_oracle(x, w_q, w_k, w_v, w_o, n_heads):
    """Independent dense transcription of multi-head attention."""
    q = x @ w_q
    k = x @ w_k
    v = x @ w_v
    b, t, h = q.shape
    d = h // n_heads
    out = np.zeros((b, t, h))
    for bi in range(b):
        for hi in range(n_heads):
            qs = q[bi, :, hi * d:(hi + 1) * d]
            ks = k[bi, :, hi * d:(hi + 1) * d]
            vs = v[bi, :, hi * d:(hi + 1) * d]
            logits = qs @ ks.T / np.sqrt(d)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            out[bi, :, hi * d:(hi + 1) * d] = a @ vs
    return out @ w_o


class TestMLAReference:
    def test_singleton_sequence_attends_to_itself(self, rng):
        params = attn.init_mla(rng, dim=6, n_heads=2, head_dim=3, rank=2)
        x = Tensor(rng.standard_normal((1, 1, 6)))
        out = attn.mla_reference(x, params, n_heads=2)
        # with T=1 the attention weight is exactly 1: output is V through W_O
        v = (x.data @ params.w_va.data) @ params.w_vb.data
        np.testing.assert_allclose(out.data, v @ params.w_o.data, atol=1e-12)

    def test_full_rank_factorization_matches_mha(self, rng):
        dim, n_heads, head_dim = 6, 2, 3
        params = attn.init_mla(rng, dim, n_heads, head_dim, rank=dim)
        w_k = rng.standard_normal((dim, n_heads * head_dim))
        w_v = rng.standard_normal((dim, n_heads * head_dim))
        w_ka = rng.standard_normal((dim, dim)) + 3 * np.eye(dim)
        params.w_ka.data[:] = w_ka
        params.w_kb.data[:] = np.linalg.solve(w_ka, w_k)
        w_va = rng.standard_normal((dim, dim)) + 3 * np.eye(dim)
        params.w_va.data[:] = w_va
        params.w_vb.data[:] = np.linalg.solve(w_va, w_v)
        x = Tensor(rng.standard_normal((2, 5, dim)))
        got = attn.mla_reference(x, params, n_heads).data
        want = plain_mha_oracle(x.data, params.w_q.data, w_k, w_v, params.w_o.data, n_heads)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_gradcheck(self, rng):
        params = attn.init_mla(rng, dim=4, n_heads=2, head_dim=2, rank=2)
        x = Tensor(rng.uniform(-1, 1, (1, 3, 4)))
        assert_grads_close(
            lambda: ad.sum_(ad.mul(attn.mla_reference(x, params, 2), attn.mla_reference(x, params, 2))),
            params.tensors())


class TestMHA:
    def test_matches_dense_oracle(self, rng):
        params = attn.init_mha(rng, dim=6, n_heads=3, head_dim=2)
        x = Tensor(rng.standard_normal((2, 4, 6)))
        got = attn.mha_forward(x, params, 3).data
        want = plain_mha_oracle(x.data, params.w_q.data, params.w_k.data,
                                params.w_v.data, params.w_o.data, 3)
        np.testing.assert_allclose(got, want, atol=1e-12)


def pmla_oracle(x, p: attn.PMLAParams, n_heads):
    """Direct dense transcription of the gated latent attention."""
    b, t, d = x.shape
    k_w = p.q_conv_w.data.shape[0]
    xp = np.pad(x, ((0, 0), (k_w // 2, k_w // 2), (0, 0)))
    q = np.zeros_like(x)
    for j in range(k_w):
        q += xp[:, j:j + t, :] * p.q_conv_w.data[j]
    q += p.q_conv_b.data

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    k_lat = (x @ p.mlp_k_w.data + p.mlp_k_b.data) * sig(x @ p.gate_k_w.data + p.gate_k_b.data)
    v_lat = (x @ p.mlp_v_w.data + p.mlp_v_b.data) * sig(x @ p.gate_v_w.data + p.gate_v_b.data)
    k = k_lat @ p.up_k.data
    v = v_lat @ p.up_v.data
    rank = p.up_k.data.shape[0]
    dh = d // n_heads
    out = np.zeros((b, t, d))
    for bi in range(b):
        for hi in range(n_heads):
            sl = slice(hi * dh, (hi + 1) * dh)
            logits = q[bi, :, sl] @ k[bi, :, sl].T / np.sqrt(rank)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            out[bi, :, sl] = a @ v[bi, :, sl]
    return out @ p.w_o.data + p.b_o.data


class TestPMLA:
    def test_matches_dense_oracle(self, rng):
        params = attn.init_pmla(rng, dim=6, rank=2)
        x = Tensor(rng.standard_normal((2, 5, 6)))
        got = attn.pmla_forward(x, params, n_heads=2).data
        np.testing.assert_allclose(got, pmla_oracle(x.data, params, 2), atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng):
        params = attn.init_pmla(rng, dim=4, rank=2)
        x = Tensor(rng.standard_normal((1, 6, 4)))
        q = ad.dwconv1d(x, params.q_conv_w, params.q_conv_b, padding="same")
        k_lat, _ = attn.pmla_latents(x, params)
        k = ad.matmul(k_lat, params.up_k)
        qh = attn._split_heads(q, 2)
        kh = attn._split_heads(k, 2)
        a = ad.softmax_lastdim(ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1 / np.sqrt(2)))
        np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_saturated_gates_equal_ungated_path(self, rng):
        params = attn.init_pmla(rng, dim=6, rank=2)
        params.gate_k_w.data[:] = 0.0
        params.gate_k_b.data[:] = 40.0
        params.gate_v_w.data[:] = 0.0
        params.gate_v_b.data[:] = 40.0
        x = Tensor(rng.standard_normal((1, 5, 6)))
        got = attn.pmla_forward(x, params, n_heads=2).data

        ungated = attn.init_pmla(rng, dim=6, rank=2)
        for name in ("q_conv_w", "q_conv_b", "mlp_k_w", "mlp_k_b", "up_k",
                     "mlp_v_w", "mlp_v_b", "up_v", "w_o", "b_o"):
            getattr(ungated, name).data[:] = getattr(params, name).data
        ungated.gate_k_w.data[:] = 0.0
        ungated.gate_k_b.data[:] = 80.0
        ungated.gate_v_w.data[:] = 0.0
        ungated.gate_v_b.data[:] = 80.0
        want = attn.pmla_forward(x, ungated, n_heads=2).data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_closed_gates_leave_bias_only(self, rng):
        params = attn.init_pmla(rng, dim=6, rank=2)
        params.gate_k_w.data[:] = 0.0
        params.gate_k_b.data[:] = -600.0
        params.gate_v_w.data[:] = 0.0
        params.gate_v_b.data[:] = -600.0
        x = Tensor(rng.standard_normal((1, 5, 6)))
        out = attn.pmla_forward(x, params, n_heads=2).data
        np.testing.assert_allclose(out, np.broadcast_to(params.b_o.data, out.shape), atol=1e-12)

    def test_query_conv_receptive_field(self, rng):
        params = attn.init_pmla(rng, dim=4, rank=2)
        x = rng.standard_normal((1, 8, 4))
        q0 = ad.dwconv1d(Tensor(x), params.q_conv_w, params.q_conv_b, padding="same").data
        bumped = x.copy()
        bumped[0, 4] += 1.0
        q1 = ad.dwconv1d(Tensor(bumped), params.q_conv_w, params.q_conv_b, padding="same").data
        changed = np.flatnonzero(np.any(q0[0] != q1[0], axis=1))
        assert set(changed.tolist()) <= {3, 4, 5}

    def test_parameter_count_below_mha(self, rng):
        # default geometry: D=384, r=48, 6 heads of 64
        params = attn.init_pmla(np.random.default_rng(0), dim=384, rank=48)
        assert 48 < 384 * 64 * 6 / (384 + 64 * 6)
        assert attn.pmla_param_count(params) < attn.mha_param_count(384, 6, 64)

    def test_gradcheck(self, rng):
        params = attn.init_pmla(rng, dim=4, rank=2)
        x = Tensor(rng.uniform(-1, 1, (1, 4, 4)))

        def loss():
            y = attn.pmla_forward(x, params, n_heads=2)
            return ad.sum_(ad.mul(y, y))

        assert_grads_close(loss, params.tensors())


class TestLatentBlock:
    def test_zero_params_identity(self, rng):
        params = attn.init_latent_block(rng, dim=6, rank=2)
        for t in params.tensors():
            t.data[:] = 0.0
        x = Tensor(rng.standard_normal((2, 4, 6)))
        out = attn.latent_attention_block(x, params, n_heads=2).data
        np.testing.assert_allclose(out, x.data, atol=1e-12)

    @pytest.mark.parametrize("t_len", [1, 7, 128])
    def test_shape_preserved(self, rng, t_len):
        params = attn.init_latent_block(rng, dim=6, rank=2)
        x = Tensor(rng.standard_normal((2, t_len, 6)))
        assert attn.latent_attention_block(x, params, n_heads=2).shape == (2, t_len, 6)

    def test_permutation_sensitive(self, rng):
        params = attn.init_latent_block(rng, dim=6, rank=2)
        x = rng.standard_normal((1, 8, 6))
        out = attn.latent_attention_block(Tensor(x), params, n_heads=2).data
        perm = rng.permutation(8)
        out_p = attn.latent_attention_block(Tensor(x[:, perm]), params, n_heads=2).data
        assert np.abs(out[:, perm] - out_p).max() > 1e-6

    def test_gradcheck(self, rng):
        params = attn.init_latent_block(rng, dim=4, rank=2, ffn_mult=2)
        x = Tensor(rng.uniform(-1, 1, (1, 3, 4)))

        def loss():
            y = attn.latent_attention_block(x, params, n_heads=2)
            return ad.sum_(ad.mul(y, y))

        # h=1e-5: the deep composite loses a digit to roundoff at 1e-6
        assert_grads_close(loss, params.tensors(), h=1e-5)


class TestGateStateProbe:
    def make_inputs(self, rng, dim=6):
        pmla = attn.init_pmla(rng, dim=dim, rank=2)
        mamba = ssm.init_mamba_block(rng, dim, 2 * dim, 3, 4, 2)
        return pmla, mamba

    def test_zero_input_reports_zero_correlation(self, rng):
        pmla, mamba = self.make_inputs(rng)
        report = attn.gate_state_probe(Tensor(np.zeros((1, 5, 6))), pmla, mamba, n_heads=2)
        assert report["mean_correlation"] == 0.0

    def test_correlations_bounded(self, rng):
        pmla, mamba = self.make_inputs(rng)
        report = attn.gate_state_probe(Tensor(rng.standard_normal((2, 9, 6))), pmla, mamba, n_heads=2)
        corr = np.array(report["per_channel_correlation"])
        assert corr.shape == (6,)
        assert np.all(corr >= -1.0) and np.all(corr <= 1.0)
