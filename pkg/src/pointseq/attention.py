"""Latent attention blocks.

The point-wise latent attention (PMLA) drops the usual linear QKV
projections: queries come from a depthwise temporal convolution over the
serialized sequence, while keys and values are squeezed through a low-rank
latent space and modulated there by sigmoid gates before being expanded back
to head width. A reference low-rank MLA (and the plain multi-head attention
it factorizes) is kept alongside as a structural oracle, and also serves the
"swap the attention flavor" ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ssm as ssm_mod
from .autodiff import Tensor


def _lin(rng, d_in, d_out, bias=True):
    bound = 1.0 / np.sqrt(d_in)
    w = Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True)
    if not bias:
        return w
    return w, Tensor(rng.uniform(-bound, bound, d_out), requires_grad=True)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, h = x.shape
    d = h // n_heads
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d)), (0, 2, 1, 3))  # [B,nh,T,d]


def _merge_heads(x: Tensor) -> Tensor:
    b, nh, t, d = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, nh * d))


def _attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int, scale_dim: int) -> Tensor:
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    logits = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(scale_dim))
    attn = ad.softmax_lastdim(logits)
    return _merge_heads(ad.matmul(attn, vh))


@dataclass
class MHAParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def tensors(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o]


def init_mha(rng, dim: int, n_heads: int, head_dim: int) -> MHAParams:
    h = n_heads * head_dim
    return MHAParams(w_q=_lin(rng, dim, h, bias=False), w_k=_lin(rng, dim, h, bias=False),
                     w_v=_lin(rng, dim, h, bias=False), w_o=_lin(rng, h, dim, bias=False))


def mha_forward(x: Tensor, params: MHAParams, n_heads: int) -> Tensor:
    """Plain multi-head attention with 1/sqrt(d_h) scaling."""
    q = ad.matmul(x, params.w_q)
    k = ad.matmul(x, params.w_k)
    v = ad.matmul(x, params.w_v)
    head_dim = params.w_q.shape[1] // n_heads
    out = _attend(q, k, v, n_heads, head_dim)
    return ad.matmul(out, params.w_o)


@dataclass
class MLAParams:
    """Low-rank MLA: K and V factor through a rank-r bottleneck."""

    w_q: Tensor    # [D, nh*dh]
    w_ka: Tensor   # [D, r]
    w_kb: Tensor   # [r, nh*dh]
    w_va: Tensor   # [D, r]
    w_vb: Tensor   # [r, nh*dh]
    w_o: Tensor    # [nh*dh, D] (stacked per-head output maps)

    def tensors(self):
        return [self.w_q, self.w_ka, self.w_kb, self.w_va, self.w_vb, self.w_o]


def init_mla(rng, dim: int, n_heads: int, head_dim: int, rank: int) -> MLAParams:
    h = n_heads * head_dim
    return MLAParams(
        w_q=_lin(rng, dim, h, bias=False),
        w_ka=_lin(rng, dim, rank, bias=False), w_kb=_lin(rng, rank, h, bias=False),
        w_va=_lin(rng, dim, rank, bias=False), w_vb=_lin(rng, rank, h, bias=False),
        w_o=_lin(rng, h, dim, bias=False),
    )


def mla_reference(x: Tensor, params: MLAParams, n_heads: int) -> Tensor:
    """Multi-head attention with rank-r key/value factorizations."""
    q = ad.matmul(x, params.w_q)
    k = ad.matmul(ad.matmul(x, params.w_ka), params.w_kb)
    v = ad.matmul(ad.matmul(x, params.w_va), params.w_vb)
    head_dim = params.w_q.shape[1] // n_heads
    out = _attend(q, k, v, n_heads, head_dim)
    return ad.matmul(out, params.w_o)


@dataclass
class PMLAParams:
    q_conv_w: Tensor   # [3, D] depthwise, so head width must equal D
    q_conv_b: Tensor   # [D]
    mlp_k_w: Tensor    # [D, r]
    mlp_k_b: Tensor    # [r]
    gate_k_w: Tensor   # [D, r]
    gate_k_b: Tensor   # [r]
    up_k: Tensor       # [r, D]
    mlp_v_w: Tensor
    mlp_v_b: Tensor
    gate_v_w: Tensor
    gate_v_b: Tensor
    up_v: Tensor
    w_o: Tensor        # [D, D]
    b_o: Tensor        # [D]

    def tensors(self):
        return [self.q_conv_w, self.q_conv_b, self.mlp_k_w, self.mlp_k_b,
                self.gate_k_w, self.gate_k_b, self.up_k, self.mlp_v_w,
                self.mlp_v_b, self.gate_v_w, self.gate_v_b, self.up_v,
                self.w_o, self.b_o]


def init_pmla(rng, dim: int, rank: int, conv_kernel: int = 3) -> PMLAParams:
    cb = 1.0 / np.sqrt(conv_kernel)
    mk_w, mk_b = _lin(rng, dim, rank)
    gk_w, gk_b = _lin(rng, dim, rank)
    mv_w, mv_b = _lin(rng, dim, rank)
    gv_w, gv_b = _lin(rng, dim, rank)
    ow, ob = _lin(rng, dim, dim)
    return PMLAParams(
        q_conv_w=Tensor(rng.uniform(-cb, cb, (conv_kernel, dim)), requires_grad=True),
        q_conv_b=Tensor(rng.uniform(-cb, cb, dim), requires_grad=True),
        mlp_k_w=mk_w, mlp_k_b=mk_b, gate_k_w=gk_w, gate_k_b=gk_b,
        up_k=_lin(rng, rank, dim, bias=False),
        mlp_v_w=mv_w, mlp_v_b=mv_b, gate_v_w=gv_w, gate_v_b=gv_b,
        up_v=_lin(rng, rank, dim, bias=False),
        w_o=ow, b_o=ob,
    )


def pmla_latents(x: Tensor, params: PMLAParams) -> tuple[Tensor, Tensor]:
    """Gated latent keys/values: latent = proj(x) * sigmoid(gate(x))."""
    k_lat = ad.mul(ad.add(ad.matmul(x, params.mlp_k_w), params.mlp_k_b),
                   ad.sigmoid(ad.add(ad.matmul(x, params.gate_k_w), params.gate_k_b)))
    v_lat = ad.mul(ad.add(ad.matmul(x, params.mlp_v_w), params.mlp_v_b),
                   ad.sigmoid(ad.add(ad.matmul(x, params.gate_v_w), params.gate_v_b)))
    return k_lat, v_lat


def pmla_forward(x: Tensor, params: PMLAParams, n_heads: int) -> Tensor:
    """Conv-query latent attention over a serialized token sequence.

    The depthwise kernel-3 convolution keeps queries local to the serialized
    order; the softmax scale uses the latent rank (the row width of the gated
    keys before up-projection).
    """
    rank = params.up_k.shape[0]
    q = ad.dwconv1d(x, params.q_conv_w, params.q_conv_b, padding="same")
    k_lat, v_lat = pmla_latents(x, params)
    k = ad.matmul(k_lat, params.up_k)
    v = ad.matmul(v_lat, params.up_v)
    out = _attend(q, k, v, n_heads, rank)
    return ad.add(ad.matmul(out, params.w_o), params.b_o)


@dataclass
class LatentBlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    pmla: PMLAParams
    ln2_g: Tensor
    ln2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def tensors(self):
        return [self.ln1_g, self.ln1_b, *self.pmla.tensors(),
                self.ln2_g, self.ln2_b,
                self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2]


def init_latent_block(rng, dim: int, rank: int, ffn_mult: int = 4) -> LatentBlockParams:
    w1, b1 = _lin(rng, dim, ffn_mult * dim)
    w2, b2 = _lin(rng, ffn_mult * dim, dim)
    return LatentBlockParams(
        ln1_g=Tensor(np.ones(dim), requires_grad=True),
        ln1_b=Tensor(np.zeros(dim), requires_grad=True),
        pmla=init_pmla(rng, dim, rank),
        ln2_g=Tensor(np.ones(dim), requires_grad=True),
        ln2_b=Tensor(np.zeros(dim), requires_grad=True),
        ffn_w1=w1, ffn_b1=b1, ffn_w2=w2, ffn_b2=b2,
    )


def latent_attention_block(x: Tensor, params: LatentBlockParams, n_heads: int) -> Tensor:
    """Pre-norm residual wrapper: x + PMLA(LN(x)), then + FFN(LN(.))."""
    y = ad.add(x, pmla_forward(ad.layer_norm(x, params.ln1_g, params.ln1_b), params.pmla, n_heads))
    h = ad.silu(ad.add(ad.matmul(ad.layer_norm(y, params.ln2_g, params.ln2_b), params.ffn_w1),
                       params.ffn_b1))
    return ad.add(y, ad.add(ad.matmul(h, params.ffn_w2), params.ffn_b2))


def pmla_param_count(params: PMLAParams) -> int:
    return sum(int(np.prod(t.shape)) for t in params.tensors())


def mha_param_count(dim: int, n_heads: int, head_dim: int) -> int:
    # four full projections at matched geometry
    return 4 * dim * n_heads * head_dim


def gate_state_probe(x: Tensor, pmla_params: PMLAParams,
                     mamba_params: ssm_mod.MambaBlockParams, n_heads: int) -> dict:
    """Diagnostic only: correlate the gated state-accumulation readout with
    the latent attention output, per channel. Nothing is asserted; channels
    with zero variance report correlation 0.
    """
    gate = ad.sigmoid(ad.add(ad.matmul(x, pmla_params.gate_k_w), pmla_params.gate_k_b))
    gate_up = ad.matmul(gate, pmla_params.up_k).data            # [B,T,D]
    ssm_readout = ad.sub(ssm_mod.mamba_block_forward(x, mamba_params), x).data
    probe = gate_up * ssm_readout
    pm = pmla_forward(x, pmla_params, n_heads).data

    dim = pm.shape[-1]
    a = probe.reshape(-1, dim)
    b = pm.reshape(-1, dim)
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    denom = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
    corr = np.where(denom > 0, (a * b).sum(axis=0) / np.where(denom > 0, denom, 1.0), 0.0)
    corr = np.clip(corr, -1.0, 1.0)
    return {
        "channels": int(dim),
        "per_channel_correlation": [float(c) for c in corr],
        "mean_correlation": float(corr.mean()),
        "mean_abs_correlation": float(np.abs(corr).mean()),
    }
