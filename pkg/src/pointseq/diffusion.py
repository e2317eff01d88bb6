"""Conditional denoising diffusion over masked token features.

The clean features of the hidden patches are corrupted by the closed-form
Gaussian marginal, and a small sequence decoder predicts the injected noise
from the corrupted slots interleaved with the visible (encoded) tokens. The
single-step kernel is the standard variance-preserving one,
N(sqrt(1-beta_t) z_{t-1}, beta_t I), which makes the marginal
z_t = sqrt(abar_t) z_0 + sqrt(1-abar_t) eps exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ssm as ssm_mod
from .autodiff import Tensor
from .serialize import MaskRecord


@dataclass
class DiffusionSchedule:
    betas: np.ndarray       # [T]
    alpha_bars: np.ndarray  # [T], strictly decreasing, abar_0 == 1 implied
    sigmas: np.ndarray      # [T], sigma_t^2 = beta_t

    @property
    def steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """abar_t for 1-indexed t; abar_0 = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.steps):
            raise ValueError(f"timestep out of range [0, {self.steps}]")
        table = np.concatenate([[1.0], self.alpha_bars])
        return table[t]


def build_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta ramp; cumulative products give the marginal coefficients."""
    if steps < 1:
        raise ValueError("schedule needs at least one step")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, steps)
    alpha_bars = np.cumprod(1.0 - betas)
    return DiffusionSchedule(betas=betas, alpha_bars=alpha_bars, sigmas=np.sqrt(betas))


def q_sample(z0, t, eps, schedule: DiffusionSchedule):
    """Corrupt to timestep t: z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps.

    ``t`` is 1-indexed and may be a scalar or a per-sequence array; ``eps``
    is caller-supplied standard normal noise so sampling stays deterministic
    under the caller's seeding.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.steps):
        raise ValueError(f"timestep out of range [1, {schedule.steps}]")
    ab = schedule.alpha_bar(t_arr)
    if t_arr.ndim > 0:
        ab = ab.reshape((-1,) + (1,) * (np.asarray(eps.data if isinstance(eps, Tensor) else eps).ndim - 1))
    z0_t = z0 if isinstance(z0, Tensor) else Tensor(z0)
    eps_t = eps if isinstance(eps, Tensor) else Tensor(eps)
    return ad.add(ad.mul(z0_t, np.sqrt(ab)), ad.mul(eps_t, np.sqrt(1.0 - ab)))


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Classic sin/cos position code for (per-sequence) timesteps."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb


@dataclass
class DenoiserParams:
    t_proj_w: Tensor   # [D, D], applied to the sinusoidal code
    t_proj_b: Tensor   # [D]
    blocks: list       # two MambaBlockParams over the full slot sequence
    out_w: Tensor      # [D, D]
    out_b: Tensor      # [D]

    def tensors(self):
        out = [self.t_proj_w, self.t_proj_b]
        for b in self.blocks:
            out.extend(b.tensors())
        out.extend([self.out_w, self.out_b])
        return out


def init_denoiser(rng, dim: int, c_inner: int, n_state: int, conv_kernel: int,
                  dt_rank: int, depth: int = 2) -> DenoiserParams:
    def lin(d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        return (Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True),
                Tensor(rng.uniform(-bound, bound, d_out), requires_grad=True))

    tw, tb = lin(dim, dim)
    ow, ob = lin(dim, dim)
    blocks = [ssm_mod.init_mamba_block(rng, dim, c_inner, n_state, conv_kernel, dt_rank)
              for _ in range(depth)]
    return DenoiserParams(t_proj_w=tw, t_proj_b=tb, blocks=blocks, out_w=ow, out_b=ob)


def _assemble_slots(z_noisy: Tensor, cond: Tensor, record: MaskRecord) -> Tensor:
    """Interleave visible condition tokens and noisy masked tokens back into
    their serialized positions: out[b, pos] comes from cond or z_noisy."""
    batch, length = record.masked.shape
    slot_src = np.empty((batch, length), dtype=np.int64)
    n_vis = record.visible_idx.shape[1]
    for b in range(batch):
        slot_src[b, record.visible_idx[b]] = np.arange(n_vis)
        slot_src[b, record.masked_idx[b]] = n_vis + np.arange(record.masked_idx.shape[1])
    stacked = ad.concat([cond, z_noisy], axis=1)
    return ad.gather_rows(stacked, slot_src)


def denoise_predict(z_noisy: Tensor, t, cond: Tensor, record: MaskRecord,
                    params: DenoiserParams) -> Tensor:
    """Predict the injected noise at the masked slots.

    The decoder sees the full serialized sequence (visible tokens carry the
    encoder output, masked slots carry the corrupted features) plus a
    projected timestep embedding on every slot.
    """
    if record.masked_idx.shape[1] == 0:
        raise ValueError("no masked slots: nothing to denoise")
    dim = params.out_w.shape[0]
    full = _assemble_slots(z_noisy, cond, record)
    temb = sinusoidal_embedding(t, dim)
    if temb.shape[0] == 1 and full.shape[0] > 1:
        temb = np.repeat(temb, full.shape[0], axis=0)
    temb_t = ad.add(ad.matmul(Tensor(temb), params.t_proj_w), params.t_proj_b)
    x = ad.add(full, ad.reshape(temb_t, (full.shape[0], 1, dim)))
    for block in params.blocks:
        x = ssm_mod.mamba_block_forward(x, block)
    x = ad.add(ad.matmul(x, params.out_w), params.out_b)
    return ad.gather_rows(x, record.masked_idx)


def diffusion_loss(z0_masked: Tensor, cond: Tensor, t, eps: np.ndarray,
                   record: MaskRecord, params: DenoiserParams,
                   schedule: DiffusionSchedule) -> Tensor:
    """Mean squared error between injected and predicted noise, averaged over
    masked slots, features, and the batch."""
    z_t = q_sample(z0_masked, t, Tensor(eps), schedule)
    eps_hat = denoise_predict(z_t, t, cond, record, params)
    diff = ad.sub(eps_hat, Tensor(eps))
    return ad.mean(ad.mul(diff, diff))


def p_sample_step(z_t: Tensor, t: int, cond: Tensor, record: MaskRecord,
                  params: DenoiserParams, schedule: DiffusionSchedule,
                  noise: np.ndarray | None = None,
                  eps_hat: Tensor | None = None) -> Tensor:
    """One reverse step: posterior mean from the predicted noise plus
    sigma_t-scaled noise (forced to zero at t=1)."""
    if not 1 <= t <= schedule.steps:
        raise ValueError(f"timestep out of range [1, {schedule.steps}]")
    if eps_hat is None:
        eps_hat = denoise_predict(z_t, t, cond, record, params)
    beta = schedule.betas[t - 1]
    ab = schedule.alpha_bar(t)
    mu = ad.mul(ad.sub(z_t, ad.mul(eps_hat, beta / np.sqrt(1.0 - ab))),
                1.0 / np.sqrt(1.0 - beta))
    if t == 1 or noise is None:
        return mu
    return ad.add(mu, Tensor(noise * schedule.sigmas[t - 1]))
