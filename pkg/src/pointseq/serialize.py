"""Ordering patch tokens into 1D sequences.

Classification orders centers along a 3D Hilbert curve (or its axis-permuted
"trans" variant); segmentation sorts centers along each coordinate axis and
concatenates the three orderings. Masking and the learnable per-ordering
affine (OrderScale) also live here.

The curve codec follows Skilling's transpose method: coordinates are folded
into the transposed Hilbert representation with O(bits) bitwise passes and
then interleaved into a single integer. Everything is vectorized over cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .pointcloud import ORDER_IDS, PatchSet, TokenSequence

MAX_BITS = 20  # 3*20 = 60 index bits, safely inside int64


@dataclass
class HilbertConfig:
    bits: int = 10
    variant: str = "hilbert"  # or "trans_hilbert"

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        if self.variant not in ("hilbert", "trans_hilbert"):
            raise ValueError(f"unknown curve variant {self.variant!r}")


def _check_cells(cells: np.ndarray, bits: int) -> np.ndarray:
    cells = np.asarray(cells, dtype=np.int64)
    if cells.shape[-1] != 3:
        raise ValueError(f"cells must have a trailing axis of size 3, got {cells.shape}")
    if cells.min(initial=0) < 0 or cells.max(initial=0) >= (1 << bits):
        raise ValueError(f"cell coordinates out of the 2^{bits} grid")
    return cells


def hilbert_index(cells, bits: int) -> np.ndarray | int:
    """Map grid cells (u, v, w) to their 3D Hilbert curve index.

    Accepts a single cell or an array [..., 3]; bijective over the
    2^bits-per-side grid, with index 0 at the origin.
    """
    arr = _check_cells(cells, bits)
    single = arr.ndim == 1
    flat = arr.reshape(-1, 3).T.copy()  # X[axis, cell]

    # fold axes into the transposed Hilbert representation
    q = 1 << (bits - 1)
    while q > 1:
        p = q - 1
        for i in range(3):
            hi = (flat[i] & q) != 0
            flat[0] = np.where(hi, flat[0] ^ p, flat[0])
            t = np.where(hi, 0, (flat[0] ^ flat[i]) & p)
            flat[0] ^= t
            flat[i] ^= t
        q >>= 1
    flat[1] ^= flat[0]
    flat[2] ^= flat[1]
    t = np.zeros_like(flat[0])
    q = 1 << (bits - 1)
    while q > 1:
        t = np.where((flat[2] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    flat ^= t

    # interleave: axis 0 contributes the most significant bit of each triple
    idx = np.zeros(flat.shape[1], dtype=np.int64)
    for k in range(bits - 1, -1, -1):
        for i in range(3):
            idx = (idx << 1) | ((flat[i] >> k) & 1)
    idx = idx.reshape(arr.shape[:-1])
    return int(idx) if single else idx


def hilbert_index_inverse(index, bits: int) -> np.ndarray:
    """Inverse of :func:`hilbert_index`."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= (1 << (3 * bits)):
        raise ValueError(f"index out of range for a {bits}-bit grid")
    single = idx.ndim == 0
    flat_idx = idx.reshape(-1)

    # de-interleave into the transposed representation
    x = np.zeros((3, flat_idx.size), dtype=np.int64)
    for k in range(bits):
        for i in range(3):
            x[i] |= ((flat_idx >> (3 * k + 2 - i)) & 1) << k

    # unfold (Skilling's inverse pass)
    t = x[2] >> 1
    x[2] ^= x[1]
    x[1] ^= x[0]
    x[0] ^= t
    q = 2
    top = 2 << (bits - 1)
    while q != top:
        p = q - 1
        for i in (2, 1, 0):
            hi = (x[i] & q) != 0
            x[0] = np.where(hi, x[0] ^ p, x[0])
            t = np.where(hi, 0, (x[0] ^ x[i]) & p)
            x[0] ^= t
            x[i] ^= t
        q <<= 1

    cells = x.T.reshape(idx.shape + (3,))
    return cells[0] if single else cells


_TRANS_PERM = (1, 2, 0)  # (x, y, z) -> (y, z, x)


def trans_hilbert_index(cells, bits: int) -> np.ndarray | int:
    """Hilbert index after the cyclic axis permutation (x,y,z) -> (y,z,x)."""
    arr = _check_cells(cells, bits)
    return hilbert_index(arr[..., _TRANS_PERM], bits)


def curve_index(cells, cfg: HilbertConfig) -> np.ndarray | int:
    fn = hilbert_index if cfg.variant == "hilbert" else trans_hilbert_index
    return fn(cells, cfg.bits)


def quantize_centers(centers: np.ndarray, bits: int) -> np.ndarray:
    """Min-max normalize each cloud's centers per axis onto the integer grid."""
    c = np.asarray(centers, dtype=np.float64)
    lo = c.min(axis=-2, keepdims=True)
    hi = c.max(axis=-2, keepdims=True)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    side = (1 << bits) - 1
    cells = np.floor((c - lo) / span * side).astype(np.int64)
    return np.clip(cells, 0, side)


def _apply_perm(tokens: Tensor, perm: np.ndarray) -> Tensor:
    return ad.gather_rows(tokens, perm)


def serialize_classification(patches: PatchSet, seq: TokenSequence,
                             cfg: HilbertConfig) -> tuple[TokenSequence, PatchSet]:
    """Sort tokens by ascending curve index of their centers (stable).

    Neighborhoods, centers and tokens are all realigned by the same
    permutation so spatial locality and sequence order stay consistent.
    """
    cells = quantize_centers(seq.centers, cfg.bits)
    idx = curve_index(cells, cfg)                       # [B, G]
    perm = np.argsort(idx, axis=-1, kind="stable")
    brow = np.arange(perm.shape[0])[:, None]
    out_seq = TokenSequence(
        tokens=_apply_perm(seq.tokens, perm),
        centers=seq.centers[brow, perm],
        order_ids=np.full_like(seq.order_ids, ORDER_IDS[cfg.variant]),
    )
    out_patches = PatchSet(
        centers=patches.centers[brow, perm],
        neighborhoods=patches.neighborhoods[brow, perm],
        center_indices=patches.center_indices[brow, perm],
    )
    return out_seq, out_patches


def serialize_segmentation(seq: TokenSequence) -> TokenSequence:
    """Concatenate the three stable axis-sorted orderings: [F_x ; F_y ; F_z]."""
    batch, groups = seq.order_ids.shape
    parts_tok, parts_cen, parts_ids = [], [], []
    for axis, name in enumerate(("axis_x", "axis_y", "axis_z")):
        perm = np.argsort(seq.centers[..., axis], axis=-1, kind="stable")
        brow = np.arange(batch)[:, None]
        parts_tok.append(_apply_perm(seq.tokens, perm))
        parts_cen.append(seq.centers[brow, perm])
        parts_ids.append(np.full((batch, groups), ORDER_IDS[name], dtype=np.int64))
    return TokenSequence(
        tokens=ad.concat(parts_tok, axis=1),
        centers=np.concatenate(parts_cen, axis=1),
        order_ids=np.concatenate(parts_ids, axis=1),
    )


def serialize_dual_curve(patches: PatchSet, seq: TokenSequence, bits: int) -> TokenSequence:
    """Classification default: Hilbert then trans-Hilbert orderings, concatenated."""
    h_seq, _ = serialize_classification(patches, seq, HilbertConfig(bits, "hilbert"))
    t_seq, _ = serialize_classification(patches, seq, HilbertConfig(bits, "trans_hilbert"))
    return TokenSequence(
        tokens=ad.concat([h_seq.tokens, t_seq.tokens], axis=1),
        centers=np.concatenate([h_seq.centers, t_seq.centers], axis=1),
        order_ids=np.concatenate([h_seq.order_ids, t_seq.order_ids], axis=1),
    )


def serialize_random(seq: TokenSequence, seed: int) -> TokenSequence:
    """Ablation baseline: a seeded uniformly random ordering."""
    rng = np.random.default_rng(seed)
    batch, groups = seq.order_ids.shape
    perm = np.stack([rng.permutation(groups) for _ in range(batch)])
    brow = np.arange(batch)[:, None]
    return TokenSequence(
        tokens=_apply_perm(seq.tokens, perm),
        centers=seq.centers[brow, perm],
        order_ids=seq.order_ids[brow, perm],
    )


@dataclass
class MaskRecord:
    """Which serialized slots were hidden, and how to reassemble them."""

    masked: np.ndarray       # [B, G'] bool
    visible_idx: np.ndarray  # [B, V] ascending positions kept
    masked_idx: np.ndarray   # [B, M] ascending positions hidden


def apply_mask(seq: TokenSequence, ratio: float, mode: str = "random",
               seed: int = 0) -> tuple[TokenSequence, MaskRecord]:
    """Hide round(ratio * G') token slots per sequence.

    Random mode draws positions without replacement; block mode hides one
    contiguous run (wrapping) starting at a seeded position. The visible
    subsequence keeps its serialized relative order.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    if mode not in ("random", "block"):
        raise ValueError(f"unknown mask mode {mode!r}")
    batch, length = seq.order_ids.shape
    n_mask = int(np.floor(ratio * length + 0.5))
    rng = np.random.default_rng(seed)

    masked = np.zeros((batch, length), dtype=bool)
    for b in range(batch):
        if n_mask == 0:
            break
        if mode == "random":
            pos = rng.choice(length, size=n_mask, replace=False)
        else:
            start = int(rng.integers(length))
            pos = (start + np.arange(n_mask)) % length
        masked[b, pos] = True

    visible_idx = np.stack([np.flatnonzero(~masked[b]) for b in range(batch)])
    masked_idx = np.stack([np.flatnonzero(masked[b]) for b in range(batch)])
    brow = np.arange(batch)[:, None]
    vis = TokenSequence(
        tokens=ad.gather_rows(seq.tokens, visible_idx),
        centers=seq.centers[brow, visible_idx],
        order_ids=seq.order_ids[brow, visible_idx],
    )
    record = MaskRecord(masked=masked, visible_idx=visible_idx, masked_idx=masked_idx)
    return vis, record


@dataclass
class OrderScaleParams:
    """Learnable affine per ordering: y = gain[o] * x + shift[o]."""

    gain: Tensor   # [n_orders, C]
    shift: Tensor  # [n_orders, C]

    def tensors(self):
        return [self.gain, self.shift]


def order_scale(tokens: Tensor, order_ids: np.ndarray, params: OrderScaleParams) -> Tensor:
    ids = np.asarray(order_ids)
    n_orders = params.gain.shape[0]
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= n_orders:
        raise ValueError(f"order id out of range [0, {n_orders})")
    gain = ad.take(params.gain, ids)    # [B, G', C]
    shift = ad.take(params.shift, ids)
    return ad.add(ad.mul(gain, tokens), shift)
