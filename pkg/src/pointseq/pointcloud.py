"""Point cloud grouping and patch embedding.

A raw cloud is normalized on load (zero mean, max norm one), split into
local patches by farthest point sampling plus k-nearest-neighbor grouping,
and each patch is embedded into a feature token by a small shared-MLP
max-pool network that is exactly invariant to the point order inside a
patch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ORDER_NAMES = ("raw", "hilbert", "trans_hilbert", "axis_x", "axis_y", "axis_z")
ORDER_IDS = {name: i for i, name in enumerate(ORDER_NAMES)}


@dataclass
class PatchSet:
    """Center-aligned local neighborhoods of a batch of clouds."""

    centers: np.ndarray          # [B, G, 3]
    neighborhoods: np.ndarray    # [B, G, S, 3], center subtracted
    center_indices: np.ndarray   # [B, G]


@dataclass
class TokenSequence:
    """Ordered patch tokens plus the provenance needed downstream."""

    tokens: Tensor               # [B, G', C]
    centers: np.ndarray          # [B, G', 3]
    order_ids: np.ndarray        # [B, G'] ints indexing ORDER_NAMES
    mask: np.ndarray | None = field(default=None)  # [B, G'] bool, True = masked

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Shift each cloud to zero mean and scale its largest norm to 1."""
    pts = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    pts = pts - pts.mean(axis=1, keepdims=True)
    scale = np.linalg.norm(pts, axis=-1).max(axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    pts = pts / scale[:, None, None]
    return pts[0] if single else pts


def _fps_single(points: np.ndarray, count: int, seed: int, start_index: int | None) -> np.ndarray:
    n = points.shape[0]
    if start_index is not None:
        start = int(start_index)
    elif seed == 0:
        centroid = points.mean(axis=0)
        start = int(np.argmin(((points - centroid) ** 2).sum(axis=1)))
    else:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = ((points - points[start]) ** 2).sum(axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))  # argmax takes the lowest index on ties
        chosen[i] = nxt
        dist = np.minimum(dist, ((points - points[nxt]) ** 2).sum(axis=1))
    return chosen


def farthest_point_sample(points: np.ndarray, count: int, seed: int = 0,
                          start_index: int | None = None) -> np.ndarray:
    """Greedy max-min selection of ``count`` center indices per cloud.

    The first center is the point nearest the cloud centroid when seed is 0,
    otherwise a seeded random point; ``start_index`` overrides either.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    n = pts.shape[1]
    if count > n:
        raise ValueError(f"cannot sample {count} centers from {n} points")
    out = np.stack([_fps_single(pts[b], count, seed, start_index) for b in range(pts.shape[0])])
    return out[0] if single else out


def knn_group(points: np.ndarray, center_indices: np.ndarray, size: int) -> PatchSet:
    """Gather the ``size`` nearest points around each center (center included).

    Ties in distance break toward the lower point index; neighborhoods are
    stored with the center coordinate subtracted.
    """
    pts = np.asarray(points, dtype=np.float64)
    idx = np.asarray(center_indices)
    single = pts.ndim == 2
    if single:
        pts, idx = pts[None], idx[None]
    batch, n, _ = pts.shape
    if size > n:
        raise ValueError(f"cannot gather {size} neighbors from {n} points")
    centers = np.stack([pts[b, idx[b]] for b in range(batch)])          # [B,G,3]
    nbrs = np.empty((batch, idx.shape[1], size, 3))
    for b in range(batch):
        d2 = ((pts[b][None, :, :] - centers[b][:, None, :]) ** 2).sum(axis=-1)  # [G,N]
        order = np.argsort(d2, axis=1, kind="stable")[:, :size]
        nbrs[b] = pts[b][order] - centers[b][:, None, :]
    ps = PatchSet(centers=centers, neighborhoods=nbrs, center_indices=idx)
    if single:
        ps = PatchSet(centers[0], nbrs[0], idx[0])
    return ps


@dataclass
class PatchEncoderParams:
    """Shared-MLP token embedding: per-point (3 -> h1 -> h2), max-pool,
    concat pooled context back onto each point, project to the feature dim,
    max-pool again."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


def patch_encoder_widths(feature_dim: int) -> tuple[int, int]:
    return feature_dim // 3, (2 * feature_dim) // 3


def patch_encode(patches: PatchSet, params: PatchEncoderParams) -> TokenSequence:
    """Embed every neighborhood into one token; order of points inside a
    patch cannot change the result (max-pool over shared per-point features)."""
    nbrs = patches.neighborhoods
    batch, groups, size, _ = nbrs.shape
    x = Tensor(nbrs.reshape(batch * groups, size, 3))
    f = ad.relu(ad.add(ad.matmul(x, params.w1), params.b1))
    f = ad.relu(ad.add(ad.matmul(f, params.w2), params.b2))          # [BG,S,h2]
    pooled = ad.max_(f, axis=1, keepdims=True)                        # [BG,1,h2]
    h2 = f.shape[-1]
    f = ad.concat([f, ad.expand(pooled, (batch * groups, size, h2))], axis=2)
    f = ad.add(ad.matmul(f, params.w3), params.b3)                    # [BG,S,C]
    tok = ad.max_(f, axis=1)                                          # [BG,C]
    tok = ad.reshape(tok, (batch, groups, tok.shape[-1]))
    ids = np.full((batch, groups), ORDER_IDS["raw"], dtype=np.int64)
    return TokenSequence(tokens=tok, centers=patches.centers, order_ids=ids)


# ---------------------------------------------------------------------------
# cloud file formats: ASCII "x y z" per line, or binary little-endian
# u32 count followed by count*3 float32 values.


def read_cloud_ascii(path) -> np.ndarray:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return pts


def write_cloud_ascii(path, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt="%.9g")


def read_cloud_binary(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read(4)
        if len(raw) != 4:
            raise ValueError(f"{path}: truncated header")
        (count,) = struct.unpack("<I", raw)
        data = np.frombuffer(fh.read(count * 12), dtype="<f4")
    if data.size != count * 3:
        raise ValueError(f"{path}: expected {count * 3} floats, got {data.size}")
    return data.reshape(count, 3).astype(np.float64)


def write_cloud_binary(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(pts.tobytes())


def load_cloud(path) -> np.ndarray:
    """Read either supported format (by extension) and normalize."""
    p = str(path)
    pts = read_cloud_binary(p) if p.endswith(".xyzb") else read_cloud_ascii(p)
    return normalize_cloud(pts)
