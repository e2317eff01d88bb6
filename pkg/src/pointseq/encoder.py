"""The hybrid encoder: stacked selective-SSM blocks with a latent attention
block spliced in, plus patch/positional/order embeddings, task heads,
parameter and FLOP accounting, and a binary checkpoint format.

Layer i is a latent attention block iff i is listed in ``pmla_positions``
(the swap-in can also be plain multi-head attention for the ablation axis);
every other layer is a Mamba block. The default geometry is 12 layers with
one latent block in the middle, 384-wide features, and a 48-wide latent
bottleneck.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import pointcloud as pc
from . import ssm as ssm_mod
from .autodiff import Tensor
from .pointcloud import ORDER_NAMES, TokenSequence
from .serialize import OrderScaleParams, order_scale

CHECKPOINT_MAGIC = b"PLMA"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    feature_dim: int = 384
    depth: int = 12
    pmla_positions: tuple[int, ...] = (6,)
    latent_dim: int = 48
    n_heads: int = 6
    state_dim: int = 16
    conv_kernel: int = 4
    expand: int = 2
    dt_rank: int | None = None       # defaults to feature_dim // 16
    ffn_mult: int = 4
    attention_block: str = "pmla"    # or "mha" for the ablation swap

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        bad = [p for p in self.pmla_positions if not 0 <= p < self.depth]
        if bad:
            raise ValueError(f"pmla positions {bad} outside [0, {self.depth})")
        if self.feature_dim % self.n_heads != 0:
            raise ValueError("feature_dim must divide evenly into heads")
        if self.attention_block not in ("pmla", "mha"):
            raise ValueError(f"unknown attention block {self.attention_block!r}")

    @property
    def c_inner(self) -> int:
        return self.expand * self.feature_dim

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.n_heads

    @property
    def rank_dt(self) -> int:
        return self.dt_rank if self.dt_rank is not None else max(1, self.feature_dim // 16)


class ParamStore:
    """Flat registry of every learnable array, keyed by a unique path."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        self._params[name] = tensor
        return tensor

    def register(self, prefix: str, obj) -> None:
        """Walk a params dataclass and register its tensors under ``prefix``."""
        for fname in obj.__dataclass_fields__:
            value = getattr(obj, fname)
            if isinstance(value, Tensor):
                self.add(f"{prefix}.{fname}", value)
            elif hasattr(value, "__dataclass_fields__"):
                self.register(f"{prefix}.{fname}", value)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def total_scalars(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
        return float(np.sqrt(total))

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy values in; shapes must match, reported by the first bad path."""
        for name in self.names():
            if not name.startswith(prefix):
                continue
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if tuple(arrays[name].shape) != self._params[name].shape:
                raise ValueError(
                    f"shape mismatch at {name!r}: checkpoint has "
                    f"{tuple(arrays[name].shape)}, model expects {self._params[name].shape}")
            self._params[name].data[:] = arrays[name]


@dataclass
class PositionalMLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class Encoder:
    cfg: EncoderConfig
    patch_embed: pc.PatchEncoderParams
    pos_mlp: PositionalMLPParams
    order: OrderScaleParams
    layers: list = field(default_factory=list)   # MambaBlockParams | LatentBlockParams | MHALayer
    final_ln_g: Tensor | None = None
    final_ln_b: Tensor | None = None


@dataclass
class MHALayer:
    """Plain attention wrapped with the same pre-norm residual topology."""

    ln1_g: Tensor
    ln1_b: Tensor
    mha: attn.MHAParams
    ln2_g: Tensor
    ln2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


def _lin(rng, d_in, d_out):
    bound = 1.0 / np.sqrt(d_in)
    return (Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, d_out), requires_grad=True))


def init_patch_encoder(rng, feature_dim: int) -> pc.PatchEncoderParams:
    h1, h2 = pc.patch_encoder_widths(feature_dim)
    w1, b1 = _lin(rng, 3, h1)
    w2, b2 = _lin(rng, h1, h2)
    w3, b3 = _lin(rng, 2 * h2, feature_dim)
    return pc.PatchEncoderParams(w1, b1, w2, b2, w3, b3)


def init_mha_layer(rng, cfg: EncoderConfig) -> MHALayer:
    dim = cfg.feature_dim
    w1, b1 = _lin(rng, dim, cfg.ffn_mult * dim)
    w2, b2 = _lin(rng, cfg.ffn_mult * dim, dim)
    return MHALayer(
        ln1_g=Tensor(np.ones(dim), requires_grad=True),
        ln1_b=Tensor(np.zeros(dim), requires_grad=True),
        mha=attn.init_mha(rng, dim, cfg.n_heads, cfg.head_dim),
        ln2_g=Tensor(np.ones(dim), requires_grad=True),
        ln2_b=Tensor(np.zeros(dim), requires_grad=True),
        ffn_w1=w1, ffn_b1=b1, ffn_w2=w2, ffn_b2=b2,
    )


def build_encoder(cfg: EncoderConfig, seed: int, store: ParamStore | None = None,
                  prefix: str = "backbone") -> tuple[Encoder, ParamStore]:
    """Deterministically initialize the full backbone for a seed."""
    if store is None:
        store = ParamStore()
    rng = np.random.default_rng(seed)
    dim = cfg.feature_dim

    patch = init_patch_encoder(rng, dim)
    store.register(f"{prefix}.patch_embed", patch)

    pw1, pb1 = _lin(rng, 3, 128)
    pw2, pb2 = _lin(rng, 128, dim)
    pos = PositionalMLPParams(pw1, pb1, pw2, pb2)
    store.register(f"{prefix}.pos_mlp", pos)

    order = OrderScaleParams(
        gain=Tensor(np.ones((len(ORDER_NAMES), dim)), requires_grad=True),
        shift=Tensor(np.zeros((len(ORDER_NAMES), dim)), requires_grad=True),
    )
    store.register(f"{prefix}.order_scale", order)

    layers = []
    for i in range(cfg.depth):
        if i in cfg.pmla_positions:
            if cfg.attention_block == "pmla":
                layer = attn.init_latent_block(rng, dim, cfg.latent_dim, cfg.ffn_mult)
            else:
                layer = init_mha_layer(rng, cfg)
        else:
            layer = ssm_mod.init_mamba_block(rng, dim, cfg.c_inner, cfg.state_dim,
                                             cfg.conv_kernel, cfg.rank_dt)
        store.register(f"{prefix}.layers.{i:02d}", layer)
        layers.append(layer)

    fg = Tensor(np.ones(dim), requires_grad=True)
    fb = Tensor(np.zeros(dim), requires_grad=True)
    store.add(f"{prefix}.final_ln.g", fg)
    store.add(f"{prefix}.final_ln.b", fb)

    enc = Encoder(cfg=cfg, patch_embed=patch, pos_mlp=pos, order=order,
                  layers=layers, final_ln_g=fg, final_ln_b=fb)
    return enc, store


def positional_embedding(centers: np.ndarray, pos: PositionalMLPParams) -> Tensor:
    x = Tensor(np.asarray(centers, dtype=np.float64))
    h = ad.relu(ad.add(ad.matmul(x, pos.w1), pos.b1))
    return ad.add(ad.matmul(h, pos.w2), pos.b2)


def run_layers(x: Tensor, encoder: Encoder, scan: str = "sequential") -> Tensor:
    for layer in encoder.layers:
        if isinstance(layer, ssm_mod.MambaBlockParams):
            x = ssm_mod.mamba_block_forward(x, layer, scan=scan)
        elif isinstance(layer, attn.LatentBlockParams):
            x = attn.latent_attention_block(x, layer, encoder.cfg.n_heads)
        else:
            x = _mha_layer_forward(x, layer, encoder.cfg.n_heads)
    return ad.layer_norm(x, encoder.final_ln_g, encoder.final_ln_b)


def _mha_layer_forward(x: Tensor, layer: MHALayer, n_heads: int) -> Tensor:
    y = ad.add(x, attn.mha_forward(ad.layer_norm(x, layer.ln1_g, layer.ln1_b), layer.mha, n_heads))
    h = ad.silu(ad.add(ad.matmul(ad.layer_norm(y, layer.ln2_g, layer.ln2_b), layer.ffn_w1),
                       layer.ffn_b1))
    return ad.add(y, ad.add(ad.matmul(h, layer.ffn_w2), layer.ffn_b2))


def encode(seq: TokenSequence, encoder: Encoder, scan: str = "sequential") -> Tensor:
    """Order-scale the tokens, add the coordinate embedding, run all layers."""
    x = order_scale(seq.tokens, seq.order_ids, encoder.order)
    x = ad.add(x, positional_embedding(seq.centers, encoder.pos_mlp))
    return run_layers(x, encoder, scan=scan)


# ---------------------------------------------------------------------------
# heads


@dataclass
class ClassifierHeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]


def init_classifier_head(rng, feature_dim: int, num_classes: int,
                         hidden: int = 256) -> ClassifierHeadParams:
    w1, b1 = _lin(rng, 2 * feature_dim, hidden)
    w2, b2 = _lin(rng, hidden, num_classes)
    return ClassifierHeadParams(w1, b1, w2, b2)


def classification_head(features: Tensor, params: ClassifierHeadParams) -> Tensor:
    """Concat max-pool and mean-pool over the sequence, then a small MLP."""
    pooled = ad.concat([ad.max_(features, axis=1), ad.mean(features, axis=1)], axis=1)
    h = ad.relu(ad.add(ad.matmul(pooled, params.w1), params.b1))
    return ad.add(ad.matmul(h, params.w2), params.b2)


@dataclass
class SegmentationHeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]


def init_segmentation_head(rng, feature_dim: int, num_parts: int,
                           hidden: int = 256) -> SegmentationHeadParams:
    w1, b1 = _lin(rng, feature_dim + 3, hidden)
    w2, b2 = _lin(rng, hidden, num_parts)
    return SegmentationHeadParams(w1, b1, w2, b2)


def nearest_center_assignment(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest serialized center for every point, ties low."""
    d2 = ((points[:, :, None, :] - centers[:, None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=-1)  # [B, N]


def segmentation_head(features: Tensor, points: np.ndarray, centers: np.ndarray,
                      params: SegmentationHeadParams) -> Tensor:
    """Propagate token features to points by nearest center, then classify
    each point from its token feature and raw coordinates."""
    assign = nearest_center_assignment(points, centers)
    per_point = ad.gather_rows(features, assign)                # [B, N, D]
    x = ad.concat([per_point, Tensor(points)], axis=2)
    h = ad.relu(ad.add(ad.matmul(x, params.w1), params.b1))
    return ad.add(ad.matmul(h, params.w2), params.b2)


# ---------------------------------------------------------------------------
# accounting


def param_count(store: ParamStore, prefix: str = "") -> int:
    """Exact learnable-scalar count over (a prefix of) the store."""
    return sum(int(np.prod(t.shape)) for n, t in store.items() if n.startswith(prefix))


def linear_flops(tokens: int, d_in: int, d_out: int) -> int:
    """2*m*n*k flops for a [tokens, d_in] x [d_in, d_out] matmul."""
    return 2 * tokens * d_in * d_out


def flop_estimate(cfg: EncoderConfig, seq_len: int) -> dict[str, int]:
    """Analytic per-token flop model of one encoder pass (batch size 1).

    Counts 2*m*n*k per matmul, 2*k per multiply-accumulate in convolutions
    and the scan, and the usual small change for normalizations and gates.
    Returns a breakdown plus the total.
    """
    t = seq_len
    d = cfg.feature_dim
    ci = cfg.c_inner
    n = cfg.state_dim
    out: dict[str, int] = {}

    mamba = 0
    mamba += linear_flops(t, d, 2 * ci)                  # input projection
    mamba += 2 * t * ci * cfg.conv_kernel                # depthwise conv
    mamba += linear_flops(t, ci, 2 * n)                  # B_t and C_t
    mamba += linear_flops(t, ci, cfg.rank_dt) + linear_flops(t, cfg.rank_dt, ci)
    mamba += t * ci * n * 6                              # discretize: exp, scale, Bbar
    mamba += t * ci * n * 4                              # recurrence + readout MACs
    mamba += t * ci * 8                                  # skip, gate, SiLUs
    mamba += linear_flops(t, ci, d)                      # output projection
    mamba += 8 * t * d                                   # layer norm
    n_latent = len(cfg.pmla_positions)
    out["mamba_blocks"] = (cfg.depth - n_latent) * mamba

    latent = 0
    if cfg.attention_block == "pmla":
        latent += 2 * t * d * 3                          # depthwise conv queries
        latent += 4 * linear_flops(t, d, cfg.latent_dim)  # K/V latents and gates
        latent += 2 * linear_flops(t, cfg.latent_dim, d)  # up-projections
        latent += t * cfg.latent_dim * 6                 # gate sigmoids/products
    else:
        latent += 3 * linear_flops(t, d, d)              # QKV
    latent += 2 * 2 * t * t * d                          # logits and the AV product
    latent += 5 * t * t * cfg.n_heads                    # softmax
    latent += linear_flops(t, d, d)                      # output projection
    latent += linear_flops(t, d, cfg.ffn_mult * d) * 2   # feed-forward pair
    latent += 16 * t * d                                 # norms and residuals
    out["latent_blocks"] = n_latent * latent

    out["final_norm"] = 8 * t * d
    out["total"] = sum(out.values())
    return out


# ---------------------------------------------------------------------------
# checkpoint format: magic "PLMA", u32 version, u32 count, then per entry
# u32 name length, UTF-8 name, u8 dtype tag (0=f64, 1=f32), u32 rank,
# u64 dims, raw little-endian data.

_DTYPE_TAGS = {0: "<f8", 1: "<f4"}
_TAG_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def save_checkpoint(path, store: ParamStore, extra: dict[str, np.ndarray] | None = None) -> None:
    entries = store.items()
    if extra:
        entries = entries + sorted(extra.items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, value in entries:
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            tag = _TAG_FOR[np.dtype(arr.dtype)]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(_DTYPE_TAGS[tag]).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            tag, rank = struct.unpack("<BI", fh.read(5))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            n_items = int(np.prod(dims)) if dims else 1
            dtype = np.dtype(_DTYPE_TAGS[tag])
            data = np.frombuffer(fh.read(n_items * dtype.itemsize), dtype=dtype)
            out[name] = data.reshape(dims).astype(np.float64) if tag == 1 else data.reshape(dims).copy()
    return out


def ablation_position(tag: str, depth: int = 12) -> int:
    """Layer index for the early/middle/late insertion ablation."""
    table = {"early": 1, "middle": depth // 2, "late": depth - 2}
    if tag not in table:
        raise ValueError(f"unknown insertion tag {tag!r}")
    return table[tag]


def config_for_ablation(base: EncoderConfig, position_tag: str) -> EncoderConfig:
    return replace(base, pmla_positions=(ablation_position(position_tag, base.depth),))
