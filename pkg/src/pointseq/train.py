"""Pretraining and fine-tuning loops, config handling, ablations, metrics.

A run is a pure function of (config, seed) at one worker: batch selection,
masking, and diffusion noise all come from counter-based streams keyed on
the run seed and step index, and the optimizer walks parameters in sorted
order. Metric traces (JSON lines plus a CSV summary and figures) are
therefore byte-identical across repeats; wall-clock timings go to a
separate sidecar file that is excluded from that guarantee.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diffusion as diff
from . import encoder as enc
from . import report
from .attention import LatentBlockParams, gate_state_probe
from .autodiff import Tensor
from .data import ShapeSpec, Dataset, generate_dataset, load_dataset
from .optim import AdamW, lr_at
from .pointcloud import PatchSet, farthest_point_sample, knn_group, patch_encode
from .serialize import (apply_mask, serialize_classification, serialize_dual_curve,
                        serialize_random, serialize_segmentation, HilbertConfig)
from .ssm import MambaBlockParams


class ConfigError(ValueError):
    """Bad or unknown configuration; the CLI maps this to exit code 2."""


class NumericError(RuntimeError):
    """Non-finite loss or similar numeric failure; CLI exit code 3."""


SERIALIZATIONS = ("hilbert+trans", "hilbert", "trans_hilbert", "axis", "random")
TASKS = ("pretrain", "finetune_cls", "finetune_seg", "probe")


@dataclass
class DataSection:
    dir: str = "data/toy"
    classes: list[str] = field(default_factory=lambda: ["sphere", "cube", "torus", "cylinder"])
    points_per_cloud: int = 256
    noise_std: float = 0.02
    count: int = 300
    n_train: int = 200
    n_test: int = 100


@dataclass
class GroupingSection:
    groups: int = 16
    group_size: int = 16


@dataclass
class SerializationSection:
    strategy: str = "hilbert+trans"
    bits: int = 10


@dataclass
class MaskSection:
    ratio: float = 0.6
    mode: str = "random"


@dataclass
class EncoderSection:
    feature_dim: int = 96
    depth: int = 6
    pmla_positions: list[int] = field(default_factory=lambda: [3])
    latent_dim: int = 24
    n_heads: int = 6
    state_dim: int = 8
    conv_kernel: int = 4
    expand: int = 2
    dt_rank: int | None = None
    ffn_mult: int = 4
    attention_block: str = "pmla"

    def to_config(self) -> enc.EncoderConfig:
        return enc.EncoderConfig(
            feature_dim=self.feature_dim, depth=self.depth,
            pmla_positions=tuple(self.pmla_positions), latent_dim=self.latent_dim,
            n_heads=self.n_heads, state_dim=self.state_dim,
            conv_kernel=self.conv_kernel, expand=self.expand, dt_rank=self.dt_rank,
            ffn_mult=self.ffn_mult, attention_block=self.attention_block)


@dataclass
class DiffusionSection:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class OptimizerSection:
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 20
    schedule: str = "cosine"
    backbone_lr_scale: float = 0.1


@dataclass
class RunConfig:
    task: str = "pretrain"
    seed: int = 0
    out_dir: str = "runs/out"
    steps: int = 300
    batch_size: int = 8
    checkpoint_every: int = 100
    eval_every: int = 0
    init_checkpoint: str | None = None
    num_parts: int = 2
    data: DataSection = field(default_factory=DataSection)
    grouping: GroupingSection = field(default_factory=GroupingSection)
    serialization: SerializationSection = field(default_factory=SerializationSection)
    masking: MaskSection = field(default_factory=MaskSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)

    def validate(self) -> "RunConfig":
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.serialization.strategy not in SERIALIZATIONS:
            raise ConfigError(f"unknown serialization {self.serialization.strategy!r}")
        if self.masking.mode not in ("random", "block"):
            raise ConfigError(f"unknown mask mode {self.masking.mode!r}")
        if not 0.0 <= self.masking.ratio < 1.0:
            raise ConfigError(f"mask ratio must be in [0, 1), got {self.masking.ratio}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.data.n_train + self.data.n_test > self.data.count:
            raise ConfigError("n_train + n_test exceeds dataset count")
        if self.grouping.groups > self.data.points_per_cloud:
            raise ConfigError("more groups than points per cloud")
        if self.grouping.group_size > self.data.points_per_cloud:
            raise ConfigError("group_size exceeds points per cloud")
        try:
            self.encoder.to_config()
            diff.build_schedule(self.diffusion.steps, self.diffusion.beta_start,
                                self.diffusion.beta_end)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _from_dict(cls, payload: dict, path: str = ""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} at {path or 'top level'}")
    kwargs = {}
    for name, value in payload.items():
        ftype = fields[name].type
        if dataclasses.is_dataclass(_section_type(ftype)):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + name!r} must be an object")
            kwargs[name] = _from_dict(_section_type(ftype), value, path + name + ".")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {"DataSection": DataSection, "GroupingSection": GroupingSection,
             "SerializationSection": SerializationSection, "MaskSection": MaskSection,
             "EncoderSection": EncoderSection, "DiffusionSection": DiffusionSection,
             "OptimizerSection": OptimizerSection}


def _section_type(ftype):
    if isinstance(ftype, str):
        return _SECTIONS.get(ftype, str)
    return ftype


def load_config(path=None, overrides: list[str] | None = None,
                base: dict | None = None) -> RunConfig:
    payload = dict(base or {})
    if path is not None:
        try:
            with open(path) as fh:
                payload.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = _from_dict(RunConfig, payload)
    for item in overrides or []:
        cfg = apply_override(cfg, item)
    return cfg.validate()


def apply_override(cfg: RunConfig, item: str) -> RunConfig:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    target = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not hasattr(target, leaf):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, leaf, value)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------------------
# the shared pipeline


def _step_rng(seed: int, step: int, lane: int) -> np.random.Generator:
    # counter-based streams: one Philox counter block per (step, lane)
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, step, lane]))


@dataclass
class PreparedData:
    dataset: Dataset
    patches: list[PatchSet]   # per cloud, groups computed once


def prepare_data(cfg: RunConfig) -> PreparedData:
    dataset = load_dataset(cfg.data.dir)
    if len(dataset.points) < cfg.data.n_train + cfg.data.n_test:
        raise ConfigError(
            f"dataset at {cfg.data.dir} has {len(dataset.points)} clouds, "
            f"config needs {cfg.data.n_train + cfg.data.n_test}")
    patches = []
    for pts in dataset.points:
        idx = farthest_point_sample(pts, cfg.grouping.groups, seed=0)
        patches.append(knn_group(pts, idx, cfg.grouping.group_size))
    return PreparedData(dataset=dataset, patches=patches)


def batch_patches(prep: PreparedData, indices: np.ndarray) -> PatchSet:
    return PatchSet(
        centers=np.stack([prep.patches[i].centers for i in indices]),
        neighborhoods=np.stack([prep.patches[i].neighborhoods for i in indices]),
        center_indices=np.stack([prep.patches[i].center_indices for i in indices]),
    )


def serialize_batch(cfg: RunConfig, patches: PatchSet, seq, seed: int = 0):
    strategy = cfg.serialization.strategy
    if strategy == "hilbert+trans":
        return serialize_dual_curve(patches, seq, cfg.serialization.bits)
    if strategy in ("hilbert", "trans_hilbert"):
        out, _ = serialize_classification(patches, seq,
                                          HilbertConfig(cfg.serialization.bits, strategy))
        return out
    if strategy == "axis":
        return serialize_segmentation(seq)
    return serialize_random(seq, seed)


def encode_batch(cfg: RunConfig, encoder, prep: PreparedData, indices: np.ndarray,
                 seed: int = 0):
    """Group, embed, serialize, and encode a batch of clouds (no masking)."""
    patches = batch_patches(prep, indices)
    raw = patch_encode(patches, encoder.patch_embed)
    seq = serialize_batch(cfg, patches, raw, seed=seed)
    return enc.encode(seq, encoder), seq


def pretrain_forward(cfg: RunConfig, encoder, denoiser, schedule, prep: PreparedData,
                     indices: np.ndarray, step: int):
    """One pretraining forward pass; returns (loss, diagnostics)."""
    patches = batch_patches(prep, indices)
    raw = patch_encode(patches, encoder.patch_embed)
    seq = serialize_batch(cfg, patches, raw, seed=int(_step_rng(cfg.seed, step, 1).integers(2 ** 31)))
    mask_seed = int(_step_rng(cfg.seed, step, 2).integers(2 ** 31))
    visible, record = apply_mask(seq, cfg.masking.ratio, cfg.masking.mode, seed=mask_seed)
    cond = enc.encode(visible, encoder)

    n_masked = record.masked_idx.shape[1]
    if n_masked == 0:
        # degenerate mode: nothing to denoise, the pass is a plain encode
        return Tensor(0.0), {"cond": cond, "record": record, "eps_rms": 0.0}

    # diffusion targets are the clean patch tokens at the hidden slots,
    # detached so the corruption target cannot collapse toward zero
    z0 = Tensor(ad.gather_rows(seq.tokens, record.masked_idx).data.copy())
    rng_t = _step_rng(cfg.seed, step, 3)
    t_batch = rng_t.integers(1, schedule.steps + 1, size=len(indices))
    eps = _step_rng(cfg.seed, step, 4).standard_normal(z0.shape)
    z_t = diff.q_sample(z0, t_batch, Tensor(eps), schedule)
    eps_hat = diff.denoise_predict(z_t, t_batch, cond, record, denoiser)
    delta = ad.sub(eps_hat, Tensor(eps))
    loss = ad.mean(ad.mul(delta, delta))
    eps_rms = float(np.sqrt((eps_hat.data ** 2).mean()))
    return loss, {"cond": cond, "record": record, "eps_rms": eps_rms}


def build_models(cfg: RunConfig):
    store = enc.ParamStore()
    encoder, _ = enc.build_encoder(cfg.encoder.to_config(), cfg.seed, store=store)
    ecfg = cfg.encoder.to_config()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    denoiser = diff.init_denoiser(rng, ecfg.feature_dim, ecfg.c_inner, ecfg.state_dim,
                                  ecfg.conv_kernel, ecfg.rank_dt)
    store.register("denoiser", denoiser)
    return encoder, denoiser, store


def _abort_on_nonfinite(loss_value: float, out_dir: Path, step: int,
                        indices: np.ndarray, cfg: RunConfig) -> None:
    if np.isfinite(loss_value):
        return
    dump = {"step": step, "loss": loss_value, "batch_indices": indices.tolist(),
            "seed": cfg.seed, "hint": "rerun with this seed and step to reproduce"}
    with open(out_dir / "nan_dump.json", "w") as fh:
        json.dump(dump, fh, indent=1)
    raise NumericError(f"non-finite loss {loss_value} at step {step}; "
                       f"diagnostics in {out_dir / 'nan_dump.json'}")


def pretrain(cfg: RunConfig) -> dict:
    """Mask, encode, corrupt, denoise; checkpoints plus metric traces."""
    out_dir = report.ensure_dir(cfg.out_dir)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1, sort_keys=True)
    prep = prepare_data(cfg)
    n_train = cfg.data.n_train
    encoder, denoiser, store = build_models(cfg)
    schedule = diff.build_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start,
                                   cfg.diffusion.beta_end)
    opt = AdamW(store, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay)
    metrics_path = out_dir / "metrics.jsonl"
    timings_path = out_dir / "timings.jsonl"
    metrics_path.unlink(missing_ok=True)
    timings_path.unlink(missing_ok=True)

    rows = []
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        indices = _step_rng(cfg.seed, step, 0).integers(0, n_train, size=cfg.batch_size)
        opt.zero_grad()
        loss, aux = pretrain_forward(cfg, encoder, denoiser, schedule, prep, indices, step)
        loss_value = loss.item()
        _abort_on_nonfinite(loss_value, out_dir, step, indices, cfg)
        if loss.requires_grad:
            ad.backward(loss)
        grad_norm = store.grad_norm()
        lr = lr_at(step, cfg.optimizer.lr, cfg.optimizer.warmup_steps, cfg.steps,
                   cfg.optimizer.schedule)
        opt.step(lr=lr)
        row = {"step": step, "loss": loss_value, "grad_norm": grad_norm,
               "lr": lr, "eps_hat_rms": aux["eps_rms"]}
        rows.append(row)
        report.append_jsonl(metrics_path, row)
        report.append_jsonl(timings_path, {"step": step, "wall_time": time.perf_counter() - t0})
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            enc.save_checkpoint(out_dir / f"checkpoint_{step:06d}.ckpt", store)

    enc.save_checkpoint(out_dir / "checkpoint_final.ckpt", store)
    report.write_csv(out_dir / "summary.csv", rows,
                     ["step", "loss", "grad_norm", "lr", "eps_hat_rms"])
    report.save_loss_curve(rows, out_dir / "loss_curve.png", title="diffusion pretraining loss")
    return {"final_loss": rows[-1]["loss"], "first_loss": rows[0]["loss"],
            "checkpoint": str(out_dir / "checkpoint_final.ckpt"), "steps": cfg.steps}


# ---------------------------------------------------------------------------
# supervised fine-tuning


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Stable softmax cross-entropy, mean over the batch."""
    shift = logits.data.max(axis=-1, keepdims=True)  # constant wrt the graph
    z = ad.sub(logits, Tensor(shift))
    lse = ad.log(ad.sum_(ad.exp(z), axis=-1))
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, np.asarray(labels)[..., None], 1.0, axis=-1)
    picked = ad.sum_(ad.mul(z, Tensor(onehot)), axis=-1)
    return ad.mean(ad.sub(lse, picked))


def miou_scores(pred: np.ndarray, gt: np.ndarray, n_parts: int,
                shape_labels: np.ndarray | None = None) -> dict:
    """Instance mIoU averages per-cloud part IoUs; class mIoU averages the
    per-shape-class means of those. Parts absent from both prediction and
    truth count as IoU 1 for their instance."""
    inst = []
    for i in range(pred.shape[0]):
        ious = []
        for p in range(n_parts):
            inter = np.sum((pred[i] == p) & (gt[i] == p))
            union = np.sum((pred[i] == p) | (gt[i] == p))
            ious.append(1.0 if union == 0 else inter / union)
        inst.append(float(np.mean(ious)))
    inst = np.array(inst)
    if shape_labels is None:
        class_miou = float(inst.mean())
    else:
        class_miou = float(np.mean([inst[shape_labels == c].mean()
                                    for c in np.unique(shape_labels)]))
    return {"instance_miou": float(inst.mean()), "class_miou": class_miou}


def _eval_classification(cfg, encoder, head, prep, indices) -> float:
    correct = 0
    labels = prep.dataset.labels
    for lo in range(0, len(indices), cfg.batch_size):
        chunk = indices[lo:lo + cfg.batch_size]
        feats, _ = encode_batch(cfg, encoder, prep, chunk)
        logits = enc.classification_head(feats, head)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[chunk]))
    return correct / len(indices)


def _eval_segmentation(cfg, encoder, head, prep, indices) -> dict:
    preds, gts = [], []
    for lo in range(0, len(indices), cfg.batch_size):
        chunk = indices[lo:lo + cfg.batch_size]
        feats, seq = encode_batch(cfg, encoder, prep, chunk)
        pts = prep.dataset.points[chunk]
        logits = enc.segmentation_head(feats, pts, seq.centers, head)
        preds.append(np.argmax(logits.data, axis=-1))
        gts.append(prep.dataset.parts[chunk])
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    return miou_scores(pred, gt, cfg.num_parts, prep.dataset.labels[indices])


def finetune(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    """Attach a task head to a (pretrained or fresh) backbone and train.

    The backbone learning rate is scaled down by optimizer.backbone_lr_scale;
    accuracy (classification) or class/instance mIoU (segmentation) is
    reported on the held-out test split.
    """
    out_dir = report.ensure_dir(cfg.out_dir)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1, sort_keys=True)
    prep = prepare_data(cfg)
    seg = cfg.task == "finetune_seg"
    if cfg.serialization.strategy == "hilbert+trans" and seg:
        cfg.serialization.strategy = "axis"

    store = enc.ParamStore()
    encoder, _ = enc.build_encoder(cfg.encoder.to_config(), cfg.seed, store=store)
    ckpt_path = checkpoint or cfg.init_checkpoint
    if ckpt_path:
        arrays = enc.load_checkpoint(ckpt_path)
        store.load_arrays(arrays, prefix="backbone.")

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    ecfg = cfg.encoder.to_config()
    if seg:
        head = enc.init_segmentation_head(rng, ecfg.feature_dim, cfg.num_parts)
    else:
        head = enc.init_classifier_head(rng, ecfg.feature_dim, len(cfg.data.classes))
    store.register("head", head)

    opt = AdamW(store, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay,
                lr_scales={"backbone": cfg.optimizer.backbone_lr_scale})
    train_idx = np.arange(cfg.data.n_train)
    test_idx = np.arange(cfg.data.n_train, cfg.data.n_train + cfg.data.n_test)
    labels = prep.dataset.labels

    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)
    rows = []
    for step in range(1, cfg.steps + 1):
        batch = train_idx[_step_rng(cfg.seed, step, 0).integers(0, len(train_idx),
                                                                size=cfg.batch_size)]
        opt.zero_grad()
        feats, seq = encode_batch(cfg, encoder, prep, batch)
        if seg:
            pts = prep.dataset.points[batch]
            logits = enc.segmentation_head(feats, pts, seq.centers, head)
            flat = ad.reshape(logits, (-1, cfg.num_parts))
            loss = cross_entropy(flat, prep.dataset.parts[batch].reshape(-1))
        else:
            logits = enc.classification_head(feats, head)
            loss = cross_entropy(logits, labels[batch])
        loss_value = loss.item()
        _abort_on_nonfinite(loss_value, out_dir, step, batch, cfg)
        ad.backward(loss)
        lr = lr_at(step, cfg.optimizer.lr, cfg.optimizer.warmup_steps, cfg.steps,
                   cfg.optimizer.schedule)
        opt.step(lr=lr)
        row = {"step": step, "loss": loss_value, "grad_norm": store.grad_norm(), "lr": lr}
        if cfg.eval_every and step % cfg.eval_every == 0:
            row.update(_final_eval(cfg, encoder, head, prep, test_idx, seg))
        rows.append(row)
        report.append_jsonl(metrics_path, row)

    result = _final_eval(cfg, encoder, head, prep, test_idx, seg)
    enc.save_checkpoint(out_dir / "checkpoint_final.ckpt", store)
    fields = sorted({k for r in rows for k in r})
    report.write_csv(out_dir / "summary.csv", rows, fields)
    report.save_loss_curve(rows, out_dir / "loss_curve.png", title="fine-tuning loss")
    if not seg:
        report.save_accuracy_curve(rows + [{"step": cfg.steps, **result}],
                                   out_dir / "accuracy.png", key="accuracy")
    with open(out_dir / "result.json", "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
    return result


def _final_eval(cfg, encoder, head, prep, test_idx, seg: bool) -> dict:
    if seg:
        return _eval_segmentation(cfg, encoder, head, prep, test_idx)
    return {"accuracy": _eval_classification(cfg, encoder, head, prep, test_idx)}


# ---------------------------------------------------------------------------
# diagnostics and ablations


def probe(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    """Run the gate/state correlation diagnostic on one batch and save it."""
    out_dir = report.ensure_dir(cfg.out_dir)
    prep = prepare_data(cfg)
    store = enc.ParamStore()
    encoder, _ = enc.build_encoder(cfg.encoder.to_config(), cfg.seed, store=store)
    ckpt_path = checkpoint or cfg.init_checkpoint
    if ckpt_path:
        store.load_arrays(enc.load_checkpoint(ckpt_path), prefix="backbone.")

    latent_layers = [l for l in encoder.layers if isinstance(l, LatentBlockParams)]
    mamba_layers = [l for l in encoder.layers if isinstance(l, MambaBlockParams)]
    if not latent_layers or not mamba_layers:
        raise ConfigError("probe needs at least one latent block and one state block")

    indices = np.arange(min(cfg.batch_size, cfg.data.n_train))
    patches = batch_patches(prep, indices)
    raw = patch_encode(patches, encoder.patch_embed)
    seq = serialize_batch(cfg, patches, raw)
    x = Tensor(seq.tokens.data)
    rep = gate_state_probe(x, latent_layers[0].pmla, mamba_layers[0],
                           cfg.encoder.to_config().n_heads)
    rep["checkpoint"] = ckpt_path
    with open(out_dir / "probe.json", "w") as fh:
        json.dump(rep, fh, indent=1, sort_keys=True)
    report.save_histogram(rep["per_channel_correlation"], out_dir / "probe_correlation.png",
                          title="gate/state correlation", xlabel="per-channel correlation")
    return rep


ABLATION_AXES = ("scanning", "pmla", "position", "latent")


def ablate(cfg: RunConfig, axis: str) -> list[dict]:
    """Sweep one design axis at desk scale and tabulate the end metric.

    Cell failures are recorded in the table and do not stop the sweep.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; pick from {ABLATION_AXES}")
    out_dir = report.ensure_dir(cfg.out_dir)
    cells = []
    if axis == "scanning":
        for strategy in ("random", "hilbert+trans", "axis"):
            for task in ("finetune_cls", "finetune_seg"):
                cells.append({"cell": f"{strategy}/{task}",
                              "set": {"serialization.strategy": strategy, "task": task}})
    elif axis == "pmla":
        for setting in ("mha", "none", "pmla"):
            override = ({"encoder.pmla_positions": []} if setting == "none"
                        else {"encoder.attention_block": setting})
            cells.append({"cell": setting, "set": {"task": "finetune_cls", **override}})
    elif axis == "position":
        for tag in ("early", "middle", "late"):
            pos = enc.ablation_position(tag, cfg.encoder.depth)
            cells.append({"cell": tag,
                          "set": {"task": "finetune_cls", "encoder.pmla_positions": [pos]}})
    else:
        for dim in (32, 48, 64, 128):
            cells.append({"cell": str(dim),
                          "set": {"task": "finetune_cls", "encoder.latent_dim": dim}})

    rows = []
    for i, cell in enumerate(cells):
        sub = load_config(base=config_to_dict(cfg))
        for key, value in cell["set"].items():
            apply_override(sub, f"{key}={json.dumps(value)}")
        sub.out_dir = str(Path(out_dir) / f"cell_{i:02d}_{cell['cell'].replace('/', '_')}")
        row = {"axis": axis, "cell": cell["cell"], "task": sub.task}
        try:
            sub.validate()
            result = finetune(sub)
            row["metric"] = result.get("accuracy", result.get("instance_miou"))
            row["detail"] = json.dumps(result, sort_keys=True)
            row["error"] = ""
        except Exception as exc:  # noqa: BLE001 - cell isolation is the point
            row["metric"] = ""
            row["detail"] = ""
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    report.write_csv(out_dir / "ablation.csv", rows,
                     ["axis", "cell", "task", "metric", "detail", "error"])
    ok = [r for r in rows if r["error"] == ""]
    if ok:
        report.save_bar_chart([r["cell"] + ":" + r["task"] for r in ok],
                              [r["metric"] for r in ok],
                              out_dir / "ablation.png",
                              title=f"ablation: {axis}", ylabel="end metric")
    return rows


def generate(cfg: RunConfig) -> str:
    spec = ShapeSpec(classes=tuple(cfg.data.classes),
                     points_per_cloud=cfg.data.points_per_cloud,
                     noise_std=cfg.data.noise_std)
    manifest = generate_dataset(cfg.data.dir, spec, cfg.data.count, cfg.seed)
    return str(manifest)
