"""Synthetic shape datasets.

Four analytic surfaces (sphere, cube, torus, cylinder) with per-point part
labels derived from geometry, written to disk in the binary cloud format
plus a JSON manifest. Generation is deterministic per (seed, cloud index),
so regenerating a dataset reproduces it byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import normalize_cloud, read_cloud_binary, write_cloud_binary

SHAPE_CLASSES = ("sphere", "cube", "torus", "cylinder")


@dataclass
class ShapeSpec:
    classes: tuple[str, ...] = SHAPE_CLASSES
    points_per_cloud: int = 256
    noise_std: float = 0.02

    def __post_init__(self):
        unknown = [c for c in self.classes if c not in SHAPE_CLASSES]
        if unknown:
            raise ValueError(f"unknown shape classes {unknown}; pick from {SHAPE_CLASSES}")
        if self.points_per_cloud < 1:
            raise ValueError("points_per_cloud must be positive")


def _sphere(n, rng):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    parts = (d[:, 2] < 0).astype(np.uint8)  # hemispheres
    return d, parts


def _cube(n, rng):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1, 1, (n, 2))
    pts = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for i in range(n):
        others = [a for a in range(3) if a != axis[i]]
        pts[i, axis[i]] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    parts = (pts[:, 2] < 0).astype(np.uint8)  # top vs bottom half
    return pts, parts


def _torus(n, rng, ring=1.0, tube=0.4):
    theta = rng.uniform(0, 2 * np.pi, n)
    phi = rng.uniform(0, 2 * np.pi, n)
    x = (ring + tube * np.cos(phi)) * np.cos(theta)
    y = (ring + tube * np.cos(phi)) * np.sin(theta)
    z = tube * np.sin(phi)
    parts = (np.cos(phi) < 0).astype(np.uint8)  # outer vs inner rim
    return np.stack([x, y, z], axis=1), parts


def _cylinder(n, rng, radius=0.6, half_height=1.0):
    side_area = 2 * np.pi * radius * 2 * half_height
    cap_area = 2 * np.pi * radius ** 2
    on_side = rng.uniform(0, side_area + cap_area, n) < side_area
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = np.empty((n, 3))
    z_side = rng.uniform(-half_height, half_height, n)
    r_cap = radius * np.sqrt(rng.uniform(0, 1, n))
    cap_sign = np.where(rng.uniform(0, 1, n) < 0.5, 1.0, -1.0)
    pts[:, 0] = np.where(on_side, radius * np.cos(theta), r_cap * np.cos(theta))
    pts[:, 1] = np.where(on_side, radius * np.sin(theta), r_cap * np.sin(theta))
    pts[:, 2] = np.where(on_side, z_side, cap_sign * half_height)
    parts = (~on_side).astype(np.uint8)  # side vs caps
    return pts, parts


_GENERATORS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "cylinder": _cylinder}


def sample_shape(kind: str, n_points: int, noise_std: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    pts, parts = _GENERATORS[kind](n_points, rng)
    if noise_std > 0:
        pts = pts + rng.normal(0.0, noise_std, pts.shape)
    return pts, parts


def write_parts(path, parts: np.ndarray) -> None:
    arr = np.asarray(parts, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.size))
        fh.write(arr.tobytes())


def read_parts(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", fh.read(4))
        data = np.frombuffer(fh.read(count), dtype=np.uint8)
    if data.size != count:
        raise ValueError(f"{path}: truncated part labels")
    return data.copy()


def generate_dataset(out_dir, spec: ShapeSpec, count: int, seed: int) -> Path:
    """Write ``count`` clouds (classes round-robin) plus manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clouds = []
    for i in range(count):
        label = i % len(spec.classes)
        kind = spec.classes[label]
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        pts, parts = sample_shape(kind, spec.points_per_cloud, spec.noise_std, rng)
        cloud_file = f"cloud_{i:05d}.xyzb"
        parts_file = f"cloud_{i:05d}.parts"
        write_cloud_binary(out / cloud_file, pts)
        write_parts(out / parts_file, parts)
        clouds.append({"file": cloud_file, "label": label, "parts": parts_file})
    manifest = {
        "format": "pointseq-dataset-v1",
        "classes": list(spec.classes),
        "points_per_cloud": spec.points_per_cloud,
        "noise_std": spec.noise_std,
        "seed": seed,
        "clouds": clouds,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return out / "manifest.json"


@dataclass
class Dataset:
    points: np.ndarray   # [n, N, 3], normalized
    labels: np.ndarray   # [n]
    parts: np.ndarray    # [n, N] uint8
    classes: list[str]


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    points, labels, parts = [], [], []
    for entry in manifest["clouds"]:
        raw = read_cloud_binary(root / entry["file"])
        points.append(normalize_cloud(raw))
        labels.append(entry["label"])
        parts.append(read_parts(root / entry["parts"]))
    return Dataset(points=np.stack(points), labels=np.array(labels),
                   parts=np.stack(parts), classes=manifest["classes"])
