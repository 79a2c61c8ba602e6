"""Hyperspectral cube container, synthetic cube generation, map export.

On disk a cube is a directory: ``header.json`` describing geometry and
dtype, ``cube.bin`` with band-sequential little-endian float32 samples,
and an optional ``labels.bin`` of int32 (0 = unlabeled). Class maps are
exported as binary PPM so no imaging dependency is needed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

HEADER_SCHEMA = 1

# fixed default palette, cycled when there are more classes than entries;
# index 0 (unlabeled) renders black
DEFAULT_PALETTE = [
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
    (220, 190, 255),
    (170, 110, 40),
    (255, 250, 200),
    (128, 0, 0),
]


@dataclass
class HSICube:
    data: np.ndarray          # (bands, H, W) float32
    labels: np.ndarray        # (H, W) int32, 0 = unlabeled
    class_names: list
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    @property
    def bands(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def normalized(self):
        return self.norm_mean is not None


@dataclass
class SynthSpec:
    bands: int = 16
    height: int = 48
    width: int = 48
    num_classes: int = 4
    layout: str = "blocks"    # "blocks" or "voronoi"
    blocks: int = 4           # blocks-per-axis for the blocks layout
    seeds_per_class: int = 3  # voronoi sites per class
    noise_std: float = 0.05
    bumps_per_class: int = 2
    seed: int = 0


def class_signatures(spec: SynthSpec):
    """Per-class spectra: mixtures of Gaussian bumps along the band axis.

    Primary bump centers are spread evenly across the spectrum so classes
    stay well separated; secondary bumps add per-class texture.
    """
    rng = np.random.default_rng(spec.seed)
    bands = np.arange(spec.bands, dtype=np.float64)
    sigs = np.zeros((spec.num_classes, spec.bands), dtype=np.float64)
    for k in range(spec.num_classes):
        center = (k + 0.5) * spec.bands / spec.num_classes
        width = max(1.0, spec.bands / (2.5 * spec.num_classes))
        sigs[k] = np.exp(-0.5 * ((bands - center) / width) ** 2)
        for _ in range(spec.bumps_per_class - 1):
            c = rng.uniform(0, spec.bands)
            w = rng.uniform(0.8, 2.0)
            a = rng.uniform(0.2, 0.5)
            sigs[k] += a * np.exp(-0.5 * ((bands - c) / w) ** 2)
    return sigs.astype(np.float32)


def _layout_blocks(spec):
    g = spec.blocks
    ys = (np.arange(spec.height) * g) // spec.height
    xs = (np.arange(spec.width) * g) // spec.width
    cell = ys[:, None] * g + xs[None, :]
    return (cell % spec.num_classes).astype(np.int32) + 1


def _layout_voronoi(spec):
    rng = np.random.default_rng(spec.seed + 1)
    n = spec.num_classes * spec.seeds_per_class
    sy = rng.uniform(0, spec.height, size=n)
    sx = rng.uniform(0, spec.width, size=n)
    site_class = np.arange(n) % spec.num_classes
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    d2 = (yy[..., None] - sy) ** 2 + (xx[..., None] - sx) ** 2
    return site_class[np.argmin(d2, axis=-1)].astype(np.int32) + 1


def synth_generate(spec: SynthSpec) -> HSICube:
    """Deterministic synthetic cube: class signature plus Gaussian noise."""
    if spec.noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    sigs = class_signatures(spec)
    labels = _layout_blocks(spec) if spec.layout == "blocks" else _layout_voronoi(spec)
    for k in range(1, spec.num_classes + 1):
        if not np.any(labels == k):
            raise RuntimeError(f"layout produced no pixels of class {k}")
    rng = np.random.default_rng(spec.seed + 2)
    data = sigs[labels - 1].transpose(2, 0, 1).astype(np.float32)
    if spec.noise_std > 0:
        data = data + rng.normal(0, spec.noise_std, size=data.shape).astype(np.float32)
    names = [f"class_{k}" for k in range(1, spec.num_classes + 1)]
    return HSICube(data=np.ascontiguousarray(data), labels=labels, class_names=names)


def save_cube(cube: HSICube, directory):
    os.makedirs(directory, exist_ok=True)
    header = {
        "schema": HEADER_SCHEMA,
        "bands": cube.bands,
        "height": cube.height,
        "width": cube.width,
        "dtype": "f32le",
        "layout": "band-sequential",
        "class_names": list(cube.class_names),
        "normalized": cube.normalized,
    }
    if cube.normalized:
        header["norm_mean"] = [float(v) for v in cube.norm_mean]
        header["norm_std"] = [float(v) for v in cube.norm_std]
    with open(os.path.join(directory, "header.json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    cube.data.astype("<f4").tofile(os.path.join(directory, "cube.bin"))
    if cube.labels is not None:
        cube.labels.astype("<i4").tofile(os.path.join(directory, "labels.bin"))


def load_cube(directory) -> HSICube:
    header_path = os.path.join(directory, "header.json")
    if not os.path.isdir(directory) or not os.path.exists(header_path):
        raise FileNotFoundError(f"no cube at {directory!r} (missing header.json)")
    with open(header_path) as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed header.json in {directory}: {exc}") from exc
    if header.get("dtype") != "f32le":
        raise ValueError(f"unknown cube dtype {header.get('dtype')!r}, expected 'f32le'")
    if header.get("layout") != "band-sequential":
        raise ValueError(f"unknown layout {header.get('layout')!r}")
    bands, h, w = header["bands"], header["height"], header["width"]
    expected = 4 * bands * h * w
    cube_path = os.path.join(directory, "cube.bin")
    actual = os.path.getsize(cube_path)
    if actual != expected:
        raise ValueError(
            f"cube.bin is {actual} bytes but header declares {bands}x{h}x{w} "
            f"float32 = {expected} bytes")
    data = np.fromfile(cube_path, dtype="<f4").reshape(bands, h, w)
    labels_path = os.path.join(directory, "labels.bin")
    if os.path.exists(labels_path):
        lab_expected = 4 * h * w
        lab_actual = os.path.getsize(labels_path)
        if lab_actual != lab_expected:
            raise ValueError(
                f"labels.bin is {lab_actual} bytes, expected {lab_expected}")
        labels = np.fromfile(labels_path, dtype="<i4").reshape(h, w)
    else:
        labels = np.zeros((h, w), dtype=np.int32)
    nc = len(header["class_names"])
    if labels.min() < 0 or labels.max() > nc:
        raise ValueError(f"label values outside [0, {nc}]")
    cube = HSICube(data=data, labels=labels, class_names=header["class_names"])
    if header.get("normalized"):
        cube.norm_mean = np.asarray(header["norm_mean"], dtype=np.float32)
        cube.norm_std = np.asarray(header["norm_std"], dtype=np.float32)
    return cube


def normalize(cube: HSICube) -> HSICube:
    """Standardize each band to zero mean, unit std (std clamped at 1e-8)."""
    if cube.normalized:
        raise ValueError("cube is already normalized")
    mean = cube.data.mean(axis=(1, 2))
    std = np.maximum(cube.data.std(axis=(1, 2)), 1e-8)
    data = (cube.data - mean[:, None, None]) / std[:, None, None]
    return HSICube(data=data.astype(np.float32), labels=cube.labels,
                   class_names=cube.class_names,
                   norm_mean=mean.astype(np.float32), norm_std=std.astype(np.float32))


def denormalize(cube: HSICube) -> HSICube:
    if not cube.normalized:
        raise ValueError("cube is not normalized")
    data = cube.data * cube.norm_std[:, None, None] + cube.norm_mean[:, None, None]
    return HSICube(data=data.astype(np.float32), labels=cube.labels,
                   class_names=cube.class_names)


def palette_for(num_classes):
    colors = [DEFAULT_PALETTE[0]]
    for k in range(1, num_classes + 1):
        colors.append(DEFAULT_PALETTE[1 + (k - 1) % (len(DEFAULT_PALETTE) - 1)])
    return colors


def export_classmap(class_map, palette, path):
    """Write a class map as a binary PPM (P6) using the given palette."""
    class_map = np.asarray(class_map)
    h, w = class_map.shape
    if class_map.min() < 0 or class_map.max() >= len(palette):
        raise ValueError(f"class index outside palette range 0..{len(palette) - 1}")
    lut = np.asarray(palette, dtype=np.uint8)
    rgb = lut[class_map]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_classmap_ppm(path):
    """Parse back a P6 file written by export_classmap; returns (rgb, w, h)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"not a P6 PPM: magic {magic!r}")
        w, h = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError(f"unexpected maxval {maxval}")
        rgb = np.frombuffer(fh.read(3 * w * h), dtype=np.uint8).reshape(h, w, 3)
    return rgb, w, h
