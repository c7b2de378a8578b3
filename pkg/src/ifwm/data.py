"""Synthetic overhead scenes, tiling, and the RAST raster format.

Scenes are drawn back to front onto a 4-class label raster (background,
buildings as rotated rectangles, roads as thick segments, vegetation as
discs) with object sizes spanning close to an order of magnitude, so the
same class appears at very different scales.  Images are per-class base
colours plus seeded noise.

RAST v1 is a tiny self-describing raster file: an ASCII header line
"RAST v1 <c> <h> <w> <dtype>\\n" followed by the row-major little-endian
payload.  Images are stored as f64 (c=3), labels as u8 (c=1).  A dataset is
a directory of tile rasters plus a manifest of tab-separated
"image<TAB>label" relative path pairs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ifwm.errors import DataError, GeometryError

CLASS_BACKGROUND = 0
CLASS_BUILDING = 1
CLASS_ROAD = 2
CLASS_VEGETATION = 3
NUM_CLASSES = 4

# per-class base colour (r, g, b)
BASE_COLORS = np.array([
    [0.30, 0.33, 0.22],   # background: bare ground
    [0.58, 0.50, 0.46],   # buildings: roof tones
    [0.42, 0.42, 0.45],   # roads: asphalt
    [0.13, 0.36, 0.17],   # vegetation
])

_DTYPES = {"f64": np.dtype("<f8"), "u8": np.dtype("u1")}


@dataclass
class SceneSpec:
    height: int = 160
    width: int = 160
    num_buildings: Tuple[int, int] = (5, 9)
    num_roads: Tuple[int, int] = (2, 3)
    num_blobs: Tuple[int, int] = (6, 12)
    building_side: Tuple[float, float] = (6.0, 48.0)
    road_width: Tuple[float, float] = (5.0, 14.0)
    blob_radius: Tuple[float, float] = (3.0, 24.0)
    noise_sigma: float = 0.04

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise DataError(f"scene extents too small: {self.height}x{self.width}")
        for lo, hi in (self.num_buildings, self.num_roads, self.num_blobs):
            if lo < 0 or hi < lo:
                raise DataError("object count ranges must satisfy 0 <= lo <= hi")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be non-negative")


@dataclass
class SceneSample:
    image: np.ndarray   # (3, h, w) float64
    labels: np.ndarray  # (h, w) uint8


def _grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def _paint_rect(labels, xs, ys, rng, side_range) -> None:
    h, w = labels.shape
    cx = rng.uniform(0, w)
    cy = rng.uniform(0, h)
    a = rng.uniform(*side_range)
    b = a * rng.uniform(0.5, 1.5)
    ang = rng.uniform(0, np.pi)
    ca, sa = np.cos(ang), np.sin(ang)
    du = (xs - cx) * ca + (ys - cy) * sa
    dv = -(xs - cx) * sa + (ys - cy) * ca
    labels[(np.abs(du) <= a / 2) & (np.abs(dv) <= b / 2)] = CLASS_BUILDING


def _paint_road(labels, xs, ys, rng, width_range) -> None:
    h, w = labels.shape
    # endpoints on opposite sides so the road crosses the scene
    if rng.integers(2):
        p0 = np.array([rng.uniform(0, w), 0.0])
        p1 = np.array([rng.uniform(0, w), float(h - 1)])
    else:
        p0 = np.array([0.0, rng.uniform(0, h)])
        p1 = np.array([float(w - 1), rng.uniform(0, h)])
    half = rng.uniform(*width_range) / 2
    d = p1 - p0
    len2 = float(d @ d)
    t = ((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / len2
    t = np.clip(t, 0.0, 1.0)
    dist2 = (xs - (p0[0] + t * d[0])) ** 2 + (ys - (p0[1] + t * d[1])) ** 2
    labels[dist2 <= half * half] = CLASS_ROAD


def _paint_blob(labels, xs, ys, rng, radius_range) -> None:
    h, w = labels.shape
    cx = rng.uniform(0, w)
    cy = rng.uniform(0, h)
    r = rng.uniform(*radius_range)
    labels[(xs - cx) ** 2 + (ys - cy) ** 2 <= r * r] = CLASS_VEGETATION


def generate_scene(spec: SceneSpec, seed: int) -> SceneSample:
    """One seeded scene; identical (spec, seed) gives identical rasters."""
    spec.validate()
    rng = np.random.default_rng([0x5CE4E, int(seed)])
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.uint8)
    xs, ys = _grid(h, w)
    for _ in range(int(rng.integers(spec.num_blobs[0], spec.num_blobs[1] + 1))):
        _paint_blob(labels, xs, ys, rng, spec.blob_radius)
    for _ in range(int(rng.integers(spec.num_roads[0], spec.num_roads[1] + 1))):
        _paint_road(labels, xs, ys, rng, spec.road_width)
    for _ in range(int(rng.integers(spec.num_buildings[0], spec.num_buildings[1] + 1))):
        _paint_rect(labels, xs, ys, rng, spec.building_side)

    jitter = rng.normal(0.0, 0.02, size=(NUM_CLASSES, 3))
    image = (BASE_COLORS + jitter)[labels].transpose(2, 0, 1)
    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return SceneSample(np.ascontiguousarray(image), labels)


# ---------------------------------------------------------------------------
# tiling and rotation


def tile_origins(dim: int, size: int, stride: int) -> List[int]:
    """Origins covering [0, dim) fully; the last tile is clamped to the end."""
    if size > dim:
        raise GeometryError(f"tile size {size} exceeds extent {dim}")
    if stride < 1:
        raise GeometryError(f"stride must be positive, got {stride}")
    origins = []
    o = 0
    while True:
        if o + size >= dim:
            origins.append(dim - size)
            break
        origins.append(o)
        o += stride
    return origins


def tile_sample(sample: SceneSample, size: int, stride: int) -> List[SceneSample]:
    _, h, w = sample.image.shape
    tiles = []
    for oy in tile_origins(h, size, stride):
        for ox in tile_origins(w, size, stride):
            tiles.append(SceneSample(
                np.ascontiguousarray(sample.image[:, oy:oy + size, ox:ox + size]),
                np.ascontiguousarray(sample.labels[oy:oy + size, ox:ox + size])))
    return tiles


def rotate90(sample: SceneSample, quarters: int) -> SceneSample:
    """Rotate by quarter turns; odd turns require square tiles."""
    q = quarters % 4
    if q == 0:
        return sample
    _, h, w = sample.image.shape
    if q % 2 and h != w:
        raise GeometryError(f"odd quarter turns need square tiles, got {h}x{w}")
    return SceneSample(np.ascontiguousarray(np.rot90(sample.image, q, axes=(1, 2))),
                       np.ascontiguousarray(np.rot90(sample.labels, q)))


# ---------------------------------------------------------------------------
# RAST v1


def write_rast(path: str, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DataError(f"rasters are rank-3 (c, h, w), got shape {arr.shape}")
    if arr.dtype == np.uint8:
        tag, dt = "u8", _DTYPES["u8"]
    elif arr.dtype in (np.float64, np.float32):
        tag, dt = "f64", _DTYPES["f64"]
    else:
        raise DataError(f"unsupported raster dtype {arr.dtype}")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"RAST v1 {c} {h} {w} {tag}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_rast(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline(80)
        parts = header.decode("ascii", errors="replace").split()
        if len(parts) != 6 or parts[0] != "RAST" or parts[1] != "v1":
            raise DataError(f"{path}: not a RAST v1 file")
        try:
            c, h, w = int(parts[2]), int(parts[3]), int(parts[4])
        except ValueError:
            raise DataError(f"{path}: malformed RAST extents {parts[2:5]}") from None
        if parts[5] not in _DTYPES:
            raise DataError(f"{path}: unknown RAST dtype {parts[5]!r}")
        dt = _DTYPES[parts[5]]
        payload = fh.read()
    expected = c * h * w * dt.itemsize
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(c, h, w).copy()


# ---------------------------------------------------------------------------
# datasets on disk


def write_manifest(path: str, pairs: Sequence[Tuple[str, str]]) -> None:
    with open(path, "w") as fh:
        for img, lab in pairs:
            fh.write(f"{img}\t{lab}\n")


def read_manifest(path: str) -> List[Tuple[str, str]]:
    """Pairs of paths, resolved relative to the manifest location."""
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{ln}: expected 'image<TAB>label', got {line!r}")
            pairs.append((os.path.join(base, parts[0]), os.path.join(base, parts[1])))
    return pairs


def generate_dataset(root: str, num_scenes: int, spec: SceneSpec, seed: int,
                     tile: int = 64, stride: int = 48) -> str:
    """Write tiled scene rasters plus a manifest; returns the manifest path."""
    os.makedirs(root, exist_ok=True)
    pairs = []
    for s in range(num_scenes):
        scene = generate_scene(spec, seed * 100003 + s)
        for i, t in enumerate(tile_sample(scene, tile, stride)):
            img_name = f"tile_{s:04d}_{i:03d}.img.rast"
            lab_name = f"tile_{s:04d}_{i:03d}.lab.rast"
            write_rast(os.path.join(root, img_name), t.image)
            write_rast(os.path.join(root, lab_name), t.labels)
            pairs.append((img_name, lab_name))
    manifest = os.path.join(root, "manifest.tsv")
    write_manifest(manifest, pairs)
    return manifest


def load_pair(img_path: str, lab_path: str) -> SceneSample:
    img = read_rast(img_path)
    lab = read_rast(lab_path)
    if img.shape[0] != 3:
        raise DataError(f"{img_path}: expected 3 channels, got {img.shape[0]}")
    if lab.shape[0] != 1 or lab.dtype != np.uint8:
        raise DataError(f"{lab_path}: expected single-channel u8 labels")
    if img.shape[1:] != lab.shape[1:]:
        raise GeometryError(
            f"image extents {img.shape[1:]} != label extents {lab.shape[1:]}")
    return SceneSample(img, lab[0])
