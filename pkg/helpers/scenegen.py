"""
Procedural desk scenes with exact depth.

Every scene holds one labeled foreground arrangement of spheres and boxes plus a floor plane, all
inside the [-1, 1]^3 box. Images are flat shaded: a pixel takes the solid-texture color of the
nearest hit, black when nothing is hit. Depth is the z-depth of that hit clamped to [near, far], far
when nothing is hit, the same convention the volume renderer reports.
"""
from __future__ import annotations

import logging
import os
from copy import deepcopy
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from helpers.errors import ContractViolation, DatasetError
from helpers.file_helper import FileHelper
from helpers.renderer import RayBatch, generate_rays, read_depth, write_depth
from triplane_data_classes import (Camera, DatasetManifest, ManifestRow, Primitive, PrimitiveType, SceneSpec,
                                   ShapeClass, TextureFamily)

logger = logging.getLogger(__name__)

NUM_SHAPE_CLASSES = len(ShapeClass)
NUM_TEXTURE_CLASSES = 2 * len(TextureFamily)
FLOOR_HEIGHT = -1.0
FLOOR_COLOR = [0.35, 0.35, 0.35]
BOX_EPS = 1e-6

# color pairs per palette, warm first
PALETTES = (
    ([0.90, 0.30, 0.15], [0.95, 0.75, 0.20], [0.80, 0.10, 0.35], [0.60, 0.25, 0.05]),
    ([0.15, 0.35, 0.90], [0.20, 0.80, 0.70], [0.45, 0.20, 0.80], [0.10, 0.55, 0.30]),
)


def texture_family(texture_class: int) -> TextureFamily:
    return TextureFamily(texture_class % len(TextureFamily))


def texture_palette(texture_class: int) -> int:
    return texture_class // len(TextureFamily)


def _sphere(center, radius) -> Tuple[PrimitiveType, List[float], List[float]]:
    return PrimitiveType.Sphere, list(center), [radius, radius, radius]


def _box(center, half_extents) -> Tuple[PrimitiveType, List[float], List[float]]:
    return PrimitiveType.Box, list(center), list(half_extents)


LAYOUTS = {
    ShapeClass.Sphere: lambda: [_sphere((0, 0, 0), 0.55)],
    ShapeClass.Box: lambda: [_box((0, 0, 0), (0.42, 0.42, 0.42))],
    ShapeClass.SpherePairWide: lambda: [_sphere((-0.5, 0, 0), 0.32), _sphere((0.5, 0, 0), 0.32)],
    ShapeClass.SpherePairTall: lambda: [_sphere((0, -0.42, 0), 0.3), _sphere((0, 0.42, 0), 0.3)],
    ShapeClass.BoxPairWide: lambda: [_box((-0.5, 0, 0), (0.26, 0.26, 0.26)), _box((0.5, 0, 0), (0.26, 0.26, 0.26))],
    ShapeClass.SphereOnBox: lambda: [_box((0, -0.35, 0), (0.42, 0.22, 0.42)), _sphere((0, 0.17, 0), 0.3)],
    ShapeClass.SphereRow: lambda: [_sphere((-0.6, 0, 0), 0.22), _sphere((0, 0, 0), 0.22), _sphere((0.6, 0, 0), 0.22)],
    ShapeClass.BoxAndSphere: lambda: [_box((-0.45, 0, 0), (0.28, 0.28, 0.28)), _sphere((0.45, 0, 0), 0.3)],
}


# -- intersection -----------------------------------------------------------------------------------------------------

def _intersect_sphere(rays: RayBatch, center: np.ndarray, radius: float) -> np.ndarray:
    oc = rays.origins - center
    b = np.einsum("ij,ij->i", oc, rays.directions)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    near_hit, far_hit = -b - root, -b + root
    travel = np.where(near_hit > 0, near_hit, far_hit)
    return np.where((disc >= 0) & (travel > 0), travel, np.inf)


def _intersect_box(rays: RayBatch, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        inverse = 1.0 / rays.directions
        t1 = (center - half - rays.origins) * inverse
        t2 = (center + half - rays.origins) * inverse
    t_min = np.nanmax(np.minimum(t1, t2), axis=-1)
    t_max = np.nanmin(np.maximum(t1, t2), axis=-1)
    travel = np.where(t_min > 0, t_min, t_max)
    return np.where((t_max >= np.maximum(t_min, 0.0)) & (travel > 0), travel, np.inf)


def _intersect_plane(rays: RayBatch, point: np.ndarray, normal: np.ndarray) -> np.ndarray:
    normal = normal / np.linalg.norm(normal)
    denominator = rays.directions @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        travel = ((point - rays.origins) @ normal) / denominator
    travel = np.where(np.abs(denominator) > 1e-12, travel, np.inf)
    hit = rays.origins + np.where(np.isfinite(travel), travel, 0.0)[:, None] * rays.directions
    inside = np.all(np.abs(hit) <= 1.0 + BOX_EPS, axis=-1)
    return np.where(inside & (travel > 0), travel, np.inf)


def intersect(rays: RayBatch, primitive: Primitive) -> np.ndarray:
    """
    Travel distance to the first hit of each ray, inf on a miss
    """
    center = np.asarray(primitive.center, dtype=np.float64)
    if primitive.kind == PrimitiveType.Sphere:
        return _intersect_sphere(rays, center, float(primitive.size[0]))
    if primitive.kind == PrimitiveType.Box:
        return _intersect_box(rays, center, np.asarray(primitive.size, dtype=np.float64))
    return _intersect_plane(rays, center, np.asarray(primitive.normal, dtype=np.float64))


def shade(primitive: Primitive, points: np.ndarray) -> np.ndarray:
    """
    Solid texture color at world points (N, 3)
    """
    color_a = np.asarray(primitive.color_a, dtype=np.float64)
    color_b = np.asarray(primitive.color_b, dtype=np.float64)
    scaled = points * primitive.texture_scale
    if primitive.texture == TextureFamily.Checker:
        use_b = np.floor(scaled).sum(axis=-1).astype(np.int64) % 2 == 1
    elif primitive.texture == TextureFamily.Stripes:
        use_b = np.floor(scaled[:, 0] + scaled[:, 1]).astype(np.int64) % 2 == 1
    elif primitive.texture == TextureFamily.Dots:
        use_b = np.linalg.norm(scaled - np.round(scaled), axis=-1) < 0.35
    else:
        use_b = np.zeros(points.shape[0], dtype=bool)
    return np.where(use_b[:, None], color_b, color_a)


def render_scene(spec: SceneSpec, camera: Camera, resolution: int,
                 rays: Optional[RayBatch] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact image and depth of a scene
    @return: image (res, res, 3) float32 in [0, 1], depth (res, res) float32 in [near, far]
    """
    rays = rays if rays is not None else generate_rays(camera, resolution)
    n = len(rays)
    nearest = np.full(n, np.inf)
    owner = np.full(n, -1)
    for index, primitive in enumerate(spec.primitives):
        travel = intersect(rays, primitive)
        closer = travel < nearest
        nearest = np.where(closer, travel, nearest)
        owner = np.where(closer, index, owner)
    image = np.zeros((n, 3))
    for index, primitive in enumerate(spec.primitives):
        mask = owner == index
        if np.any(mask):
            points = rays.origins[mask] + nearest[mask, None] * rays.directions[mask]
            image[mask] = shade(primitive, points)
    z_depth = np.where(np.isfinite(nearest), nearest / rays.depth_scale, camera.far)
    depth = np.clip(z_depth, camera.near, camera.far)
    return (image.reshape(resolution, resolution, 3).astype(np.float32),
            depth.reshape(resolution, resolution).astype(np.float32))


# -- scene specs ------------------------------------------------------------------------------------------------------

def swap_texture(spec: SceneSpec, texture_class: int) -> SceneSpec:
    """
    Same geometry, foreground retextured with texture_class
    """
    swapped = deepcopy(spec)
    colors = _texture_colors(texture_class, np.random.default_rng([spec.seed, texture_class]))
    for primitive in swapped.primitives[:swapped.foreground_count]:
        primitive.texture = texture_family(texture_class)
        primitive.color_a, primitive.color_b = colors
    swapped.texture_class = texture_class
    return swapped


def rescale(spec: SceneSpec, factor: float) -> SceneSpec:
    """
    Scales the foreground about the origin
    """
    scaled = deepcopy(spec)
    for primitive in scaled.primitives[:scaled.foreground_count]:
        primitive.center = [float(c * factor) for c in primitive.center]
        primitive.size = [float(s * factor) for s in primitive.size]
    return scaled


def _texture_colors(texture_class: int, rng: np.random.Generator) -> Tuple[List[float], List[float]]:
    palette = PALETTES[texture_palette(texture_class)]
    first, second = rng.choice(len(palette), size=2, replace=False)
    jitter = rng.uniform(-0.05, 0.05, size=(2, 3))
    color_a = np.clip(np.asarray(palette[first]) + jitter[0], 0.0, 1.0)
    color_b = np.clip(np.asarray(palette[second]) + jitter[1], 0.0, 1.0)
    return [float(v) for v in color_a], [float(v) for v in color_b]


class SceneGenerator:
    """
    Draws scene specs and writes datasets. Ordinary scenes take texture class equal to their shape
    class with probability texture_correlation, so texture is a class cue as in natural images
    """

    def __init__(self, camera: Optional[Camera] = None, resolution: int = 64, texture_correlation: float = 0.75):
        if not 0.0 <= texture_correlation <= 1.0:
            raise ContractViolation(f"texture_correlation must lie in [0, 1], got {texture_correlation}")
        self.camera = camera or Camera()
        self.resolution = resolution
        self.texture_correlation = texture_correlation
        self.rays = generate_rays(self.camera, resolution)

    def make_spec(self, shape_class: int, texture_class: int, seed: int) -> SceneSpec:
        rng = np.random.default_rng(seed)
        offset = rng.uniform(-0.1, 0.1, size=3)
        scale = rng.uniform(0.9, 1.1)
        color_a, color_b = _texture_colors(texture_class, rng)
        texture_scale = float(rng.uniform(3.0, 5.0))
        primitives = []
        for kind, center, size in LAYOUTS[ShapeClass(shape_class)]():
            primitives.append(Primitive(kind=kind, center=[float(c * scale + o) for c, o in zip(center, offset)],
                                        size=[float(s * scale) for s in size], texture=texture_family(texture_class),
                                        color_a=list(color_a), color_b=list(color_b), texture_scale=texture_scale))
        foreground = len(primitives)
        primitives.append(Primitive(kind=PrimitiveType.Plane, center=[0.0, FLOOR_HEIGHT, 0.0], size=[1.0, 1.0, 1.0],
                                    texture=TextureFamily.Solid, color_a=list(FLOOR_COLOR),
                                    color_b=list(FLOOR_COLOR), normal=[0.0, 1.0, 0.0]))
        return SceneSpec(primitives=primitives, shape_class=shape_class, texture_class=texture_class, seed=seed,
                         foreground_count=foreground)

    def render(self, spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
        return render_scene(spec, self.camera, self.resolution, self.rays)

    def draw_texture_class(self, shape_class: int, rng: np.random.Generator) -> int:
        if rng.random() < self.texture_correlation:
            return shape_class
        others = [t for t in range(NUM_TEXTURE_CLASSES) if t != shape_class]
        return int(others[rng.integers(len(others))])

    def make_dataset(self, n: int, seed: int, root: str, val_fraction: float = 0.2) -> DatasetManifest:
        """
        Writes n scenes with balanced shape classes to root
        @param n: Number of scenes, at least the number of shape classes
        @param seed: Controls labels, textures and geometry
        @param root: Output directory
        @param val_fraction: Recorded split size of the held-out part
        @return: The written manifest
        """
        if n < NUM_SHAPE_CLASSES:
            raise ContractViolation(f"need at least {NUM_SHAPE_CLASSES} scenes for balanced classes, got {n}")
        rng = np.random.default_rng([seed, 0])
        shapes = rng.permutation(np.arange(n) % NUM_SHAPE_CLASSES)
        rows = []
        for idx, shape_class in enumerate(shapes):
            texture_class = self.draw_texture_class(int(shape_class), rng)
            rows.append(ManifestRow(idx=idx, shape_class=int(shape_class), texture_class=texture_class,
                                    seed=int(rng.integers(2 ** 31 - 1))))
        return self._write(root, rows, seed, val_fraction, cue_conflict=False)

    def make_cue_conflict(self, n: int, seed: int, root: str) -> DatasetManifest:
        """
        Writes n scenes whose texture class differs from their shape class to root/cueconflict. Ordered
        (shape, texture) pairs are cycled so that every pair appears equally often up to one
        """
        if NUM_SHAPE_CLASSES < 2:
            raise ContractViolation("cue conflict needs at least two classes")
        rng = np.random.default_rng([seed, 1])
        pairs = [(s, t) for s in range(NUM_SHAPE_CLASSES) for t in range(NUM_SHAPE_CLASSES) if s != t]
        order = np.concatenate([rng.permutation(len(pairs)) for _ in range(-(-n // len(pairs)))])[:n]
        rows = [ManifestRow(idx=idx, shape_class=pairs[p][0], texture_class=pairs[p][1],
                            seed=int(rng.integers(2 ** 31 - 1))) for idx, p in enumerate(order)]
        return self._write(os.path.join(root, FileHelper.CUE_CONFLICT_FOLDER), rows, seed, 0.0, cue_conflict=True)

    def _write(self, root: str, rows: List[ManifestRow], seed: int, val_fraction: float,
               cue_conflict: bool) -> DatasetManifest:
        val_size = SceneDataset.val_count(len(rows), val_fraction)
        manifest = DatasetManifest(count=len(rows), train_size=len(rows) - val_size, val_size=val_size, seed=seed,
                                   resolution=self.resolution,
                                   layout=f"{FileHelper.TRAIN_FOLDER}/<idx>.png, {FileHelper.TRAIN_FOLDER}/<idx>.tpdm, "
                                          f"{FileHelper.MANIFEST_TSV}",
                                   shape_classes=DatasetManifest.shape_vocabulary(),
                                   texture_classes=DatasetManifest.texture_vocabulary(), cue_conflict=cue_conflict,
                                   rows=rows)
        FileHelper.create_folder(os.path.join(root, FileHelper.TRAIN_FOLDER))
        print("Save dataset to", root)
        for row in tqdm(rows, desc="scenes", disable=len(rows) < 32):
            image, depth = self.render(self.make_spec(row.shape_class, row.texture_class, row.seed))
            image_path, depth_path = FileHelper.item_paths(root, row.idx)
            try:
                FileHelper.write_image(image_path, image)
                write_depth(depth_path, depth)
            except OSError as err:
                raise DatasetError(f"{image_path}: {err}") from err
        FileHelper.write_manifest(root, manifest)
        logger.info("wrote %d scenes to %s", len(rows), root)
        return manifest


def make_dataset(n: int, seed: int, root: str, resolution: int = 64, texture_correlation: float = 0.75,
                 camera: Optional[Camera] = None) -> DatasetManifest:
    return SceneGenerator(camera, resolution, texture_correlation).make_dataset(n, seed, root)


def make_cue_conflict(n: int, seed: int, root: str, resolution: int = 64,
                      camera: Optional[Camera] = None) -> DatasetManifest:
    return SceneGenerator(camera, resolution).make_cue_conflict(n, seed, root)


class SceneDataset:
    """
    Read access to a generated dataset directory. Images and depths are cached after the first load
    """

    def __init__(self, root: str, generator: Optional[SceneGenerator] = None):
        self.root = root
        self.manifest = FileHelper.read_manifest(root)
        self.rows = self.manifest.rows
        self.resolution = self.manifest.resolution
        self.generator = generator or SceneGenerator(resolution=self.resolution or 64)
        self._images = {}
        self._depths = {}

    def __len__(self):
        return len(self.rows)

    @staticmethod
    def val_count(n: int, val_fraction: float) -> int:
        if val_fraction <= 0.0 or n < 2:
            return 0
        return min(max(1, int(round(n * val_fraction))), n - 1)

    def image(self, index: int) -> np.ndarray:
        if index not in self._images:
            path, _ = FileHelper.item_paths(self.root, self.rows[index].idx)
            image = FileHelper.read_image(path)
            if self.resolution and image.shape[:2] != (self.resolution, self.resolution):
                raise DatasetError(f"{path}: expected {self.resolution}x{self.resolution}, got {image.shape[:2]}")
            self._images[index] = image
        return self._images[index]

    def depth(self, index: int) -> np.ndarray:
        if index not in self._depths:
            _, path = FileHelper.item_paths(self.root, self.rows[index].idx)
            if not os.path.exists(path):
                raise DatasetError(f"{path}: missing depth file")
            self._depths[index] = read_depth(path)
        return self._depths[index]

    def images(self, indices) -> np.ndarray:
        return np.stack([self.image(int(i)) for i in indices])

    def depths(self, indices) -> np.ndarray:
        return np.stack([self.depth(int(i)) for i in indices])

    def spec(self, index: int) -> SceneSpec:
        row = self.rows[index]
        return self.generator.make_spec(row.shape_class, row.texture_class, row.seed)

    def shape_labels(self, indices=None) -> np.ndarray:
        labels = np.array([row.shape_class for row in self.rows], dtype=np.int64)
        return labels if indices is None else labels[np.asarray(indices, dtype=np.int64)]

    def texture_labels(self, indices=None) -> np.ndarray:
        labels = np.array([row.texture_class for row in self.rows], dtype=np.int64)
        return labels if indices is None else labels[np.asarray(indices, dtype=np.int64)]

    def split(self, val_fraction: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        Train/held-out split seeded by the dataset seed, so every pretraining, training and probing run
        on this dataset holds out the same items
        @return: sorted train indices, sorted held-out indices
        """
        order = np.random.default_rng([self.manifest.seed, 2]).permutation(len(self))
        val_size = SceneDataset.val_count(len(self), val_fraction)
        return np.sort(order[val_size:]), np.sort(order[:val_size])

    @staticmethod
    def subset(indices: np.ndarray, fraction: float, seed: int) -> np.ndarray:
        """
        Seeded selection of floor(fraction * n) items, at least one
        """
        if not 0.0 < fraction <= 1.0:
            raise ContractViolation(f"data fraction must lie in (0, 1], got {fraction}")
        count = max(1, int(np.floor(fraction * len(indices))))
        chosen = np.random.default_rng([seed, 3]).permutation(len(indices))[:count]
        return np.sort(np.asarray(indices)[chosen])
