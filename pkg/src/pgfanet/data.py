"""Datasets: synthetic histology-like generator, directory loader, patches, augmentation.

Directory layout (shared by synthetic and converted real data)::

    <root>/images/<id>.png   8-bit RGB
    <root>/masks/<id>.png    16-bit single-channel instance ids (0 = background)
    <root>/meta.json         {"mode", "seed", "generator_version", "unlabeled": [ids]}

Images listed under ``unlabeled`` may omit their mask.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

BACKGROUND, INSIDE, CONTOUR = 0, 1, 2


class DatasetError(Exception):
    pass


@dataclass
class Sample:
    image: np.ndarray                      # (3, H, W) float32 in [0, 1]
    instance_map: Optional[np.ndarray] = None
    class_map: Optional[np.ndarray] = None
    is_labeled: bool = True
    name: str = ""


def relabel_sequential(inst: np.ndarray) -> np.ndarray:
    """Renumber instance ids to 1..K keeping their relative order."""
    ids = np.unique(inst)
    ids = ids[ids > 0]
    lut = np.zeros(int(inst.max()) + 1 if inst.size else 1, dtype=np.int32)
    lut[ids] = np.arange(1, len(ids) + 1, dtype=np.int32)
    return lut[inst]


def class_map_from_instances(inst: np.ndarray, boundary: bool = True) -> np.ndarray:
    """Foreground/background map, optionally marking contact contours as class 2.

    A pixel is a contour pixel when one of its 4-neighbours belongs to a
    different instance.
    """
    inst = np.asarray(inst)
    cls = (inst > 0).astype(np.int64)
    if not boundary:
        return cls
    padded = np.pad(inst, 1, mode="edge")
    center = padded[1:-1, 1:-1]
    touch = np.zeros(inst.shape, dtype=bool)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dy:1 + dy + inst.shape[0], 1 + dx:1 + dx + inst.shape[1]]
        touch |= (nb > 0) & (nb != center)
    cls[(inst > 0) & touch] = CONTOUR
    return cls


# -- synthetic generation -------------------------------------------------------

@dataclass
class SynthConfig:
    mode: str = "nuclei"
    image_size: int = 64
    num_images: int = 8
    instances_per_image: Tuple[int, int] = (6, 12)
    radius_range: Tuple[float, float] = (3.0, 6.0)
    texture_noise_std: float = 0.04
    overlap_allowance: float = 0.15
    contrast: float = 0.35
    seed: int = 0
    unlabeled_fraction: float = 0.0
    # per-image colour/contrast variation, mimicking stain differences between slides
    stain_jitter: float = 0.0

    def validate(self) -> "SynthConfig":
        if self.mode not in ("nuclei", "gland"):
            raise ValueError(f"mode must be 'nuclei' or 'gland', got {self.mode!r}")
        lo, hi = self.instances_per_image
        if not 0 < lo <= hi:
            raise ValueError("instances_per_image must be positive and ordered")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise ValueError("radius_range must be positive and ordered")
        if self.image_size <= 0 or self.num_images <= 0:
            raise ValueError("image_size and num_images must be positive")
        if not 0 <= self.stain_jitter < 1:
            raise ValueError("stain_jitter must be in [0, 1)")
        if self.texture_noise_std < 0 or not 0 <= self.overlap_allowance < 1:
            raise ValueError("texture_noise_std >= 0 and overlap_allowance in [0, 1) required")
        return self

    @classmethod
    def gland(cls, **kw) -> "SynthConfig":
        base = dict(mode="gland", image_size=128, instances_per_image=(2, 5),
                    radius_range=(12.0, 26.0), overlap_allowance=0.0, contrast=0.3)
        base.update(kw)
        return cls(**base)


def _ellipse(size, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    y, x = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (x * c + y * s) / rx
    v = (-x * s + y * c) / ry
    return u * u + v * v <= 1.0


def _smooth_noise(rng, size, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    return n / (n.std() + 1e-8)


def _place_instances(cfg: SynthConfig, rng: np.random.Generator):
    size = cfg.image_size
    inst = np.zeros((size, size), dtype=np.int32)
    target = int(rng.integers(cfg.instances_per_image[0], cfg.instances_per_image[1] + 1))
    shapes = []
    attempts = 0
    while len(shapes) < target:
        attempts += 1
        if attempts > 200 * target:
            raise ValueError(f"could not place {target} instances in a {size}px image; "
                             "lower instances_per_image or radius_range")
        ry = rng.uniform(*cfg.radius_range)
        rx = ry * rng.uniform(0.6, 1.0) if cfg.mode == "nuclei" else ry * rng.uniform(0.7, 1.0)
        theta = rng.uniform(0, math.pi)
        cy, cx = rng.uniform(0, size, 2)
        m = _ellipse(size, cy, cx, ry, rx, theta)
        area = int(m.sum())
        if area < 6:
            continue
        if (m & (inst > 0)).sum() > cfg.overlap_allowance * area:
            continue
        # keep every earlier instance clearly visible after occlusion
        trial = np.where(m, len(shapes) + 1, inst)
        ok = True
        for k, old in enumerate(shapes, start=1):
            visible = trial == k
            if visible.sum() < 0.6 * old[1]:
                ok = False
                break
            if ndimage.label(visible)[1] != 1:
                ok = False
                break
        if not ok:
            continue
        inst = trial
        shapes.append((m, area, (cy, cx, ry, rx, theta)))
    return inst, shapes


def _render(cfg: SynthConfig, rng: np.random.Generator, inst: np.ndarray, shapes) -> np.ndarray:
    size = cfg.image_size
    bg = np.array([0.86, 0.66, 0.80])
    contrast = cfg.contrast
    if cfg.stain_jitter:
        j = cfg.stain_jitter
        bg = np.clip(bg + rng.uniform(-j, j, 3) * 0.5, 0.3, 1.0)
        contrast = contrast * rng.uniform(1 - j, 1 + j)
    texture = _smooth_noise(rng, size, 3.0)
    img = bg[:, None, None] + 0.05 * texture[None] * np.array([1.0, 0.8, 0.6])[:, None, None]
    if cfg.mode == "nuclei":
        fg = bg - contrast * np.array([1.1, 1.3, 0.6])
        for k in range(1, len(shapes) + 1):
            m = (inst == k).astype(np.float64)
            alpha = ndimage.gaussian_filter(m, 0.7)
            shade = fg[:, None, None] * rng.uniform(0.85, 1.15) + 0.05 * _smooth_noise(rng, size, 1.0)[None]
            img = img * (1 - alpha) + shade * alpha
    else:
        epi = bg - contrast * np.array([1.0, 1.4, 0.7])
        lumen = np.array([0.95, 0.92, 0.95])
        for k, (_, _, (cy, cx, ry, rx, theta)) in enumerate(shapes, start=1):
            m = (inst == k)
            ratio = rng.uniform(0.35, 0.6)
            inner = _ellipse(size, cy, cx, ry * ratio, rx * ratio, theta) & m
            a_epi = ndimage.gaussian_filter(m.astype(np.float64), 1.0)
            a_lum = ndimage.gaussian_filter(inner.astype(np.float64), 1.0)
            shade = epi[:, None, None] * rng.uniform(0.9, 1.1) + 0.06 * _smooth_noise(rng, size, 1.5)[None]
            img = img * (1 - a_epi) + shade * a_epi
            img = img * (1 - a_lum) + lumen[:, None, None] * a_lum
    img = img + cfg.texture_noise_std * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_sample(cfg: SynthConfig, rng: np.random.Generator):
    """One (image uint8 HxWx3, instance map uint16) pair."""
    inst, shapes = _place_instances(cfg, rng)
    img = _render(cfg, rng, inst, shapes)
    rgb = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
    return rgb, relabel_sequential(inst).astype(np.uint16)


def _write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def synth_generate(cfg: SynthConfig, out_dir) -> Path:
    """Write a synthetic dataset; identical seeds give byte-identical files."""
    cfg.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    rng = np.random.default_rng(cfg.seed)
    names = [f"{i:04d}" for i in range(cfg.num_images)]
    n_unlab = int(round(cfg.unlabeled_fraction * cfg.num_images))
    unlabeled = names[len(names) - n_unlab:] if n_unlab else []
    for name in names:
        rgb, inst = synth_sample(cfg, rng)
        _write_png(out / "images" / f"{name}.png", rgb)
        if name not in unlabeled:
            _write_png(out / "masks" / f"{name}.png", inst)
    meta = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "generator_version": GENERATOR_VERSION,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "unlabeled": unlabeled,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


# -- loading -------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    return arr.transpose(2, 0, 1).copy()


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im).astype(np.int32)
    except Exception as e:
        raise DatasetError(f"cannot read mask {path}: {e}") from e
    if arr.ndim != 2:
        raise DatasetError(f"mask {path} must be single-channel, got shape {arr.shape}")
    return arr


class SegDataset:
    """Lazily indexed dataset over the documented directory layout."""

    def __init__(self, root, boundary: bool = True, names: Optional[Sequence[str]] = None):
        self.root = Path(root)
        self.boundary = boundary
        meta_path = self.root / "meta.json"
        self.meta = {}
        if meta_path.exists():
            try:
                self.meta = json.loads(meta_path.read_text())
            except json.JSONDecodeError as e:
                raise DatasetError(f"corrupt metadata {meta_path}: {e}") from e
        img_dir, mask_dir = self.root / "images", self.root / "masks"
        if not img_dir.is_dir():
            raise DatasetError(f"missing image directory {img_dir}")
        unlabeled = set(self.meta.get("unlabeled", []))
        found = []
        for p in sorted(img_dir.iterdir()):
            if p.suffix.lower() != ".png" or not p.is_file():
                log.warning("ignoring unrelated file %s", p)
                continue
            found.append(p.stem)
        if mask_dir.is_dir():
            for p in sorted(mask_dir.iterdir()):
                if p.suffix.lower() != ".png" or p.stem not in found:
                    log.warning("ignoring unrelated file %s", p)
        for name in found:
            if name not in unlabeled and not (mask_dir / f"{name}.png").exists():
                raise DatasetError(f"missing mask for labeled image {img_dir / (name + '.png')}")
        self.names = list(found if names is None else names)
        self.unlabeled = unlabeled
        self.mode = self.meta.get("mode", "nuclei")

    def __len__(self):
        return len(self.names)

    def subset(self, indices: Sequence[int]) -> "SegDataset":
        sub = object.__new__(SegDataset)
        sub.__dict__.update(self.__dict__)
        sub.names = [self.names[i] for i in indices]
        return sub

    def __getitem__(self, i: int) -> Sample:
        name = self.names[i]
        image = read_image(self.root / "images" / f"{name}.png")
        mask_path = self.root / "masks" / f"{name}.png"
        if name in self.unlabeled or not mask_path.exists():
            return Sample(image=image, is_labeled=False, name=name)
        inst = read_mask(mask_path)
        if inst.shape != image.shape[1:]:
            raise DatasetError(f"mask {mask_path} shape {inst.shape} != image shape {image.shape[1:]}")
        return Sample(image=image, instance_map=inst,
                      class_map=class_map_from_instances(inst, self.boundary), name=name)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_dataset(root, boundary: bool = True) -> SegDataset:
    return SegDataset(root, boundary=boundary)


# -- patches --------------------------------------------------------------------

def window_starts(length: int, patch: int, stride: int) -> List[int]:
    if patch > length:
        raise ValueError(f"patch {patch} larger than image extent {length}")
    if not 0 < stride <= patch:
        raise ValueError(f"stride must be in (0, patch]; got {stride} with patch {patch}, which leaves gaps")
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] + patch < length:
        starts.append(length - patch)
    return starts


def extract_patches(sample: Sample, patch: int, stride: Optional[int] = None) -> List[Sample]:
    """Row-major sliding-window crops; the last window snaps to the image edge."""
    stride = stride or patch
    h, w = sample.image.shape[1:]
    out = []
    for y in window_starts(h, patch, stride):
        for x in window_starts(w, patch, stride):
            sl = (slice(y, y + patch), slice(x, x + patch))
            inst = cls = None
            if sample.instance_map is not None:
                inst = relabel_sequential(sample.instance_map[sl])
                cls = sample.class_map[sl].copy() if sample.class_map is not None else None
            out.append(Sample(image=sample.image[(slice(None),) + sl].copy(), instance_map=inst,
                              class_map=cls, is_labeled=sample.is_labeled,
                              name=f"{sample.name}@{y},{x}"))
    return out


# -- augmentation -------------------------------------------------------------------

@dataclass
class AugmentParams:
    scale: float = 1.0
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0
    angle: float = 0.0          # degrees, free rotation
    shear: float = 0.0          # radians

    @property
    def is_identity(self) -> bool:
        return (self.scale == 1.0 and not self.hflip and not self.vflip and self.rot90 % 4 == 0
                and self.angle == 0.0 and self.shear == 0.0)


@dataclass
class AugmentConfig:
    scale_range: Tuple[float, float] = (0.8, 1.2)
    flip: bool = True
    rot90: bool = True
    free_rotation: bool = False
    max_angle: float = 30.0
    max_shear: float = 0.1
    p_affine: float = 0.5


def draw_params(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> AugmentParams:
    p = AugmentParams()
    if cfg.flip:
        p.hflip = bool(rng.random() < 0.5)
        p.vflip = bool(rng.random() < 0.5)
    if cfg.rot90:
        p.rot90 = int(rng.integers(0, 4))
    if rng.random() < cfg.p_affine:
        p.scale = float(rng.uniform(*cfg.scale_range))
        p.shear = float(rng.uniform(-cfg.max_shear, cfg.max_shear))
        if cfg.free_rotation:
            p.angle = float(rng.uniform(-cfg.max_angle, cfg.max_angle))
    return p


def _warp(arr: np.ndarray, matrix: np.ndarray, order: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - matrix @ center
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="reflect"
                                        if order else "constant", cval=0)
    return np.stack([_warp(c, matrix, order) for c in arr])


def apply_augment(sample: Sample, p: AugmentParams) -> Sample:
    """Apply one geometric transform to the image and (nearest-neighbour) to the maps."""
    if p.is_identity:
        return sample
    arrays = {"image": sample.image, "instance_map": sample.instance_map, "class_map": sample.class_map}

    def geom(a, order):
        if a is None:
            return None
        if p.hflip:
            a = a[..., :, ::-1]
        if p.vflip:
            a = a[..., ::-1, :]
        if p.rot90 % 4:
            a = np.rot90(a, p.rot90 % 4, axes=(-2, -1))
        if p.scale != 1.0 or p.angle != 0.0 or p.shear != 0.0:
            t = math.radians(p.angle)
            rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
            sh = np.array([[1.0, p.shear], [0.0, 1.0]])
            # affine_transform maps output coords to input coords
            a = _warp(np.ascontiguousarray(a), np.linalg.inv(p.scale * rot @ sh), order)
        return np.ascontiguousarray(a)

    image = np.clip(geom(arrays["image"], 1), 0.0, 1.0).astype(np.float32)
    inst = geom(arrays["instance_map"], 0)
    cls = geom(arrays["class_map"], 0)
    if inst is not None:
        inst = relabel_sequential(inst)
    return replace(sample, image=image, instance_map=inst, class_map=cls)


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> Sample:
    return apply_augment(sample, draw_params(rng, cfg))


# -- normalisation / splitting -----------------------------------------------------------

def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    if np.any(std == 0):
        raise ValueError("std must be non-zero")
    mean = np.asarray(mean, dtype=np.float64)
    return ((image - mean[:, None, None]) / std[:, None, None]).astype(np.float32)


def denormalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return (image * std[:, None, None] + mean[:, None, None]).astype(np.float32)


def num_labeled(total: int, fraction: float) -> int:
    return max(1, round(fraction * total))


def split_labeled(dataset, fraction: float, seed: int = 0) -> Tuple[List[int], List[int]]:
    """Image-level labeled/unlabeled split; returns sorted index lists."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = num_labeled(n, fraction)
    perm = np.random.default_rng(seed).permutation(n)
    return sorted(int(i) for i in perm[:k]), sorted(int(i) for i in perm[k:])
