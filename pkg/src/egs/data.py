"""Dataset ingestion, lossless augmentation and the seeded synthetic cross-view generator.

Directory layout (University-1652 style)::

    root/{train,test}/{drone,satellite}/{class_id}/*.png

Class directory names must be decimal integers; they become location ids.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .equivariant import rotate_image
from .errors import DomainError, ManifestError
from .fsutil import atomic_write_text

log = logging.getLogger(__name__)

VIEWS = ("drone", "satellite")
SPLITS = ("train", "test")


# --- image io -------------------------------------------------------------

def load_png(path) -> np.ndarray:
    """Decode an 8-bit PNG to a (3, H, W) float array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / 255.0)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(image).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


@lru_cache(maxsize=64)
def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    W = np.zeros((n_out, n_in))
    step = n_in / n_out
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        for j in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            W[i, j] = min(hi, j + 1) - max(lo, j)
    return W / W.sum(axis=1, keepdims=True)


def area_resize(image: np.ndarray, side: int) -> np.ndarray:
    """Box-filter resample of a (C, H, W) array to (C, side, side)."""
    C, H, W = image.shape
    if H == side and W == side:
        return image.copy()
    Wy, Wx = _area_weights(H, side), _area_weights(W, side)
    return Wy @ image @ Wx.T


# --- manifests ------------------------------------------------------------

@dataclass
class ClassEntry:
    class_id: int
    images: dict[str, list[Path]]


@dataclass
class DatasetManifest:
    root: Path
    split: str
    views: tuple[str, ...]
    classes: list[ClassEntry] = field(default_factory=list)
    unpaired: list[ClassEntry] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    def images(self, view: str, include_unpaired: bool = False) -> list[tuple[int, Path]]:
        """Flat (class_id, path) list for one view in manifest order."""
        entries = self.classes + (self.unpaired if include_unpaired else [])
        return [(c.class_id, p) for c in entries for p in c.images.get(view, [])]

    def __len__(self):
        return len(self.classes)


def _class_dirs(view_dir: Path) -> dict[int, tuple[bytes, list[Path]]]:
    """class id -> (directory name bytes, sorted png paths)."""
    out = {}
    for d in sorted(view_dir.iterdir(), key=lambda p: p.name.encode()):
        if not d.is_dir():
            continue
        try:
            cid = int(d.name)
        except ValueError:
            raise ManifestError(f"class directory name is not an integer id: {d}") from None
        if cid in out:
            raise ManifestError(f"two directories map to class id {cid} under {view_dir}")
        out[cid] = (d.name.encode(), sorted((p for p in d.iterdir() if p.suffix.lower() == ".png"),
                                            key=lambda p: p.name.encode()))
    return out


def scan_dataset(root, split: str, views=VIEWS) -> DatasetManifest:
    """Index ``root/split/view/class_id/*.png``.

    Classes are paired when every requested view has at least one image; the
    rest are set aside with a warning. Ordering is pure byte-lexicographic.
    """
    root = Path(root)
    if split not in SPLITS:
        raise DomainError(f"split must be one of {SPLITS}, got {split!r}")
    per_view = {}
    for view in views:
        vdir = root / split / view
        if not vdir.is_dir():
            raise ManifestError(f"missing view directory: {vdir}")
        per_view[view] = _class_dirs(vdir)
    manifest = DatasetManifest(root, split, tuple(views))
    names = {cid: name for v in per_view.values() for cid, (name, _) in v.items()}
    for cid in sorted(names, key=lambda c: (names[c], c)):
        images = {view: per_view[view][cid][1] if cid in per_view[view] else [] for view in views}
        entry = ClassEntry(cid, images)
        absent = [v for v in views if not images[v]]
        if absent:
            msg = f"class {cid} has no {'/'.join(absent)} images; excluded from pairs"
            manifest.warnings.append(msg)
            log.warning(msg)
            manifest.unpaired.append(entry)
        else:
            manifest.classes.append(entry)
    return manifest


# --- samples and augmentation --------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    class_id: int
    view: str


def load_sample(path, class_id: int, view: str, side: int) -> Sample:
    """Decode and area-resize to ``side`` (center-cropping non-square images first)."""
    img = load_png(path)
    _, H, W = img.shape
    if H != W:
        s = min(H, W)
        top, left = (H - s) // 2, (W - s) // 2
        img = img[:, top:top + s, left:left + s]
    return Sample(area_resize(img, side), class_id, view)


@dataclass
class AugmentationConfig:
    rotate90: bool = True
    hflip: bool = True
    crop_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.crop_fraction <= 1.0:
            raise DomainError(f"crop fraction must be in (0, 1], got {self.crop_fraction}")

    def crop_side(self, side: int) -> int:
        return max(1, int(round(self.crop_fraction * side)))


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror the last (width) axis."""
    return image[..., ::-1]


def augment(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator) -> Sample:
    """Random crop (then area-resize back), horizontal flip and quarter-turn rotation.

    Flip and rotation are pixel permutations; with every option off and
    ``crop_fraction == 1`` the image is returned unchanged.
    """
    img = sample.image
    side = img.shape[-1]
    crop = cfg.crop_side(side)
    if crop < side:
        top = int(rng.integers(0, side - crop + 1))
        left = int(rng.integers(0, side - crop + 1))
        img = area_resize(img[:, top:top + crop, left:left + crop], side)
    if cfg.hflip and rng.random() < 0.5:
        img = hflip(img)
    if cfg.rotate90:
        img = rotate_image(img, int(rng.integers(0, 4)))
    return Sample(np.ascontiguousarray(img), sample.class_id, sample.view)


# --- synthetic generator --------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    """Knobs for the synthetic cross-view generator.

    ``appearance`` turns on the view-specific perturbations applied to drone
    images: a freshly drawn ground texture (as if imaged at another time),
    a brightness gain and pixel noise. With it off, a drone image is an exact
    crop/resize/rotation of the satellite tile.
    """

    classes: int = 32
    side: int = 64
    blob_range: tuple[int, int] = (6, 12)
    seed: int = 7
    drone_train: int = 4
    drone_test: int = 2
    crop_range: tuple[float, float] = (0.7, 1.0)
    appearance: bool = True
    noise: float = 0.02
    gain_jitter: float = 0.1
    ground_amplitude: float = 0.6
    ground_scales: tuple[int, ...] = (4, 8, 16, 32)

    def __post_init__(self):
        self.blob_range = tuple(self.blob_range)
        self.crop_range = tuple(self.crop_range)
        self.ground_scales = tuple(self.ground_scales)
        if self.classes < 0 or self.side < 4:
            raise DomainError("need classes >= 0 and side >= 4")
        lo, hi = self.crop_range
        if not 0.0 < lo <= hi <= 1.0:
            raise DomainError(f"crop range must satisfy 0 < lo <= hi <= 1, got {self.crop_range}")
        if self.blob_range[0] > self.blob_range[1] or self.blob_range[0] < 0:
            raise DomainError(f"bad blob range {self.blob_range}")


def _smooth_noise(rng, side: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    xs = np.linspace(0, cells, side)
    i0 = np.minimum(np.floor(xs).astype(int), cells - 1)
    t = xs - i0
    t = t * t * (3 - 2 * t)
    rows = coarse[i0] * (1 - t)[:, None] + coarse[i0 + 1] * t[:, None]
    return rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]


def render_ground(rng: np.random.Generator, side: int, amplitude: float, scales) -> np.ndarray:
    """Gray multi-scale value-noise texture, (3, side, side)."""
    texture = np.zeros((side, side))
    for cells in scales:
        texture += _smooth_noise(rng, side, cells) - 0.5
    return np.repeat((0.45 + amplitude * texture)[None], 3, axis=0)


@dataclass
class Scene:
    ground: np.ndarray
    masks: np.ndarray
    colors: np.ndarray

    def compose(self, ground: np.ndarray | None = None) -> np.ndarray:
        img = (self.ground if ground is None else ground).copy()
        for mask, color in zip(self.masks, self.colors):
            img = img * (1 - mask[None]) + color[:, None, None] * mask[None]
        return np.clip(img, 0.0, 1.0)


def render_scene(rng: np.random.Generator, spec: SyntheticSceneSpec) -> Scene:
    """Soft anisotropic colored blobs (the location identity) over a textured ground."""
    side = spec.side
    ground = render_ground(rng, side, spec.ground_amplitude, spec.ground_scales)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    n_blobs = int(rng.integers(spec.blob_range[0], spec.blob_range[1] + 1))
    masks, colors = [], []
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.1, 0.9, 2) * side
        sy, sx = rng.uniform(0.03, 0.1, 2) * side
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        dy, dx = yy - cy, xx - cx
        u, v = c * dy + s * dx, -s * dy + c * dx
        masks.append(np.exp(-0.5 * ((u / sy) ** 2 + (v / sx) ** 2)))
        colors.append(rng.uniform(0.05, 0.95, 3))
    return Scene(ground, np.array(masks).reshape(-1, side, side), np.array(colors).reshape(-1, 3))


def drone_view(scene: Scene, satellite: np.ndarray, rng: np.random.Generator,
               spec: SyntheticSceneSpec) -> tuple[np.ndarray, dict]:
    """Crop + area-resize + quarter turn of the scene, with optional appearance change.

    Without appearance change the source is the quantized ``satellite`` tile
    itself, so undoing the rotation recovers the resized crop pixel for pixel.
    The random stream is consumed identically either way.
    """
    side = satellite.shape[-1]
    ground = render_ground(rng, side, spec.ground_amplitude, spec.ground_scales)
    frac = float(rng.uniform(*spec.crop_range))
    crop = max(1, int(round(frac * side)))
    top = int(rng.integers(0, side - crop + 1))
    left = int(rng.integers(0, side - crop + 1))
    k = int(rng.integers(0, 4))
    gain = float(rng.uniform(1 - spec.gain_jitter, 1 + spec.gain_jitter))
    noise = rng.normal(0.0, 1.0, (3, side, side))
    source = quantize(scene.compose(ground)) / 255.0 if spec.appearance else satellite
    view = quantize(area_resize(source[:, top:top + crop, left:left + crop], side)) / 255.0
    if spec.appearance:
        view = np.clip(view * gain + spec.noise * noise, 0.0, 1.0)
    view = rotate_image(view, k)
    meta = {"crop": [top, left, crop], "rot90": k, "gain": gain if spec.appearance else 1.0}
    return view, meta


def generate_synthetic(spec: SyntheticSceneSpec, out_root) -> DatasetManifest:
    """Write a paired synthetic tree under ``out_root`` and return the train manifest.

    Each class gets one canonical satellite tile (shared by both splits) and
    independent drone variants for train and test. Everything derives from
    ``(seed, class index)`` so identical specs give byte-identical trees.
    """
    out_root = Path(out_root)
    try:
        for split in SPLITS:
            for view in VIEWS:
                (out_root / split / view).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write synthetic dataset under {out_root}: {exc}") from exc
    variants = {}
    for idx in range(spec.classes):
        cid = f"{idx:04d}"
        scene = render_scene(np.random.default_rng([spec.seed, idx, 0]), spec)
        sat = quantize(scene.compose()) / 255.0
        for split, count, stream in (("train", spec.drone_train, 1), ("test", spec.drone_test, 2)):
            save_png(out_root / split / "satellite" / cid / f"{cid}.png", sat)
            rng = np.random.default_rng([spec.seed, idx, stream])
            for j in range(count):
                view, meta = drone_view(scene, sat, rng, spec)
                name = f"{cid}_{j:02d}.png"
                save_png(out_root / split / "drone" / cid / name, view)
                variants[f"{split}/drone/{cid}/{name}"] = meta
    echo = {"spec": asdict(spec), "variants": variants}
    atomic_write_text(out_root / "spec.json", json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return scan_dataset(out_root, "train")
