"""Dataset manifests, dilution sampling, format transforms and the synthetic
bi-temporal scene generator.

On-disk layout is ``<root>/<split>/{A,B,OUT}/<name>.png`` with A the first
acquisition, B the second and OUT the binary change mask ({0, 255}).
"""
import json
import logging
import random
from dataclasses import asdict, dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageFilter

from .exceptions import ConfigurationError, DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
SIDECAR_NAME = "dilution.json"


@dataclass(frozen=True)
class Entry:
    t1_path: Path
    t2_path: Path
    gt_path: Path

    @property
    def name(self):
        return self.t1_path.name


@dataclass(frozen=True)
class DatasetManifest:
    root_path: Path
    split: str
    entries: tuple
    patch_size: int

    def __len__(self):
        return len(self.entries)

    @property
    def names(self):
        return [e.name for e in self.entries]

    def subset(self, names):
        keep = set(names)
        return replace(self, entries=tuple(e for e in self.entries if e.name in keep))


@dataclass(frozen=True)
class DilutionSpec:
    ratio: float
    seed: int = 0
    preserve_test: bool = True

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ConfigurationError(f"dilution ratio must lie in (0, 1], got {self.ratio}")


def _list_images(directory):
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_manifest(root, split, sidecar=None):
    """Index ``<root>/<split>`` and validate every (T1, T2, GT) triple.

    If ``sidecar`` is given (or ``dilution.json`` sits in the split directory
    and ``sidecar`` is True) only the basenames it lists are kept.
    """
    if split not in SPLITS:
        raise ConfigurationError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root)
    split_dir = root / split
    dirs = {k: split_dir / k for k in ("A", "B", "OUT")}
    for key, d in dirs.items():
        if not d.is_dir():
            raise ConfigurationError(f"missing directory {d} ({key})")

    entries = []
    size = None
    for t1 in _list_images(dirs["A"]):
        t2 = dirs["B"] / t1.name
        gt = dirs["OUT"] / t1.name
        for p, label in ((t2, "T2 image"), (gt, "GT mask")):
            if not p.exists():
                raise DataError(f"entry {t1.name}: {label} missing ({p})")
        sizes = {Image.open(p).size for p in (t1, t2, gt)}
        if len(sizes) != 1:
            raise DataError(f"entry {t1.name}: T1/T2/GT sizes differ {sorted(sizes)}")
        (w, h), = sizes
        if w != h:
            raise DataError(f"entry {t1.name}: patches must be square, got {w}x{h}")
        if size is None:
            size = w
        elif w != size:
            raise DataError(f"entry {t1.name}: patch size {w} differs from {size}")
        entries.append(Entry(t1, t2, gt))

    manifest = DatasetManifest(root, split, tuple(entries), size or 0)
    if sidecar is True:
        candidate = split_dir / SIDECAR_NAME
        sidecar = candidate if candidate.exists() else None
    if sidecar:
        info = json.loads(Path(sidecar).read_text())
        missing = set(info["selected"]) - set(manifest.names)
        if missing:
            raise DataError(f"dilution sidecar lists unknown entries: {sorted(missing)[:5]}")
        manifest = manifest.subset(info["selected"])
    return manifest


def load_split_dir(path, sidecar=None):
    """``load_manifest`` for a path that already points at ``<root>/<split>``."""
    path = Path(path)
    return load_manifest(path.parent, path.name, sidecar=sidecar)


def round_half_up(x):
    return int(Decimal(str(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def dilution_count(n, ratio):
    return round_half_up(Decimal(n) * Decimal(str(ratio)))


def dilute(manifest, spec):
    """Seeded shuffle of the lexicographic entries, then a prefix take.

    Because the permutation depends only on the seed, smaller ratios select a
    subset of larger ones.
    """
    if manifest.split == "test" and spec.ratio != 1.0:
        raise ConfigurationError("the test split is never diluted")
    if spec.ratio == 1.0:
        return manifest
    entries = list(manifest.entries)
    random.Random(spec.seed).shuffle(entries)
    keep = entries[: dilution_count(len(entries), spec.ratio)]
    keep.sort(key=lambda e: e.name)
    return replace(manifest, entries=tuple(keep))


def write_dilution_sidecar(manifest, spec, path=None):
    path = Path(path) if path else manifest.root_path / manifest.split / SIDECAR_NAME
    payload = {"split": manifest.split, "ratio": spec.ratio, "seed": spec.seed,
               "selected": manifest.names}
    path.write_text(json.dumps(payload, indent=2))
    return path


# -- tensors -----------------------------------------------------------------

def format_transform(image):
    """uint8 HxWx3 image -> float32 3xHxW tensor scaled to [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected an HxWx3 image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise DataError(f"expected 8-bit image data, got {arr.dtype}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float().div_(255.0)


def to_uint8_image(tensor):
    """Inverse of ``format_transform`` up to quantization."""
    arr = tensor.detach().cpu().clamp(0, 1).mul(255).round().byte().numpy()
    return arr.transpose(1, 2, 0)


def read_image(path):
    return format_transform(np.asarray(Image.open(path).convert("RGB")))


def read_mask(path):
    arr = np.asarray(Image.open(path).convert("L"))
    return torch.from_numpy((arr > 127).astype(np.float32))[None]


def load_pairs(manifest):
    """Stack a manifest into (t1, t2, gt) tensors of shape Nx3xHxW / Nx1xHxW."""
    if not manifest.entries:
        raise DataError(f"manifest for split {manifest.split!r} is empty")
    t1 = torch.stack([read_image(e.t1_path) for e in manifest.entries])
    t2 = torch.stack([read_image(e.t2_path) for e in manifest.entries])
    gt = torch.stack([read_mask(e.gt_path) for e in manifest.entries])
    return t1, t2, gt


def load_image_dir(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigurationError(f"missing directory {directory}")
    paths = _list_images(directory)
    if not paths:
        raise DataError(f"no images in {directory}")
    return torch.stack([read_image(p) for p in paths]), [p.name for p in paths]


def save_mask(mask, path):
    arr = (np.asarray(mask).astype(bool).astype(np.uint8) * 255)
    Image.fromarray(arr).save(path)


# -- synthetic scenes --------------------------------------------------------

@dataclass(frozen=True)
class StyleShift:
    gain: tuple = (1.0, 1.0, 1.0)
    bias: tuple = (0.0, 0.0, 0.0)
    blur_radius: int = 0

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def random(cls, rng):
        return cls(
            gain=tuple(float(g) for g in rng.uniform(0.7, 1.3, size=3)),
            bias=tuple(float(b) for b in rng.uniform(-0.1, 0.1, size=3)),
            blur_radius=int(rng.integers(0, 2)),
        )

    @property
    def is_identity(self):
        return self == StyleShift.identity()

    def apply(self, image):
        """float HxWx3 in [0,1] -> uint8 HxWx3."""
        out = image * np.asarray(self.gain) + np.asarray(self.bias)
        out = _quantize(out)
        if self.blur_radius:
            out = np.asarray(Image.fromarray(out).filter(ImageFilter.GaussianBlur(self.blur_radius)))
        return out


@dataclass(frozen=True)
class SynthSceneConfig:
    canvas_size: int = 64
    num_objects: tuple = (4, 8)
    change_fraction: float = 0.5
    # None draws one domain-wide shift from the seed
    style_shift: StyleShift = None
    seed: int = 0
    split_sizes: dict = field(default_factory=lambda: {"train": 140, "val": 40, "test": 20})

    def __post_init__(self):
        lo, hi = self.num_objects
        if not 0 <= lo <= hi:
            raise ConfigurationError(f"bad num_objects range {self.num_objects}")
        if not 0 <= self.change_fraction <= 1:
            raise ConfigurationError("change_fraction must lie in [0, 1]")
        if self.canvas_size < 16:
            raise ConfigurationError("canvas_size must be at least 16")
        unknown = set(self.split_sizes) - set(SPLITS)
        if unknown:
            raise ConfigurationError(f"unknown splits {sorted(unknown)}")

    def resolved_style(self):
        if self.style_shift is not None:
            return self.style_shift
        return StyleShift.random(np.random.default_rng([self.seed, 7919]))


@dataclass
class SynthScene:
    name: str
    split: str
    t1: np.ndarray
    t2: np.ndarray
    gt: np.ndarray
    membership_t1: np.ndarray
    membership_t2: np.ndarray
    num_objects: int
    toggled: list


def _quantize(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _background(rng, size):
    base = rng.uniform(0.15, 0.45, size=3)
    coarse = rng.normal(0.0, 0.06, size=(max(size // 8, 2),) * 2 + (3,)).astype(np.float32)
    field_ = np.stack([
        np.asarray(Image.fromarray(coarse[..., c], mode="F").resize((size, size), Image.BILINEAR))
        for c in range(3)
    ], axis=-1)
    fine = rng.normal(0.0, 0.02, size=(size, size, 3))
    return base + field_ + fine


def _object_mask(rng, size):
    """Random rectangle or ellipse; returns (mask, bbox) with a 1 px margin."""
    lo, hi = max(size // 10, 3), max(size // 4, 4)
    h, w = rng.integers(lo, hi + 1, size=2)
    y0 = int(rng.integers(1, size - h))
    x0 = int(rng.integers(1, size - w))
    mask = np.zeros((size, size), dtype=bool)
    if rng.random() < 0.5:
        mask[y0:y0 + h, x0:x0 + w] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2, (w - 1) / 2
        mask[y0:y0 + h, x0:x0 + w] = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    return mask, (y0 - 1, x0 - 1, y0 + h + 1, x0 + w + 1)


def _place_objects(rng, size, n, max_tries=200):
    occupied = np.zeros((size, size), dtype=bool)
    masks = []
    for _ in range(n):
        for _ in range(max_tries):
            mask, (y0, x0, y1, x1) = _object_mask(rng, size)
            if not occupied[max(y0, 0):y1, max(x0, 0):x1].any():
                occupied[max(y0, 0):y1, max(x0, 0):x1] = True
                masks.append(mask)
                break
    return masks


def render_scene(config, split, index, style=None):
    """Render one scene; a pure function of (config, split, index)."""
    style = style if style is not None else config.resolved_style()
    size = config.canvas_size
    rng = np.random.default_rng([config.seed, SPLITS.index(split), index])
    background = _background(rng, size)

    lo, hi = config.num_objects
    masks = _place_objects(rng, size, int(rng.integers(lo, hi + 1)))
    if len(masks) < lo:
        logger.warning("scene %s/%d: placed %d of >= %d objects", split, index, len(masks), lo)
    colors = rng.uniform(0.55, 0.95, size=(len(masks), 3))

    n_toggle = round_half_up(config.change_fraction * len(masks))
    toggled = sorted(int(i) for i in rng.choice(len(masks), size=n_toggle, replace=False))
    # toggled objects exist in exactly one acquisition
    present_in = {i: int(rng.integers(1, 3)) for i in toggled}

    img1, img2 = background.copy(), background.copy()
    mem1 = np.zeros((size, size), dtype=bool)
    mem2 = np.zeros((size, size), dtype=bool)
    for i, (mask, color) in enumerate(zip(masks, colors)):
        if present_in.get(i, 1) == 1:
            img1[mask] = color
            mem1 |= mask
        if present_in.get(i, 2) == 2:
            img2[mask] = color
            mem2 |= mask

    t1 = _quantize(img1)
    t2 = style.apply(img2)
    return SynthScene(
        name=f"{index:04d}.png", split=split, t1=t1, t2=t2, gt=mem1 ^ mem2,
        membership_t1=mem1, membership_t2=mem2, num_objects=len(masks), toggled=toggled,
    )


def iter_scenes(config):
    style = config.resolved_style()
    for split in SPLITS:
        for index in range(config.split_sizes.get(split, 0)):
            yield render_scene(config, split, index, style=style)


def synth_generate(config, out_root):
    """Write the synthetic dataset; returns ``{split: DatasetManifest}``.

    ``synth_log.json`` at the root records the style shift and, per scene,
    the object count and the indices of toggled objects.
    """
    out_root = Path(out_root)
    try:
        for split, n in config.split_sizes.items():
            if n:
                for sub in ("A", "B", "OUT"):
                    (out_root / split / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write synthetic dataset to {out_root}: {exc}") from exc

    log = {"config": _jsonable(asdict(config)), "style": asdict(config.resolved_style()), "scenes": []}
    for scene in iter_scenes(config):
        d = out_root / scene.split
        Image.fromarray(scene.t1).save(d / "A" / scene.name)
        Image.fromarray(scene.t2).save(d / "B" / scene.name)
        save_mask(scene.gt, d / "OUT" / scene.name)
        log["scenes"].append({"split": scene.split, "name": scene.name,
                              "num_objects": scene.num_objects, "toggled": scene.toggled})
    (out_root / "synth_log.json").write_text(json.dumps(log, indent=1))
    return {s: load_manifest(out_root, s) for s, n in config.split_sizes.items() if n}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
