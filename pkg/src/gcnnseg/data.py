"""Synthetic segmentation task, tissue-patch selection and dataset manifests."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import groups as G
from .model import is_valid_size, nearest_valid_size
from .train import Dataset

SPLITS = ("train", "val", "test")

# Pentomino cell layouts.  The foreground ("tumour") shape is the chiral L;
# distractors have the same cell count and texture, so only shape separates them.
SHAPES = {
    "L": [(0, 0), (1, 0), (2, 0), (3, 0), (3, 1)],
    "T": [(0, 0), (0, 1), (0, 2), (1, 1), (2, 1)],
    "U": [(0, 0), (0, 2), (1, 0), (1, 1), (1, 2)],
    "V": [(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)],
    "I": [(0, 0), (1, 0), (2, 0), (3, 0), (4, 0)],
    "P": [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0)],
    "X": [(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)],
}
FOREGROUND = ("L",)
# V and P are left out: V is a sub-pattern of L's corner and P hides it, which
# stalls the planar baseline without teaching anything about symmetry.
DISTRACTORS = ("I", "T", "U", "X")

TISSUE_RGB = np.array([0.90, 0.72, 0.85])
NUCLEUS_RGB = np.array([0.42, 0.22, 0.55])


class PatchExhaustionError(RuntimeError):
    def __init__(self, wanted: str, draws: int, counts: dict):
        super().__init__(f"no qualifying {wanted} patch after {draws} draws (seen: {counts})")
        self.counts = counts


@dataclass(frozen=True)
class SyntheticTaskConfig:
    image_size: int = 97
    shapes_per_image: int = 6
    cell_size: int = 3
    tumor_prior: float = 0.5
    noise: float = 0.08
    num_images: int = 100
    split_ratio: tuple[int, int, int] = (8, 1, 1)
    model_depth: int = 4
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskConfig":
        d = dict(d)
        if "split_ratio" in d:
            d["split_ratio"] = tuple(d["split_ratio"])
        return cls(**d)


@dataclass
class SyntheticData:
    images: np.ndarray  # uint8 [N, H, W, 3]
    masks: np.ndarray  # uint8 [N, H, W] in {0, 1}
    splits: list[str]
    shape_labels: list[list[int]] = field(default_factory=list)

    def split(self, name: str) -> Dataset:
        idx = [i for i, s in enumerate(self.splits) if s == name]
        return Dataset(to_model_input(self.images[idx]), self.masks[idx].astype(np.int64))


def to_model_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 ``[N, H, W, 3]`` -> centred ``[N, 3, H, W]`` floats."""
    x = np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2) / 255.0
    return ((x - 0.5) * 4.0).astype(dtype)


def _cells(name: str, g: G.GroupElement) -> np.ndarray:
    cells = np.array(SHAPES[name])
    moved = cells @ G.action_matrix(g).T
    return moved - moved.min(axis=0)


def split_assignment(n: int, ratio=(8, 1, 1), seed: int = 0) -> list[str]:
    ratio = tuple(ratio)
    if len(ratio) != 3 or min(ratio) < 0 or sum(ratio) == 0:
        raise ValueError(f"split ratio must be three non-negative integers, got {ratio}")
    counts = [n * r // sum(ratio) for r in ratio]
    counts[0] += n - sum(counts)
    labels = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
    order = np.random.default_rng([seed, 7]).permutation(n)
    out = [""] * n
    for pos, i in enumerate(order):
        out[i] = labels[pos]
    return out


def generate_synthetic(config: SyntheticTaskConfig) -> SyntheticData:
    """Noisy tissue background with non-touching pentominoes at uniformly random
    roto-reflections; the mask marks pixels of the foreground shape class."""
    if not is_valid_size(config.image_size, config.model_depth):
        warnings.warn(
            f"image size {config.image_size} is not valid for depth {config.model_depth}; "
            f"nearest valid size is {nearest_valid_size(config.image_size, config.model_depth)}",
            stacklevel=2,
        )
    n, cs = config.image_size, config.cell_size
    elems = G.P4M.elements
    images = np.empty((config.num_images, n, n, 3), dtype=np.uint8)
    masks = np.zeros((config.num_images, n, n), dtype=np.uint8)
    labels = []
    for idx in range(config.num_images):
        rng = np.random.default_rng([config.seed, idx])
        occupied = np.zeros((n, n), dtype=bool)
        nucleus = np.zeros((n, n), dtype=bool)
        placed = []
        for _ in range(config.shapes_per_image):
            tumour = rng.random() < config.tumor_prior
            name = FOREGROUND[0] if tumour else DISTRACTORS[rng.integers(len(DISTRACTORS))]
            cells = _cells(name, elems[rng.integers(len(elems))]) * cs
            ext = cells.max(axis=0) + cs
            for _attempt in range(50):
                r0 = rng.integers(0, n - ext[0] + 1)
                c0 = rng.integers(0, n - ext[1] + 1)
                shape = np.zeros((n, n), dtype=bool)
                for a, b in cells:
                    shape[r0 + a : r0 + a + cs, c0 + b : c0 + b + cs] = True
                # one-pixel gap keeps shapes from touching
                halo = np.zeros_like(shape)
                halo[max(r0 - 1, 0) : r0 + ext[0] + 1, max(c0 - 1, 0) : c0 + ext[1] + 1] = True
                if not (occupied & halo).any():
                    break
            else:
                continue
            occupied |= shape
            nucleus |= shape
            if tumour:
                masks[idx][shape] = 1
            placed.append(int(tumour))
        base = np.where(nucleus[..., None], NUCLEUS_RGB, TISSUE_RGB)
        img = base + config.noise * rng.standard_normal((n, n, 3))
        images[idx] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        labels.append(placed)
    splits = split_assignment(config.num_images, config.split_ratio, config.seed)
    return SyntheticData(images, masks, splits, labels)


# --------------------------------------------------------------------------
# tissue selection


@dataclass(frozen=True)
class TissueFilterConfig:
    saturation_threshold: float = 0.07
    value_threshold: float = 0.1
    blur_sigma: float = 2.0
    blur_truncate: float = 4.0


def saturation_value(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """HSV saturation and value in [0, 1] of an 8-bit RGB image."""
    x = np.asarray(rgb, dtype=np.float64) / 255.0
    mx, mn = x.max(axis=-1), x.min(axis=-1)
    sat = np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)
    return sat, mx


def tissue_filter(patch: np.ndarray, config: TissueFilterConfig = TissueFilterConfig()) -> bool:
    """Keep a patch when its blurred saturation and value both exceed the thresholds somewhere."""
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[-1] != 3:
        raise ValueError(f"expected an RGB patch [H, W, 3], got {patch.shape}")
    if patch.dtype != np.uint8:
        raise ValueError(f"expected 8-bit RGB, got {patch.dtype}")
    sat, val = saturation_value(patch)
    blur = dict(sigma=config.blur_sigma, truncate=config.blur_truncate, mode="reflect")
    sat, val = gaussian_filter(sat, **blur), gaussian_filter(val, **blur)
    return bool(sat.max() > config.saturation_threshold and val.max() > config.value_threshold)


@dataclass
class Patch:
    image: np.ndarray
    mask: np.ndarray
    tumor: bool
    origin: tuple[int, int]


def patch_is_tumor(mask: np.ndarray, rule: str = "any") -> bool:
    if rule == "any":
        return bool((mask > 0).any())
    if rule == "center":
        return bool(mask[mask.shape[0] // 2, mask.shape[1] // 2] > 0)
    raise ValueError(f"unknown labelling rule {rule!r}")


def extract_patches(
    image: np.ndarray,
    mask: np.ndarray,
    patch_size: int = 97,
    n_patches: int = 1,
    seed: int = 0,
    sampler: str = "balanced",
    max_draws: int = 2000,
    label_rule: str = "any",
    filter_config: TissueFilterConfig = TissueFilterConfig(),
) -> Iterator[Patch]:
    """Uniformly placed tissue patches.

    ``sampler="balanced"`` picks the wanted class (tumour / non-tumour) with
    probability 1/2 per patch and redraws positions until one matches;
    ``"uniform"`` accepts any tissue patch.
    """
    h, w = mask.shape
    if image.shape[:2] != (h, w):
        raise ValueError("image and mask sizes differ")
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {h}x{w} smaller than patch size {patch_size}")
    if sampler not in ("balanced", "uniform"):
        raise ValueError(f"unknown sampler {sampler!r}")
    rng = np.random.default_rng(seed)
    for _ in range(n_patches):
        want = None if sampler == "uniform" else bool(rng.random() < 0.5)
        counts = {"tumor": 0, "normal": 0, "background": 0}
        for _draw in range(max_draws):
            r = int(rng.integers(0, h - patch_size + 1))
            c = int(rng.integers(0, w - patch_size + 1))
            img = image[r : r + patch_size, c : c + patch_size]
            if not tissue_filter(img, filter_config):
                counts["background"] += 1
                continue
            m = mask[r : r + patch_size, c : c + patch_size]
            tumor = patch_is_tumor(m, label_rule)
            counts["tumor" if tumor else "normal"] += 1
            if want is None or tumor == want:
                yield Patch(img.copy(), m.copy(), tumor, (r, c))
                break
        else:
            raise PatchExhaustionError("tumor" if want else "non-tumor" if want is not None else "tissue",
                                       max_draws, counts)


# --------------------------------------------------------------------------
# raster I/O and manifests


def save_image(path, array: np.ndarray, mask: bool = False) -> None:
    array = np.asarray(array)
    if mask:
        Image.fromarray((array > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")
    else:
        if array.dtype != np.uint8:
            raise ValueError("images must be 8-bit")
        Image.fromarray(array, mode="RGB" if array.ndim == 3 else "L").save(path, format="PNG")


def load_image(path, mask: bool = False) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            if mask:
                return (np.asarray(im.convert("L")) >= 128).astype(np.uint8)
            if im.mode not in ("RGB", "L"):
                im = im.convert("RGB")
            return np.asarray(im).copy()
    except (OSError, SyntaxError) as err:
        raise ValueError(f"cannot read image {path}: {err}") from err


def write_dataset(out_dir, data: SyntheticData, config: SyntheticTaskConfig | None = None) -> Path:
    """Write PNG images/masks plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, m, split) in enumerate(zip(data.images, data.masks, data.splits)):
        ip, mp = f"images/{i:05d}.png", f"masks/{i:05d}.png"
        save_image(out / ip, img)
        save_image(out / mp, m, mask=True)
        tag = "tumor" if m.any() else "normal"
        lines.append(json.dumps({"image_path": ip, "mask_path": mp, "split": split, "label_balance_tag": tag},
                                sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    if config is not None:
        (out / "synthetic_config.json").write_text(config.to_json() + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    for rec in records:
        if rec.get("split") not in SPLITS:
            raise ValueError(f"bad split in manifest record {rec}")
    return records


def load_split(manifest_path, split: str, dtype=np.float32) -> Dataset:
    root = Path(manifest_path).parent
    recs = [r for r in read_manifest(manifest_path) if r["split"] == split]
    if not recs:
        return Dataset(np.zeros((0, 3, 1, 1), dtype=dtype), np.zeros((0, 1, 1), dtype=np.int64))
    imgs = np.stack([load_image(root / r["image_path"]) for r in recs])
    masks = np.stack([load_image(root / r["mask_path"], mask=True) for r in recs])
    return Dataset(to_model_input(imgs, dtype), masks.astype(np.int64))
