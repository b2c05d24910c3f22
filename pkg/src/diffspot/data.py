"""Dataset manifests, image/mask I/O, augmentation, and synthetic fixtures.

Manifest format: JSON Lines, one object per line with keys exactly
``{"id", "image_path", "mask_path", "label", "generator_tag", "split"}``.
``mask_path`` may be ``null`` for real images only; fully generated fakes
carry an all-ones mask file.  Paths are resolved relative to the manifest's
directory.  Images are PNG or JPEG RGB; masks are single-channel PNG with
values {0, 255}, decoded to {0, 1}.
"""

from __future__ import annotations

import io
import json
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import ManifestError, ValidationError

LABEL_REAL = "real"
LABEL_FAKE = "fake"
LABELS = (LABEL_REAL, LABEL_FAKE)
# Index convention used for classification logits everywhere: real=0, fake=1.
LABEL_INDEX = {LABEL_REAL: 0, LABEL_FAKE: 1}

SPLITS = ("train", "test")
MANIFEST_KEYS = {"id", "image_path", "mask_path", "label", "generator_tag", "split"}


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class ImageSample:
    """One dataset unit: RGB image in [0,1], label, and a binary tamper mask."""

    id: str
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: str
    mask: np.ndarray  # H x W uint8 in {0, 1}; all-zeros for real images
    generator_tag: str = ""
    split: str = "train"

    def validate(self) -> "ImageSample":
        if self.label not in LABELS:
            raise ValidationError(f"sample {self.id}: unknown label {self.label!r}")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"sample {self.id}: image must be HxWx3")
        if self.mask.shape != self.image.shape[:2]:
            raise ValidationError(
                f"sample {self.id}: mask shape {self.mask.shape} != image {self.image.shape[:2]}"
            )
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValidationError(f"sample {self.id}: mask values outside {{0,1}}: {vals[:8]}")
        if self.label == LABEL_REAL and self.mask.any():
            raise ValidationError(f"sample {self.id}: real image with nonzero mask")
        return self


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str | None
    label: str
    generator_tag: str
    split: str


@dataclass
class Manifest:
    """Ordered, validated list of dataset entries plus the directory paths resolve against."""

    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def filter(self, split: str | None = None, label: str | None = None) -> "Manifest":
        out = [
            e
            for e in self.entries
            if (split is None or e.split == split) and (label is None or e.label == label)
        ]
        return Manifest(out, self.root)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


# ---------------------------------------------------------------------------
# image / mask I/O
# ---------------------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    """Decode a PNG/JPEG file to an H x W x 3 float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_mask(path: str | Path) -> np.ndarray:
    """Decode a grayscale {0,255} PNG to a uint8 {0,1} array."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise ValidationError(f"mask {path}: values outside {{0,255}} at {int(bad.sum())} pixels")
    return (arr > 127).astype(np.uint8)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path)


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------


def load_manifest(path: str | Path) -> Manifest:
    """Load and validate a JSON Lines manifest.

    Checks performed here: schema keys, label/split vocabulary, unique ids,
    existence of every referenced file, mask presence rules, and the
    real-implies-empty-mask invariant (real masks are decoded to verify).
    Image payloads themselves are decoded lazily by :func:`load_sample`.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    root = path.parent
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(rec, dict) or set(rec) != MANIFEST_KEYS:
                raise ManifestError(
                    f"{path}:{lineno}: keys must be exactly {sorted(MANIFEST_KEYS)}"
                )
            if rec["label"] not in LABELS:
                raise ManifestError(f"{path}:{lineno}: label must be one of {LABELS}")
            if rec["split"] not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: split must be one of {SPLITS}")
            if rec["id"] in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
            seen.add(rec["id"])
            if rec["mask_path"] is None and rec["label"] == LABEL_FAKE:
                raise ValidationError(
                    f"{path}:{lineno}: fake entry {rec['id']!r} without mask_path "
                    "(fully generated images must carry an all-ones mask)"
                )
            entries.append(ManifestEntry(**rec))
    manifest = Manifest(entries, root)

    missing = []
    for e in manifest.entries:
        if not manifest.resolve(e.image_path).exists():
            missing.append(e.image_path)
        if e.mask_path is not None and not manifest.resolve(e.mask_path).exists():
            missing.append(e.mask_path)
    if missing:
        raise ValidationError(f"{path}: missing files: {missing}")

    for e in manifest.entries:
        if e.label == LABEL_REAL and e.mask_path is not None:
            if read_mask(manifest.resolve(e.mask_path)).any():
                raise ValidationError(f"{path}: real entry {e.id!r} has a nonzero mask")
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in manifest.entries:
            f.write(json.dumps(e.__dict__, sort_keys=True) + "\n")


def load_sample(manifest: Manifest, entry: ManifestEntry) -> ImageSample:
    """Decode one manifest entry to a validated :class:`ImageSample`."""
    image = read_image(manifest.resolve(entry.image_path))
    if entry.mask_path is None:
        mask = np.zeros(image.shape[:2], dtype=np.uint8)
    else:
        mask = read_mask(manifest.resolve(entry.mask_path))
    return ImageSample(
        id=entry.id,
        image=image,
        label=entry.label,
        mask=mask,
        generator_tag=entry.generator_tag,
        split=entry.split,
    ).validate()


# ---------------------------------------------------------------------------
# low-level image operations (shared with the robustness sweeps)
# ---------------------------------------------------------------------------


def blur_sigma(kernel_size: int) -> float:
    """Gaussian sigma paired with an odd kernel size: 0.3*((k-1)/2 - 1) + 0.8."""
    return 0.3 * ((kernel_size - 1) * 0.5 - 1.0) + 0.8


def gaussian_blur(image: np.ndarray, kernel_size: int) -> np.ndarray:
    """2-D Gaussian blur with replicate borders; kernel 1 is the identity."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {kernel_size}")
    if kernel_size == 1:
        return image.copy()
    return cv2.GaussianBlur(
        image,
        (kernel_size, kernel_size),
        sigmaX=blur_sigma(kernel_size),
        borderType=cv2.BORDER_REPLICATE,
    )


def jpeg_recompress(image: np.ndarray, quality: int) -> np.ndarray:
    """Encode the [0,1] float image as JPEG at the given quality and decode it back."""
    if not 1 <= quality <= 100:
        raise ValueError(f"jpeg quality must be in [1,100], got {quality}")
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        out = np.asarray(im.convert("RGB"), dtype=np.float32)
    return out / 255.0


def resize_image(image: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (height, width); no-op copy when the size already matches."""
    h, w = hw
    if image.shape[:2] == (h, w):
        return image.copy()
    return cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)


def resize_mask(mask: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize keeping values binary."""
    h, w = hw
    if mask.shape[:2] == (h, w):
        return mask.copy()
    return cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)


def _reflect_pad_to(arr: np.ndarray, min_h: int, min_w: int) -> np.ndarray:
    """Reflection-pad (split across both sides) until both dims reach the minima.

    numpy's reflect mode cannot pad by more than dim-1 per call, so pad
    iteratively; 1-pixel dims fall back to edge padding.
    """

    def pad_axis(a: np.ndarray, axis: int, target: int) -> np.ndarray:
        while a.shape[axis] < target:
            need = target - a.shape[axis]
            p, mode = min(need, a.shape[axis] - 1), "reflect"
            if p == 0:
                p, mode = need, "edge"
            pad = [(0, 0)] * a.ndim
            pad[axis] = (p - p // 2, p // 2)
            a = np.pad(a, pad, mode=mode)
        return a

    return pad_axis(pad_axis(arr, 0, min_h), 1, min_w)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentationConfig:
    """Training augmentation pipeline settings.

    Photometric steps (blur, JPEG) touch the image only; geometric steps
    (scale, flips, crop) are applied identically to image and mask.
    ``scale_range == (1, 1)`` disables scaling.  Undersized inputs are
    reflection-padded before the crop, never rejected.
    """

    blur_prob: float = 0.1
    jpeg_prob: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    crop_size: int = 512
    clip_input_size: int = 224
    blur_kernels: tuple[int, ...] = (3, 5, 7)
    jpeg_quality: tuple[int, int] = (60, 100)

    def __post_init__(self) -> None:
        for name in ("blur_prob", "jpeg_prob", "hflip_prob", "vflip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        if self.crop_size < 1 or self.clip_input_size < 1:
            raise ValueError("crop_size and clip_input_size must be positive")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad scale_range {self.scale_range}")


def augment(
    sample: ImageSample, cfg: AugmentationConfig, rng: np.random.Generator
) -> tuple[ImageSample, np.ndarray]:
    """Apply the training pipeline; returns the crop-size sample and the
    geometrically identical view resized to ``clip_input_size`` (image only).
    """
    img = sample.image
    mask = sample.mask

    if rng.random() < cfg.blur_prob:
        k = int(cfg.blur_kernels[int(rng.integers(len(cfg.blur_kernels)))])
        img = gaussian_blur(img, k)
    if rng.random() < cfg.jpeg_prob:
        q = int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1))
        img = jpeg_recompress(img, q)

    s = float(rng.uniform(*cfg.scale_range))
    if s != 1.0:
        new_hw = (max(1, round(img.shape[0] * s)), max(1, round(img.shape[1] * s)))
        img = resize_image(img, new_hw)
        mask = resize_mask(mask, new_hw)
    if rng.random() < cfg.hflip_prob:
        img, mask = img[:, ::-1], mask[:, ::-1]
    if rng.random() < cfg.vflip_prob:
        img, mask = img[::-1], mask[::-1]

    c = cfg.crop_size
    img = _reflect_pad_to(img, c, c)
    mask = _reflect_pad_to(mask, c, c)
    top = int(rng.integers(img.shape[0] - c + 1))
    left = int(rng.integers(img.shape[1] - c + 1))
    img = np.ascontiguousarray(img[top : top + c, left : left + c])
    mask = np.ascontiguousarray(mask[top : top + c, left : left + c])

    view = resize_image(img, (cfg.clip_input_size, cfg.clip_input_size))
    out = replace(sample, image=img, mask=mask)
    return out, view


def rng_for(seed: int, *keys: int | str) -> np.random.Generator:
    """Deterministic per-item generator derived from (seed, *keys).

    String keys are hashed with sha256 so worker streams are stable across
    platforms and runs.
    """
    ints = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            digest = hashlib.sha256(k.encode("utf-8")).digest()
            ints.append(int.from_bytes(digest[:4], "little"))
        else:
            ints.append(int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(ints))


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------


def _gradient_base(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-channel linear gradient plus faint noise."""
    base = rng.uniform(0.25, 0.75, size=3)
    gx = rng.uniform(-0.35, 0.35, size=3)
    gy = rng.uniform(-0.35, 0.35, size=3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    img = base[None, None, :] + gx[None, None, :] * xx[..., None] + gy[None, None, :] * yy[..., None]
    img += rng.normal(0.0, 0.02, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _distinct_texture(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """High-contrast checkerboard texture, visually distinct from gradients."""
    dark = rng.uniform(0.0, 0.2, size=3)
    bright = rng.uniform(0.8, 1.0, size=3)
    period = int(rng.integers(2, 5))
    yy, xx = np.indices((h, w))
    checker = (((yy // period) + (xx // period)) % 2).astype(np.float32)[..., None]
    tex = dark[None, None, :] * (1 - checker) + bright[None, None, :] * checker
    tex += rng.normal(0.0, 0.03, size=(h, w, 3))
    return np.clip(tex, 0.0, 1.0).astype(np.float32)


def make_fixtures(
    out_dir: str | Path,
    n: int,
    size: int,
    rng: np.random.Generator | int,
    split: str = "train",
    generator_tag: str = "synthetic",
) -> Manifest:
    """Write ``n`` synthetic samples (half real, half fake) plus a manifest.

    Real samples are smooth gradients with an all-zero mask; fake samples get
    a rectangular region replaced by a high-contrast texture, with the mask
    marking that rectangle.  Deterministic for a fixed seed.
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    if size < 32:
        raise ValueError(f"need size >= 32, got {size}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)

    n_fake = n // 2
    entries: list[ManifestEntry] = []
    for i in range(n):
        fake = i < n_fake
        sid = f"{'fake' if fake else 'real'}_{i:04d}"
        img = _gradient_base(size, rng)
        mask = np.zeros((size, size), dtype=np.uint8)
        mask_rel = None
        if fake:
            rh = int(rng.integers(size // 4, size // 2 + 1))
            rw = int(rng.integers(size // 4, size // 2 + 1))
            top = int(rng.integers(size - rh + 1))
            left = int(rng.integers(size - rw + 1))
            img[top : top + rh, left : left + rw] = _distinct_texture(rh, rw, rng)
            mask[top : top + rh, left : left + rw] = 1
            mask_rel = f"masks/{sid}.png"
            write_mask(out / mask_rel, mask)
        img_rel = f"images/{sid}.png"
        write_image(out / img_rel, img)
        entries.append(
            ManifestEntry(
                id=sid,
                image_path=img_rel,
                mask_path=mask_rel,
                label=LABEL_FAKE if fake else LABEL_REAL,
                generator_tag=generator_tag,
                split=split,
            )
        )
    manifest = Manifest(entries, out)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest
