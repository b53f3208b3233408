"""Data provisioning: synthetic camouflage-style samples, folder IO, resizing,
and the FFT high-frequency input transform used for shadow detection.

A sample is an RGB image in [0, 1] of shape (3, H, W) with a strictly binary
mask of shape (1, H, W). Synthetic samples place one or two blobs (ellipses or
star-convex polygons) over a smoothed-noise background; the blob texture is
the same noise field, phase-rolled and channel-mixed. `difficulty="high"`
shrinks that shift, so foreground and background statistics grow closer.
"""

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

_BLOB_MARGIN = 0.31          # blob centers stay this far inside (fraction of size)
_SHIFT = {"low": 0.5, "high": 0.15}


@dataclass
class SegSample:
    id: str
    image: np.ndarray   # (3, H, W) float32 in [0, 1]
    mask: np.ndarray    # (1, H, W) float32 in {0, 1}


def validate_sample(sample):
    img, mask = sample.image, sample.mask
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"sample {sample.id}: image shape {img.shape} is not (3, H, W)")
    if mask.shape != (1,) + img.shape[1:]:
        raise DataError(
            f"sample {sample.id}: mask shape {mask.shape} does not match image {img.shape}"
        )
    if img.min() < 0 or img.max() > 1:
        raise DataError(f"sample {sample.id}: image values outside [0, 1]")
    if not np.all((mask == 0) | (mask == 1)):
        raise DataError(f"sample {sample.id}: mask is not binary")


# ---------------------------------------------------------------------------
# resizing (plain numpy, no autodiff involvement)

def _resize_axis_weights(n_in, n_out):
    i = np.arange(n_out)
    src = (i + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(int)
    t = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    return lo, hi, t


def bilinear_resize(arr, target):
    """Resize (C, H, W) -> (C, h2, w2) with half-pixel-center bilinear weights."""
    h2, w2 = target
    _, h, w = arr.shape
    lo, hi, t = _resize_axis_weights(h, h2)
    rows = arr[:, lo, :] + t[None, :, None] * (arr[:, hi, :] - arr[:, lo, :])
    lo, hi, t = _resize_axis_weights(w, w2)
    return rows[:, :, lo] + t[None, None, :] * (rows[:, :, hi] - rows[:, :, lo])


def nearest_resize(arr, target):
    h2, w2 = target
    _, h, w = arr.shape
    ri = np.minimum((np.arange(h2) + 0.5) * (h / h2), h - 1).astype(int)
    ci = np.minimum((np.arange(w2) + 0.5) * (w / w2), w - 1).astype(int)
    return arr[:, ri][:, :, ci]


def resize_sample(sample, target):
    """Bilinear image / nearest-neighbor mask resize; the only augmentation used."""
    h, w = target
    if h <= 0 or w <= 0:
        raise ConfigError(f"invalid resize target {target}")
    if sample.image.shape[1:] == (h, w):
        return SegSample(sample.id, sample.image.copy(), sample.mask.copy())
    image = bilinear_resize(sample.image.astype(np.float64), (h, w))
    mask = nearest_resize(sample.mask, (h, w))
    return SegSample(sample.id, np.clip(image, 0.0, 1.0).astype(np.float32),
                     mask.astype(np.float32))


# ---------------------------------------------------------------------------
# synthetic generation

def _smooth_noise(rng, size):
    h, w = size
    coarse = rng.random((3, max(h // 8, 2), max(w // 8, 2)))
    field = bilinear_resize(coarse, (h, w))
    field = 0.85 * field + 0.15 * rng.random((3, h, w))
    return 0.1 + 0.8 * field            # keep away from the clip boundaries


def _ellipse_mask(size, center, area_frac, aspect, angle):
    h, w = size
    a = np.sqrt(area_frac * h * w * aspect / np.pi)
    b = np.sqrt(area_frac * h * w / (np.pi * aspect))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _polygon_mask(rng, size, center, area_frac):
    # star-convex polygon: per-vertex radius perturbation, linear in angle
    h, w = size
    base = np.sqrt(area_frac * h * w / np.pi)
    k = int(rng.integers(5, 9))
    radii = base * (1.0 + rng.uniform(-0.2, 0.2, size=k))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ang = np.arctan2(yy - center[0], xx - center[1]) % (2 * np.pi)
    seg = ang / (2 * np.pi) * k
    i0 = np.floor(seg).astype(int) % k
    frac = seg - np.floor(seg)
    boundary = radii[i0] * (1 - frac) + radii[(i0 + 1) % k] * frac
    rad = np.hypot(yy - center[0], xx - center[1])
    return rad <= boundary


def generate_synthetic(n, size, seed, difficulty="low"):
    """Deterministic synthetic dataset: same arguments, bit-identical samples."""
    h, w = size
    if h % 16 or w % 16:
        raise ConfigError(f"size {size} must be divisible by 16")
    if difficulty not in _SHIFT:
        raise ConfigError(f"difficulty must be one of {sorted(_SHIFT)}, got {difficulty!r}")
    shift = _SHIFT[difficulty]
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        bg = _smooth_noise(rng, size)
        mask = np.zeros((h, w), dtype=bool)
        n_blobs = int(rng.integers(1, 3))
        # the first blob alone keeps the union fraction above 0.05 even at the
        # maximum polygon shrink (0.8^2); two blobs stay below 0.5 combined
        fracs = [rng.uniform(0.10, 0.15)] + ([rng.uniform(0.05, 0.10)] if n_blobs == 2 else [])
        for frac in fracs:
            cy = rng.uniform(_BLOB_MARGIN, 1 - _BLOB_MARGIN) * h
            cx = rng.uniform(_BLOB_MARGIN, 1 - _BLOB_MARGIN) * w
            if rng.random() < 0.5:
                blob = _ellipse_mask(size, (cy, cx), frac, rng.uniform(0.7, 1.4),
                                     rng.uniform(0, np.pi))
            else:
                blob = _polygon_mask(rng, size, (cy, cx), frac)
            mask |= blob

        roll = max(1, int(round(shift * h / 2)))
        fg = np.roll(bg, (roll, roll), axis=(1, 2))
        fg = (1 - shift) * fg + shift * fg[[1, 2, 0]]
        fg = np.clip(fg + 0.25 * shift, 0.0, 1.0)
        image = np.where(mask[None], fg, bg)
        samples.append(SegSample(
            id=f"synth_{seed}_{i:04d}",
            image=image.astype(np.float32),
            mask=mask[None].astype(np.float32),
        ))
    for s in samples:
        validate_sample(s)
    return samples


# ---------------------------------------------------------------------------
# folder IO (8-bit RGB PNG images, 8-bit grayscale PNG masks)

def _to_uint8(arr):
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_dataset(samples, out_dir, manifest_extra=None):
    from PIL import Image

    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for s in samples:
        validate_sample(s)
        Image.fromarray(_to_uint8(s.image).transpose(1, 2, 0), "RGB").save(
            os.path.join(img_dir, f"{s.id}.png"))
        Image.fromarray(_to_uint8(s.mask[0]), "L").save(
            os.path.join(mask_dir, f"{s.id}.png"))
    manifest = {"n": len(samples), "ids": [s.id for s in samples]}
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def load_folder(images_dir, masks_dir):
    """Load image/mask pairs matched by filename stem, sorted by stem.

    Masks binarize at 0.5. Orphans on either side produce a warning; no pairs
    at all is an error, as is a spatial size mismatch within a pair.
    """
    from PIL import Image

    def stems(d):
        if not os.path.isdir(d):
            raise DataError(f"not a directory: {d}")
        return {os.path.splitext(f)[0]: os.path.join(d, f)
                for f in os.listdir(d) if f.lower().endswith(".png")}

    imgs, masks = stems(images_dir), stems(masks_dir)
    orphans = sorted(set(imgs) ^ set(masks))
    if orphans:
        warnings.warn(f"{len(orphans)} unpaired file(s) ignored: {orphans}")
    common = sorted(set(imgs) & set(masks))
    if not common:
        raise DataError(f"no matching image/mask pairs between {images_dir} and {masks_dir}")

    samples = []
    for stem in common:
        try:
            with Image.open(imgs[stem]) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
            with Image.open(masks[stem]) as mm:
                mask = np.asarray(mm.convert("L"), dtype=np.float32)[None] / 255.0
        except OSError as exc:
            raise DataError(f"unreadable file for sample {stem!r}: {exc}") from exc
        if image.shape[1:] != mask.shape[1:]:
            raise DataError(
                f"sample {stem!r}: image is {image.shape[1:]} but mask is {mask.shape[1:]}"
            )
        sample = SegSample(stem, image, (mask >= 0.5).astype(np.float32))
        validate_sample(sample)
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# high-frequency component (shadow-task input)

def high_freq_component(image, mask_ratio=0.25):
    """Per channel: FFT, zero the centered low-frequency square of side
    mask_ratio * min(H, W), inverse FFT, real part, min-max renormalize.

    mask_ratio 0 returns the renormalized original; a constant channel comes
    back all zeros (nothing but DC energy).
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    side = int(round(mask_ratio * min(h, w)))
    out = np.empty_like(img)
    for c in range(3):
        spectrum = np.fft.fftshift(np.fft.fft2(img[c]))
        if side > 0:
            r0 = h // 2 - side // 2
            c0 = w // 2 - side // 2
            spectrum[r0:r0 + side, c0:c0 + side] = 0.0
        filt = np.real(np.fft.ifft2(np.fft.ifftshift(spectrum)))
        lo, hi = filt.min(), filt.max()
        out[c] = np.zeros_like(filt) if hi == lo else (filt - lo) / (hi - lo)
    return out.astype(np.float32)


def high_freq_sample(sample, mask_ratio=0.25):
    return SegSample(sample.id, high_freq_component(sample.image, mask_ratio),
                     sample.mask.copy())
