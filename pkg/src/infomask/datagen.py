"""Synthetic data: textured backgrounds, distractor shapes, one bright blob.

Positive samples contain a smooth anisotropic blob whose tight bounding
box (every pixel above 10% of the blob's peak) ships with the sample;
negatives share the same background and distractor distribution and carry
no box. Each sample is rendered from its own generator seeded by
(master seed, sample index), so any subset can be regenerated in
isolation and in parallel.

Also here: header-less CSV manifests pointing at PGM (optionally PNG)
image files, and a stratified split helper.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ImageSample",
    "SynthConfig",
    "ManifestError",
    "generate",
    "split",
    "load_manifest",
    "write_manifest",
    "read_pgm",
    "write_pgm",
    "read_image",
]


class ManifestError(ValueError):
    """A manifest row or its referenced file is unusable."""


@dataclass
class ImageSample:
    """One grayscale image with its label and, for positives, a box.

    The box is (x0, y0, x1, y1), inclusive pixel coordinates, x along
    width and y along height.
    """

    image: np.ndarray
    label: int
    bbox: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.image.ndim != 2:
            raise ValueError(f"image must be 2-d, got shape {self.image.shape}")
        if self.label == 0 and self.bbox is not None:
            raise ValueError("negative samples carry no box")
        if self.bbox is not None:
            x0, y0, x1, y1 = self.bbox
            h, w = self.image.shape
            if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
                raise ValueError(f"box {self.bbox} outside {w}x{h} image")


@dataclass
class SynthConfig:
    image_size: int = 64
    blob_intensity: tuple[float, float] = (0.45, 0.85)
    blob_radius: tuple[float, float] = (6.0, 12.0)
    texture_amplitude: float = 0.15
    distractor_count: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 4:
            raise ValueError(f"image_size must be a multiple of 4 and >= 16, got {self.image_size}")
        lo, hi = self.blob_radius
        if not (0 < lo <= hi):
            raise ValueError(f"blob_radius range {self.blob_radius} invalid")
        if hi + 2 > self.image_size / 2:
            raise ValueError(
                f"largest blob radius {hi} cannot fit a {self.image_size} image"
            )
        ilo, ihi = self.blob_intensity
        if not (0 < ilo <= ihi <= 1):
            raise ValueError(f"blob_intensity range {self.blob_intensity} invalid")
        if not (0 <= self.texture_amplitude < 0.5):
            raise ValueError(f"texture_amplitude {self.texture_amplitude} out of range")
        if self.distractor_count < 0:
            raise ValueError("distractor_count must be >= 0")


_BASE_LEVEL = 0.35
_TEXTURE_WAVES = 3
_BBOX_PEAK_FRACTION = 0.1


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _texture(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    """Sum of a few low-frequency cosine waves, bounded by the amplitude."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size))
    weights = rng.uniform(0.2, 1.0, _TEXTURE_WAVES)
    for k in range(_TEXTURE_WAVES):
        freq = rng.uniform(0.5, 2.0, 2) / size
        phase = rng.uniform(0, 2 * np.pi)
        field += weights[k] * np.cos(2 * np.pi * (freq[0] * xx + freq[1] * yy) + phase)
    return amplitude * field / weights.sum()


def _draw_line(rng, size, yy, xx):
    p0 = rng.uniform(2, size - 3, 2)
    p1 = rng.uniform(2, size - 3, 2)
    thickness = rng.uniform(0.6, 1.6)
    intensity = rng.uniform(0.12, 0.3)
    d = p1 - p0
    norm2 = max((d**2).sum(), 1e-9)
    t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / norm2, 0.0, 1.0)
    dist = np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))
    field = intensity * np.clip(thickness + 0.7 - dist, 0.0, 1.0)
    return field, ("line", intensity, thickness)


def _draw_ring(rng, size, yy, xx):
    margin = size * 0.15
    cx, cy = rng.uniform(margin, size - margin, 2)
    radius = rng.uniform(size * 0.08, size * 0.2)
    thickness = rng.uniform(0.6, 1.4)
    intensity = rng.uniform(0.12, 0.3)
    dist = np.abs(np.hypot(xx - cx, yy - cy) - radius)
    field = intensity * np.clip(thickness + 0.7 - dist, 0.0, 1.0)
    return field, ("ring", intensity, radius)


def _draw_blob(rng, cfg, yy, xx):
    size = cfg.image_size
    r_lo, r_hi = cfg.blob_radius
    rx = rng.uniform(r_lo, r_hi)
    ry = rng.uniform(r_lo, r_hi)
    margin = max(rx, ry) + 1.0
    cx = rng.uniform(margin, size - 1 - margin)
    cy = rng.uniform(margin, size - 1 - margin)
    theta = rng.uniform(0, np.pi)
    peak = rng.uniform(*cfg.blob_intensity)

    dx, dy = xx - cx, yy - cy
    xr = np.cos(theta) * dx + np.sin(theta) * dy
    yr = -np.sin(theta) * dx + np.cos(theta) * dy
    q = (xr / rx) ** 2 + (yr / ry) ** 2
    profile = np.where(q < 1.0, (1.0 - np.minimum(q, 1.0)) ** 2, 0.0)
    field = peak * profile

    ys, xs = np.nonzero(field > _BBOX_PEAK_FRACTION * peak)
    bbox = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
    return field, bbox


def _render_sample(cfg: SynthConfig, rng: np.random.Generator, label: int):
    """Render one sample; returns (image, bbox, distractor metadata).

    Distractors are drawn before the label is consulted, so their
    parameter distribution cannot depend on the class.
    """
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = _BASE_LEVEL + _texture(rng, size, cfg.texture_amplitude)

    meta = []
    for _ in range(cfg.distractor_count):
        if rng.uniform() < 0.5:
            field, info = _draw_line(rng, size, yy, xx)
        else:
            field, info = _draw_ring(rng, size, yy, xx)
        img += field
        meta.append(info)

    bbox = None
    if label == 1:
        field, bbox = _draw_blob(rng, cfg, yy, xx)
        img += field

    return np.clip(img, 0.0, 1.0), bbox, meta


def generate(n: int, cfg: SynthConfig) -> list[ImageSample]:
    """n samples with alternating labels (counts balanced to within one)."""
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    samples = []
    for i in range(n):
        label = i % 2
        image, bbox, _ = _render_sample(cfg, _sample_rng(cfg.seed, i), label)
        samples.append(ImageSample(image=image, label=label, bbox=bbox))
    return samples


def split(
    samples: list[ImageSample], fractions: tuple[float, float, float], seed: int
) -> tuple[list[ImageSample], list[ImageSample], list[ImageSample]]:
    """Disjoint stratified train/val/test split covering every sample.

    Within each label group, counts follow the fractions with largest-
    remainder rounding, so per-split label proportions match the corpus
    to within one sample.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, not 1")

    parts: list[list[ImageSample]] = [[], [], []]
    for label in (0, 1):
        group = [s for s in samples if s.label == label]
        if not group:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, label]))
        order = rng.permutation(len(group))
        counts = _largest_remainder(len(group), fractions)
        start = 0
        for part, count in zip(parts, counts):
            part.extend(group[j] for j in order[start : start + count])
            start += count
    for part, name in zip(parts, ("train", "val", "test")):
        if not part:
            raise ValueError(f"{name} split would be empty for {len(samples)} samples")
    # mix labels within each split deterministically
    out = []
    for k, part in enumerate(parts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, k]))
        out.append([part[j] for j in rng.permutation(len(part))])
    return out[0], out[1], out[2]


def _largest_remainder(total: int, fractions) -> list[int]:
    raw = [f * total for f in fractions]
    base = [int(np.floor(r)) for r in raw]
    short = total - sum(base)
    remainders = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in remainders[:short]:
        base[i] += 1
    return base


# ---------------------------------------------------------------------------
# image files and manifests


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; values are clipped to [0, 1] and scaled to 255."""
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary PGM (maxval up to 65535) to float64 in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise ManifestError(f"{path}: not a binary PGM")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if not 0 < maxval < 65536:
        raise ManifestError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = w * h
    if len(blob) - pos < count * dtype.itemsize:
        raise ManifestError(f"{path}: truncated pixel data")
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    return raw.reshape(h, w).astype(np.float64) / maxval


def read_image(path) -> np.ndarray:
    """Read PGM directly; other formats go through Pillow when available."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    try:
        from PIL import Image
    except ImportError as exc:
        raise ManifestError(
            f"{path}: only PGM is supported without Pillow installed"
        ) from exc
    with Image.open(path) as im:
        arr = np.asarray(im.convert("I"), dtype=np.float64)
    scale = 65535.0 if arr.max() > 255 else 255.0
    return arr / scale


def write_manifest(path, rows: list[tuple[str, ImageSample]]) -> None:
    """Header-less CSV: path,label,x0,y0,x1,y1 with empty box for negatives."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for rel, sample in rows:
            box = sample.bbox if sample.bbox is not None else ("", "", "", "")
            writer.writerow([rel, sample.label, *box])


def load_manifest(path) -> list[ImageSample]:
    path = Path(path)
    base = path.parent
    samples: list[ImageSample] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 6:
                raise ManifestError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            rel, label_s, *box_s = [f.strip() for f in row]
            if label_s not in ("0", "1"):
                raise ManifestError(f"{path}:{lineno}: bad label {label_s!r}")
            label = int(label_s)
            box_given = [f for f in box_s if f != ""]
            if label == 0:
                if box_given:
                    raise ManifestError(f"{path}:{lineno}: negative sample with a box")
                bbox = None
            else:
                if len(box_given) != 4:
                    raise ManifestError(f"{path}:{lineno}: positive sample needs 4 box fields")
                try:
                    bbox = tuple(int(v) for v in box_s)
                except ValueError as exc:
                    raise ManifestError(f"{path}:{lineno}: malformed box {box_s}") from exc
            img_path = base / rel
            if not img_path.is_file():
                raise ManifestError(f"{path}:{lineno}: missing image {img_path}")
            image = read_image(img_path)
            try:
                samples.append(ImageSample(image=image, label=label, bbox=bbox))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    if not samples:
        raise ManifestError(f"{path}: empty manifest")
    return samples
