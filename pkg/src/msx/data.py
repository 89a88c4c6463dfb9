"""Image ingestion, preprocessing, manifests, and the synthetic generator.

Canonical image format is binary PGM (P5, maxval <= 255). The synthetic
generator stands in for clinical data at desk scale: noisy tissue background,
two dark elliptical "lungs", bright blobs inside the lungs for the positive
class, and look-alike distractor blobs outside the lungs in both classes so
that masking carries real information.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(Exception):
    """Base for dataset/file problems (CLI exit code 2)."""


class PgmError(DataError):
    pass


class ManifestError(DataError):
    pass


PROFILE_SIDES = {"desk": 64, "paper": 512}

# generator geometry, as fractions of the image side
LUNG_CX = (0.30, 0.70)
LUNG_CX_JITTER = 0.02
LUNG_CY = 0.52
LUNG_CY_JITTER = 0.03
LUNG_A = (0.115, 0.145)  # semi-axis across
LUNG_B = (0.25, 0.31)  # semi-axis down
TISSUE_LEVEL = 0.55
LUNG_DROP = 0.30
NOISE_SIGMA = 0.04
BLOB_AMP = (0.28, 0.42)
BLOB_SIGMA = (0.024, 0.038)  # fraction of side

# ellipse-union pixel fraction implied by the geometry above (with slack)
MASK_AREA_BOUNDS = (0.14, 0.32)


# -- PGM ------------------------------------------------------------------


def load_pgm(path) -> np.ndarray:
    """Read binary P5 -> float32 (h,w) scaled by 1/255 into [0,1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        magic = raw[:2].decode("ascii", "replace")
        raise PgmError(f"{path}: bad magic {magic!r}, expected P5")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: truncated header")
        try:
            fields.append(int(raw[start:pos]))
        except ValueError:
            raise PgmError(f"{path}: non-numeric header field {raw[start:pos]!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PgmError(f"{path}: bad dimensions {width}x{height}")
    if maxval > 255:
        raise PgmError(f"{path}: maxval {maxval} > 255 unsupported")
    if maxval < 1:
        raise PgmError(f"{path}: bad maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = raw[pos : pos + width * height]
    if len(payload) < width * height:
        raise PgmError(f"{path}: truncated payload ({len(payload)} of {width * height} bytes)")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return img.astype(np.float32) / 255.0


def save_pgm(path, image: np.ndarray) -> None:
    """Write a float [0,1] image (h,w) or (1,h,w) as binary P5, maxval 255."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise PgmError(f"save_pgm expects (h,w) or (1,h,w), got {arr.shape}")
    data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


# -- preprocessing ---------------------------------------------------------


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned sample positions for resizing n_in -> n_out."""
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def resize(image: np.ndarray, side: int, kind: str = "bilinear") -> np.ndarray:
    """Resize to side x side; bilinear for images, nearest for masks."""
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    arr = np.asarray(image)
    lead = arr.ndim == 3
    if lead:
        arr = arr[0]
    h, w = arr.shape
    if (h, w) == (side, side):
        out = arr.copy()
    else:
        ys = _source_coords(h, side)
        xs = _source_coords(w, side)
        if kind == "nearest":
            out = arr[np.rint(ys).astype(int)][:, np.rint(xs).astype(int)]
        elif kind == "bilinear":
            y0 = np.floor(ys).astype(int)
            x0 = np.floor(xs).astype(int)
            y1 = np.minimum(y0 + 1, h - 1)
            x1 = np.minimum(x0 + 1, w - 1)
            wy = (ys - y0)[:, None]
            wx = (xs - x0)[None, :]
            out = (
                arr[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
                + arr[np.ix_(y0, x1)] * (1 - wy) * wx
                + arr[np.ix_(y1, x0)] * wy * (1 - wx)
                + arr[np.ix_(y1, x1)] * wy * wx
            )
        else:
            raise ValueError(f"unknown resize kind {kind!r}")
    out = out.astype(arr.dtype, copy=False)
    return out[None] if lead else out


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero everything outside the mask (elementwise product)."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ValueError(f"apply_mask: extents {image.shape} vs {mask.shape} differ")
    return image * mask


# -- samples ----------------------------------------------------------------


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float

    def qform(self, x, y):
        return ((x - self.cx) / self.a) ** 2 + ((y - self.cy) / self.b) ** 2


@dataclass
class SegSample:
    image: np.ndarray  # (1,H,H) float32 in [0,1]
    mask: np.ndarray  # (1,H,H) float32 in {0,1}
    source: str
    geometry: tuple[Ellipse, ...] | None = None


@dataclass
class ClsSample:
    image: np.ndarray  # (1,H,H) float32 in [0,1]
    label: int  # {0,1}
    source: str


@dataclass
class SynthData:
    seg: list[SegSample] = field(default_factory=list)
    cls: list[ClsSample] = field(default_factory=list)
    # ground-truth lung masks for the classification images, aligned with cls
    cls_masks: list[np.ndarray] = field(default_factory=list)


# -- synthetic generator -----------------------------------------------------


def _lungs(rng: np.random.Generator, side: int) -> tuple[Ellipse, Ellipse]:
    out = []
    for cx0 in LUNG_CX:
        cx = (cx0 + rng.uniform(-LUNG_CX_JITTER, LUNG_CX_JITTER)) * side
        cy = (LUNG_CY + rng.uniform(-LUNG_CY_JITTER, LUNG_CY_JITTER)) * side
        a = rng.uniform(*LUNG_A) * side
        b = rng.uniform(*LUNG_B) * side
        out.append(Ellipse(cx, cy, a, b))
    return tuple(out)


def _union_mask(side: int, lungs: tuple[Ellipse, ...]) -> np.ndarray:
    ys, xs = np.mgrid[0:side, 0:side]
    inside = np.zeros((side, side), dtype=bool)
    for e in lungs:
        inside |= e.qform(xs, ys) <= 1.0
    return inside


def _add_blob(canvas: np.ndarray, cx: float, cy: float, amp: float, sigma: float) -> None:
    side = canvas.shape[0]
    ys, xs = np.mgrid[0:side, 0:side]
    canvas += amp * np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2)))


def _inside_point(rng, lung: Ellipse, s_max: float) -> tuple[float, float]:
    theta = rng.uniform(0, 2 * np.pi)
    s = rng.uniform(0.15, s_max)
    return lung.cx + s * lung.a * np.cos(theta), lung.cy + s * lung.b * np.sin(theta)


def _outside_point(rng, lungs, side: int, near: bool) -> tuple[float, float]:
    """A point outside both lungs: hugging a boundary if near, else anywhere clear."""
    for _ in range(200):
        if near:
            lung = lungs[rng.integers(len(lungs))]
            theta = rng.uniform(0, 2 * np.pi)
            pad = rng.uniform(0.05 * side, 0.10 * side)
            r = min(lung.a, lung.b)
            s = 1.0 + pad / r
            x = lung.cx + s * lung.a * np.cos(theta)
            y = lung.cy + s * lung.b * np.sin(theta)
        else:
            x = rng.uniform(0.06 * side, 0.94 * side)
            y = rng.uniform(0.06 * side, 0.94 * side)
        if not (0.04 * side < x < 0.96 * side and 0.04 * side < y < 0.96 * side):
            continue
        qmin = min(e.qform(x, y) for e in lungs)
        if near and qmin > 1.1:
            return x, y
        if not near and qmin > 1.8:
            return x, y
    return 0.03 * side, 0.03 * side  # corner fallback, far from both lungs


def _render(
    rng: np.random.Generator,
    side: int,
    lungs: tuple[Ellipse, ...],
    positive: bool,
    distractors: bool,
) -> np.ndarray:
    img = np.full((side, side), TISSUE_LEVEL, dtype=np.float64)
    inside = _union_mask(side, lungs)
    img[inside] -= LUNG_DROP
    if positive:
        for _ in range(rng.integers(1, 4)):
            lung = lungs[rng.integers(len(lungs))]
            x, y = _inside_point(rng, lung, s_max=0.85)
            _add_blob(img, x, y, rng.uniform(*BLOB_AMP), rng.uniform(*BLOB_SIGMA) * side)
    if distractors:
        for _ in range(rng.integers(1, 3)):
            near = rng.random() < 0.70
            x, y = _outside_point(rng, lungs, side, near)
            _add_blob(img, x, y, rng.uniform(*BLOB_AMP), rng.uniform(*BLOB_SIGMA) * side)
    img += rng.normal(0.0, NOISE_SIGMA, size=(side, side))
    img = np.clip(img, 0.0, 1.0)
    # quantize to the 8-bit grid so in-memory and written datasets agree
    return (np.rint(img * 255.0) / 255.0).astype(np.float32)


def synth_generate(
    n: int,
    profile: str = "desk",
    seed: int = 0,
    distractors: bool = True,
    balanced: bool = True,
) -> SynthData:
    """Deterministically generate n segmentation and n classification samples."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    side = PROFILE_SIDES[profile]
    rng = np.random.default_rng(seed)
    data = SynthData()
    for i in range(n):
        lungs = _lungs(rng, side)
        img = _render(rng, side, lungs, positive=bool(rng.random() < 0.5), distractors=distractors)
        mask = _union_mask(side, lungs).astype(np.float32)
        data.seg.append(SegSample(img[None], mask[None], f"synth-seg-{seed}-{i:05d}", lungs))
    if balanced:
        labels = np.zeros(n, dtype=int)
        labels[: n // 2] = 1
        labels = rng.permutation(labels)
    else:
        labels = (rng.random(n) < 0.25).astype(int)
    for i in range(n):
        lungs = _lungs(rng, side)
        img = _render(rng, side, lungs, positive=bool(labels[i]), distractors=distractors)
        data.cls.append(ClsSample(img[None], int(labels[i]), f"synth-cls-{seed}-{i:05d}"))
        data.cls_masks.append(_union_mask(side, lungs).astype(np.float32)[None])
    return data


def ground_truth_mask(sample: ClsSample | SegSample) -> np.ndarray:
    if isinstance(sample, SegSample):
        return sample.mask
    raise DataError("classification samples carry no stored mask")


# -- manifests ----------------------------------------------------------------


def write_dataset(out_dir, data: SynthData, test_fraction: float = 0.2) -> dict[str, Path]:
    """Write PGM trees plus manifests; returns manifest paths by name."""
    out = Path(out_dir)
    n_seg_test = int(round(len(data.seg) * test_fraction))
    n_cls_test = int(round(len(data.cls) * test_fraction))
    manifests = {}
    for name, samples, n_test in (
        ("seg", data.seg, n_seg_test),
        ("cls", data.cls, n_cls_test),
    ):
        split_at = len(samples) - n_test
        for split, chunk, base in (
            ("train", samples[:split_at], 0),
            ("test", samples[split_at:], split_at),
        ):
            rows = []
            for j, s in enumerate(chunk):
                i = base + j
                if name == "seg":
                    img_rel = f"seg/{split}/image/img_{i:05d}.pgm"
                    msk_rel = f"seg/{split}/mask/img_{i:05d}.pgm"
                    save_pgm(out / img_rel, s.image)
                    save_pgm(out / msk_rel, s.mask)
                    rows.append((img_rel, msk_rel))
                else:
                    img_rel = f"cls/{split}/{s.label}/img_{i:05d}.pgm"
                    save_pgm(out / img_rel, s.image)
                    rows.append((img_rel, str(s.label)))
            man = out / f"{name}_{split}.csv"
            with open(man, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["image", "mask"] if name == "seg" else ["image", "label"])
                w.writerows(rows)
            manifests[f"{name}_{split}"] = man
    # ground-truth lung masks for the classification images, keyed by image stem
    for i, m in enumerate(data.cls_masks):
        save_pgm(out / "cls_masks" / f"img_{i:05d}.pgm", m)
    manifests["cls_masks"] = out / "cls_masks"
    return manifests


def load_manifest(path, kind: str, shuffle_seed: int | None = None):
    """Load a dataset manifest; rows resolve relative to the manifest file."""
    if kind not in ("seg", "cls"):
        raise ValueError(f"kind must be 'seg' or 'cls', got {kind!r}")
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    expected = ["image", "mask"] if kind == "seg" else ["image", "label"]
    samples = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != expected:
            raise ManifestError(f"{path}: header {header!r}, expected {expected}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ManifestError(f"{path} row {lineno}: expected 2 fields, got {len(row)}")
            img_path = path.parent / row[0].strip()
            if not img_path.exists():
                raise ManifestError(f"{path} row {lineno}: missing file {img_path}")
            image = load_pgm(img_path)[None]
            if kind == "seg":
                mask_path = path.parent / row[1].strip()
                if not mask_path.exists():
                    raise ManifestError(f"{path} row {lineno}: missing file {mask_path}")
                mask = (load_pgm(mask_path) >= 0.5).astype(np.float32)[None]
                samples.append(SegSample(image, mask, str(img_path)))
            else:
                try:
                    label = int(row[1])
                except ValueError:
                    raise ManifestError(f"{path} row {lineno}: bad label {row[1]!r}") from None
                if label not in (0, 1):
                    raise ManifestError(f"{path} row {lineno}: label {label} not in {{0,1}}")
                samples.append(ClsSample(image, label, str(img_path)))
    if not samples:
        raise ManifestError(f"{path}: no samples")
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
        samples = [samples[i] for i in order]
    return samples
