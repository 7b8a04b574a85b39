"""Paired visible/infrared datasets: on-disk layout, label parsing, synthetic scenes.

Layout::

    root/visible/<id>.ppm     8-bit binary RGB
    root/infrared/<id>.pgm    8-bit binary gray
    root/labels/<id>.txt      "class cx cy w h" per line, normalized
    root/manifest.csv         optional "id,illumination"
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class DataError(Exception):
    """Malformed or inconsistent dataset."""


class LabelParseError(DataError):
    pass


class LabelRangeError(DataError):
    pass


@dataclass
class PairedSample:
    id: str
    visible: np.ndarray  # H x W x 3, float32 in [0, 1]
    infrared: np.ndarray  # H x W x 1, float32 in [0, 1]
    boxes: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    illumination: float | None = None

    def __post_init__(self):
        if self.visible.shape[:2] != self.infrared.shape[:2]:
            raise DataError(
                f"{self.id}: visible {self.visible.shape[:2]} and infrared {self.infrared.shape[:2]} are not aligned"
            )


@dataclass
class SynthConfig:
    num_samples: int = 32
    image_size: int = 64
    min_pedestrians: int = 1
    max_pedestrians: int = 3
    illumination_low: float = 0.0
    illumination_high: float = 1.0
    noise: float = 0.03
    # thermal band is rendered at 1/ir_downsample resolution, then upsampled
    ir_downsample: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if not 1 <= self.min_pedestrians <= self.max_pedestrians:
            raise ValueError("need 1 <= min_pedestrians <= max_pedestrians")
        if not 0.0 <= self.illumination_low <= self.illumination_high <= 1.0:
            raise ValueError("illumination range must lie inside [0, 1]")


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------


def write_pnm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    magic = b"P5" if img.ndim == 2 else b"P6"
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read binary P5/P6 into ``H x W x C`` uint8."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataError(f"{path}: unsupported netpbm header {magic!r} maxval {maxval}")
    c = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * c, offset=pos)
    return data.reshape(h, w, c)


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Resize ``H x W x C`` to ``size x size`` (half-pixel centers)."""
    h, w = image.shape[:2]
    if (h, w) == (size, size):
        return image
    img = image.astype(np.float32)

    def coords(n_in):
        x = (np.arange(size) + 0.5) * n_in / size - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (x - lo).astype(np.float32)

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


# ---------------------------------------------------------------------------
# labels and loading
# ---------------------------------------------------------------------------


def parse_label(line: str, lineno: int | None = None) -> tuple[int, float, float, float, float]:
    where = f" (line {lineno})" if lineno is not None else ""
    parts = line.split()
    if len(parts) != 5:
        raise LabelParseError(f"expected 5 fields 'class cx cy w h', got {len(parts)}{where}: {line.strip()!r}")
    try:
        cls = int(parts[0])
        cx, cy, w, h = (float(np.float32(p)) for p in parts[1:])
    except ValueError as exc:
        raise LabelParseError(f"malformed label{where}: {line.strip()!r}") from exc
    if cls < 0:
        raise LabelRangeError(f"class id must be non-negative{where}: {cls}")
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not 0.0 <= v <= 1.0:
            raise LabelRangeError(f"{name}={v} outside [0, 1]{where}")
    if w <= 0 or h <= 0:
        raise LabelRangeError(f"box width/height must be positive{where}")
    return cls, cx, cy, w, h


def read_labels(path) -> list[tuple[int, float, float, float, float]]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(parse_label(line, i))
                except DataError as exc:
                    raise type(exc)(f"{path}: {exc}") from exc
    return out


def read_manifest(root) -> dict[str, float]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {row["id"]: float(row["illumination"]) for row in csv.DictReader(fh)}


def load_sample(visible_path, infrared_path, label_path=None, sample_id: str = "", illumination=None) -> PairedSample:
    vis = read_pnm(visible_path)
    ir = read_pnm(infrared_path)
    if vis.shape[2] != 3 or ir.shape[2] != 1:
        raise DataError(f"{sample_id}: expected RGB visible and single-channel infrared images")
    boxes = read_labels(label_path) if label_path is not None else []
    return PairedSample(sample_id, vis.astype(np.float32) / 255.0, ir.astype(np.float32) / 255.0, boxes,
                        illumination)


def load_dataset(root) -> list[PairedSample]:
    """Load every stem under ``root/visible`` with its infrared image and labels, sorted by id."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    vis_dir = root / "visible"
    stems = sorted(p.stem for p in vis_dir.glob("*.ppm")) if vis_dir.is_dir() else []
    if not stems:
        logger.warning("no samples found under %s", root)
        return []
    manifest = read_manifest(root)
    samples = []
    for stem in stems:
        ir = root / "infrared" / f"{stem}.pgm"
        lab = root / "labels" / f"{stem}.txt"
        if not ir.exists():
            raise DataError(f"missing infrared counterpart for stem {stem!r}")
        if not lab.exists():
            raise DataError(f"missing label file for stem {stem!r}")
        samples.append(load_sample(vis_dir / f"{stem}.ppm", ir, lab, stem, manifest.get(stem)))
    return samples


def is_val(sample_id: str, val_fraction: float = 0.2) -> bool:
    h = int.from_bytes(hashlib.md5(sample_id.encode()).digest()[:8], "little")
    return (h % 1000) < int(round(val_fraction * 1000))


def split_train_val(samples: list[PairedSample], val_fraction: float = 0.2):
    train = [s for s in samples if not is_val(s.id, val_fraction)]
    val = [s for s in samples if is_val(s.id, val_fraction)]
    return train, val


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def _texture(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    """Low-frequency pattern: blocky noise plus two random sinusoids."""
    coarse = rng.uniform(-1, 1, size=(size // 8, size // 8))
    blocks = np.kron(coarse, np.ones((8, 8)))
    yy, xx = np.mgrid[0:size, 0:size] / size
    waves = np.zeros((size, size))
    for _ in range(2):
        fx, fy, ph = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
        waves += np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    return amplitude * (0.5 * blocks + 0.25 * waves)


def _place_boxes(rng: np.random.Generator, size: int, count: int) -> list[tuple[int, int, int, int]]:
    placed: list[tuple[int, int, int, int]] = []
    for _ in range(200):
        if len(placed) == count:
            break
        h = int(rng.integers(int(0.25 * size), int(0.5 * size) + 1))
        w = max(3, int(round(h * rng.uniform(0.35, 0.5))))
        x0 = int(rng.integers(1, size - w))
        y0 = int(rng.integers(1, size - h))
        if all(x0 + w + 2 <= px or px + pw + 2 <= x0 or y0 + h + 2 <= py or py + ph + 2 <= y0
               for px, py, pw, ph in placed):
            placed.append((x0, y0, w, h))
    return placed


def _low_res(image: np.ndarray, factor: int) -> np.ndarray:
    if factor <= 1:
        return image
    h, w = image.shape
    small = image.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return resize_bilinear(small[..., None], h)[..., 0].astype(np.float64)


def render_scene(rng: np.random.Generator, size: int, illumination: float, n_ped: int, noise: float,
                 ir_downsample: int = 1):
    """One aligned visible/infrared pair, the pedestrian mask and pixel boxes."""
    base = rng.uniform(0.35, 0.65, size=3)
    vis_scene = base[None, None, :] + _texture(rng, size, 0.12)[..., None] * rng.uniform(0.6, 1.0, size=3)
    ir_scene = 0.2 + _texture(rng, size, 0.06)
    mask = np.zeros((size, size), dtype=bool)
    boxes = _place_boxes(rng, size, n_ped)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    for x0, y0, w, h in boxes:
        color = np.clip(base + sign * rng.uniform(0.4, 0.5, size=3), 0.0, 1.0)
        vis_scene[y0 : y0 + h, x0 : x0 + w] = color
        ir_scene[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.45, 0.6)
        mask[y0 : y0 + h, x0 : x0 + w] = True
    visible = illumination * vis_scene + rng.normal(0, noise, size=(size, size, 3))
    infrared = _low_res(ir_scene, ir_downsample)[..., None] + rng.normal(0, noise, size=(size, size, 1))
    to8 = lambda a: np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)  # noqa: E731
    return to8(visible), to8(infrared), mask, boxes


def synthesize(cfg: SynthConfig, root) -> list[str]:
    """Write ``cfg.num_samples`` synthetic pairs under ``root``; returns the ids."""
    root = Path(root)
    for sub in ("visible", "infrared", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    ids, illum = [], []
    size = cfg.image_size
    for i in range(cfg.num_samples):
        sid = f"{i:06d}"
        lum = float(rng.uniform(cfg.illumination_low, cfg.illumination_high))
        n_ped = int(rng.integers(cfg.min_pedestrians, cfg.max_pedestrians + 1))
        vis, ir, _, boxes = render_scene(rng, size, lum, n_ped, cfg.noise, cfg.ir_downsample)
        write_pnm(root / "visible" / f"{sid}.ppm", vis)
        write_pnm(root / "infrared" / f"{sid}.pgm", ir)
        with open(root / "labels" / f"{sid}.txt", "w") as fh:
            for x0, y0, w, h in boxes:
                fh.write(f"0 {(x0 + w / 2) / size:.8f} {(y0 + h / 2) / size:.8f} {w / size:.8f} {h / size:.8f}\n")
        ids.append(sid)
        illum.append(lum)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "illumination"])
        for sid, lum in zip(ids, illum):
            writer.writerow([sid, f"{lum:.6f}"])
    return ids


def modality_contrast(image: np.ndarray, mask: np.ndarray, boxes) -> float:
    """Smallest |mean(pedestrian) - mean(background)| over pedestrians, averaged over channels."""
    img = image.astype(np.float64) / 255.0 if image.dtype == np.uint8 else image.astype(np.float64)
    bg = img[~mask].mean(axis=0)
    vals = []
    for x0, y0, w, h in boxes:
        ped = img[y0 : y0 + h, x0 : x0 + w].reshape(-1, img.shape[2]).mean(axis=0)
        vals.append(float(np.abs(ped - bg).mean()))
    return min(vals)
