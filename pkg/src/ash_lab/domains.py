"""Procedural driving-like scenes, style textures and segmentation metrics."""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CLASS_NAMES = ("sky", "road", "building", "pole", "sign", "vegetation")
N_CLASSES = len(CLASS_NAMES)
IGNORE = 255
IMAGE_SIZE = 64

# stream tags for derive_seed
TRAIN_SCENE, TRAIN_STYLE, NOISE, EVAL_SCENE, PROBE, PRETRAIN = 1, 2, 3, 4, 5, 6


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative ints."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class DomainSpec:
    colors: tuple[tuple[float, float, float], ...]
    textures: tuple[str, ...]
    amplitude: float = 0.06
    hue_shift: float = 0.0
    color_jitter: float = 0.03
    sky_fraction: tuple[float, float] = (0.28, 0.38)
    road_top_halfwidth: tuple[int, int] = (2, 5)
    road_bottom_halfwidth: tuple[float, float] = (0.42, 0.55)
    n_buildings: tuple[int, int] = (1, 3)
    n_poles: tuple[int, int] = (0, 4)
    n_signs: tuple[int, int] = (0, 3)
    n_bushes: tuple[int, int] = (1, 3)

    def __post_init__(self):
        if len(self.colors) != N_CLASSES or len(self.textures) != N_CLASSES:
            raise ValueError(f"need {N_CLASSES} colors and textures")
        for rgb in self.colors:
            if not all(0.0 <= v <= 1.0 for v in rgb):
                raise ValueError(f"color {rgb} outside [0, 1]")
        for t in self.textures:
            if t not in ("flat", "noise", "stripes"):
                raise ValueError(f"unknown texture kind {t!r}")

    def shifted_colors(self) -> np.ndarray:
        out = []
        for r, g, b in self.colors:
            h, s, v = colorsys.rgb_to_hsv(r, g, b)
            out.append(colorsys.hsv_to_rgb((h + self.hue_shift) % 1.0, s, v))
        return np.array(out)


def source_spec() -> DomainSpec:
    return DomainSpec(
        colors=(
            (0.55, 0.75, 0.95),  # sky
            (0.35, 0.35, 0.38),  # road
            (0.62, 0.42, 0.30),  # building
            (0.85, 0.80, 0.20),  # pole
            (0.90, 0.15, 0.15),  # sign
            (0.20, 0.60, 0.22),  # vegetation
        ),
        textures=("flat", "noise", "stripes", "flat", "flat", "noise"),
    )


_TEXTURE_SWAP = {"flat": "noise", "noise": "stripes", "stripes": "flat"}


def target_spec(severity: float = 1.0) -> DomainSpec:
    """Same layouts as the source; hue rotated and texture kinds swapped."""
    src = source_spec()
    textures = tuple(_TEXTURE_SWAP[t] for t in src.textures) if severity > 0 else src.textures
    return replace(src, hue_shift=0.35 * severity, textures=textures, amplitude=src.amplitude * (1 + severity))


@dataclass
class SceneSample:
    image: np.ndarray  # 3×H×W in [0, 1]
    labels: np.ndarray  # H×W ints in [0, C)


def _layout(spec: DomainSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    h = w = size
    rows, cols = np.mgrid[0:h, 0:w]
    labels = np.full((h, w), 5, dtype=np.int64)  # ground is grass
    horizon = int(round(h * rng.uniform(*spec.sky_fraction)))
    labels[:horizon] = 0

    for _ in range(rng.integers(spec.n_buildings[0], spec.n_buildings[1] + 1)):
        bw = int(rng.integers(8, 21))
        x0 = int(rng.integers(0, w - bw + 1))
        y0 = int(rng.integers(max(1, horizon - h // 4), max(2, horizon - 3)))
        y1 = horizon + int(rng.integers(2, 7))
        labels[y0:y1, x0 : x0 + bw] = 2

    for _ in range(rng.integers(spec.n_bushes[0], spec.n_bushes[1] + 1)):
        cy = horizon + rng.uniform(0, 6)
        cx = rng.uniform(0, w)
        ry, rx = rng.uniform(2, 5), rng.uniform(3, 8)
        labels[((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0] = 5

    # road trapezoid from the horizon to the bottom edge
    cx = w / 2 + rng.uniform(-6, 6)
    top = rng.uniform(*spec.road_top_halfwidth)
    bottom = w * rng.uniform(*spec.road_bottom_halfwidth)
    t = np.clip((rows - horizon) / max(1, h - 1 - horizon), 0, 1)
    half = top + (bottom - top) * t
    labels[(rows >= horizon) & (np.abs(cols + 0.5 - cx) <= half)] = 1

    poles = []
    for _ in range(rng.integers(spec.n_poles[0], spec.n_poles[1] + 1)):
        pw = int(rng.integers(1, 3))
        x0 = int(rng.integers(0, w - pw + 1))
        y0 = int(rng.integers(max(0, horizon - h // 3), max(1, horizon - h // 10)))
        y1 = min(h, horizon + int(rng.integers(2, 16)))
        labels[y0:y1, x0 : x0 + pw] = 3
        poles.append((x0, y0))

    for i in range(rng.integers(spec.n_signs[0], spec.n_signs[1] + 1)):
        s = int(rng.integers(3, 6))
        if i < len(poles):
            x0 = min(max(0, poles[i][0] - s // 2), w - s)
            y0 = poles[i][1]
        else:
            x0 = int(rng.integers(0, w - s + 1))
            y0 = int(rng.integers(max(0, horizon - h // 4), horizon + 1))
        labels[y0 : y0 + s, x0 : x0 + s] = 4
    return labels


def _texture(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    if kind == "flat":
        return np.zeros((size, size))
    if kind == "noise":
        return rng.standard_normal((size, size))
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(4, 7)
    rows, cols = np.mgrid[0:size, 0:size]
    return np.sqrt(2) * np.sin(2 * np.pi * (cols * np.cos(theta) + rows * np.sin(theta)) / period + rng.uniform(0, 2 * np.pi))


def gen_scene(spec: DomainSpec, seed: int, size: int = IMAGE_SIZE) -> SceneSample:
    """Deterministic scene for (spec, seed)."""
    rng = np.random.default_rng(seed)
    labels = _layout(spec, rng, size)
    colors = spec.shifted_colors() + rng.normal(0, spec.color_jitter, (N_CLASSES, 3))
    brightness = rng.uniform(0.9, 1.1)
    image = np.empty((3, size, size))
    for c in range(N_CLASSES):
        tex = _texture(spec.textures[c], rng, size) * spec.amplitude
        mask = labels == c
        for ch in range(3):
            image[ch][mask] = (colors[c, ch] + tex[mask]) * brightness
    return SceneSample(np.clip(image, 0.0, 1.0), labels)


def _bilinear_noise(rng: np.random.Generator, grid: int, size: int) -> np.ndarray:
    coarse = rng.random((grid + 1, grid + 1))
    pos = np.linspace(0, grid, size)
    i = np.minimum(pos.astype(int), grid - 1)
    f = pos - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f) + rows[:, i + 1] * f


STYLE_KINDS = ("gradient", "stripes", "blobs", "checker")


def gen_style(seed: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Deterministic 3×H×W texture standing in for a painting."""
    rng = np.random.default_rng(seed)
    kind = STYLE_KINDS[rng.integers(len(STYLE_KINDS))]
    palette = rng.random((3, 3))
    rows, cols = np.mgrid[0:size, 0:size] / (size - 1)
    theta = rng.uniform(0, 2 * np.pi)
    proj = cols * np.cos(theta) + rows * np.sin(theta)
    if kind == "gradient":
        t = (proj - proj.min()) / (np.ptp(proj) + 1e-12)
        img = palette[0][:, None, None] * (1 - t) + palette[1][:, None, None] * t
    elif kind == "stripes":
        period = rng.uniform(6, 16) / (size - 1)
        band = np.floor(proj / period).astype(int) % 3
        img = np.stack([palette[band, ch] for ch in range(3)])
    elif kind == "blobs":
        t = _bilinear_noise(rng, int(rng.integers(3, 8)), size)
        img = palette[0][:, None, None] * (1 - t) + palette[1][:, None, None] * t
    else:
        cell = int(rng.integers(4, 13))
        r, c = np.mgrid[0:size, 0:size]
        band = ((r // cell + c // cell) % 2).astype(int)
        img = np.stack([palette[band, ch] for ch in range(3)])
    img = img + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def pretrain_images(n: int, seed: int = 0, offset: int = 0) -> list[np.ndarray]:
    """Alternating source scenes and style textures for autoencoder fitting."""
    src = source_spec()
    out = []
    for i in range(offset, offset + n):
        s = derive_seed(seed, PRETRAIN, i)
        out.append(gen_scene(src, s).image if i % 2 == 0 else gen_style(s))
    return out


# -- PPM / PGM -----------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 from a 3×H×W float image."""
    _, h, w = image.shape
    body = to_uint8(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + body)


def write_pgm(path, labels: np.ndarray) -> None:
    h, w = labels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + labels.astype(np.uint8).tobytes())


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} header")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return np.frombuffer(parts[4], dtype=np.uint8), h, w


def read_ppm(path) -> np.ndarray:
    data, h, w = _read_netpbm(path, b"P6")
    return data[: h * w * 3].reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    data, h, w = _read_netpbm(path, b"P5")
    return data[: h * w].reshape(h, w).astype(np.int64)


def gen_data(out_dir, n_source: int, n_target: int, n_styles: int, seed: int = 0,
             severity: float = 1.0) -> Path:
    """Write scenes/styles as PPM/PGM files plus an ``index.json`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"seed": seed, "severity": severity, "classes": list(CLASS_NAMES), "items": []}
    for domain, spec, n in (("source", source_spec(), n_source), ("target", target_spec(severity), n_target)):
        (out / domain).mkdir(exist_ok=True)
        for i in range(n):
            s = derive_seed(seed, EVAL_SCENE if domain == "target" else TRAIN_SCENE, i)
            sample = gen_scene(spec, s)
            img, lab = f"{domain}/{i:05d}.ppm", f"{domain}/{i:05d}_labels.pgm"
            write_ppm(out / img, sample.image)
            write_pgm(out / lab, sample.labels)
            manifest["items"].append({"domain": domain, "seed": s, "image": img, "labels": lab})
    (out / "style").mkdir(exist_ok=True)
    for i in range(n_styles):
        s = derive_seed(seed, TRAIN_STYLE, i)
        img = f"style/{i:05d}.ppm"
        write_ppm(out / img, gen_style(s))
        manifest["items"].append({"domain": "style", "seed": s, "image": img})
    (out / "index.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


# -- metrics --------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, labels: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """Rows are ground truth, columns are predictions; IGNORE labels are dropped."""
    pred, labels = np.asarray(pred).ravel(), np.asarray(labels).ravel()
    keep = labels != IGNORE
    idx = n_classes * labels[keep].astype(np.int64) + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=n_classes**2).reshape(n_classes, n_classes)


@dataclass
class MetricsRecord:
    iou: np.ndarray  # NaN marks a class absent from both prediction and ground truth
    miou: float
    confusion: np.ndarray = field(repr=False)

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> MetricsRecord:
        cm = np.asarray(cm, dtype=np.int64)
        tp = np.diag(cm).astype(np.float64)
        union = cm.sum(axis=0) + cm.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
        present = cm.sum(axis=1) > 0
        miou = float(iou[present].mean()) if present.any() else float("nan")
        return cls(iou, miou, cm)


def evaluate(segnet, spec: DomainSpec, n: int, seed: int) -> MetricsRecord:
    if n < 1:
        raise ValueError("evaluate needs n >= 1 scenes")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for i in range(n):
        sample = gen_scene(spec, derive_seed(seed, EVAL_SCENE, i))
        cm += confusion_matrix(segnet.predict(sample.image), sample.labels)
    return MetricsRecord.from_confusion(cm)


def format_metrics(record: MetricsRecord, title: str = "") -> str:
    """Per-class IoU and mIoU as a one-row table (percent)."""
    head = ["method"] + list(CLASS_NAMES) + ["mIoU"]
    vals = [title or "model"] + ["-" if np.isnan(v) else f"{100 * v:.1f}" for v in record.iou]
    vals.append(f"{100 * record.miou:.1f}")
    widths = [max(len(a), len(b)) for a, b in zip(head, vals)]
    fmt = " | ".join("{:>%d}" % w for w in widths)
    return fmt.format(*head) + "\n" + fmt.format(*vals)
