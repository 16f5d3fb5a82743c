"""Dataset manifests, image loading, and a seeded synthetic iris corpus.

A manifest is a CSV with header ``path,label[,pa_type][,split]``; labels are
``live`` or ``pa`` and paths are relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

LABELS = {"live": 0, "pa": 1}
PA_STYLES = ("lattice_overlay", "flat_disc")


class DataError(ValueError):
    """Malformed manifest or unreadable image."""


@dataclass
class Record:
    path: str
    label: str
    pa_type: str = ""
    split: str = ""
    row: int = 0

    @property
    def target(self) -> int:
        return LABELS[self.label]


@dataclass
class Manifest:
    records: list[Record]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name], self.root)

    def resolve(self, rec: Record) -> Path:
        return self.root / rec.path

    def labels(self) -> np.ndarray:
        return np.array([r.target for r in self.records], dtype=np.int64)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "label", "pa_type", "split"])
            for r in self.records:
                w.writerow([r.path, r.label, r.pa_type, r.split])


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records: list[Record] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: no records")
        header = [h.strip() for h in header]
        if header[:2] != ["path", "label"] or any(h not in ("pa_type", "split") for h in header[2:]):
            raise DataError(f"{path}: header must be path,label[,pa_type][,split], got {','.join(header)}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path} row {row_no}: expected {len(header)} columns, got {len(row)}")
            item = dict(zip(header, (c.strip() for c in row)))
            rec = Record(item["path"], item["label"].lower(), item.get("pa_type", ""), item.get("split", ""), row_no)
            if rec.label not in LABELS:
                raise DataError(f"{path} row {row_no}: unknown label {item['label']!r}")
            if rec.path in seen:
                raise DataError(f"{path} row {row_no}: duplicate path {rec.path!r}")
            if check_files and not (path.parent / rec.path).is_file():
                raise DataError(f"{path} row {row_no}: missing file {rec.path!r}")
            seen.add(rec.path)
            records.append(rec)
    if not records:
        raise DataError(f"{path}: no records")
    return Manifest(records, path.parent)


def load_image(path, size: int | None = None, channels: int = 1) -> np.ndarray:
    """Decode an image into a ``channels x size x size`` float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr[None] if channels == 1 else arr.transpose(2, 0, 1).copy()


def save_image(path, image: np.ndarray) -> None:
    """Write a [0, 1] array (H x W, 1 x H x W or 3 x H x W) as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(to_uint8(arr)).save(path, format="PNG")


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_dataset(manifest: Manifest, size: int, channels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """All images of a manifest as an ``(N, C, S, S)`` array plus labels."""
    images = np.empty((len(manifest), channels, size, size), dtype=np.float32)
    for i, rec in enumerate(manifest.records):
        try:
            images[i] = load_image(manifest.resolve(rec), size, channels)
        except DataError as exc:
            raise DataError(f"row {rec.row}: {exc}") from exc
    return images, manifest.labels()


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    seed: int = 0
    image_size: int = 64
    train_live: int = 500
    train_pa: int = 500
    test_live: int = 200
    test_pa: int = 200
    pa_styles: tuple[str, ...] = PA_STYLES
    noise: float = 0.03
    degradation: float = 0.0

    def __post_init__(self):
        if isinstance(self.pa_styles, str):
            self.pa_styles = tuple(s.strip() for s in self.pa_styles.split(",") if s.strip())
        self.pa_styles = tuple(self.pa_styles)
        bad = [s for s in self.pa_styles if s not in PA_STYLES]
        if bad or not self.pa_styles:
            raise ValueError(f"pa_styles must be drawn from {PA_STYLES}, got {self.pa_styles}")
        counts = (self.train_live, self.train_pa, self.test_live, self.test_pa)
        if min(counts) < 1:
            raise ValueError(f"every class/split count must be positive, got {counts}")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if not 0.0 <= self.degradation <= 1.0:
            raise ValueError("degradation must be in [0, 1]")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SynthConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in kinds:
                raise ValueError(f"unknown synth config key {key!r}")
            default = getattr(cls(), key)
            kw[key] = value if isinstance(default, tuple) else type(default)(value)
        return cls(**kw)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="xy")


def render_iris(rng: np.random.Generator, size: int, pa_type: str = "", noise: float = 0.03,
                degradation: float = 0.0) -> np.ndarray:
    """One grayscale eye image in [0, 1].

    ``pa_type`` is ``""`` for a live eye, ``"lattice_overlay"`` for a printed
    dot pattern over the iris, or ``"flat_disc"`` for a textureless fake eye.
    """
    if pa_type and pa_type not in PA_STYLES:
        raise ValueError(f"unknown PA style {pa_type!r}; choose from {PA_STYLES}")
    x, y = _grid(size)
    cx, cy = rng.uniform(-0.08, 0.08, size=2)
    r_iris = rng.uniform(0.6, 0.75)
    r_pupil = r_iris * rng.uniform(0.3, 0.42)
    r = np.hypot(x - cx, y - cy)
    theta = np.arctan2(y - cy, x - cx)

    soft = 2.0 / size
    iris_mask = 1.0 / (1.0 + np.exp((r - r_iris) / soft))
    pupil_mask = 1.0 / (1.0 + np.exp((r - r_pupil) / soft))
    annulus = iris_mask * (1.0 - pupil_mask)

    sclera = rng.uniform(0.7, 0.85) + 0.05 * (y - cy)
    iris_level = rng.uniform(0.35, 0.5)
    rho = np.clip((r - r_pupil) / max(r_iris - r_pupil, 1e-3), 0.0, 1.0)

    if pa_type == "flat_disc":
        iris = np.full_like(r, iris_level) + 0.02 * rho
        grain = 0.2 * noise
    else:
        # radial fibres plus a slow collarette ring
        fibres = np.zeros_like(r)
        for k in rng.integers(6, 20, size=5):
            fibres += np.sin(k * theta + rng.uniform(0, 2 * np.pi)) * rng.uniform(0.02, 0.05)
        ring = 0.05 * np.cos(2 * np.pi * rho * rng.uniform(1.0, 2.0) + rng.uniform(0, 2 * np.pi))
        iris = iris_level + fibres * (0.5 + rho) + ring
        grain = noise
    img = sclera * (1.0 - iris_mask) + iris * annulus + rng.uniform(0.03, 0.1) * pupil_mask
    img = img + grain * annulus * rng.standard_normal(r.shape)

    if pa_type == "lattice_overlay":
        period = rng.uniform(5.5, 7.0) / size * 2.0
        phase = rng.uniform(0, 2 * np.pi, size=2)
        dots = np.cos(2 * np.pi * x / period + phase[0]) * np.cos(2 * np.pi * y / period + phase[1])
        img = img + rng.uniform(0.2, 0.3) * np.maximum(dots, 0.0) * annulus

    if degradation > 0:
        img = ndimage.gaussian_filter(img, sigma=0.8 * degradation, mode="nearest")
        if rng.random() < degradation:
            gx, gy = rng.uniform(-0.4, 0.4, size=2)
            img = img + 0.5 * np.exp(-((x - gx) ** 2 + (y - gy) ** 2) / (2 * 0.05 ** 2))
        img = img + 0.06 * degradation * rng.standard_normal(r.shape)
    return np.clip(img, 0.0, 1.0)


def laplacian_variance(image: np.ndarray) -> float:
    """Variance of the discrete Laplacian: a high-frequency energy proxy."""
    return float(ndimage.laplace(np.asarray(image, dtype=np.float64), mode="nearest").var())


@dataclass
class SynthReport:
    manifest: Manifest
    live_lapvar: float
    lattice_lapvar: float | None
    flat_lapvar: float | None = None
    stats: dict = field(default_factory=dict)


def generate_synth(config: SynthConfig, out_dir, min_lattice_ratio: float | None = 2.0) -> SynthReport:
    """Write a corpus of PNGs plus ``manifest.csv`` and ``synth_config.txt``.

    The mean Laplacian variance of lattice PAs must exceed that of live
    images by ``min_lattice_ratio`` (when the corpus contains lattice PAs and
    the ratio is not ``None``); otherwise generation fails.
    """
    out_dir = Path(out_dir)
    root = np.random.SeedSequence(config.seed)
    records: list[Record] = []
    lap: dict[str, list[float]] = {"live": [], "lattice_overlay": [], "flat_disc": []}
    plan = [("train", "live", config.train_live), ("train", "pa", config.train_pa),
            ("test", "live", config.test_live), ("test", "pa", config.test_pa)]
    for (split, label, count), seq in zip(plan, root.spawn(len(plan))):
        rng = np.random.default_rng(seq)
        folder = out_dir / split / label
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            pa_type = config.pa_styles[i % len(config.pa_styles)] if label == "pa" else ""
            img = to_uint8(render_iris(rng, config.image_size, pa_type, config.noise, config.degradation))
            rel = f"{split}/{label}/{label}_{i:05d}.png"
            Image.fromarray(img).save(out_dir / rel, format="PNG")
            lap[pa_type or "live"].append(laplacian_variance(img / 255.0))
            records.append(Record(rel, label, pa_type, split))

    manifest = Manifest(records, out_dir)
    manifest.write(out_dir / "manifest.csv")
    (out_dir / "synth_config.txt").write_text(config.to_text())

    def mean(xs):
        return float(np.mean(xs)) if xs else None

    report = SynthReport(manifest, mean(lap["live"]), mean(lap["lattice_overlay"]), mean(lap["flat_disc"]))
    if min_lattice_ratio is not None and report.lattice_lapvar is not None:
        ratio = report.lattice_lapvar / report.live_lapvar
        if ratio < min_lattice_ratio:
            raise DataError(f"lattice/live Laplacian variance ratio {ratio:.2f} below {min_lattice_ratio}")
    return report


def file_digest(root) -> dict[str, bytes]:
    """Every file under ``root`` keyed by relative path, for byte comparisons."""
    root = Path(root)
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            p = Path(dirpath) / n
            out[str(p.relative_to(root))] = p.read_bytes()
    return out
