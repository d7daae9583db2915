"""Image ingestion, normalisation, synthetic identities, pairs and occlusion masks."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .config import SynthConfig

PIXEL_OFFSET = 127.5
PIXEL_SCALE = 128.0
RAW_HEADER = struct.Struct("<II")


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageRecord:
    identity_id: int
    pixels: np.ndarray
    key: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"image {self.key!r}: expected HxWx3 pixels, got {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255) or np.any(px != np.round(px)):
                raise DataError(f"image {self.key!r}: channel values must be integers in [0, 255]")
            object.__setattr__(self, "pixels", px.astype(np.uint8))


@dataclass(frozen=True)
class PairRecord:
    image_a: ImageRecord
    image_b: ImageRecord
    label: bool

    def __post_init__(self):
        a, b = self.image_a.identity_id, self.image_b.identity_id
        if a >= 0 and b >= 0 and bool(self.label) != (a == b):
            raise DataError(f"pair ({self.image_a.key}, {self.image_b.key}) label {self.label} "
                            f"contradicts identities {a}, {b}")

    @property
    def pair_id(self) -> str:
        return f"{self.image_a.key}__{self.image_b.key}".replace("/", "-")


@dataclass(frozen=True)
class OcclusionMask:
    cells: np.ndarray
    coverage: float

    @property
    def fraction(self) -> float:
        return float(self.cells.mean())


# normalisation and augmentation

def normalize(img: ImageRecord | np.ndarray) -> np.ndarray:
    """uint8 HxWx3 pixels to a float64 (3, H, W) array: (v - 127.5) / 128."""
    px = img.pixels if isinstance(img, ImageRecord) else np.asarray(img)
    if px.ndim != 3 or px.shape[-1] != 3:
        raise DataError(f"expected HxWx3 pixels, got {px.shape}")
    if px.dtype != np.uint8 and (np.any(px < 0) or np.any(px > 255)):
        raise DataError("channel values must lie in [0, 255]")
    return (px.astype(np.float64).transpose(2, 0, 1) - PIXEL_OFFSET) / PIXEL_SCALE


def denormalize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * PIXEL_SCALE + PIXEL_OFFSET), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def random_hflip(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return hflip(img) if rng.random() < 0.5 else img


def normalize_batch(records: Sequence[ImageRecord]) -> np.ndarray:
    return np.stack([normalize(r) for r in records]) if records else np.zeros((0, 3, 0, 0))


# synthetic identities

def _smooth_field(rng: np.random.Generator, h: int, w: int, coarse: int = 6) -> np.ndarray:
    """Left-right symmetric smooth random field scaled to max |value| 1."""
    grid = rng.normal(size=(coarse, coarse, 3))
    field = ndimage.zoom(grid, (h / coarse, w / coarse, 1), order=3)[:h, :w]
    field = 0.5 * (field + field[:, ::-1])
    return field / (np.abs(field).max() + 1e-12)


def _blob(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))


def _identity_pattern(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    img = 0.45 * _smooth_field(rng, h, w)
    # eyes: mirrored pair
    ey = rng.uniform(0.25, 0.42) * h
    ex = rng.uniform(0.16, 0.32) * w
    er = rng.uniform(0.05, 0.10, size=2) * np.array([h, w])
    ecol = rng.uniform(-1, 1, size=3)
    for cx in (ex, w - 1 - ex):
        img += _blob(h, w, ey, cx, *er)[..., None] * ecol
    # nose and mouth on the midline
    ny = rng.uniform(0.48, 0.6) * h
    img += _blob(h, w, ny, (w - 1) / 2, rng.uniform(0.06, 0.12) * h, rng.uniform(0.04, 0.08) * w)[..., None] \
        * rng.uniform(-1, 1, size=3)
    my = rng.uniform(0.7, 0.82) * h
    img += _blob(h, w, my, (w - 1) / 2, rng.uniform(0.03, 0.06) * h, rng.uniform(0.12, 0.25) * w)[..., None] \
        * rng.uniform(-1, 1, size=3)
    # one asymmetric mark
    img += _blob(h, w, rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w,
                 *(rng.uniform(0.04, 0.08, size=2) * np.array([h, w])))[..., None] * rng.uniform(-1, 1, size=3)
    return img


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    if dy == 0 and dx == 0:
        return img
    h, w = img.shape[:2]
    p = max(abs(dy), abs(dx))
    padded = np.pad(img, ((p, p), (p, p), (0, 0)), mode="edge")
    return padded[p - dy:p - dy + h, p - dx:p - dx + w]


def synth_identities(cfg: SynthConfig) -> list[ImageRecord]:
    """Procedural identities: a seeded base pattern per identity plus per-image noise and shift."""
    h, w = cfg.image_size
    rng = np.random.default_rng(cfg.rng_seed)
    records: list[ImageRecord] = []
    for ident in range(cfg.identities):
        base = _identity_pattern(rng, h, w)
        for k in range(cfg.images_per_identity):
            img = base
            if cfg.intra_class_noise > 0:
                img = img + cfg.intra_class_noise * (
                    rng.normal(size=img.shape) + 2.0 * _smooth_field(rng, h, w, coarse=4))
            if cfg.max_shift > 0:
                dy, dx = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2)
                img = _shift(img, int(dy), int(dx))
            pixels = np.clip(np.round(127.5 + 100.0 * img), 0, 255).astype(np.uint8)
            records.append(ImageRecord(ident, pixels, f"{ident:03d}/{k:04d}"))
    return records


def split_holdout(records: Sequence[ImageRecord], holdout_per_identity: int
                  ) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Last ``holdout_per_identity`` images of each identity go to the held-out split."""
    by_id: dict[int, list[ImageRecord]] = {}
    for r in records:
        by_id.setdefault(r.identity_id, []).append(r)
    train, held = [], []
    for ident in sorted(by_id):
        imgs = by_id[ident]
        cut = len(imgs) - holdout_per_identity
        if cut < 2 or holdout_per_identity < 2:
            raise DataError(f"identity {ident}: cannot hold out {holdout_per_identity} of {len(imgs)} images")
        train.extend(imgs[:cut])
        held.extend(imgs[cut:])
    return train, held


# pairs

def sample_pairs(records: Sequence[ImageRecord], n_pos: int, n_neg: int,
                 rng: np.random.Generator) -> list[PairRecord]:
    """Exactly ``n_pos`` same-identity and ``n_neg`` cross-identity pairs, no repeats or self-pairs."""
    labels = np.array([r.identity_id for r in records])
    ia, ib = np.triu_indices(len(records), k=1)
    same = labels[ia] == labels[ib]
    pos_idx, neg_idx = np.flatnonzero(same), np.flatnonzero(~same)
    if n_pos > len(pos_idx) or n_neg > len(neg_idx) or n_pos < 0 or n_neg < 0:
        raise DataError(f"requested {n_pos} positive / {n_neg} negative pairs; "
                        f"dataset supports at most {len(pos_idx)} / {len(neg_idx)}")
    chosen_pos = np.sort(rng.choice(pos_idx, size=n_pos, replace=False)) if n_pos else []
    chosen_neg = np.sort(rng.choice(neg_idx, size=n_neg, replace=False)) if n_neg else []
    pairs = [PairRecord(records[ia[k]], records[ib[k]], True) for k in chosen_pos]
    pairs += [PairRecord(records[ia[k]], records[ib[k]], False) for k in chosen_neg]
    return pairs


# free-form occlusion

def _disc(radius: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    d2 = yy ** 2 + xx ** 2
    inside = d2 <= radius ** 2
    # innermost offsets first so a partial final stamp stays round
    order = np.argsort(d2[inside], kind="stable")
    return yy[inside][order], xx[inside][order]


def free_form_mask(size: tuple[int, int], coverage: float, rng: np.random.Generator) -> OcclusionMask:
    """Random-walk brush strokes (radius 3-8 px) painted until the coverage target is met."""
    if not 0.0 <= coverage <= 1.0:
        raise ValueError(f"coverage must lie in [0, 1], got {coverage}")
    h, w = size
    cells = np.zeros((h, w), dtype=bool)
    if coverage == 0.0:
        return OcclusionMask(cells, 0.0)
    if coverage == 1.0:
        return OcclusionMask(np.ones((h, w), dtype=bool), 1.0)
    target = coverage * h * w
    painted = 0
    while painted < target:
        y, x = rng.uniform(0, h), rng.uniform(0, w)
        radius = int(rng.integers(3, 9))
        dy_off, dx_off = _disc(radius)
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(int(rng.integers(4, 10))):
            angle += rng.uniform(-np.pi / 2, np.pi / 2)
            for _ in range(int(rng.integers(max(h, w) // 8, max(h, w) // 3 + 1))):
                y = min(max(y + np.sin(angle), 0.0), h - 1.0)
                x = min(max(x + np.cos(angle), 0.0), w - 1.0)
                ys, xs = dy_off + int(round(y)), dx_off + int(round(x))
                keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
                ys, xs = ys[keep], xs[keep]
                fresh = ~cells[ys, xs]
                ys, xs = ys[fresh], xs[fresh]
                need = int(np.ceil(target)) - painted
                ys, xs = ys[:need], xs[:need]
                painted += len(ys)
                cells[ys, xs] = True
                if painted >= target:
                    return OcclusionMask(cells, coverage)
    return OcclusionMask(cells, coverage)


def apply_mask(img: np.ndarray, mask: OcclusionMask, fill: float = 0.0) -> np.ndarray:
    if img.shape[-2:] != mask.cells.shape:
        raise DataError(f"mask {mask.cells.shape} does not match image {img.shape[-2:]}")
    out = img.copy()
    out[..., mask.cells] = fill
    return out


# file formats

def write_image(path: str | Path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        from PIL import Image
        Image.fromarray(pixels, mode="RGB").save(path, format="PNG", optimize=False)
    else:
        h, w = pixels.shape[:2]
        path.write_bytes(RAW_HEADER.pack(w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        blob = path.read_bytes()
        w, h = RAW_HEADER.unpack_from(blob)
        body = blob[RAW_HEADER.size:]
        if len(body) != w * h * 3:
            raise DataError(f"{path}: raw body has {len(body)} bytes, expected {w * h * 3}")
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
    except DataError:
        raise
    except Exception as exc:  # unreadable or undecodable
        raise DataError(f"cannot read image {path}: {exc}") from exc


def _identity_from_path(path: Path) -> int:
    try:
        return int(path.parent.name)
    except ValueError:
        return -1


def load_image_record(path: str | Path, root: Path | None = None) -> ImageRecord:
    path = Path(path)
    key = path.relative_to(root).with_suffix("").as_posix() if root else path.with_suffix("").as_posix()
    return ImageRecord(_identity_from_path(path), read_image(path), key)


def save_dataset(records: Sequence[ImageRecord], root: str | Path, ext: str = ".png") -> list[Path]:
    """One subdirectory per identity, zero-padded numeric filenames."""
    root = Path(root)
    paths = []
    counters: dict[int, int] = {}
    for r in records:
        k = counters.get(r.identity_id, 0)
        counters[r.identity_id] = k + 1
        p = root / f"{r.identity_id:03d}" / f"{k:04d}{ext}"
        write_image(p, r.pixels)
        paths.append(p)
    return paths


def load_dataset(root: str | Path) -> list[ImageRecord]:
    root = Path(root)
    files = sorted(p for p in root.glob("*/*") if p.suffix.lower() in (".png", ".raw"))
    if not files:
        raise DataError(f"no images found under {root}")
    return [load_image_record(p, root) for p in files]


def write_pair_list(path: str | Path, pairs: Sequence[PairRecord], root: str | Path,
                    ext: str = ".png") -> None:
    lines = [f"{p.image_a.key}{ext}\t{p.image_b.key}{ext}\t{int(p.label)}\n" for p in pairs]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_pair_list(path: str | Path, root: str | Path | None = None) -> list[PairRecord]:
    """Parse ``path_a<TAB>path_b<TAB>{0|1}`` lines; relative paths resolve against ``root``."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    cache: dict[str, ImageRecord] = {}
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            loose = line.split()
            if len(loose) == 3 and loose[2] not in ("0", "1"):
                raise DataError(f"{path}: line {lineno}: invalid label {loose[2]!r} (expected 0 or 1)")
            raise DataError(f"{path}: line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
        a, b, label = fields
        if label.strip() not in ("0", "1"):
            raise DataError(f"{path}: line {lineno}: invalid label {label!r} (expected 0 or 1)")
        recs = []
        for name in (a, b):
            if name not in cache:
                cache[name] = load_image_record(root / name, root)
            recs.append(cache[name])
        pairs.append(PairRecord(recs[0], recs[1], label.strip() == "1"))
    return pairs
