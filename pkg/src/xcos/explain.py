"""Export S / W explanation maps as JSON records and grayscale PGM heatmaps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import PairRecord, normalize
from .evaluation import xcos_scores
from .metric import CalibrationTable
from .training import TeacherModel, XCosModel, teacher_scores

UPSAMPLE = 16


@dataclass
class ExplanationRecord:
    pair_id: str
    image_a: str
    image_b: str
    xcos: float
    teacher: float | None
    s: list[list[float]]
    w: list[list[float]]
    variant: str
    threshold: float
    decision: bool

    def recompute(self) -> float:
        return float(np.sum(np.asarray(self.s) * np.asarray(self.w)))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExplanationRecord":
        return cls(**json.loads(text))


def s_to_gray(s: np.ndarray) -> np.ndarray:
    """Cosine map [-1, 1] -> 8-bit gray, linear."""
    return np.round((np.clip(s, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def w_to_gray(w: np.ndarray) -> np.ndarray:
    """Attention map [0, max(W)] -> 8-bit gray; negative weights render black."""
    top = float(np.max(w))
    if top <= 0:
        return np.zeros(w.shape, dtype=np.uint8)
    return np.round(np.clip(w, 0.0, None) / top * 255.0).astype(np.uint8)


def upsample(gray: np.ndarray, factor: int = UPSAMPLE) -> np.ndarray:
    return np.repeat(np.repeat(gray, factor, axis=0), factor, axis=1)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, dims, maxval, body = blob.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def explain_export(pair: PairRecord, model: XCosModel, variant: str, threshold: float,
                   out_dir: str | Path, calibration: CalibrationTable | None = None,
                   teacher: TeacherModel | None = None, clip_negative: bool = False,
                   images: tuple[np.ndarray, np.ndarray] | None = None) -> ExplanationRecord:
    """Score one pair and write ``<pair_id>.json``, ``<pair_id>_S.pgm`` and ``<pair_id>_W.pgm``.

    ``images`` overrides the pair's own normalised pixels (e.g. occluded copies).
    """
    if variant == "correlated" and calibration is None:
        raise ValueError("the correlated variant needs a calibration table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    a, b = images if images is not None else (normalize(pair.image_a), normalize(pair.image_b))
    a, b = a[None], b[None]
    values, s, w = xcos_scores(model, a, b, variant, calibration, clip_negative)
    c_prime = float(teacher_scores(teacher, a, b)[0]) if teacher is not None else None
    record = ExplanationRecord(
        pair_id=pair.pair_id, image_a=pair.image_a.key, image_b=pair.image_b.key,
        xcos=float(values[0]), teacher=c_prime, s=s[0].tolist(), w=w[0].tolist(),
        variant=variant, threshold=float(threshold), decision=bool(values[0] > threshold))
    (out_dir / f"{pair.pair_id}.json").write_text(record.to_json(), encoding="utf-8")
    write_pgm(out_dir / f"{pair.pair_id}_S.pgm", upsample(s_to_gray(s[0])))
    write_pgm(out_dir / f"{pair.pair_id}_W.pgm", upsample(w_to_gray(w[0])))
    return record
