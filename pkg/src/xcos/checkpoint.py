"""Binary model checkpoints.

Layout (all integers little-endian u32)::

    b"XCOS" | version | len(config) | config JSON (UTF-8)
    then per parameter: len(name) | name | rank | extents... | float64 LE entries
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AttentionConfig, BackboneConfig, ConfigError, MarginConfig, TrainConfig, from_dict, to_dict
from .metric import CalibrationTable
from .training import TeacherModel, XCosModel

MAGIC = b"XCOS"
FORMAT_VERSION = 1
U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: XCosModel | TeacherModel
    margin: MarginConfig = field(default_factory=MarginConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    calibration: CalibrationTable | None = None
    thresholds: dict[str, float] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "teacher" if isinstance(self.model, TeacherModel) else "xcos"


def _config_json(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    cfg = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "backbone": to_dict(model.config),
        "attention": to_dict(ckpt.attention),
        "margin": to_dict(ckpt.margin),
        "train": to_dict(ckpt.train),
        "n_classes": int(model.classes.n_classes),
        "seed": int(ckpt.train.rng_seed),
        "calibration": ckpt.calibration.to_dict() if ckpt.calibration is not None else None,
        "thresholds": dict(ckpt.thresholds),
    }
    if isinstance(model, TeacherModel):
        cfg["teacher_dim"] = int(model.dim)
    return json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(ckpt: Checkpoint | XCosModel | TeacherModel) -> bytes:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint(ckpt)
    config = _config_json(ckpt)
    out = [MAGIC, U32.pack(FORMAT_VERSION), U32.pack(len(config)), config]
    for name, p in ckpt.model.named_parameters().items():
        raw = name.encode("utf-8")
        out += [U32.pack(len(raw)), raw, U32.pack(p.data.ndim)]
        out += [U32.pack(d) for d in p.data.shape]
        out.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(ckpt: Checkpoint | XCosModel | TeacherModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.source}: truncated while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.blob)})")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return U32.unpack(self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.blob)


def loads(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(blob, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format_version {version} (this build reads {FORMAT_VERSION})")
    try:
        cfg = json.loads(r.take(r.u32("config length"), "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: config block is not valid JSON: {exc}") from exc
    if cfg.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: config format_version {cfg.get('format_version')} unsupported")

    tensors: dict[str, np.ndarray] = {}
    while not r.done:
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * count, f"entries of {name}"), dtype="<f8").reshape(shape).astype(np.float64)

    try:
        backbone = from_dict(BackboneConfig, cfg["backbone"])
        train = from_dict(TrainConfig, cfg["train"])
        if cfg["kind"] == "teacher":
            model = TeacherModel(backbone, cfg["n_classes"], cfg["teacher_dim"])
        elif cfg["kind"] == "xcos":
            model = XCosModel(backbone, cfg["n_classes"])
        else:
            raise CheckpointError(f"{source}: unknown model kind {cfg['kind']!r}")
    except (ConfigError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{source}: invalid config block: {exc!r}") from exc
    expected = model.named_parameters()
    missing = set(expected) - set(tensors)
    extra = set(tensors) - set(expected)
    if missing or extra:
        raise CheckpointError(f"{source}: parameter names disagree with config "
                              f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, p in expected.items():
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(f"{source}: parameter {name} has shape {tensors[name].shape}, "
                                  f"config implies {p.data.shape}")
        p.data = tensors[name].copy()
        p.zero_grad()

    calibration = None
    if cfg.get("calibration") is not None:
        calibration = CalibrationTable.from_dict(cfg["calibration"])
    return Checkpoint(model, from_dict(MarginConfig, cfg["margin"]), train,
                      from_dict(AttentionConfig, cfg["attention"]), calibration, dict(cfg.get("thresholds", {})))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob, str(path))
