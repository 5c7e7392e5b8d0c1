"""
CT windowing, slice/mask file formats, manifests, splitting and a synthetic
phantom generator.

File formats (all little-endian):

* slice image: ``b"HUSL"``, u32 height, u32 width, then h*w int16 HU values
* mask: ``b"MSK0"``, u32 height, u32 width, then h*w bytes in {0, 1}
* manifest: UTF-8 CSV with header ``image_path,mask_path,id``; relative
  paths resolve against the manifest's directory
"""

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, EmptyInputError, FormatError, IoError

IMAGE_MAGIC = b"HUSL"
MASK_MAGIC = b"MSK0"
MANIFEST_HEADER = ["image_path", "mask_path", "id"]
_HEADER = struct.Struct("<4sII")

# phantom generator contract, in HU
ORGAN_HU = (40.0, 70.0)
BACKGROUND_HU = (-100.0, 30.0)
NOISE_SD = 8.0
IMAGE_HU_RANGE = (-130, 100)


@dataclass(frozen=True)
class WindowSpec:
    wl: float = 60.0
    ww: float = 200.0

    def __post_init__(self):
        if not self.ww > 0:
            raise ConfigError(f"window width must be positive, got {self.ww}")


def hu_window(image, spec: WindowSpec) -> np.ndarray:
    """Map HU to [0, 1]: the lower window edge goes to 0, the upper to 1."""
    if not spec.ww > 0:
        raise ConfigError(f"window width must be positive, got {spec.ww}")
    lo = spec.wl - spec.ww / 2.0
    return np.clip((np.asarray(image, dtype=np.float64) - lo) / spec.ww, 0.0, 1.0)


@dataclass
class SliceSample:
    image: np.ndarray
    mask: np.ndarray
    id: str
    ellipse: Optional["Ellipse"] = field(default=None, compare=False)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise FormatError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str
    id: str


@dataclass
class Manifest:
    entries: list = field(default_factory=list)
    root: str = "."
    split_seed: Optional[int] = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def subset(self, entries) -> "Manifest":
        return Manifest(list(entries), self.root, self.split_seed)


# ---------------------------------------------------------------- binary files


def _write_atomic(path, payload: bytes):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise IoError(f"cannot write {path}: {exc.strerror or exc}", path) from exc


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {os.fspath(path)}: {exc.strerror or exc}", os.fspath(path)) from exc


def encode_slice(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"slice must be 2-D, got {image.shape}")
    if image.min(initial=0) < -32768 or image.max(initial=0) > 32767:
        raise FormatError("HU values out of int16 range")
    h, w = image.shape
    return _HEADER.pack(IMAGE_MAGIC, h, w) + image.astype("<i2").tobytes()


def encode_mask(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError(f"mask must be 2-D, got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise FormatError("mask values must be 0 or 1")
    h, w = mask.shape
    return _HEADER.pack(MASK_MAGIC, h, w) + mask.astype(np.uint8).tobytes()


def _decode(buf: bytes, magic: bytes, dtype, itemsize: int, what: str) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{what}: truncated header ({len(buf)} bytes)", offset=len(buf))
    got, h, w = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"{what}: bad magic {got!r}, expected {magic!r}", offset=0)
    if h == 0 or w == 0:
        raise FormatError(f"{what}: zero dimension {h}x{w}", offset=4)
    need = _HEADER.size + h * w * itemsize
    if len(buf) != need:
        raise FormatError(f"{what}: {len(buf)} bytes, header {h}x{w} needs {need}", offset=min(len(buf), need))
    return np.frombuffer(buf, dtype=dtype, offset=_HEADER.size).reshape(h, w)


def decode_slice(buf: bytes) -> np.ndarray:
    return _decode(buf, IMAGE_MAGIC, "<i2", 2, "slice").astype(np.int16)


def decode_mask(buf: bytes) -> np.ndarray:
    mask = _decode(buf, MASK_MAGIC, np.uint8, 1, "mask").copy()
    if mask.max(initial=0) > 1:
        off = _HEADER.size + int(np.argmax(mask.reshape(-1) > 1))
        raise FormatError("mask: value outside {0, 1}", offset=off)
    return mask


def write_image_file(path, image):
    _write_atomic(path, encode_slice(image))


def write_mask_file(path, mask):
    _write_atomic(path, encode_mask(mask))


def read_image_file(path) -> np.ndarray:
    try:
        return decode_slice(_read_bytes(path))
    except FormatError as exc:
        raise FormatError(f"{os.fspath(path)}: {exc}", exc.offset) from None


def read_mask_file(path) -> np.ndarray:
    try:
        return decode_mask(_read_bytes(path))
    except FormatError as exc:
        raise FormatError(f"{os.fspath(path)}: {exc}", exc.offset) from None


def write_slice(sample: SliceSample, image_path, mask_path):
    write_image_file(image_path, sample.image)
    write_mask_file(mask_path, sample.mask)


def read_slice(entry: ManifestEntry, manifest: Optional[Manifest] = None) -> SliceSample:
    resolve = manifest.resolve if manifest is not None else (lambda p: p)
    image = read_image_file(resolve(entry.image_path))
    mask = read_mask_file(resolve(entry.mask_path))
    return SliceSample(image, mask, entry.id)


def read_samples(manifest: Manifest) -> list:
    return [read_slice(e, manifest) for e in manifest]


# ---------------------------------------------------------------- manifests


def load_manifest(path) -> Manifest:
    path = os.fspath(path)
    raw = _read_bytes(path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not UTF-8", offset=exc.start) from None
    root = os.path.dirname(os.path.abspath(path))
    if not text.strip():
        return Manifest([], root)
    first_line = text.split("\n", 1)[0].rstrip("\r")
    if first_line.split(",") != MANIFEST_HEADER:
        bad = next((i for i, (a, b) in enumerate(zip(first_line, ",".join(MANIFEST_HEADER))) if a != b),
                   min(len(first_line), len(",".join(MANIFEST_HEADER))))
        raise FormatError(f"{path}: header must be {','.join(MANIFEST_HEADER)!r}", offset=bad)
    m = Manifest([], root)
    seen = set()
    offset = len(first_line) + 1
    for line in text.split("\n")[1:]:
        if line.strip():
            row = next(csv.reader([line.rstrip("\r")]))
            if len(row) != 3:
                raise FormatError(f"{path}: expected 3 fields, got {len(row)}", offset=offset)
            entry = ManifestEntry(*row)
            for key in (entry.image_path, entry.mask_path):
                full = m.resolve(key)
                if full in seen:
                    raise FormatError(f"{path}: duplicate path {key}", offset=offset)
                seen.add(full)
                if not os.path.isfile(full):
                    raise IoError(f"missing file {full}", full)
            m.entries.append(entry)
        offset += len(line.encode("utf-8")) + 1
    return m


def write_manifest(path, manifest: Manifest):
    lines = [",".join(MANIFEST_HEADER)]
    for e in manifest:
        lines.append(f"{e.image_path},{e.mask_path},{e.id}")
    _write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------- splitting


def _split(items: list, train_frac: float, seed: int):
    if not 0 < train_frac < 1:
        raise ConfigError(f"train_frac must be in (0, 1), got {train_frac}")
    if not items:
        raise EmptyInputError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(items))
    k = math.floor(train_frac * len(items))
    return [items[i] for i in order[:k]], [items[i] for i in order[k:]]


def split_dataset(m: Manifest, train_frac: float = 0.8, seed: int = 0):
    """Seeded shuffle; the first floor(train_frac * N) entries train."""
    train, test = _split(list(m.entries), train_frac, seed)
    out = (Manifest(train, m.root, seed), Manifest(test, m.root, seed))
    return out


def split_train_val(m: Manifest, val_frac: float = 0.2, seed: int = 0):
    """Nested split of a training manifest into (train, validation)."""
    return split_dataset(m, 1.0 - val_frac, seed + 1)


def split_samples(samples: list, train_frac: float = 0.8, seed: int = 0):
    return _split(list(samples), train_frac, seed)


# ---------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float

    def contains(self, y: float, x: float) -> bool:
        dy, dx = y - self.cy, x - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (dx * c + dy * s) / self.rx
        v = (-dx * s + dy * c) / self.ry
        return u * u + v * v <= 1.0

    def mask(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        dy, dx = yy - self.cy, xx - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (dx * c + dy * s) / self.rx
        v = (-dx * s + dy * c) / self.ry
        return (u * u + v * v <= 1.0).astype(np.uint8)


def synth_phantom(size: int, rng, sample_id: str = "phantom") -> SliceSample:
    """One elliptical organ on a smoothly varying soft-tissue background.

    The background ramps linearly between two levels in ``BACKGROUND_HU``;
    the organ has a uniform level in ``ORGAN_HU``; Gaussian noise of
    ``NOISE_SD`` HU is added and the result clipped to ``IMAGE_HU_RANGE``.
    """
    rng = np.random.default_rng(rng)
    ell = Ellipse(
        cy=rng.uniform(0.35, 0.65) * size,
        cx=rng.uniform(0.35, 0.65) * size,
        ry=rng.uniform(0.15, 0.3) * size,
        rx=rng.uniform(0.15, 0.3) * size,
        angle=rng.uniform(0.0, math.pi),
    )
    b0, b1 = rng.uniform(*BACKGROUND_HU, size=2)
    theta = rng.uniform(0.0, 2 * math.pi)
    organ = rng.uniform(*ORGAN_HU)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = 0.5 + 0.5 * ((xx - 0.5) * math.cos(theta) + (yy - 0.5) * math.sin(theta)) * math.sqrt(2)
    background = b0 + (b1 - b0) * np.clip(ramp, 0.0, 1.0)
    mask = ell.mask(size)
    image = np.where(mask == 1, organ, background) + rng.normal(0.0, NOISE_SD, (size, size))
    image = np.clip(np.rint(image), *IMAGE_HU_RANGE).astype(np.int16)
    return SliceSample(image, mask, sample_id, ellipse=ell)


def synth_samples(count: int, size: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return [synth_phantom(size, rng, f"phantom_{i:04d}") for i in range(count)]


def synth_generate(count: int, size: int, seed: int, out_dir) -> Manifest:
    """Write ``count`` phantoms plus ``manifest.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}", str(out_dir)) from exc
    m = Manifest([], str(out_dir.resolve()), seed)
    for s in synth_samples(count, size, seed):
        image_name, mask_name = f"{s.id}.husl", f"{s.id}.msk"
        write_slice(s, out_dir / image_name, out_dir / mask_name)
        m.entries.append(ManifestEntry(image_name, mask_name, s.id))
    write_manifest(out_dir / "manifest.csv", m)
    return m


# ---------------------------------------------------------------- PNG


def write_png(path, gray: np.ndarray):
    """Write an 8-bit grayscale PNG; ``gray`` is uint8 or floats in [0, 1]."""
    from PIL import Image

    arr = np.asarray(gray)
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    try:
        Image.fromarray(arr).save(os.fspath(path), format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {os.fspath(path)}: {exc}", os.fspath(path)) from exc


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(os.fspath(path)) as im:
        return np.asarray(im.convert("L"))
