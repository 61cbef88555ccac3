"""Dataset ingestion and transformation.

File formats are parsed by hand with explicit bounds checks (IDX, NPY
v1/v2, CIFAR-10 binary records); nothing is ever read past a declared
length, and every malformed-input path raises a typed error instead of
crashing.  Also provides checksum-verified fetching, affine
augmentation, native corruption synthesis, minibatching, and a
synthetic blob dataset for network-free runs.
"""

from __future__ import annotations

import ast
import gzip
import hashlib
import json
import os
import time
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (ChecksumError, ConfigError, DataFormatError,
                     MissingArtifactError, NevoError, ShapeMismatchError,
                     UnsupportedCorruptionError)
from .rng import RngStream


@dataclass(frozen=True)
class Dataset:
    """Immutable image-classification split.

    images: float32 [N, C, H, W] in [0, 1]; labels: int64 [N].
    normalization, when present, is a per-channel (mean, std) pair kept
    for reporting; the pipeline itself consumes raw [0, 1] pixels.
    """

    images: np.ndarray
    labels: np.ndarray
    name: str = "unnamed"
    normalization: Optional[tuple] = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeMismatchError(
                f"dataset images must be NCHW, got {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise ShapeMismatchError(
                f"{len(self.images)} images vs labels shape "
                f"{tuple(self.labels.shape)}")

    def __len__(self):
        return len(self.labels)

    def take(self, n: int, name: Optional[str] = None) -> "Dataset":
        """First n samples (all, if n is 0 or exceeds N)."""
        if n <= 0 or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n],
                       name or self.name, self.normalization)


def _read_file(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"no such file: {path}")
    return path.read_bytes()


def _be_u32(buf: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(buf):
        raise DataFormatError(f"truncated header: no room for {what}")
    return int.from_bytes(buf[offset:offset + 4], "big")


_IDX_IMAGES_MAGIC = 2051
_IDX_LABELS_MAGIC = 2049


def _parse_idx(buf: bytes, expect_magic: int, source: str) -> np.ndarray:
    magic = _be_u32(buf, 0, "magic")
    if magic != expect_magic:
        raise DataFormatError(
            f"{source}: bad magic {magic:#010x} (expected {expect_magic:#010x})")
    ndim = magic & 0xFF
    dims = [_be_u32(buf, 4 + 4 * i, f"dimension {i}") for i in range(ndim)]
    if any(d < 0 for d in dims):
        raise DataFormatError(f"{source}: negative dimension")
    need = 1
    for d in dims:
        need *= d
    start = 4 + 4 * ndim
    have = len(buf) - start
    if have < need:
        raise DataFormatError(
            f"{source}: truncated payload, need {need} bytes, have {have}")
    if have > need:
        raise DataFormatError(
            f"{source}: {have - need} trailing bytes after payload")
    return np.frombuffer(buf, dtype=np.uint8, count=need,
                         offset=start).reshape(dims)


def load_idx(images_path, labels_path, name: Optional[str] = None) -> Dataset:
    """Big-endian IDX pair: u8 image tensor (magic 2051) + u8 labels
    (magic 2049).  Pixels come back as float32 in [0, 1]."""
    raw_images = _parse_idx(_read_file(images_path), _IDX_IMAGES_MAGIC,
                            str(images_path))
    raw_labels = _parse_idx(_read_file(labels_path), _IDX_LABELS_MAGIC,
                            str(labels_path))
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise DataFormatError(
            f"images file has N={raw_images.shape[0]}, labels file has "
            f"N={raw_labels.shape[0]}")
    images = (raw_images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(images, raw_labels.astype(np.int64),
                   name or Path(images_path).stem)


_NPY_MAGIC = b"\x93NUMPY"
_NPY_DTYPES = {"|u1": np.uint8, "<f4": np.float32, "<f8": np.float64,
               "<i4": np.int32, "<i8": np.int64}
_MAX_NPY_HEADER = 1 << 20


def load_npy(path, scale_u8: bool = True) -> np.ndarray:
    """NPY v1/v2 reader (C-order, little-endian payloads only).

    u8 payloads are scaled to float32 [0, 1] unless scale_u8 is False.
    """
    buf = _read_file(path)
    src = str(path)
    if len(buf) < 10 or buf[:6] != _NPY_MAGIC:
        raise DataFormatError(f"{src}: not an NPY file")
    major, minor = buf[6], buf[7]
    if major == 1:
        hlen, start = int.from_bytes(buf[8:10], "little"), 10
    elif major == 2:
        if len(buf) < 12:
            raise DataFormatError(f"{src}: truncated NPY v2 header length")
        hlen, start = int.from_bytes(buf[8:12], "little"), 12
    else:
        raise DataFormatError(f"{src}: unsupported NPY version {major}.{minor}")
    if hlen > _MAX_NPY_HEADER:
        raise DataFormatError(f"{src}: header length {hlen} exceeds limit")
    if start + hlen > len(buf):
        raise DataFormatError(f"{src}: truncated header")
    try:
        header = ast.literal_eval(buf[start:start + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise DataFormatError(f"{src}: unparseable NPY header") from exc
    if (not isinstance(header, dict) or
            set(header) != {"descr", "fortran_order", "shape"}):
        raise DataFormatError(f"{src}: malformed NPY header dict")
    if header["fortran_order"] is not False:
        raise DataFormatError(f"{src}: Fortran-order arrays unsupported")
    descr = header["descr"]
    if descr not in _NPY_DTYPES:
        raise DataFormatError(f"{src}: unsupported dtype {descr!r}")
    shape = header["shape"]
    if (not isinstance(shape, tuple) or
            not all(isinstance(v, int) and v >= 0 for v in shape)):
        raise DataFormatError(f"{src}: malformed shape {shape!r}")
    dtype = np.dtype(_NPY_DTYPES[descr])
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    have = len(buf) - start - hlen
    if have < need:
        raise DataFormatError(
            f"{src}: truncated payload, need {need} bytes, have {have}")
    if have > need:
        raise DataFormatError(f"{src}: {have - need} trailing bytes")
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                        offset=start + hlen).reshape(shape)
    if dtype == np.uint8 and scale_u8:
        return arr.astype(np.float32) / 255.0
    return arr.copy()


_DESCR_OF = {np.dtype(np.uint8): "|u1", np.dtype(np.float32): "<f4",
             np.dtype(np.float64): "<f8", np.dtype(np.int32): "<i4",
             np.dtype(np.int64): "<i8"}


def save_npy(path, arr: np.ndarray):
    """NPY v1 writer for the dtypes load_npy accepts."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DESCR_OF:
        raise DataFormatError(f"save_npy: unsupported dtype {arr.dtype}")
    header = ("{'descr': %r, 'fortran_order': False, 'shape': %r, }"
              % (_DESCR_OF[arr.dtype], tuple(int(v) for v in arr.shape)))
    pad = -(len(_NPY_MAGIC) + 4 + len(header) + 1) % 64
    header = header + " " * pad + "\n"
    blob = _NPY_MAGIC + bytes([1, 0]) + len(header).to_bytes(2, "little") \
        + header.encode("latin1") + arr.tobytes()
    _atomic_write(Path(path), blob)


_CIFAR_RECORD = 3073


def load_cifar10(paths, name: str = "cifar10") -> Dataset:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 pixel
    bytes (RGB planes, 32x32 each)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks, labels = [], []
    for path in paths:
        buf = _read_file(path)
        if len(buf) == 0 or len(buf) % _CIFAR_RECORD != 0:
            raise DataFormatError(
                f"{path}: size {len(buf)} is not a positive multiple of "
                f"{_CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        lab = rec[:, 0]
        bad = np.nonzero(lab > 9)[0]
        if bad.size:
            raise DataFormatError(
                f"{path}: label byte {int(lab[bad[0]])} at record "
                f"{int(bad[0])} out of range 0..9")
        labels.append(lab.astype(np.int64))
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(chunks).astype(np.float32) / 255.0
    return Dataset(images, np.concatenate(labels), name)


# --- fetching -------------------------------------------------------------

# sha256 digests cover the gzip archives exactly as served.  The
# fashion split digests are trust-on-first-use (null): the observed
# digest is recorded in the cache sidecar on first fetch and enforced
# from then on.
MANIFEST = {
    "mnist": {
        "base_url": "https://ossci-datasets.s3.amazonaws.com/mnist/",
        "files": {
            "train-images-idx3-ubyte": {
                "gz": "train-images-idx3-ubyte.gz",
                "sha256": "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609"},
            "train-labels-idx1-ubyte": {
                "gz": "train-labels-idx1-ubyte.gz",
                "sha256": "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c"},
            "t10k-images-idx3-ubyte": {
                "gz": "t10k-images-idx3-ubyte.gz",
                "sha256": "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6"},
            "t10k-labels-idx1-ubyte": {
                "gz": "t10k-labels-idx1-ubyte.gz",
                "sha256": "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6"},
        },
    },
    "fashion_mnist": {
        "base_url": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
        "files": {
            "train-images-idx3-ubyte": {"gz": "train-images-idx3-ubyte.gz",
                                        "sha256": None},
            "train-labels-idx1-ubyte": {"gz": "train-labels-idx1-ubyte.gz",
                                        "sha256": None},
            "t10k-images-idx3-ubyte": {"gz": "t10k-images-idx3-ubyte.gz",
                                       "sha256": None},
            "t10k-labels-idx1-ubyte": {"gz": "t10k-labels-idx1-ubyte.gz",
                                       "sha256": None},
        },
    },
}


def cache_dir() -> Path:
    env = os.environ.get("NEVO_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "nevo"


def _atomic_write(path: Path, blob: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


class _FileLock:
    """Advisory lock via exclusive creation of <path>.lock."""

    def __init__(self, path: Path, timeout: float = 30.0):
        self.lock = path.with_name(path.name + ".lock")
        self.timeout = timeout

    def __enter__(self):
        self.lock.parent.mkdir(parents=True, exist_ok=True)
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.close(fd)
                return self
            except FileExistsError:
                if time.monotonic() > deadline:
                    raise NevoError(f"timed out waiting for lock {self.lock}")
                time.sleep(0.05)

    def __exit__(self, *exc):
        try:
            os.unlink(self.lock)
        except FileNotFoundError:
            pass
        return False


def _default_opener(url: str) -> bytes:
    with urllib.request.urlopen(url, timeout=60) as resp:
        return resp.read()


def _sidecar_path(ds_dir: Path) -> Path:
    return ds_dir / "digests.json"


def _load_sidecar(ds_dir: Path) -> dict:
    p = _sidecar_path(ds_dir)
    if not p.is_file():
        return {}
    try:
        return json.loads(p.read_text())
    except (OSError, json.JSONDecodeError):
        return {}


def fetch(name: str, base_url: Optional[str] = None, out_dir=None,
          opener=None, manifest=None) -> dict:
    """Download-and-verify the four IDX files of a dataset.

    Returns {logical name: decompressed path}.  The gz payload is
    checked against the pinned sha256 before anything lands in the
    cache; mismatches are quarantined.  A warm cache (sidecar digest
    match) performs zero network requests.  One retry per file on
    transport failure.
    """
    manifest = manifest if manifest is not None else MANIFEST
    if name not in manifest:
        raise ConfigError("/fetch/dataset",
                          f"unknown dataset {name!r}; available: "
                          f"{', '.join(sorted(manifest))}")
    entry = manifest[name]
    base = base_url or entry["base_url"]
    opener = opener or _default_opener
    ds_dir = Path(out_dir) if out_dir is not None else cache_dir() / name
    ds_dir.mkdir(parents=True, exist_ok=True)

    out = {}
    for logical, info in entry["files"].items():
        target = ds_dir / logical
        with _FileLock(target):
            sidecar = _load_sidecar(ds_dir)
            if target.is_file():
                digest = hashlib.sha256(target.read_bytes()).hexdigest()
                known = sidecar.get(logical, {}).get("sha256")
                if known is None:
                    # preexisting file: adopt it and pin its digest
                    sidecar.setdefault(logical, {})["sha256"] = digest
                    _atomic_write(_sidecar_path(ds_dir),
                                  json.dumps(sidecar, indent=2).encode())
                    out[logical] = target
                    continue
                if digest == known:
                    out[logical] = target
                    continue
                quarantine = target.with_name(target.name + ".quarantine")
                os.replace(target, quarantine)
                raise ChecksumError(
                    f"{target}: cached file sha256 {digest} != recorded "
                    f"{known}; quarantined at {quarantine}")

            url = base + info["gz"]
            blob = None
            last = None
            for _ in range(2):
                try:
                    blob = opener(url)
                    break
                except Exception as exc:  # transport errors are opener-defined
                    last = exc
            if blob is None:
                raise MissingArtifactError(
                    f"failed to download {url}: {last}")
            gz_digest = hashlib.sha256(blob).hexdigest()
            pinned = info["sha256"]
            if pinned is not None and gz_digest != pinned:
                quarantine = target.with_name(target.name + ".gz.quarantine")
                _atomic_write(quarantine, blob)
                raise ChecksumError(
                    f"{info['gz']}: sha256 {gz_digest} != pinned {pinned}; "
                    f"quarantined at {quarantine}")
            try:
                payload = gzip.decompress(blob)
            except (OSError, EOFError) as exc:
                raise DataFormatError(
                    f"{info['gz']}: not a valid gzip stream: {exc}") from exc
            _atomic_write(target, payload)
            sidecar.setdefault(logical, {})
            sidecar[logical]["gz_sha256"] = gz_digest
            sidecar[logical]["sha256"] = hashlib.sha256(payload).hexdigest()
            _atomic_write(_sidecar_path(ds_dir),
                          json.dumps(sidecar, indent=2).encode())
            out[logical] = target
    return out


def load_idx_dir(ds_dir, name: str) -> tuple:
    """(train, test) Dataset pair from a directory of the four
    conventionally named IDX files."""
    ds_dir = Path(ds_dir)
    train = load_idx(ds_dir / "train-images-idx3-ubyte",
                     ds_dir / "train-labels-idx1-ubyte", f"{name}/train")
    test = load_idx(ds_dir / "t10k-images-idx3-ubyte",
                    ds_dir / "t10k-labels-idx1-ubyte", f"{name}/test")
    return train, test


# --- geometry -------------------------------------------------------------


def _affine_bilinear(images: np.ndarray, angles_deg: np.ndarray,
                     shifts: np.ndarray, zooms: np.ndarray) -> np.ndarray:
    """Per-sample rotate/zoom about the center plus translate, bilinear
    sampling, zero fill outside the canvas.

    With angle 0, shift (0,0), zoom 1 the output is bitwise the input.
    """
    n, c, h, w = images.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angles_deg).astype(np.float64)
    cos, sin = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # destination -> source mapping (inverse transform)
    dy = yy[None] - cy - shifts[:, 0, None, None]
    dx = xx[None] - cx - shifts[:, 1, None, None]
    inv = 1.0 / zooms[:, None, None]
    sy = (cos[:, None, None] * dy - sin[:, None, None] * dx) * inv + cy
    sx = (sin[:, None, None] * dy + cos[:, None, None] * dx) * inv + cx

    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy = (sy - y0).astype(images.dtype)
    wx = (sx - x0).astype(images.dtype)

    out = np.zeros_like(images)
    ni = np.arange(n)[:, None, None]
    for oy, ox, wgt in ((y0, x0, (1 - wy) * (1 - wx)),
                        (y0, x0 + 1, (1 - wy) * wx),
                        (y0 + 1, x0, wy * (1 - wx)),
                        (y0 + 1, x0 + 1, wy * wx)):
        inside = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
        yc = np.clip(oy, 0, h - 1)
        xc = np.clip(ox, 0, w - 1)
        vals = images[ni, :, yc, xc]          # [n, h, w, c]
        vals = vals.transpose(0, 3, 1, 2)
        out += vals * (wgt * inside)[:, None, :, :].astype(images.dtype)
    return out


def augment(data: Dataset, multiplier: int, max_shift_px: int = 2,
            max_rotate_deg: float = 15.0,
            stream: Optional[RngStream] = None) -> Dataset:
    """Grow a dataset to multiplier*N samples: the originals first,
    then randomly shifted/rotated copies with labels preserved."""
    if multiplier < 1:
        raise ConfigError("/augment/multiplier", "must be >= 1")
    if multiplier == 1:
        return data
    if stream is None:
        stream = RngStream(0)
    gen = stream.generator()
    n = len(data)
    parts = [data.images]
    for _ in range(multiplier - 1):
        shifts = gen.integers(-max_shift_px, max_shift_px + 1,
                              size=(n, 2)).astype(np.float64)
        angles = gen.uniform(-max_rotate_deg, max_rotate_deg, n)
        parts.append(_affine_bilinear(data.images, angles, shifts,
                                      np.ones(n)))
    images = np.concatenate(parts)
    labels = np.tile(data.labels, multiplier)
    return Dataset(images, labels, f"{data.name}/aug{multiplier}",
                   data.normalization)


# --- corruption -----------------------------------------------------------

# Magnitude per severity 1..5; each row is monotone in distortion
# strength.  These constants are the single source of truth for native
# corruption synthesis.
SEVERITY_TABLES = {
    "gaussian_noise": (0.02, 0.05, 0.10, 0.15, 0.20),   # additive sigma
    "shot_noise": (200.0, 60.0, 25.0, 12.0, 6.0),       # photons/unit
    "impulse_noise": (0.01, 0.03, 0.06, 0.10, 0.17),    # flip probability
    "brightness": (0.05, 0.12, 0.20, 0.30, 0.42),       # additive offset
    "contrast": (0.75, 0.55, 0.40, 0.28, 0.18),         # gain toward 0.5
    "translate": (1.0, 2.0, 3.0, 5.0, 7.0),             # offset px
    "rotate": (5.0, 10.0, 15.0, 25.0, 35.0),            # degrees
    "scale": (1.08, 1.16, 1.26, 1.38, 1.52),            # zoom factor
    "pixelate": (0.7, 0.55, 0.45, 0.35, 0.25),          # kept resolution
    "stripe": (0.08, 0.14, 0.20, 0.28, 0.36),           # inverted band frac
}

# Kernel- or rendering-based corruptions are consumed from published
# NPY archives rather than re-synthesized.
PRECOMPUTED_ONLY = frozenset({
    "gaussian_blur", "glass_blur", "motion_blur", "zoom_blur",
    "defocus_blur", "fog", "frost", "snow", "spatter", "elastic_transform",
    "jpeg_compression", "canny_edges", "dotted_line", "zigzag",
})


def corrupt(data: Dataset, kind: str, severity: int,
            stream: Optional[RngStream] = None,
            magnitude: Optional[float] = None) -> Dataset:
    """Apply one native corruption at the given severity.

    `magnitude` overrides the severity table entry (useful for
    identity checks at zero distortion).  Labels are untouched; output
    pixels are clamped to [0, 1].
    """
    if kind in PRECOMPUTED_ONLY:
        raise UnsupportedCorruptionError(
            f"corruption {kind!r} is not generated natively; load a "
            f"precomputed NPY archive instead")
    if kind not in SEVERITY_TABLES:
        raise UnsupportedCorruptionError(
            f"unknown corruption {kind!r}; native kinds: "
            f"{', '.join(sorted(SEVERITY_TABLES))}")
    if not 1 <= severity <= 5:
        raise ConfigError("/corrupt/severity", "must be in 1..5")
    if stream is None:
        stream = RngStream(0)
    gen = stream.generator()
    mag = SEVERITY_TABLES[kind][severity - 1] if magnitude is None else magnitude
    x = data.images
    n = len(data)

    if kind == "gaussian_noise":
        out = x + gen.normal(0.0, mag, x.shape).astype(x.dtype)
    elif kind == "shot_noise":
        if mag <= 0:
            out = x.copy()
        else:
            out = (gen.poisson(x.astype(np.float64) * mag) / mag).astype(x.dtype)
    elif kind == "impulse_noise":
        flip = gen.random(x.shape) < mag
        salt = gen.integers(0, 2, x.shape).astype(x.dtype)
        out = np.where(flip, salt, x)
    elif kind == "brightness":
        out = x + np.asarray(mag, dtype=x.dtype)
    elif kind == "contrast":
        out = (x - 0.5) * np.asarray(mag, dtype=x.dtype) + 0.5
    elif kind == "translate":
        phi = gen.uniform(0.0, 2.0 * np.pi, n)
        shifts = np.stack([np.round(mag * np.sin(phi)),
                           np.round(mag * np.cos(phi))], axis=1)
        out = _affine_bilinear(x, np.zeros(n), shifts, np.ones(n))
    elif kind == "rotate":
        signs = gen.integers(0, 2, n) * 2 - 1
        out = _affine_bilinear(x, signs * mag, np.zeros((n, 2)), np.ones(n))
    elif kind == "scale":
        out = _affine_bilinear(x, np.zeros(n), np.zeros((n, 2)),
                               np.full(n, mag))
    elif kind == "pixelate":
        h, w = x.shape[2:]
        sh = max(1, int(round(h * mag)))
        sw = max(1, int(round(w * mag)))
        rows = (np.arange(sh) * h) // sh
        cols = (np.arange(sw) * w) // sw
        small = x[:, :, rows][:, :, :, cols]
        back_r = (np.arange(h) * sh) // h
        back_c = (np.arange(w) * sw) // w
        out = small[:, :, back_r][:, :, :, back_c]
    else:  # stripe
        h = x.shape[2]
        band = max(1, int(round(h * mag)))
        lo = (h - band) // 2
        out = x.copy()
        out[:, :, lo:lo + band, :] = 1.0 - out[:, :, lo:lo + band, :]

    out = np.clip(out, 0.0, 1.0)
    return Dataset(out, data.labels, f"{data.name}/{kind}:{severity}",
                   data.normalization)


def batches(data: Dataset, batch_size: int, shuffle: bool = False, rng=None):
    """Yield (images, labels) covering every sample exactly once; the
    last batch may be short."""
    if batch_size < 1:
        raise ConfigError("/bp/batch_size", "must be >= 1")
    n = len(data)
    if shuffle:
        if rng is None:
            raise ConfigError("/bp/seed", "shuffling requires an RNG")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        yield data.images[idx], data.labels[idx]


def make_synthetic(n: int, classes: int = 10, shape=(1, 28, 28),
                   noise: float = 0.15,
                   stream: Optional[RngStream] = None,
                   name: str = "synthetic") -> Dataset:
    """Blob dataset: one coarse random template per class plus pixel
    noise.  Linearly separable enough that small networks train on it in
    seconds, which makes it the stand-in for integration runs."""
    if stream is None:
        stream = RngStream(0)
    gen = stream.generator()
    c, h, w = shape
    coarse = gen.random((classes, c, 7, 7))
    reps_h = -(-h // 7)
    reps_w = -(-w // 7)
    templates = np.kron(coarse, np.ones((1, 1, reps_h, reps_w)))[:, :, :h, :w]
    templates = (0.1 + 0.8 * templates).astype(np.float32)
    labels = gen.integers(0, classes, n).astype(np.int64)
    images = templates[labels] + gen.normal(0.0, noise, (n, c, h, w)).astype(np.float32)
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels, name)


def make_synthetic_pair(n_train: int, n_test: int, classes: int = 10,
                        shape=(1, 28, 28), noise: float = 0.15,
                        stream: Optional[RngStream] = None,
                        name: str = "synthetic") -> tuple:
    """Train/test splits drawn from one pool so both use the same class
    templates.  Separate make_synthetic calls would invent disjoint
    classes and make held-out accuracy meaningless."""
    whole = make_synthetic(n_train + n_test, classes, shape, noise, stream,
                           name)
    train = Dataset(whole.images[:n_train], whole.labels[:n_train],
                    f"{name}/train")
    test = Dataset(whole.images[n_train:], whole.labels[n_train:],
                   f"{name}/test")
    return train, test
