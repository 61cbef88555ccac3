"""Durable state: binary checkpoints, population directories, run
manifests, and config parsing.

Checkpoint layout (all integers little-endian):

    offset  size  field
    0       4     magic b"NEVO"
    4       4     u32 format version (currently 1)
    8       1     u8 dtype tag (0 = float32, 1 = float64)
    9       4     u32 spec JSON length, then that many UTF-8 bytes
    ...     4     u32 metadata JSON length, then that many UTF-8 bytes
    ...     8     u64 d (parameter count)
    ...     d*sz  parameter payload, little-endian
    ...     4     u32 CRC-32 of the payload

Every length is bounds-checked against the file before use; a
checkpoint is self-describing via the embedded spec, so downstream
stages never need the original config to consume one.  Writes go to a
temp file and are renamed into place.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (CheckpointFormatError, ChecksumError, ConfigError,
                     MissingArtifactError)
from .network import NetworkSpec, param_count, zoo_spec
from .training import CheckpointRing, TrainConfig
from .evolution import DEFAULT_GRID, DeConfig, Population

_MAGIC = b"NEVO"
_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_MAX_JSON = 1 << 24


@dataclass(frozen=True)
class Checkpoint:
    spec: NetworkSpec
    params: np.ndarray
    meta: dict = field(default_factory=dict)


def _canon_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    params = ckpt.params
    if params.ndim != 1:
        raise CheckpointFormatError(
            f"checkpoint params must be 1-D, got {tuple(params.shape)}")
    dtype = np.dtype(params.dtype)
    if dtype not in _DTYPE_TAGS:
        raise CheckpointFormatError(f"unsupported parameter dtype {dtype}")
    d = param_count(ckpt.spec)
    if params.shape[0] != d:
        raise CheckpointFormatError(
            f"parameter count {params.shape[0]} does not match spec's {d}")
    payload = np.ascontiguousarray(params, dtype=dtype.newbyteorder("<")).tobytes()
    spec_blob = _canon_json(ckpt.spec.to_json())
    meta_blob = _canon_json(ckpt.meta)
    out = bytearray()
    out += _MAGIC
    out += _VERSION.to_bytes(4, "little")
    out.append(_DTYPE_TAGS[dtype])
    out += len(spec_blob).to_bytes(4, "little") + spec_blob
    out += len(meta_blob).to_bytes(4, "little") + meta_blob
    out += params.shape[0].to_bytes(8, "little")
    out += payload
    out += zlib.crc32(payload).to_bytes(4, "little")
    return bytes(out)


def save_checkpoint(ckpt: Checkpoint, path):
    from .data import _atomic_write

    _atomic_write(Path(path), checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.off = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.off + n > len(self.buf):
            raise CheckpointFormatError(
                f"{self.source}: truncated, {what} needs {n} bytes at offset "
                f"{self.off}, file has {len(self.buf)}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return int.from_bytes(self.take(4, what), "little")

    def u64(self, what: str) -> int:
        return int.from_bytes(self.take(8, what), "little")


def parse_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != _MAGIC:
        raise CheckpointFormatError(
            f"{source}: bad magic {magic!r} (expected {_MAGIC!r})")
    version = r.u32("version")
    if version > _VERSION:
        raise CheckpointFormatError(
            f"{source}: format version {version} newer than supported "
            f"{_VERSION}")
    if version < 1:
        raise CheckpointFormatError(f"{source}: bad format version {version}")
    tag = r.take(1, "dtype tag")[0]
    if tag not in _TAG_DTYPES:
        raise CheckpointFormatError(f"{source}: unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]

    spec_len = r.u32("spec length")
    if spec_len > _MAX_JSON:
        raise CheckpointFormatError(
            f"{source}: spec length {spec_len} exceeds limit")
    spec_blob = r.take(spec_len, "spec JSON")
    try:
        spec = NetworkSpec.from_json(json.loads(spec_blob.decode()), "/spec")
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError) as exc:
        raise CheckpointFormatError(
            f"{source}: embedded spec invalid: {exc}") from exc

    meta_len = r.u32("meta length")
    if meta_len > _MAX_JSON:
        raise CheckpointFormatError(
            f"{source}: meta length {meta_len} exceeds limit")
    meta_blob = r.take(meta_len, "meta JSON")
    try:
        meta = json.loads(meta_blob.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(
            f"{source}: metadata invalid: {exc}") from exc
    if not isinstance(meta, dict):
        raise CheckpointFormatError(f"{source}: metadata must be an object")

    d = r.u64("parameter count")
    expected = param_count(spec)
    if d != expected:
        raise CheckpointFormatError(
            f"{source}: parameter count {d} does not match spec's {expected}")
    payload = r.take(d * dtype.itemsize, "parameter payload")
    crc = r.u32("checksum")
    if r.off != len(buf):
        raise CheckpointFormatError(
            f"{source}: {len(buf) - r.off} trailing bytes")
    actual = zlib.crc32(payload)
    if crc != actual:
        raise ChecksumError(
            f"{source}: payload CRC {actual:#010x} != stored {crc:#010x}")
    params = np.frombuffer(payload, dtype=dtype).copy()
    return Checkpoint(spec, params, meta)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"no such checkpoint: {path}")
    return parse_checkpoint(path.read_bytes(), str(path))


# --- population directories -------------------------------------------------

_INDEX_NAME = "index.json"


def _member_name(i: int) -> str:
    return f"member-{i:03d}.ckpt"


def save_population(pop: Population, out_dir, spec: NetworkSpec,
                    meta: Optional[dict] = None):
    """One checkpoint per member plus an index carrying the fitness
    cache (NaN as null) and the generation counter."""
    from .data import _atomic_write

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, member in enumerate(pop.members):
        name = _member_name(i)
        member_meta = dict(meta or {})
        member_meta["member"] = i
        save_checkpoint(Checkpoint(spec, member, member_meta), out_dir / name)
        names.append(name)
    index = {
        "version": 1,
        "generation": pop.generation,
        "m": pop.m,
        "members": names,
        "fitness": [None if math.isnan(f) else float(f) for f in pop.fitness],
    }
    _atomic_write(out_dir / _INDEX_NAME,
                  (json.dumps(index, indent=2, sort_keys=True) + "\n").encode())


def load_population(in_dir):
    """Returns (Population, NetworkSpec); every member must exist and
    share the spec of member 0."""
    in_dir = Path(in_dir)
    index_path = in_dir / _INDEX_NAME
    if not index_path.is_file():
        raise MissingArtifactError(f"no population index at {index_path}")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{index_path}: invalid JSON: {exc}") from exc
    for key in ("generation", "m", "members", "fitness"):
        if key not in index:
            raise CheckpointFormatError(f"{index_path}: missing key {key!r}")
    names = index["members"]
    if len(names) != index["m"] or len(index["fitness"]) != index["m"]:
        raise CheckpointFormatError(
            f"{index_path}: m={index['m']} but {len(names)} members and "
            f"{len(index['fitness'])} fitness entries")
    members = []
    spec = None
    for i, name in enumerate(names):
        member_path = in_dir / name
        if not member_path.is_file():
            raise MissingArtifactError(
                f"population member {name} listed in {index_path} is missing")
        ckpt = load_checkpoint(member_path)
        if spec is None:
            spec = ckpt.spec
        elif ckpt.spec != spec:
            raise CheckpointFormatError(
                f"{member_path}: spec differs from member 0's")
        members.append(ckpt.params)
    fitness = np.array([np.nan if f is None else float(f)
                        for f in index["fitness"]], dtype=np.float64)
    return Population(members, fitness, int(index["generation"])), spec


# --- checkpoint rings ---------------------------------------------------------


def save_ring(ring: CheckpointRing, out_dir, spec: NetworkSpec,
              meta: Optional[dict] = None):
    """One checkpoint per retained epoch plus an index with losses."""
    from .data import _atomic_write

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in ring:
        name = f"epoch-{entry.epoch:04d}.ckpt"
        entry_meta = dict(meta or {})
        entry_meta.update({"stage": "bp", "epoch": entry.epoch,
                           "loss": entry.train_loss})
        save_checkpoint(Checkpoint(spec, entry.params, entry_meta),
                        out_dir / name)
        entries.append({"file": name, "epoch": entry.epoch,
                        "train_loss": entry.train_loss})
    index = {"version": 1, "capacity": ring.capacity, "entries": entries}
    _atomic_write(out_dir / _INDEX_NAME,
                  (json.dumps(index, indent=2, sort_keys=True) + "\n").encode())


def load_ring(in_dir):
    """Returns (CheckpointRing, NetworkSpec)."""
    in_dir = Path(in_dir)
    index_path = in_dir / _INDEX_NAME
    if not index_path.is_file():
        raise MissingArtifactError(f"no ring index at {index_path}")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{index_path}: invalid JSON: {exc}") from exc
    for key in ("capacity", "entries"):
        if key not in index:
            raise CheckpointFormatError(f"{index_path}: missing key {key!r}")
    ring = CheckpointRing(int(index["capacity"]))
    spec = None
    for row in index["entries"]:
        path = in_dir / row["file"]
        if not path.is_file():
            raise MissingArtifactError(
                f"ring entry {row['file']} listed in {index_path} is missing")
        ckpt = load_checkpoint(path)
        if spec is None:
            spec = ckpt.spec
        elif ckpt.spec != spec:
            raise CheckpointFormatError(
                f"{path}: spec differs from the first ring entry's")
        ring.push(int(row["epoch"]), ckpt.params, float(row["train_loss"]))
    if spec is None:
        raise CheckpointFormatError(f"{index_path}: ring has no entries")
    return ring, spec


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class SynthSection:
    n_train: int = 3000
    n_test: int = 1000
    classes: int = 10
    shape: tuple = (1, 28, 28)
    noise: float = 0.15
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    name: str = "synthetic"
    dir: Optional[str] = None
    train_limit: int = 0
    test_limit: int = 0
    augment_multiplier: int = 1
    max_shift_px: int = 2
    max_rotate_deg: float = 15.0
    synthetic: SynthSection = field(default_factory=SynthSection)


@dataclass(frozen=True)
class EvalSection:
    batch_size: int = 256


@dataclass(frozen=True)
class Config:
    model_name: Optional[str]
    spec: NetworkSpec
    data: DataSection
    bp: TrainConfig
    de: DeConfig
    eval: EvalSection
    grid: dict
    document: dict

    @property
    def canonical(self) -> str:
        """Stable rendering of the defaults-filled document."""
        return json.dumps(self.document, indent=2, sort_keys=True) + "\n"


def _expect_obj(value, path: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(path, "expected an object")
    return value


def _reject_unknown(doc: dict, allowed, path: str):
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{path}/{key}", "unknown key")


def _get_num(doc, key, default, path, integral=False):
    if key not in doc:
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}/{key}", "expected a number")
    if integral and not isinstance(v, int):
        raise ConfigError(f"{path}/{key}", "expected an integer")
    return v


def _get_bool(doc, key, default, path):
    if key not in doc:
        return default
    v = doc[key]
    if not isinstance(v, bool):
        raise ConfigError(f"{path}/{key}", "expected a boolean")
    return v


def _get_str(doc, key, default, path, optional=False):
    if key not in doc:
        return default
    v = doc[key]
    if v is None and optional:
        return None
    if not isinstance(v, str):
        raise ConfigError(f"{path}/{key}", "expected a string")
    return v


_BP_KEYS = {"lr": "lr", "beta1": "beta1", "beta2": "beta2", "eps": "eps",
            "lambda": "lam", "batch_size": "batch_size",
            "max_epochs": "max_epochs", "delta1": "delta1",
            "min_improve": "min_improve", "patience": "patience",
            "ring_size": "ring_size", "seed": "seed"}
_BP_INTS = {"batch_size", "max_epochs", "patience", "ring_size", "seed"}

_DE_KEYS = {"F": "F", "Cr": "Cr", "max_generations": "max_generations",
            "delta2": "delta2", "min_improve": "min_improve",
            "window": "window", "fitness_subset": "fitness_subset",
            "resample_every": "resample_every", "force_jrand": "force_jrand",
            "seed": "seed"}
_DE_INTS = {"max_generations", "window", "fitness_subset", "resample_every",
            "seed"}


def _parse_model(doc) -> tuple:
    doc = _expect_obj(doc, "/model")
    _reject_unknown(doc, {"name", "spec"}, "/model")
    if "name" in doc and "spec" in doc:
        raise ConfigError("/model", "give either 'name' or 'spec', not both")
    if "spec" in doc:
        return None, NetworkSpec.from_json(doc["spec"], "/model/spec")
    name = _get_str(doc, "name", "mlp", "/model")
    return name, zoo_spec(name)


def _parse_synth(doc) -> SynthSection:
    doc = _expect_obj(doc, "/data/synthetic")
    allowed = {"n_train", "n_test", "classes", "shape", "noise", "seed"}
    _reject_unknown(doc, allowed, "/data/synthetic")
    defaults = SynthSection()
    shape = doc.get("shape", list(defaults.shape))
    if (not isinstance(shape, list) or len(shape) != 3 or
            not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1
                    for v in shape)):
        raise ConfigError("/data/synthetic/shape",
                          "expected [channels, height, width]")
    section = SynthSection(
        n_train=_get_num(doc, "n_train", defaults.n_train, "/data/synthetic", True),
        n_test=_get_num(doc, "n_test", defaults.n_test, "/data/synthetic", True),
        classes=_get_num(doc, "classes", defaults.classes, "/data/synthetic", True),
        shape=tuple(shape),
        noise=_get_num(doc, "noise", defaults.noise, "/data/synthetic"),
        seed=_get_num(doc, "seed", defaults.seed, "/data/synthetic", True),
    )
    for key, ok in (("n_train", section.n_train >= 1),
                    ("n_test", section.n_test >= 1),
                    ("classes", section.classes >= 2),
                    ("noise", section.noise >= 0),
                    ("seed", section.seed >= 0)):
        if not ok:
            raise ConfigError(f"/data/synthetic/{key}", "out of range")
    return section


_DATASET_NAMES = ("synthetic", "mnist", "fashion_mnist", "cifar10")


def _parse_data(doc) -> DataSection:
    doc = _expect_obj(doc, "/data")
    allowed = {"name", "dir", "train_limit", "test_limit",
               "augment_multiplier", "max_shift_px", "max_rotate_deg",
               "synthetic"}
    _reject_unknown(doc, allowed, "/data")
    defaults = DataSection()
    name = _get_str(doc, "name", defaults.name, "/data")
    if name not in _DATASET_NAMES:
        raise ConfigError("/data/name",
                          f"unknown dataset {name!r}; one of "
                          f"{', '.join(_DATASET_NAMES)}")
    section = DataSection(
        name=name,
        dir=_get_str(doc, "dir", None, "/data", optional=True),
        train_limit=_get_num(doc, "train_limit", 0, "/data", True),
        test_limit=_get_num(doc, "test_limit", 0, "/data", True),
        augment_multiplier=_get_num(doc, "augment_multiplier", 1, "/data", True),
        max_shift_px=_get_num(doc, "max_shift_px", 2, "/data", True),
        max_rotate_deg=_get_num(doc, "max_rotate_deg", 15.0, "/data"),
        synthetic=_parse_synth(doc.get("synthetic")),
    )
    for key, ok in (("train_limit", section.train_limit >= 0),
                    ("test_limit", section.test_limit >= 0),
                    ("augment_multiplier", section.augment_multiplier >= 1),
                    ("max_shift_px", section.max_shift_px >= 0),
                    ("max_rotate_deg", section.max_rotate_deg >= 0)):
        if not ok:
            raise ConfigError(f"/data/{key}", "out of range")
    return section


def _parse_fields(doc, keys, ints, path, cls):
    doc = _expect_obj(doc, path)
    _reject_unknown(doc, set(keys), path)
    kwargs = {}
    for json_key, attr in keys.items():
        if json_key == "force_jrand":
            if json_key in doc:
                kwargs[attr] = _get_bool(doc, json_key, None, path)
            continue
        if json_key in doc:
            kwargs[attr] = _get_num(doc, json_key, None, path,
                                    integral=json_key in ints)
    return cls(**kwargs)


def _parse_grid(doc) -> dict:
    doc = _expect_obj(doc, "/grid")
    _reject_unknown(doc, {"F", "Cr", "lr"}, "/grid")
    grid = {}
    for axis in ("F", "Cr", "lr"):
        values = doc.get(axis, list(DEFAULT_GRID[axis]))
        if (not isinstance(values, list) or not values or
                any(isinstance(v, bool) or not isinstance(v, (int, float))
                    for v in values)):
            raise ConfigError(f"/grid/{axis}",
                              "expected a nonempty list of numbers")
        grid[axis] = [float(v) for v in values]
    return grid


def _synth_doc(s: SynthSection) -> dict:
    return {"n_train": s.n_train, "n_test": s.n_test, "classes": s.classes,
            "shape": list(s.shape), "noise": s.noise, "seed": s.seed}


def parse_config(text: str) -> Config:
    """Validate a JSON config and fill in every default.

    Unknown keys anywhere are rejected; all diagnostics carry the
    JSON-pointer path of the offending value.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("/", f"invalid JSON: {exc}") from exc
    doc = _expect_obj(doc, "/")
    _reject_unknown(doc, {"model", "data", "bp", "de", "eval", "grid"}, "")

    model_name, spec = _parse_model(doc.get("model"))
    data = _parse_data(doc.get("data"))
    bp = _parse_fields(doc.get("bp"), _BP_KEYS, _BP_INTS, "/bp", TrainConfig)
    de = _parse_fields(doc.get("de"), _DE_KEYS, _DE_INTS, "/de", DeConfig)
    eval_doc = _expect_obj(doc.get("eval"), "/eval")
    _reject_unknown(eval_doc, {"batch_size"}, "/eval")
    eval_section = EvalSection(
        batch_size=_get_num(eval_doc, "batch_size", 256, "/eval", True))
    if eval_section.batch_size < 1:
        raise ConfigError("/eval/batch_size", "must be >= 1")
    grid = _parse_grid(doc.get("grid"))

    document = {
        "model": ({"name": model_name} if model_name is not None
                  else {"spec": spec.to_json()}),
        "data": {"name": data.name, "dir": data.dir,
                 "train_limit": data.train_limit,
                 "test_limit": data.test_limit,
                 "augment_multiplier": data.augment_multiplier,
                 "max_shift_px": data.max_shift_px,
                 "max_rotate_deg": data.max_rotate_deg,
                 "synthetic": _synth_doc(data.synthetic)},
        "bp": {"lr": bp.lr, "beta1": bp.beta1, "beta2": bp.beta2,
               "eps": bp.eps, "lambda": bp.lam, "batch_size": bp.batch_size,
               "max_epochs": bp.max_epochs, "delta1": bp.delta1,
               "min_improve": bp.min_improve, "patience": bp.patience,
               "ring_size": bp.ring_size, "seed": bp.seed},
        "de": {"F": de.F, "Cr": de.Cr, "max_generations": de.max_generations,
               "delta2": de.delta2, "min_improve": de.min_improve,
               "window": de.window, "fitness_subset": de.fitness_subset,
               "resample_every": de.resample_every,
               "force_jrand": de.force_jrand, "seed": de.seed},
        "eval": {"batch_size": eval_section.batch_size},
        "grid": grid,
    }
    return Config(model_name, spec, data, bp, de, eval_section, grid, document)


# --- run manifests ------------------------------------------------------------


def write_manifest(run_dir, manifest: dict):
    """Persist manifest.json after checking that every artifact path it
    references exists under the run directory."""
    from .data import _atomic_write

    run_dir = Path(run_dir)
    for label, rel in manifest.get("artifacts", {}).items():
        if not (run_dir / rel).exists():
            raise MissingArtifactError(
                f"manifest references {label} at {rel}, which does not exist")
    _atomic_write(run_dir / "manifest.json",
                  (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def load_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise MissingArtifactError(f"no manifest at {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: invalid JSON: {exc}") from exc
