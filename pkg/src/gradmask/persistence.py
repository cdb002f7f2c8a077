"""Checkpoint files and key=value config files.

Checkpoint layout (all little-endian, no padding)::

    b"APMK"  u32 version=1  sha256(model config)[32]  u64 total_len
    f64[total_len] base
    u8 task_count
    per task: u8 task_id  u64 popcount  u8[ceil(total_len/8)] bits (LSB-first)
              f64[popcount] overrides  f64 gamma

A task stored in a checkpoint always carries its override vector.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .masking import ParameterStore, TaskMask
from .tasks import Task
from .training import LossConfig, TrainConfig
from .unet import ConfigError, UNetConfig

MAGIC = b"APMK"
VERSION = 1
DEFAULT_MAX_BYTES = 1 << 30


class CheckpointError(ValueError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


class PopcountError(CheckpointError):
    pass


class MalformedCheckpointError(CheckpointError):
    """Structurally invalid content: unknown or duplicate task id, oversize lengths, trailing bytes."""


def config_digest(model_cfg: UNetConfig) -> bytes:
    return hashlib.sha256(model_cfg.canonical().encode("ascii")).digest()


def encode(store: ParameterStore, model_cfg: UNetConfig) -> bytes:
    n = store.base.size
    parts = [MAGIC, struct.pack("<I", VERSION), config_digest(model_cfg), struct.pack("<Q", n),
             store.base.astype("<f8").tobytes()]
    tasks = sorted(store.masks)
    for t in tasks:
        if t not in store.overrides:
            raise CheckpointError(f"{t.label}: mask without task parameters; initialise overrides first")
    parts.append(struct.pack("<B", len(tasks)))
    for t in tasks:
        m = store.masks[t]
        ov = store.overrides[t]
        if ov.size != m.popcount:
            raise CheckpointError(f"{t.label}: {ov.size} overrides for {m.popcount} mask bits")
        parts.append(struct.pack("<BQ", int(t), m.popcount))
        parts.append(np.packbits(m.bits, bitorder="little").tobytes())
        parts.append(ov.astype("<f8").tobytes())
        parts.append(struct.pack("<d", m.gamma))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"file truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, model_cfg: UNetConfig, expected_len: int | None = None,
           max_bytes: int = DEFAULT_MAX_BYTES) -> ParameterStore:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    digest = r.take(32, "config digest")
    if digest != config_digest(model_cfg):
        raise DigestMismatchError(
            "checkpoint was written for a different model configuration "
            f"(active: {model_cfg.canonical()})")
    (n,) = r.unpack("<Q", "total_len")
    if n * 8 > max_bytes:
        raise MalformedCheckpointError(f"total_len {n} exceeds the {max_bytes}-byte cap")
    if expected_len is not None and n != expected_len:
        raise MalformedCheckpointError(f"checkpoint holds {n} parameters, model has {expected_len}")
    base = np.frombuffer(r.take(8 * n, "base vector"), dtype="<f8").astype(np.float64)
    store = ParameterStore(base)
    (count,) = r.unpack("<B", "task count")
    nbytes = (n + 7) // 8
    for _ in range(count):
        tid, pop = r.unpack("<BQ", "task header")
        try:
            task = Task(tid)
        except ValueError:
            raise MalformedCheckpointError(f"unknown task id {tid}") from None
        if task in store.masks:
            raise MalformedCheckpointError(f"duplicate entry for task {task.label}")
        if pop > n:
            raise PopcountError(f"{task.label}: popcount {pop} exceeds total_len {n}")
        bits = np.unpackbits(np.frombuffer(r.take(nbytes, "mask bits"), dtype=np.uint8),
                             bitorder="little")
        if np.any(bits[n:]):
            raise PopcountError(f"{task.label}: mask has bits set beyond total_len")
        bits = bits[:n].astype(bool)
        if int(np.count_nonzero(bits)) != pop:
            raise PopcountError(
                f"{task.label}: header popcount {pop} but mask has {int(np.count_nonzero(bits))} bits set")
        ov = np.frombuffer(r.take(8 * pop, "override values"), dtype="<f8").astype(np.float64)
        (gamma,) = r.unpack("<d", "gamma")
        store.masks[task] = TaskMask(task, bits, gamma, pop / n if n else 0.0)
        store.overrides[task] = ov
    if r.pos != len(buf):
        raise MalformedCheckpointError(f"{len(buf) - r.pos} unexpected trailing bytes")
    return store


def save(store: ParameterStore, path, model_cfg: UNetConfig) -> None:
    data = encode(store, model_cfg)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path, model_cfg: UNetConfig, expected_len: int | None = None,
         max_bytes: int = DEFAULT_MAX_BYTES) -> ParameterStore:
    size = os.path.getsize(path)
    if size > max_bytes + 4096:
        raise MalformedCheckpointError(f"{path}: {size} bytes exceeds the size cap")
    with open(path, "rb") as fh:
        return decode(fh.read(), model_cfg, expected_len, max_bytes)


# ---------------------------------------------------------------- config files

@dataclass
class RunConfig:
    model: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    fraction: float = 0.10
    calib_batches: int = 32
    per_layer: bool = False


_SECTIONS = {"model": UNetConfig, "train": TrainConfig, "loss": LossConfig}
_TOP = {"fraction": float, "calib_batches": int, "per_layer": bool}


def _convert(kind, raw: str, key: str):
    try:
        if kind is bool or isinstance(kind, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            vals = [int(v) for v in raw.replace("x", ",").split(",") if v.strip()]
            return (vals[0], vals[0]) if len(vals) == 1 else tuple(vals)
        return kind(raw.strip())
    except (ValueError, IndexError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _field_type(cls, name):
    default = {f.name: f for f in fields(cls)}[name].default
    if isinstance(default, bool):
        return bool
    return type(default)


def parse_config(text: str) -> RunConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment.

    Keys are config field names (``lr``, ``fraction``, ``base_channels``...).
    A name present in several sections (only ``seed``) sets all of them;
    ``model.seed`` / ``train.seed`` qualify it.
    """
    updates = {s: {} for s in _SECTIONS}
    top = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS or name not in {f.name for f in fields(_SECTIONS[section])}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            targets = [section]
        elif key in _TOP:
            top[key] = _convert(_TOP[key], raw, key)
            continue
        else:
            targets = [s for s, cls in _SECTIONS.items() if key in {f.name for f in fields(cls)}]
            name = key
            if not targets:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        for s in targets:
            updates[s][name] = _convert(_field_type(_SECTIONS[s], name), raw, key)
    cfg = RunConfig(
        model=replace(UNetConfig(), **updates["model"]),
        train=replace(TrainConfig(), **updates["train"]),
        loss=replace(LossConfig(), **updates["loss"]),
        **top,
    )
    cfg.model.validate()
    cfg.train.validate(cfg.model)
    cfg.loss.validate()
    if not 0.0 < cfg.fraction < 1.0:
        raise ConfigError(f"fraction must lie in (0, 1), got {cfg.fraction}")
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
