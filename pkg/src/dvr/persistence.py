"""Bit-exact serialization: tensor containers, checkpoints, config files.

Container layout (all integers little-endian):

    magic (8 bytes) | version (u16) | tensor* | crc (u64)

    tensor := name_len (u32) | name (utf-8) | rank (u32) | dims (u32 each)
              | payload (IEEE-754 float64, little-endian, C order)

Tensors are written sorted by name, so identical states yield identical
bytes. The trailing checksum is CRC-64/XZ (reflected ECMA-182 polynomial
0x42F0E1A16D2B7079, init and xor-out all-ones) over every preceding byte.
Files are written to a temporary sibling and renamed, so a crash never
leaves a partial file at the target path.
"""

from __future__ import annotations

import os
import struct

import numpy as np

__all__ = [
    "MAGIC_CHECKPOINT",
    "MAGIC_DATASET",
    "FORMAT_VERSION",
    "PersistenceError",
    "BadMagicError",
    "UnsupportedVersionError",
    "ChecksumError",
    "CorruptFileError",
    "MissingTensorError",
    "ConfigError",
    "crc64",
    "write_container",
    "read_container",
    "save_state",
    "load_state",
    "save_dataset",
    "load_dataset",
    "parse_config",
]

MAGIC_CHECKPOINT = b"DVRCKPT1"
MAGIC_DATASET = b"DVRDATA1"
FORMAT_VERSION = 1


class PersistenceError(Exception):
    pass


class BadMagicError(PersistenceError):
    pass


class UnsupportedVersionError(PersistenceError):
    pass


class ChecksumError(PersistenceError):
    pass


class CorruptFileError(PersistenceError):
    pass


class MissingTensorError(PersistenceError):
    pass


# ---------------------------------------------------------------- CRC-64/XZ

_CRC64_POLY_REFLECTED = 0xC96C5795D7870F42
_U64 = 0xFFFFFFFFFFFFFFFF


def _make_tables() -> list[list[int]]:
    base = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY_REFLECTED if crc & 1 else crc >> 1
        base.append(crc)
    tables = [base]
    for t in range(1, 8):
        prev = tables[t - 1]
        tables.append([(prev[i] >> 8) ^ base[prev[i] & 0xFF] for i in range(256)])
    return tables


_TABLES = _make_tables()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ ('123456789' -> 0x995DC9BBDF1939FA)."""
    t0, t1, t2, t3, t4, t5, t6, t7 = _TABLES
    crc ^= _U64
    view = memoryview(data)
    n8 = len(view) - (len(view) % 8)
    for (word,) in struct.iter_unpack("<Q", view[:n8]):
        x = crc ^ word
        crc = (
            t7[x & 0xFF]
            ^ t6[(x >> 8) & 0xFF]
            ^ t5[(x >> 16) & 0xFF]
            ^ t4[(x >> 24) & 0xFF]
            ^ t3[(x >> 32) & 0xFF]
            ^ t2[(x >> 40) & 0xFF]
            ^ t1[(x >> 48) & 0xFF]
            ^ t0[(x >> 56) & 0xFF]
        )
    for byte in view[n8:]:
        crc = (crc >> 8) ^ t0[(crc ^ byte) & 0xFF]
    return crc ^ _U64


# ------------------------------------------------------------- containers


def write_container(path, tensors: dict[str, np.ndarray], magic: bytes) -> None:
    """Atomically write named float64 tensors (sorted by name)."""
    parts = [magic, struct.pack("<H", FORMAT_VERSION)]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f8").tobytes(order="C"))
    body = b"".join(parts)
    blob = body + struct.pack("<Q", crc64(body))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_container(path, magic: bytes) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(magic) + 2 + 8:
        raise CorruptFileError(f"{path}: file too short")
    if blob[: len(magic)] != magic:
        raise BadMagicError(
            f"{path}: expected magic {magic!r}, found {blob[:len(magic)]!r}"
        )
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if crc64(body) != stored:
        raise ChecksumError(f"{path}: checksum mismatch")
    (version,) = struct.unpack_from("<H", body, len(magic))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version}")
    tensors: dict[str, np.ndarray] = {}
    pos = len(magic) + 2
    end = len(body)
    while pos < end:
        try:
            (name_len,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(body, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CorruptFileError(f"{path}: malformed tensor record: {exc}") from exc
        if pos > end:
            raise CorruptFileError(f"{path}: tensor {name!r} runs past end of file")
        if name in tensors:
            raise CorruptFileError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = payload.reshape(dims).astype(np.float64)
    return tensors


def save_state(state, path) -> None:
    """Checkpoint a trainer ModelState (parameters, moments, counters, rng)."""
    write_container(path, state.to_tensors(), MAGIC_CHECKPOINT)


def load_state(path):
    from .trainer import ModelState  # runtime import to keep layering one-way

    return ModelState.from_tensors(read_container(path, MAGIC_CHECKPOINT))


# ---------------------------------------------------------------- datasets


def _split_u64(value: int) -> list[float]:
    value = int(value) & 0xFFFFFFFFFFFFFFFF
    return [float(value >> 32), float(value & 0xFFFFFFFF)]


def _join_u64(hi: float, lo: float) -> int:
    return (int(hi) << 32) | int(lo)


def save_dataset(dataset, protocol, path) -> None:
    """Dataset + protocol split as one container (magic DVRDATA1)."""
    spec = dataset.spec
    tensors = {
        "data.raws": dataset.raws,
        "data.labels": dataset.labels.astype(np.float64),
        "data.modalities": dataset.modalities.astype(np.float64),
        "data.identity_codes": dataset.identity_codes,
        "spec.scalars": np.array(
            [
                spec.num_identities,
                spec.samples_per_identity,
                spec.identity_dim,
                spec.raw_dim,
                spec.identity_noise,
                spec.observation_noise,
                *_split_u64(spec.seed),
            ]
        ),
        "spec.map_n": spec.map_n,
        "spec.map_v": spec.map_v,
        "spec.offset_n": spec.offset_n,
        "spec.offset_v": spec.offset_v,
        "split.train_idx": protocol.train_idx.astype(np.float64),
        "split.gallery_idx": protocol.gallery_idx.astype(np.float64),
        "split.probe_idx": protocol.probe_idx.astype(np.float64),
        "split.test_identities": protocol.test_identities.astype(np.float64),
    }
    write_container(path, tensors, MAGIC_DATASET)


def load_dataset(path):
    from .synthdata import ProtocolSplit, SynthDataset, SynthSpec

    t = read_container(path, MAGIC_DATASET)
    required = [
        "data.raws", "data.labels", "data.modalities", "data.identity_codes",
        "spec.scalars", "spec.map_n", "spec.map_v", "spec.offset_n",
        "spec.offset_v", "split.train_idx", "split.gallery_idx",
        "split.probe_idx", "split.test_identities",
    ]
    for name in required:
        if name not in t:
            raise MissingTensorError(f"{path}: missing tensor {name!r}")
    sc = t["spec.scalars"]
    spec = SynthSpec(
        num_identities=int(sc[0]),
        samples_per_identity=int(sc[1]),
        identity_dim=int(sc[2]),
        raw_dim=int(sc[3]),
        identity_noise=float(sc[4]),
        observation_noise=float(sc[5]),
        seed=_join_u64(sc[6], sc[7]),
        map_n=t["spec.map_n"],
        map_v=t["spec.map_v"],
        offset_n=t["spec.offset_n"],
        offset_v=t["spec.offset_v"],
    )
    dataset = SynthDataset(
        raws=t["data.raws"],
        labels=t["data.labels"].astype(np.int64),
        modalities=t["data.modalities"].astype(np.int64),
        identity_codes=t["data.identity_codes"],
        spec=spec,
    )
    protocol = ProtocolSplit(
        train_idx=t["split.train_idx"].astype(np.int64),
        gallery_idx=t["split.gallery_idx"].astype(np.int64),
        probe_idx=t["split.probe_idx"].astype(np.int64),
        test_identities=t["split.test_identities"].astype(np.int64),
    )
    return dataset, protocol


# ------------------------------------------------------------ config files


class ConfigError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _to_int(text: str) -> int:
    return int(text, 0)


def _to_float(text: str) -> float:
    value = float(text)
    if not np.isfinite(value):
        raise ValueError("value must be finite")
    return value


def _to_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part.strip(), 0) for part in text.split(",") if part.strip())


def _positive(x):
    if x <= 0:
        raise ValueError("must be > 0")
    return x


def _non_negative(x):
    if x < 0:
        raise ValueError("must be >= 0")
    return x


def _fraction(x):
    if not 0.0 < x < 1.0:
        raise ValueError("must be in (0, 1)")
    return x


def _unit_interval(x):
    if not 0.0 <= x < 1.0:
        raise ValueError("must be in [0, 1)")
    return x


def _at_least(n):
    def check(x):
        if x < n:
            raise ValueError(f"must be >= {n}")
        return x

    return check


#: key -> (section, field, parser, validator)
_CONFIG_KEYS = {
    "synth.num_identities": ("synth", "num_identities", _to_int, _at_least(2)),
    "synth.samples_per_identity": ("synth", "samples_per_identity", _to_int, _at_least(1)),
    "synth.identity_dim": ("synth", "identity_dim", _to_int, _at_least(1)),
    "synth.raw_dim": ("synth", "raw_dim", _to_int, _at_least(1)),
    "synth.identity_noise": ("synth", "identity_noise", _to_float, _non_negative),
    "synth.observation_noise": ("synth", "observation_noise", _to_float, _non_negative),
    "synth.seed": ("synth", "seed", _to_int, _non_negative),
    "train.lambda1": ("train", "lambda1", _to_float, _non_negative),
    "train.lambda2": ("train", "lambda2", _to_float, _non_negative),
    "train.lambda3": ("train", "lambda3", _to_float, _non_negative),
    "train.raw_dim": ("train", "raw_dim", _to_int, _at_least(1)),
    "train.feature_dim": ("train", "feature_dim", _to_int, _at_least(1)),
    "train.latent_dim": ("train", "latent_dim", _to_int, _at_least(1)),
    "train.num_classes": ("train", "num_classes", _to_int, _non_negative),
    "train.batch_size": ("train", "batch_size", _to_int, _at_least(1)),
    "train.pretrain_epochs": ("train", "pretrain_epochs", _to_int, _non_negative),
    "train.warmup_epochs": ("train", "warmup_epochs", _to_int, _non_negative),
    "train.epochs": ("train", "epochs", _to_int, _non_negative),
    "train.sgd_lr": ("train", "sgd_lr", _to_float, _positive),
    "train.sgd_lr_final": ("train", "sgd_lr_final", _to_float, _positive),
    "train.sgd_momentum": ("train", "sgd_momentum", _to_float, _unit_interval),
    "train.sgd_weight_decay": ("train", "sgd_weight_decay", _to_float, _non_negative),
    "train.adam_lr": ("train", "adam_lr", _to_float, _positive),
    "train.adam_lr_final": ("train", "adam_lr_final", _to_float, _positive),
    "train.p_lr": ("train", "p_lr", _to_float, _positive),
    "train.seed": ("train", "seed", _to_int, _non_negative),
    "train.checkpoint_every": ("train", "checkpoint_every", _to_int, _non_negative),
    "train.train_fraction": ("train", "train_fraction", _to_float, _fraction),
    "train.dropout": ("train", "dropout", _to_float, _unit_interval),
    "train.extractor_hidden": ("train", "extractor_hidden", _to_int_tuple, lambda t: t),
}


def parse_config(text: str):
    """Parse 'key = value' lines into (TrainConfig, SynthSpec).

    '#' starts a comment; blank lines are skipped; unknown keys and invalid
    values raise ConfigError with the offending line number. Missing keys
    take the dataclass defaults.
    """
    from .synthdata import SynthSpec
    from .trainer import TrainConfig

    sections: dict[str, dict] = {"train": {}, "synth": {}}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line_no, f"expected 'key = value', got {raw_line!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(line_no, f"unknown key {key!r}")
        section, field_name, parser, validator = _CONFIG_KEYS[key]
        try:
            parsed = validator(parser(value))
        except ValueError as exc:
            raise ConfigError(line_no, f"bad value for {key!r}: {exc}") from exc
        if field_name in sections[section]:
            raise ConfigError(line_no, f"duplicate key {key!r}")
        sections[section][field_name] = parsed
    return TrainConfig(**sections["train"]), SynthSpec(**sections["synth"])
