"""Configuration and persistence formats for the experiment harness.

Three artifact kinds: a flat UTF-8 key=value experiment config, a raw
little-endian tensor container ("SCNT") for exact image/mask interchange,
and a CRC-protected checkpoint ("SCNDB1") that embeds the config text and
a named tensor table carrying parameters, optimizer moments, and the
counters needed for bit-exact resume.  Previews use 16-bit binary PGM.
"""

from __future__ import annotations

import dataclasses
import struct
import typing
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bridge import TrainerState, TrainingConfig, make_trainer
from .denoiser import DenoiserConfig
from .errors import ConfigError, DataError
from .rng import RngState

CHECKPOINT_MAGIC = b"SCNDB1"
CHECKPOINT_VERSION = 1
RAW_MAGIC = b"SCNT"

# on-disk dtype codes; payloads are always little-endian
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"),
                  2: np.dtype("<i8"), 3: np.dtype("<u8")}
_KIND_TO_CODE = {("f", 4): 0, ("f", 8): 1, ("i", 8): 2, ("u", 8): 3}


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one experiment, flat and fully defaulted."""

    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "run"
    # dataset
    train_count: int = 500
    test_count: int = 50
    height: int = 64
    width: int = 64
    ellipse_min: int = 4
    ellipse_max: int = 9
    intensity_min: float = 0.15
    intensity_max: float = 0.95
    acceleration: int = 4
    center_lines: int = 4
    mask_offset: int = 0
    # objective / optimization
    steps: int = 20
    lambda_selfcon: float = 1.0
    selfcon_enabled: bool = True
    t_mode: str = "tied"
    nested_noise_scale: float = 1.2
    loss_norm: str = "l1"
    learning_rate: float = 1e-3
    batch_size: int = 2
    iterations: int = 10000
    # network
    base_channels: int = 8
    depth: int = 3
    time_dim: int = 32
    cdem_enabled: bool = True
    channel_mult: tuple[int, ...] = (1, 1, 2)
    cdem_j: tuple[int, ...] = (3, 3, 2)
    cdem_mid_channels: int = 8
    # run control
    checkpoint_every: int = 1000
    sample_deterministic: bool = True

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(steps=self.steps,
                              lambda_selfcon=self.lambda_selfcon,
                              selfcon_enabled=self.selfcon_enabled,
                              t_mode=self.t_mode,
                              nested_noise_scale=self.nested_noise_scale,
                              loss_norm=self.loss_norm,
                              learning_rate=self.learning_rate,
                              batch_size=self.batch_size,
                              iterations=self.iterations)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(base_channels=self.base_channels,
                              depth=self.depth, time_dim=self.time_dim,
                              cdem_enabled=self.cdem_enabled,
                              channel_mult=self.channel_mult,
                              cdem_j=self.cdem_j,
                              cdem_mid_channels=self.cdem_mid_channels)

    def validate(self) -> None:
        from .kspace import PhantomSpec, make_mask

        if self.train_count < 1 or self.test_count < 0:
            raise ConfigError(f"bad dataset split {self.train_count}/"
                              f"{self.test_count}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got "
                              f"{self.checkpoint_every}")
        self.training_config().validate()
        self.denoiser_config().validate()
        PhantomSpec(seed=0, height=self.height, width=self.width,
                    ellipse_count=(self.ellipse_min, self.ellipse_max),
                    intensity=(self.intensity_min, self.intensity_max)).validate()
        make_mask(self.width, self.acceleration, self.center_lines,
                  self.mask_offset)


_TUPLE_FIELDS = {"channel_mult", "cdem_j"}
_HINTS = typing.get_type_hints(ExperimentConfig)
_FIELD_TYPES: dict[str, type] = {
    f.name: _HINTS[f.name] for f in dataclasses.fields(ExperimentConfig)
}


def _parse_value(key: str, raw: str):
    try:
        if key in _TUPLE_FIELDS:
            return tuple(int(p.strip()) for p in raw.split(","))
        ftype = _FIELD_TYPES[key]
        if ftype is bool:
            if raw not in ("true", "false"):
                raise ValueError(raw)
            return raw == "true"
        return ftype(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None


def _format_value(key: str, value) -> str:
    if key in _TUPLE_FIELDS:
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    """Parse key=value lines; '#' starts a comment; unknown keys fail."""
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got "
                              f"{raw_line.strip()!r}")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, raw.strip())
    return ExperimentConfig(**values)


def serialize_config(config: ExperimentConfig) -> str:
    lines = [f"{f.name}={_format_value(f.name, getattr(config, f.name))}"
             for f in dataclasses.fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


def apply_overrides(config: ExperimentConfig,
                    overrides: dict[str, str]) -> ExperimentConfig:
    """Override fields from raw strings, e.g. CLI --set key=value pairs."""
    parsed = {}
    for key, raw in overrides.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        parsed[key] = _parse_value(key, raw)
    return dataclasses.replace(config, **parsed)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(path, config: ExperimentConfig) -> None:
    Path(path).write_text(serialize_config(config), encoding="utf-8")


# --------------------------------------------------------------------------
# Tensor containers
# --------------------------------------------------------------------------


def _dtype_code(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _KIND_TO_CODE:
        raise DataError(f"unsupported tensor dtype {arr.dtype}")
    return _KIND_TO_CODE[key]


def _encode_array(arr: np.ndarray) -> bytes:
    code = _dtype_code(arr)
    out = struct.pack("<BB", code, arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code]).tobytes()
    return out


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"truncated {self.label}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_array(r: _Reader) -> np.ndarray:
    code, rank = r.unpack("<BB")
    if code not in _CODE_TO_DTYPE:
        raise DataError(f"unknown dtype code {code} in {r.label}")
    dims = r.unpack(f"<{rank}I") if rank else ()
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = r.take(count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_raw_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(RAW_MAGIC + _encode_array(np.asarray(arr)))


def load_raw_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != RAW_MAGIC:
        raise DataError(f"{path}: bad raw tensor magic {blob[:4]!r}")
    r = _Reader(blob[4:], f"raw tensor {path}")
    arr = _decode_array(r)
    if r.pos != len(r.blob):
        raise DataError(f"{path}: {len(r.blob) - r.pos} trailing bytes")
    return arr


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, config_text: str,
                    tensors: dict[str, np.ndarray]) -> None:
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = config_text.encode("utf-8")
    body += struct.pack("<I", len(cfg)) + cfg
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded)) + encoded
        body += _encode_array(np.asarray(arr))
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    """Verify magic, version, and CRC before decoding any tensor."""
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise DataError(f"{path}: too short for a checkpoint")
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic "
                        f"{blob[:len(CHECKPOINT_MAGIC)]!r}")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise DataError(f"{path}: checkpoint CRC mismatch")
    r = _Reader(blob[len(CHECKPOINT_MAGIC):-4], f"checkpoint {path}")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config_text = r.take(cfg_len).decode("utf-8")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tensors[name] = _decode_array(r)
    if r.pos != len(r.blob):
        raise DataError(f"{path}: {len(r.blob) - r.pos} trailing bytes")
    return config_text, tensors


def trainer_to_tensors(state: TrainerState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for tag, params, opt in (("1", state.params1, state.opt1),
                             ("2", state.params2, state.opt2)):
        moments = opt.moments()
        for name, p in params.items():
            tensors[f"param{tag}.{name}"] = p.data
            m, v = moments[name]
            tensors[f"opt{tag}.m.{name}"] = m
            tensors[f"opt{tag}.v.{name}"] = v
        tensors[f"meta.opt{tag}_steps"] = np.asarray(opt.step_count,
                                                    dtype=np.int64)
    tensors["meta.step"] = np.asarray(state.step, dtype=np.int64)
    tensors["meta.rng_seed"] = np.asarray(state.rng.seed, dtype=np.uint64)
    tensors["meta.rng_counter"] = np.asarray(state.rng.counter,
                                             dtype=np.uint64)
    return tensors


def save_trainer_checkpoint(path, config: ExperimentConfig,
                            state: TrainerState) -> None:
    save_checkpoint(path, serialize_config(config), trainer_to_tensors(state))


def load_trainer_checkpoint(path) -> tuple[ExperimentConfig, TrainerState]:
    config_text, tensors = load_checkpoint(path)
    config = parse_config(config_text)
    state = make_trainer(config.seed, config.training_config(),
                         config.denoiser_config())

    def fetch(name: str) -> np.ndarray:
        if name not in tensors:
            raise DataError(f"{path}: checkpoint is missing tensor {name!r}")
        return tensors[name]

    for tag, params, opt in (("1", state.params1, state.opt1),
                             ("2", state.params2, state.opt2)):
        moments = {}
        for name, p in params.items():
            stored = fetch(f"param{tag}.{name}")
            if stored.shape != p.shape:
                raise DataError(f"{path}: tensor param{tag}.{name} has shape "
                                f"{stored.shape}, expected {p.shape}")
            p.data[...] = stored
            moments[name] = (fetch(f"opt{tag}.m.{name}").astype(np.float32),
                             fetch(f"opt{tag}.v.{name}").astype(np.float32))
        opt.load_moments(moments, int(fetch(f"meta.opt{tag}_steps")))
    state.step = int(fetch("meta.step"))
    state.rng = RngState(seed=int(fetch("meta.rng_seed")),
                         counter=int(fetch("meta.rng_counter")))
    return config, state


# --------------------------------------------------------------------------
# 16-bit previews
# --------------------------------------------------------------------------


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 16-bit graymap of a [0, 1] image (values clipped)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"pgm preview needs a 2-D image, got shape {arr.shape}")
    data = np.rint(np.clip(arr, 0.0, 1.0) * 65535).astype(">u2")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated pgm header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 65535:
        raise DataError(f"{path}: expected 16-bit maxval, got {maxval}")
    data = np.frombuffer(blob, dtype=">u2", offset=pos, count=h * w)
    return data.reshape(h, w).astype(np.float64) / 65535.0
