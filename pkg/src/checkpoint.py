"""
DSPK model checkpoints plus a JSON sidecar holding the ModelConfig.

Layout (little-endian): magic "DSPK", u32 version, u32 tensor count, then per
tensor u16 name length, UTF-8 name, u8 rank, rank x u32 dims and the f32 values.
Tensors are written in lexicographic name order so identical parameters always
produce identical bytes.
"""

import logging
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .errors import CheckpointFormatError
from .model import ModelConfig, ModelParams, SparseOccupancyModel, init_params

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"DSPK"
CKPT_VERSION = 1

PathLike = Union[str, Path]


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode_params(params: ModelParams) -> bytes:
    out = bytearray(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(params)))
    for name, value in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype="<f4").tobytes()
    return bytes(out)


def decode_params(data: bytes, source: str = "<bytes>") -> ModelParams:
    """
    Parse DSPK bytes.

    Raises:
        CheckpointFormatError: bad magic, unsupported version, truncated or trailing data
    """
    try:
        if data[:4] != CKPT_MAGIC:
            raise CheckpointFormatError(f"{source}: bad magic {bytes(data[:4])!r}")
        version, count = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"{source}: unsupported checkpoint version {version}")
        offset = 12
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = bytes(data[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if offset + 4 * size > len(data):
                raise CheckpointFormatError(f"{source}: tensor {name} is truncated")
            values = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
            tensors[name] = values.astype(np.float64).reshape(dims)
            offset += 4 * size
        if offset != len(data):
            raise CheckpointFormatError(f"{source}: {len(data) - offset} trailing bytes")
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{source}: {e}") from e
    return ModelParams(tensors)


def save_params(path: PathLike, params: ModelParams, config: Optional[ModelConfig] = None) -> Path:
    """Write params (and the config sidecar when given); returns the checkpoint path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_params(params))
    if config is not None:
        sidecar_path(path).write_text(config.model_dump_json(indent=2))
    logger.debug("wrote %d tensors to %s", len(params), path)
    return path


def load_params(path: PathLike) -> ModelParams:
    path = Path(path)
    return decode_params(path.read_bytes(), str(path))


def load_config(path: PathLike) -> ModelConfig:
    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointFormatError(f"{path}: missing config sidecar {side.name}")
    try:
        return ModelConfig.model_validate_json(side.read_text())
    except ValidationError as e:
        raise CheckpointFormatError(f"{side}: invalid model config: {e}") from e


def check_params(params: ModelParams, config: ModelConfig, source: str = "<params>"):
    """Raise CheckpointFormatError unless ``params`` has exactly the tensors ``config`` builds."""
    expected = init_params(config, seed=0)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointFormatError(f"{source}: missing tensors {missing}, unexpected {extra}")
    for name, value in expected.items():
        if params[name].shape != value.shape:
            raise CheckpointFormatError(f"{source}: {name} has shape {params[name].shape}, expected {value.shape}")


def save_model(path: PathLike, model: SparseOccupancyModel) -> Path:
    return save_params(path, model.params, model.config)


def load_model(path: PathLike) -> SparseOccupancyModel:
    """Rebuild a model from a checkpoint and its sidecar."""
    config = load_config(path)
    params = load_params(path)
    check_params(params, config, str(path))
    return SparseOccupancyModel(config, params)


def checkpoint_info(path: PathLike) -> Tuple[ModelConfig, int]:
    model = load_model(path)
    return model.config, model.num_parameters()
