"""
Model checkpoints.

Layout of a checkpoint file::

    CSFIQA-CKPT 1
    config <key>=<value>          one line per RunConfig key
    tensor <name> <d0,d1,...> <offset> <count>
    END
    <little-endian float64 blob>

Offsets are byte offsets into the blob, which starts right after the
``END`` line.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .config import RunConfig, parse_config_text, serialize_config
from .errors import DataError
from .model import CsfiqaModel

MAGIC = "CSFIQA-CKPT 1"
END = "END"
DTYPE = np.dtype("<f8")


def encode_checkpoint(model: CsfiqaModel) -> bytes:
    """Serialise the config and every parameter (frozen ones included)."""
    lines = [MAGIC]
    for line in serialize_config(model.config).splitlines():
        if line and not line.startswith("#"):
            lines.append(f"config {line}")

    blobs: List[bytes] = []
    offset = 0
    for name, p in model.named_parameters():
        data = np.ascontiguousarray(p.data, dtype=DTYPE)
        shape = ",".join(str(d) for d in data.shape)
        lines.append(f"tensor {name} {shape} {offset} {data.size}")
        raw = data.tobytes()
        blobs.append(raw)
        offset += len(raw)
    lines.append(END)
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs)


def save_checkpoint(model: CsfiqaModel, path: Union[str, Path]) -> None:
    """
    Raises:
        DataError: If the file cannot be written
    """
    try:
        Path(path).write_bytes(encode_checkpoint(model))
    except OSError as e:
        raise DataError(f"cannot write checkpoint {path}: {e}") from e


def _parse_header(header: str, source: str) -> Tuple[RunConfig, Dict[str, Tuple[Tuple[int, ...], int, int]]]:
    lines = header.split("\n")
    if not lines or lines[0] != MAGIC:
        raise DataError(f"{source}: not a checkpoint (expected '{MAGIC}')")

    config_values: Dict[str, str] = {}
    tensors: Dict[str, Tuple[Tuple[int, ...], int, int]] = {}
    for number, line in enumerate(lines[1:], start=2):
        kind, _, rest = line.partition(" ")
        if kind == "config":
            key, sep, value = rest.partition("=")
            if not sep:
                raise DataError(f"{source}:{number}: malformed config line")
            config_values[key] = value
        elif kind == "tensor":
            parts = rest.split(" ")
            if len(parts) != 4:
                raise DataError(f"{source}:{number}: malformed tensor line")
            name, dims, offset, count = parts
            try:
                shape = tuple(int(d) for d in dims.split(",") if d)
                tensors[name] = (shape, int(offset), int(count))
            except ValueError:
                raise DataError(f"{source}:{number}: malformed tensor line") from None
        elif line:
            raise DataError(f"{source}:{number}: unexpected line {line[:40]!r}")
    return parse_config_text(config_values), tensors


def decode_checkpoint(raw: bytes, source: str = "<checkpoint>") -> CsfiqaModel:
    """
    Rebuild a model from checkpoint bytes.

    Raises:
        DataError: If the container is malformed or truncated
        ConfigError: If the tensors do not match the embedded config
    """
    marker = ("\n" + END + "\n").encode("ascii")
    cut = raw.find(marker)
    if cut < 0:
        raise DataError(f"{source}: missing '{END}' line")
    try:
        header = raw[:cut].decode("ascii")
    except UnicodeDecodeError:
        raise DataError(f"{source}: header is not ASCII text") from None
    blob = raw[cut + len(marker) :]

    config, tensors = _parse_header(header, source)
    state = {}
    for name, (shape, offset, count) in tensors.items():
        if int(np.prod(shape)) != count:
            raise DataError(f"{source}: tensor {name} shape {shape} does not hold {count} values")
        end = offset + count * DTYPE.itemsize
        if offset < 0 or end > len(blob):
            raise DataError(f"{source}: tensor {name} runs past the end of the file")
        state[name] = np.frombuffer(blob[offset:end], dtype=DTYPE).reshape(shape)

    model = CsfiqaModel(config)
    own = dict(model.named_parameters())
    for name, values in state.items():
        if name in own and own[name].shape != values.shape:
            raise DataError(f"{source}: tensor {name} has shape {values.shape}, model expects {own[name].shape}")
    model.load_state_dict(state)
    return model


def load_checkpoint(path: Union[str, Path]) -> CsfiqaModel:
    checkpoint_path = Path(path)
    if not checkpoint_path.is_file():
        raise DataError(f"checkpoint not found: {checkpoint_path}")
    return decode_checkpoint(checkpoint_path.read_bytes(), str(checkpoint_path))
