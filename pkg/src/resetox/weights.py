"""Weight files and vocabulary files.

Weight file layout::

    RESETOX-WEIGHTS 1
    config <field> <value>          (one line per ModelConfig field)
    tensor <name> <d0,d1,...> <offset> <count>
    end
    <raw little-endian float64 payload>
    <CRC-32 of everything above, 4 bytes little-endian>

Offsets and counts are in elements, relative to the start of the payload.
"""

from __future__ import annotations

import os
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import SPECIALS, UNK, ModelConfig, ModelParams, param_shapes

MAGIC = "RESETOX-WEIGHTS 1"


class WeightFormatError(ValueError):
    """Malformed, truncated or corrupted weight file."""


class WeightShapeError(WeightFormatError):
    """A tensor's shape disagrees with the manifest configuration."""


def dumps_weights(params: ModelParams) -> bytes:
    lines = [MAGIC]
    for k, v in params.config.to_dict().items():
        lines.append(f"config {k} {v}")
    offset = 0
    chunks = []
    for name in sorted(params.arrays):
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {dims} {offset} {arr.size}")
        offset += arr.size
        chunks.append(arr.tobytes())
    lines.append("end")
    body = ("\n".join(lines) + "\n").encode("utf-8") + b"".join(chunks)
    return body + zlib.crc32(body).to_bytes(4, "little")


def save_weights(params: ModelParams, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_weights(params))
    os.replace(tmp, path)


def loads_weights(blob: bytes, expected: ModelConfig | None = None) -> ModelParams:
    if len(blob) < 4:
        raise WeightFormatError("weight file truncated")
    body, trailer = blob[:-4], blob[-4:]
    end = body.find(b"\nend\n")
    if not body.startswith(MAGIC.encode()) or end < 0:
        raise WeightFormatError("missing weight-file header")
    header = body[: end + 1].decode("utf-8").splitlines()
    payload = body[end + 5 :]

    cfg_fields: dict[str, int] = {}
    manifest: list[tuple[str, tuple[int, ...], int, int]] = []
    for lineno, line in enumerate(header[1:], start=2):
        parts = line.split()
        try:
            if parts[0] == "config" and len(parts) == 3:
                cfg_fields[parts[1]] = int(parts[2])
            elif parts[0] == "tensor" and len(parts) == 5:
                dims = tuple(int(d) for d in parts[2].split(",")) if parts[2] else ()
                manifest.append((parts[1], dims, int(parts[3]), int(parts[4])))
            else:
                raise ValueError
        except (ValueError, IndexError):
            raise WeightFormatError(f"bad manifest line {lineno}: {line!r}") from None

    total = sum(count for _, _, _, count in manifest)
    if len(payload) != total * 8:
        raise WeightFormatError(f"payload holds {len(payload)} bytes, manifest needs {total * 8} (truncated?)")
    if zlib.crc32(body) != int.from_bytes(trailer, "little"):
        raise WeightFormatError("checksum mismatch")

    try:
        config = ModelConfig(**cfg_fields)
    except (TypeError, ValueError) as exc:
        raise WeightFormatError(f"bad config in manifest: {exc}") from None
    want = param_shapes(expected if expected is not None else config)
    data = np.frombuffer(payload, dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    for name, dims, offset, count in manifest:
        if name not in want:
            raise WeightFormatError(f"unexpected tensor {name!r}")
        if dims != want[name] or int(np.prod(dims)) != count:
            raise WeightShapeError(f"tensor {name!r} has shape {list(dims)}, config requires {list(want[name])}")
        arrays[name] = data[offset : offset + count].astype(np.float64).reshape(dims)
        if not np.all(np.isfinite(arrays[name])):
            raise WeightFormatError(f"tensor {name!r} holds non-finite values")
    missing = sorted(set(want) - set(arrays))
    if missing:
        raise WeightFormatError(f"missing tensors {missing}")
    if expected is not None and expected != config:
        diff = [k for k, v in expected.to_dict().items() if cfg_fields.get(k) != v]
        raise WeightShapeError(f"config mismatch in fields {diff}")
    return ModelParams(config, arrays)


def load_weights(path: str | os.PathLike, expected: ModelConfig | None = None) -> ModelParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFormatError(f"cannot read {path}: {exc}") from exc
    return loads_weights(blob, expected)


def params_checksum(params: ModelParams) -> int:
    """The CRC-32 trailer a weight file of ``params`` would carry."""
    return int.from_bytes(dumps_weights(params)[-4:], "little")


class Vocabulary:
    """Token <-> id map; ids 0-3 are reserved for pad, bos, eos, unk."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, words: Sequence[str] | str) -> list[int]:
        if isinstance(words, str):
            words = words.split()
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            if i >= len(self.tokens):
                # model ids past the vocabulary have no surface form
                out.append(SPECIALS[UNK])
            elif not (strip_specials and i < len(SPECIALS)):
                out.append(self.tokens[i])
        return out

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])
