"""On-disk formats: flat binary tensors, the dataset manifest, the token
vocabulary, and versioned checkpoints.

Tensor files: magic "X2V1", u8 dtype code (1 f32, 2 i32, 3 f64), u8 rank,
rank x u32 little-endian extents, row-major little-endian payload.

Checkpoints: magic "X2VC", u32 format version, length-prefixed JSON config
snapshot, u64 training-step counter, u64 rng seed + u64 rng draw counter,
u32 entry count, then (u16 name length, name, dtype code, u8 rank,
extents, payload) per named tensor. Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .scene import COLORS, LIGHTING, MATERIALS

TENSOR_MAGIC = b"X2V1"
CHECKPOINT_MAGIC = b"X2VC"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {1: "<f4", 2: "<i4", 3: "<f8"}
_CODE_OF = {np.dtype("float32"): 1, np.dtype("int32"): 2, np.dtype("float64"): 3}

FRAME_CHANNELS = ("albedo", "normal", "irradiance", "roughness", "metallicity",
                  "rgb", "objectid", "depth")


def _encode_tensor(arr: np.ndarray) -> bytes:
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise DataError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 4:
        raise DataError(f"rank {arr.ndim} exceeds 4")
    head = TENSOR_MAGIC + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).astype(_DTYPE_CODES[code]).tobytes()


def _decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise DataError("bad tensor magic")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _DTYPE_CODES:
        raise DataError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 6)
    start = offset + 6 + 4 * rank
    dtype = np.dtype(_DTYPE_CODES[code])
    count = int(np.prod(shape)) if rank else 1
    end = start + count * dtype.itemsize
    arr = np.frombuffer(buf[start:end], dtype=dtype).reshape(shape).copy()
    return arr, end


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(_encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    arr, _ = _decode_tensor(Path(path).read_bytes())
    return arr


# --------------------------------------------------------------------------
# Vocabulary: newline-delimited tokens, line number = token id; id 0 is the
# reserved null token for empty prompts.

NULL_TOKEN = "<null>"


def default_vocab() -> list[str]:
    return [NULL_TOKEN] + list(COLORS) + list(MATERIALS) + list(LIGHTING)


def write_vocab(path, vocab: Sequence[str]) -> None:
    Path(path).write_text("\n".join(vocab) + "\n")


def read_vocab(path) -> list[str]:
    words = Path(path).read_text().splitlines()
    if not words or words[0] != NULL_TOKEN:
        raise DataError(f"vocabulary must start with {NULL_TOKEN}")
    return words


def token_ids(words: Sequence[str], vocab: Sequence[str]) -> list[int]:
    index = {w: i for i, w in enumerate(vocab)}
    try:
        return [index[w] for w in words]
    except KeyError as exc:
        raise DataError(f"word {exc} not in vocabulary") from None


# --------------------------------------------------------------------------
# Dataset manifest


def frame_path(scene_dir: Path, frame: int, channel: str) -> Path:
    return Path(scene_dir) / f"frame_{frame:04d}.{channel}.npyish"


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("format") != "x2v-dataset":
        raise DataError("not an x2v dataset manifest")
    return manifest


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, config: dict, entries: dict[str, np.ndarray],
                    step: int, rng_state: tuple[int, int]) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = json.dumps(config, sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg)) + cfg
    blob += struct.pack("<QQQ", step, rng_state[0], rng_state[1])
    blob += struct.pack("<I", len(entries))
    for name, arr in entries.items():
        nb = name.encode()
        blob += struct.pack("<H", len(nb)) + nb
        blob += _encode_tensor(np.asarray(arr))
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], int, tuple[int, int]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError("bad checkpoint magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", buf, 8)
    config = json.loads(buf[12:12 + cfg_len].decode())
    off = 12 + cfg_len
    step, seed, draws = struct.unpack_from("<QQQ", buf, off)
    off += 24
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        arr, off = _decode_tensor(buf, off)
        entries[name] = arr
    if off != len(buf):
        raise DataError("trailing bytes in checkpoint")
    return config, entries, int(step), (int(seed), int(draws))
