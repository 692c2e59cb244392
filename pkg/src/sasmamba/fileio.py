"""File formats: keypoint JSON sequences and the binary checkpoint.

Checkpoint layout: magic ``SASM``, format version (u32 LE), manifest length
(u32 LE), canonical-JSON manifest (config, payload checksum, per-tensor name /
shape / byte offset), then the payload of little-endian 32-bit floats in
manifest order. Saves are byte-deterministic so save -> load -> save is an
identity on bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .errors import (ChecksumError, ConfigError, CorruptionError, FormatError,
                     VersionError)
from .model import Model, ModelConfig, build_model, count_params
from .tensor import Tensor

MAGIC = b"SASM"
FORMAT_VERSION = 1


def _atomic_write(path, blob: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


# --- keypoint sequences ------------------------------------------------------


def write_keypoints(path, seq: np.ndarray, fps: float = 50.0,
                    confidence: np.ndarray | None = None) -> None:
    """Write a (T, V, 2) or (T, V, 3) sequence as a keypoint JSON file."""
    arr = np.asarray(seq, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[-1] not in (2, 3):
        raise FormatError(f"sequence must be (T, V, 2|3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("sequence contains non-finite values")
    doc = {
        "version": 1,
        "fps": float(fps),
        "num_joints": int(arr.shape[1]),
        "dims": int(arr.shape[2]),
        "frames": [[[float(x) for x in joint] for joint in frame] for frame in arr],
    }
    if confidence is not None:
        conf = np.asarray(confidence, dtype=np.float32)
        if conf.shape != arr.shape[:2]:
            raise FormatError(f"confidence shape {conf.shape} != {arr.shape[:2]}")
        doc["confidence"] = [[float(c) for c in frame] for frame in conf]
    _atomic_write(path, (json.dumps(doc, indent=1) + "\n").encode("utf-8"))


def read_keypoints(path) -> np.ndarray:
    """Read a keypoint JSON file back as a float32 (T, V, dims) array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise FormatError("keypoint file must contain a JSON object")
    if doc.get("version") != 1:
        raise FormatError(f"unsupported keypoint file version: {doc.get('version')!r}")
    dims = doc.get("dims")
    if dims not in (2, 3):
        raise FormatError(f"field 'dims' must be 2 or 3, got {dims!r}")
    frames = doc.get("frames")
    if not isinstance(frames, list) or not frames:
        raise FormatError("field 'frames' must be a nonempty array")
    v = doc.get("num_joints")
    for t, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != v:
            raise FormatError(f"field 'frames': frame {t} does not have {v} joints")
        for joint in frame:
            if not isinstance(joint, list) or len(joint) != dims:
                raise FormatError(f"field 'frames': ragged joint entry in frame {t}")
    arr = np.asarray(frames, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise FormatError("field 'frames' contains non-finite values")
    if "confidence" in doc:
        conf = np.asarray(doc["confidence"], dtype=np.float32)
        if conf.shape != arr.shape[:2]:
            raise FormatError("field 'confidence' shape does not match frames")
    return arr


# --- checkpoints -------------------------------------------------------------


def _manifest_bytes(cfg: ModelConfig, tensors: list[tuple[str, Tensor]],
                    checksum: int) -> bytes:
    entries = []
    offset = 0
    for name, t in tensors:
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 4
    manifest = {"config": cfg.to_dict(), "checksum": checksum, "tensors": entries}
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_ckpt(model: Model, path) -> None:
    tensors = list(model.named_params())
    payload = b"".join(np.ascontiguousarray(t.data.astype("<f4")).tobytes()
                       for _, t in tensors)
    manifest = _manifest_bytes(model.config, tensors, zlib.crc32(payload))
    blob = MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(manifest)) \
        + manifest + payload
    _atomic_write(path, blob)


def load_ckpt(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise FormatError("not a checkpoint file: bad magic")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version > FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} is newer than "
                           f"supported version {FORMAT_VERSION}")
    mlen = struct.unpack_from("<I", blob, 8)[0]
    if len(blob) < 12 + mlen:
        raise CorruptionError("truncated manifest")
    try:
        manifest = json.loads(blob[12:12 + mlen])
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"manifest is not valid JSON: {exc.msg}") from exc
    try:
        cfg = ModelConfig.from_dict(manifest["config"])
        entries = manifest["tensors"]
        checksum = manifest["checksum"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise CorruptionError(f"manifest incomplete or inconsistent: {exc}") from exc

    total, breakdown = count_params(cfg)
    if len(entries) != len(breakdown):
        raise CorruptionError(
            f"manifest lists {len(entries)} tensors, config requires {len(breakdown)}")
    payload = blob[12 + mlen:]
    if len(payload) != total * 4:
        raise CorruptionError(
            f"payload holds {len(payload) // 4} scalars, config requires {total}")
    if zlib.crc32(payload) != checksum:
        raise ChecksumError("stored payload checksum does not match payload bytes")

    params: dict[str, Tensor] = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=start)
        params[entry["name"]] = Tensor(arr.reshape(shape).astype(np.float32))
    try:
        return build_model(cfg, params)
    except ConfigError as exc:
        raise CorruptionError(f"tensor list does not match the config manifest: {exc}") from exc
