"""Writer for the SCLP container consumed by the detection pipeline.

Format: magic ``SCLP`` + u32 version + u32 header length + UTF-8 JSON
header + contiguous little-endian float32 payloads in header order.
Files are written atomically via temp-rename.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

SCLP_MAGIC = b"SCLP"
SCLP_VERSION = 1


class SclpWriteError(Exception):
    pass


def sclp_write(path: str, kind: str, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    specs = []
    for name, arr in tensors:
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise SclpWriteError(f"non-finite values in tensor {name!r}")
        specs.append({"name": name, "shape": list(arr.shape)})
    header = {"kind": kind, "dtype": "f32le", "meta": meta, "tensors": specs}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(SCLP_MAGIC)
        fh.write(struct.pack("<II", SCLP_VERSION, len(raw)))
        fh.write(raw)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def write_feature_bundle(
    path: str,
    image_id: str,
    category: str,
    label: str,
    layers: dict[int, np.ndarray],
    cls: np.ndarray,
) -> None:
    tensors = [(f"layer_{l}", layers[l]) for l in sorted(layers)]
    tensors.append(("cls", cls))
    sclp_write(path, "feature_bundle", {"image_id": image_id, "category": category, "label": label}, tensors)


def write_text_features(path: str, features: list[tuple[str, np.ndarray, np.ndarray]]) -> None:
    keys = [key for key, _, _ in features]
    if len(set(keys)) != len(keys):
        raise SclpWriteError("duplicate prompt keys")
    tensors = []
    for key, normal, abnormal in features:
        tensors.append((f"{key}/normal", normal))
        tensors.append((f"{key}/abnormal", abnormal))
    sclp_write(path, "text_features", {"prompt_keys": keys}, tensors)
