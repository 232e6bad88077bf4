"""Feature store: data model, SCLP binary codec, manifests and mask I/O.

Everything that crosses the encoder boundary lives in SCLP containers:
magic ``SCLP`` + u32 version + u32 header length + UTF-8 JSON header +
contiguous little-endian float32 payloads in header order. The format is
deliberately dumb so corruption tests can be bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

SCLP_MAGIC = b"SCLP"
SCLP_VERSION = 1

# Patch grids are always taken from these encoder layers.
LAYER_INDICES = (6, 12, 18, 24)

KIND_BUNDLE = "feature_bundle"
KIND_TEXT = "text_features"
KIND_HEADBANK = "headbank"
KIND_RPL = "rpl"
KIND_MAP = "anomaly_map"


class CodecError(Exception):
    """Raised for any SCLP read/write violation."""


class ManifestError(Exception):
    """Raised when a manifest is inconsistent with itself or its files."""


def l2_normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize the last axis to unit L2 norm.

    Zero rows are returned unchanged and flagged instead of raising, so
    degenerate inputs never abort batch jobs. Returns ``(normalized,
    zero_flags)`` where ``zero_flags`` has the shape of ``v`` minus the
    last axis (a scalar bool for a single vector).
    """
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("l2_normalize: non-finite input")
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0.0
    safe = np.where(norms == 0.0, 1.0, norms)
    return arr / safe, zero


@dataclass
class FeatureBundle:
    """Per-image multi-level patch grids plus the final CLS vector.

    ``layers`` maps each index in ``LAYER_INDICES`` to a (G, G, D_img)
    grid; ``cls`` is (D_txt,); ``mask`` is an optional (H, W) binary grid
    present for anomalous training images.
    """

    image_id: str
    category: str
    layers: dict[int, np.ndarray]
    cls: np.ndarray
    label: str
    mask: np.ndarray | None = None

    def validate(self) -> None:
        if self.label not in ("normal", "anomalous"):
            raise CodecError(f"bad label {self.label!r} for {self.image_id}")
        missing = [l for l in LAYER_INDICES if l not in self.layers]
        if missing:
            raise CodecError(f"missing layer {missing[0]} in bundle {self.image_id}")
        g = None
        for l in LAYER_INDICES:
            grid = self.layers[l]
            if grid.ndim != 3 or grid.shape[0] != grid.shape[1]:
                raise CodecError(f"layer {l} of {self.image_id} is not a square grid")
            if g is None:
                g = grid.shape
            elif grid.shape != g:
                raise CodecError(f"layer {l} of {self.image_id} has shape {grid.shape}, expected {g}")
            if not np.all(np.isfinite(grid)):
                raise CodecError(f"non-finite values in layer {l} of {self.image_id}")
        if self.cls.ndim != 1:
            raise CodecError(f"cls of {self.image_id} must be a vector")
        if not np.all(np.isfinite(self.cls)):
            raise CodecError(f"non-finite values in cls of {self.image_id}")
        if self.mask is not None:
            if self.mask.ndim != 2:
                raise CodecError(f"mask of {self.image_id} must be 2-D")
            vals = np.unique(self.mask)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise CodecError(f"mask of {self.image_id} has values outside {{0,1}}")

    @property
    def grid_size(self) -> int:
        return self.layers[LAYER_INDICES[0]].shape[0]


@dataclass
class TextFeature:
    """Unit-norm normal/abnormal embedding pair for one prompt key."""

    prompt_key: str
    normal: np.ndarray
    abnormal: np.ndarray

    def validate(self, atol: float = 1e-6) -> None:
        for name, vec in (("normal", self.normal), ("abnormal", self.abnormal)):
            if vec.ndim != 1:
                raise CodecError(f"{name} vector of {self.prompt_key!r} must be 1-D")
            if not np.all(np.isfinite(vec)):
                raise CodecError(f"non-finite {name} vector for {self.prompt_key!r}")
            norm = float(np.linalg.norm(vec))
            if abs(norm - 1.0) > atol:
                raise CodecError(
                    f"{name} vector of {self.prompt_key!r} has norm {norm:.8f}, expected 1"
                )
        if self.normal.shape != self.abnormal.shape:
            raise CodecError(f"channel dim mismatch for {self.prompt_key!r}")


@dataclass(frozen=True)
class Dims:
    """Dataset-wide tensor dimensions; everything else is derived from these."""

    D_img: int
    D_txt: int
    G: int
    H: int
    W: int

    def to_json(self) -> dict:
        return {"D_img": self.D_img, "D_txt": self.D_txt, "G": self.G, "H": self.H, "W": self.W}

    @classmethod
    def from_json(cls, obj: dict) -> "Dims":
        return cls(**{k: int(obj[k]) for k in ("D_img", "D_txt", "G", "H", "W")})


@dataclass
class ManifestEntry:
    image_id: str
    category: str
    split: str
    feature_path: str
    label: str
    mask_path: str | None = None


@dataclass
class DatasetManifest:
    dims: Dims
    entries: list[ManifestEntry] = field(default_factory=list)

    def categories(self, split: str | None = None) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            if split is None or e.split == split:
                seen.setdefault(e.category, None)
        return sorted(seen)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def to_json(self) -> dict:
        entries = []
        for e in self.entries:
            item = {
                "image_id": e.image_id,
                "category": e.category,
                "split": e.split,
                "feature_path": e.feature_path,
                "label": e.label,
            }
            if e.mask_path is not None:
                item["mask_path"] = e.mask_path
            entries.append(item)
        return {"dims": self.dims.to_json(), "entries": entries}


# ---------------------------------------------------------------------------
# Low-level SCLP container


def sclp_write(path: str, kind: str, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write one SCLP container. Tensor payloads go in list order."""
    specs = []
    for name, arr in tensors:
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise CodecError(f"non-finite values in tensor {name!r}")
        specs.append({"name": name, "shape": list(arr.shape)})
    header = {"kind": kind, "dtype": "f32le", "meta": meta, "tensors": specs}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(SCLP_MAGIC)
        fh.write(struct.pack("<II", SCLP_VERSION, len(raw)))
        fh.write(raw)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def sclp_read_header(path: str) -> dict:
    """Read and validate only the header; cheap enough for manifest checks."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SCLP_MAGIC:
            raise CodecError(f"bad magic {magic!r} in {path}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != SCLP_VERSION:
            raise CodecError(f"unsupported version {version} in {path}")
        raw = fh.read(hlen)
        if len(raw) < hlen:
            raise CodecError(f"payload underrun reading header of {path}")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CodecError(f"corrupt header in {path}: {exc}") from exc
    if header.get("dtype") != "f32le":
        raise CodecError(f"unsupported dtype {header.get('dtype')!r} in {path}")
    return header


def sclp_read(path: str) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read one SCLP container, returning (kind, meta, tensors by name)."""
    header = sclp_read_header(path)
    with open(path, "rb") as fh:
        fh.seek(4)
        _, hlen = struct.unpack("<II", fh.read(8))
        fh.seek(4 + 8 + hlen)
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    pos = 0
    for spec in header["tensors"]:
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        chunk = payload[pos : pos + nbytes]
        if len(chunk) < nbytes:
            raise CodecError(f"payload underrun for tensor {spec['name']!r} in {path}")
        arr = np.frombuffer(chunk, dtype="<f4", count=count).reshape(shape).copy()
        if not np.all(np.isfinite(arr)):
            raise CodecError(f"NaN payload in tensor {spec['name']!r} of {path}")
        tensors[spec["name"]] = arr
        pos += nbytes
    if pos != len(payload):
        raise CodecError(f"{len(payload) - pos} trailing payload bytes in {path}")
    return header["kind"], header["meta"], tensors


# ---------------------------------------------------------------------------
# Typed read/write on top of the container


def write_feature_file(obj: FeatureBundle | list[TextFeature], path: str) -> None:
    """Serialize a FeatureBundle or a list of TextFeature to one SCLP file."""
    if isinstance(obj, FeatureBundle):
        obj.validate()
        meta = {"image_id": obj.image_id, "category": obj.category, "label": obj.label}
        tensors = [(f"layer_{l}", obj.layers[l].astype("<f4")) for l in LAYER_INDICES]
        tensors.append(("cls", obj.cls.astype("<f4")))
        if obj.mask is not None:
            tensors.append(("mask", obj.mask.astype("<f4")))
        sclp_write(path, KIND_BUNDLE, meta, tensors)
    elif isinstance(obj, list):
        tensors = []
        keys = []
        for tf in obj:
            tf.validate()
            keys.append(tf.prompt_key)
            tensors.append((f"{tf.prompt_key}/normal", tf.normal.astype("<f4")))
            tensors.append((f"{tf.prompt_key}/abnormal", tf.abnormal.astype("<f4")))
        if len(set(keys)) != len(keys):
            raise CodecError("duplicate prompt keys in text feature set")
        sclp_write(path, KIND_TEXT, {"prompt_keys": keys}, tensors)
    else:
        raise CodecError(f"cannot serialize object of type {type(obj).__name__}")


def read_feature_file(path: str) -> FeatureBundle | list[TextFeature]:
    """Inverse of write_feature_file; validates shape and finiteness."""
    kind, meta, tensors = sclp_read(path)
    if kind == KIND_BUNDLE:
        layers = {}
        for l in LAYER_INDICES:
            name = f"layer_{l}"
            if name not in tensors:
                raise CodecError(f"missing layer {l} in {path}")
            layers[l] = tensors[name]
        bundle = FeatureBundle(
            image_id=meta["image_id"],
            category=meta["category"],
            layers=layers,
            cls=tensors["cls"],
            label=meta["label"],
            mask=tensors.get("mask"),
        )
        bundle.validate()
        return bundle
    if kind == KIND_TEXT:
        feats = []
        for key in meta["prompt_keys"]:
            tf = TextFeature(
                prompt_key=key,
                normal=tensors[f"{key}/normal"],
                abnormal=tensors[f"{key}/abnormal"],
            )
            tf.validate()
            feats.append(tf)
        return feats
    raise CodecError(f"unexpected kind {kind!r} in {path}")


# ---------------------------------------------------------------------------
# Masks (8-bit grayscale PNG on disk, {0,1} float grids in memory)


def save_mask(path: str, grid: np.ndarray) -> None:
    arr = np.asarray(grid)
    if not np.all(np.isin(np.unique(arr), (0.0, 1.0))):
        raise ValueError("mask grid must be binary")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    img = Image.fromarray((arr * 255).astype(np.uint8), mode="L")
    img.save(path, format="PNG")


def load_mask(path: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 0).astype(np.float32)


# ---------------------------------------------------------------------------
# Manifests


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    dims = Dims.from_json(obj["dims"])
    entries = []
    for item in obj["entries"]:
        entries.append(
            ManifestEntry(
                image_id=item["image_id"],
                category=item["category"],
                split=item["split"],
                feature_path=item["feature_path"],
                label=item["label"],
                mask_path=item.get("mask_path"),
            )
        )
    return DatasetManifest(dims=dims, entries=entries)


def resolve_path(rel: str, feature_root: str) -> str:
    return rel if os.path.isabs(rel) else os.path.join(feature_root, rel)


def validate_manifest(manifest: DatasetManifest, feature_root: str, check_files: bool = True) -> None:
    """Check id uniqueness, path resolvability and header/dims consistency."""
    seen: set[str] = set()
    for e in manifest.entries:
        if e.image_id in seen:
            raise ManifestError(f"duplicate image_id {e.image_id!r}")
        seen.add(e.image_id)
        if e.split not in ("train", "test"):
            raise ManifestError(f"bad split {e.split!r} for {e.image_id}")
        if e.label not in ("normal", "anomalous"):
            raise ManifestError(f"bad label {e.label!r} for {e.image_id}")
        if e.split == "train" and e.label == "anomalous" and e.mask_path is None:
            raise ManifestError(f"anomalous train image {e.image_id} has no mask")
        if e.label == "normal" and e.mask_path is not None:
            raise ManifestError(f"normal image {e.image_id} must not reference a mask")
    if not check_files:
        return
    d = manifest.dims
    for e in manifest.entries:
        fpath = resolve_path(e.feature_path, feature_root)
        if not os.path.exists(fpath):
            raise ManifestError(f"feature_path {e.feature_path!r} not found for {e.image_id}")
        header = sclp_read_header(fpath)
        shapes = {spec["name"]: tuple(spec["shape"]) for spec in header["tensors"]}
        for l in LAYER_INDICES:
            shape = shapes.get(f"layer_{l}")
            if shape != (d.G, d.G, d.D_img):
                raise ManifestError(
                    f"{e.image_id}: layer {l} shape {shape} does not match dims "
                    f"({d.G}, {d.G}, {d.D_img})"
                )
        if shapes.get("cls") != (d.D_txt,):
            raise ManifestError(f"{e.image_id}: cls shape {shapes.get('cls')} != ({d.D_txt},)")
        if e.mask_path is not None:
            mpath = resolve_path(e.mask_path, feature_root)
            if not os.path.exists(mpath):
                raise ManifestError(f"mask_path {e.mask_path!r} not found for {e.image_id}")


def load_bundle(entry: ManifestEntry, feature_root: str) -> FeatureBundle:
    """Load a bundle and attach its mask (if the manifest references one)."""
    obj = read_feature_file(resolve_path(entry.feature_path, feature_root))
    if not isinstance(obj, FeatureBundle):
        raise ManifestError(f"{entry.feature_path!r} is not a feature bundle")
    if entry.mask_path is not None and obj.mask is None:
        obj.mask = load_mask(resolve_path(entry.mask_path, feature_root))
    return obj
