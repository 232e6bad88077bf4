"""Deterministic mock encoder: stand-in image/text features for desk-scale runs.

The generator plants a recoverable structure: categories declared in the
same group share nearby text embeddings and nearby patch statistics, the
dataset-level CLS projection ties both spaces together, and anomalous
patches sit on a per-group anomaly direction orthogonal to every group
direction. Clustering, head training, attention routing and prompt
classification all become genuinely solvable on a laptop.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .csp import DEFAULT_TEMPLATES, PromptPairSpec, PromptTemplateSet, prompt_pair_spec
from .store import (
    DatasetManifest,
    Dims,
    FeatureBundle,
    ManifestEntry,
    TextFeature,
    l2_normalize,
    save_manifest,
    save_mask,
    write_feature_file,
)

MOCKSPEC_FILENAME = "mockspec.json"
MANIFEST_FILENAME = "manifest.json"


def _hash_rng(seed: int, *tags: object) -> np.random.Generator:
    """Independent deterministic stream per (seed, tags)."""
    text = "\x1f".join(str(t) for t in tags) + f"\x1f{seed}"
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _hash_dir(seed: int, dim: int, *tags: object) -> np.ndarray:
    rng = _hash_rng(seed, "dir", *tags)
    v = rng.standard_normal(dim)
    normed, _ = l2_normalize(v)
    return normed


@dataclass
class MockSpec:
    """Declarative description of one synthetic dataset."""

    groups: dict[str, list[str]]
    train_categories: list[str]
    test_categories: list[str]
    images_per_category: int = 10
    test_images_per_category: int = 8
    anomaly_fraction: float = 0.5
    dims: Dims = field(default_factory=lambda: Dims(D_img=16, D_txt=8, G=8, H=64, W=64))
    seed: int = 0
    noise: float = 0.1
    delta: float = 0.2
    # intact content leans slightly against the damage axis, so normal and
    # anomalous images fall on opposite sides of the zero-bias cosine boundary
    flaw_bias: float = 0.02

    def __post_init__(self) -> None:
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ValueError("anomaly_fraction must be in [0, 1]")
        if self.dims.D_txt > self.dims.D_img:
            raise ValueError("D_txt must not exceed D_img")
        grouped = [c for members in self.groups.values() for c in members]
        if len(set(grouped)) != len(grouped):
            raise ValueError("categories may appear in at most one group")

    def group_of(self) -> dict[str, str]:
        return {c: g for g, members in self.groups.items() for c in members}

    def to_json(self) -> dict:
        return {
            "groups": self.groups,
            "train_categories": self.train_categories,
            "test_categories": self.test_categories,
            "images_per_category": self.images_per_category,
            "test_images_per_category": self.test_images_per_category,
            "anomaly_fraction": self.anomaly_fraction,
            "dims": self.dims.to_json(),
            "seed": self.seed,
            "noise": self.noise,
            "delta": self.delta,
            "flaw_bias": self.flaw_bias,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MockSpec":
        return cls(
            groups={g: list(m) for g, m in obj["groups"].items()},
            train_categories=list(obj["train_categories"]),
            test_categories=list(obj["test_categories"]),
            images_per_category=int(obj["images_per_category"]),
            test_images_per_category=int(obj["test_images_per_category"]),
            anomaly_fraction=float(obj["anomaly_fraction"]),
            dims=Dims.from_json(obj["dims"]),
            seed=int(obj["seed"]),
            noise=float(obj["noise"]),
            delta=float(obj["delta"]),
            flaw_bias=float(obj.get("flaw_bias", 0.02)),
        )

    @classmethod
    def load(cls, path: str) -> "MockSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _group_frames(seed: int, d_txt: int, group_names: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis and simplex-spread unit directions for the groups.

    Simplex spreading maximizes pairwise separation (antipodal for two
    groups), which the penalized cluster score needs to prefer n > 1.
    """
    m = len(group_names)
    if m == 0:
        return np.zeros((0, d_txt)), np.zeros((0, d_txt))
    if m > d_txt:
        raise ValueError("more groups than text dimensions")
    rng = _hash_rng(seed, "group-basis")
    raw = rng.standard_normal((d_txt, max(m, 2)))
    q, _ = np.linalg.qr(raw)
    basis = q[:, :m].T
    if m == 1:
        return basis, basis.copy()
    centered = basis - basis.mean(axis=0, keepdims=True)
    simplex, _ = l2_normalize(centered)
    return basis, simplex


class MockTextStore:
    """Hash-based text embedder; class-name tokens dominate every prompt."""

    CLASS_WEIGHT = 4.0
    STATE_WEIGHT = 1.0
    FILLER_WEIGHT = 0.25

    def __init__(
        self,
        seed: int,
        d_txt: int,
        groups: dict[str, list[str]] | None = None,
        delta: float = 0.2,
        templates: PromptTemplateSet = DEFAULT_TEMPLATES,
    ):
        self.seed = seed
        self.d_txt = d_txt
        self.delta = delta
        self.templates = templates
        self.groups = {g: list(m) for g, m in (groups or {}).items()}
        self._group_of = {c: g for g, members in self.groups.items() for c in members}
        group_names = sorted(self.groups)
        self._basis, self._simplex = _group_frames(seed, d_txt, group_names)
        self._group_index = {g: i for i, g in enumerate(group_names)}
        filler = set(self._tokenize(templates.template.replace("[state]", " ").replace("[cls]", " ")))
        state_tokens: set[str] = set()
        for state in templates.normal_states + templates.abnormal_states:
            state_tokens.update(self._tokenize(state))
        self._state_tokens = state_tokens - filler
        self._filler_tokens = filler
        self._damage: np.ndarray | None = None

    @staticmethod
    def _tokenize(text: str) -> list[str]:
        out = []
        for raw in text.lower().split():
            tok = "".join(ch for ch in raw if ch.isalnum())
            if tok:
                out.append(tok)
        return out

    def group_direction(self, group: str) -> np.ndarray:
        return self._simplex[self._group_index[group]]

    def damage_direction(self) -> np.ndarray:
        """Mean abnormal-state minus mean normal-state token direction.

        Mirrors how a contrastively trained encoder ties damage wording to
        damaged image content; anomaly directions lean on it so that
        reference-initialized classification starts out informative.
        """
        if self._damage is not None:
            return self._damage
        normal = [t for s in self.templates.normal_states for t in self._tokenize(s)]
        abnormal = [t for s in self.templates.abnormal_states for t in self._tokenize(s)]
        acc = np.zeros(self.d_txt)
        for tok in abnormal:
            acc += self.class_direction(tok) / len(abnormal)
        for tok in normal:
            acc -= self.class_direction(tok) / len(normal)
        if len(self._basis):
            acc = acc - self._basis.T @ (self._basis @ acc)
        normed, zero = l2_normalize(acc)
        if bool(zero):
            raise ValueError("degenerate damage direction")
        self._damage = normed
        return normed

    def anomaly_group_direction(self, group: str) -> np.ndarray:
        """Per-group anomaly direction, orthogonal to every group direction."""
        raw = _hash_dir(self.seed, self.d_txt, "anomgroup", group) + 2.0 * self.damage_direction()
        if len(self._basis):
            raw = raw - self._basis.T @ (self._basis @ raw)
        normed, zero = l2_normalize(raw)
        if bool(zero):
            raise ValueError(f"degenerate anomaly direction for group {group!r}")
        return normed

    def class_direction(self, token: str) -> np.ndarray:
        group = self._group_of.get(token)
        if group is None:
            d = _hash_dir(self.seed, self.d_txt, "word", token)
            # state tokens live off the category basis so that object and
            # state information factorize, as in an aligned encoder
            if token in self._state_tokens and len(self._basis):
                d = d - self._basis.T @ (self._basis @ d)
                d, zero = l2_normalize(d)
                if bool(zero):
                    raise ValueError(f"degenerate state direction for {token!r}")
            return d
        # category identity stays off the damage axis, same factorization
        pert = _hash_dir(self.seed, self.d_txt, "class", token)
        damage = self.damage_direction()
        pert = pert - (pert @ damage) * damage
        v = self.group_direction(group) + self.delta * pert
        normed, _ = l2_normalize(v)
        return normed

    def anomaly_class_direction(self, token: str) -> np.ndarray:
        group = self._group_of.get(token)
        if group is None:
            base = _hash_dir(self.seed, self.d_txt, "anomword", token)
        else:
            base = self.anomaly_group_direction(group)
        v = base + self.delta * _hash_dir(self.seed, self.d_txt, "anomclass", token)
        normed, _ = l2_normalize(v)
        return normed

    def embed_string(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValueError("empty prompt")
        acc = np.zeros(self.d_txt)
        for tok in self._tokenize(text):
            if tok in self._filler_tokens:
                weight = self.FILLER_WEIGHT
            elif tok in self._state_tokens:
                weight = self.STATE_WEIGHT
            else:
                weight = self.CLASS_WEIGHT
            acc = acc + weight * self.class_direction(tok)
        normed, zero = l2_normalize(acc)
        if bool(zero):
            raise ValueError(f"prompt {text!r} embedded to the zero vector")
        return normed

    def get(self, key: str, spec: PromptPairSpec | None = None) -> TextFeature:
        if spec is None:
            raise KeyError(f"mock store needs a prompt spec for key {key!r}")
        channels = []
        for prompts in (spec.normal, spec.abnormal):
            if not prompts:
                raise ValueError(f"no prompts for key {key!r}")
            rows = np.stack([self.embed_string(p) for p in prompts])
            mean, zero = l2_normalize(rows.mean(axis=0))
            if bool(zero):
                raise ValueError(f"prompt set for {key!r} averaged to zero")
            channels.append(mean.astype(np.float64))
        feat = TextFeature(prompt_key=key, normal=channels[0], abnormal=channels[1])
        feat.validate()
        return feat


def mock_text_embed(
    prompt: str,
    seed: int,
    d_txt: int = 8,
    groups: dict[str, list[str]] | None = None,
    templates: PromptTemplateSet = DEFAULT_TEMPLATES,
) -> TextFeature:
    """Deterministic unit-norm normal/abnormal pair for one prompt phrase."""
    if not prompt.strip():
        raise ValueError("empty prompt")
    store = MockTextStore(seed, d_txt, groups=groups, templates=templates)
    spec = prompt_pair_spec(prompt, [prompt], templates)
    return store.get(prompt, spec)


def _block_upscale(patch_mask: np.ndarray, h: int, w: int) -> np.ndarray:
    g = patch_mask.shape[0]
    rows = (np.arange(h) * g) // h
    cols = (np.arange(w) * g) // w
    return patch_mask[np.ix_(rows, cols)].astype(np.float32)


def generate_mock_dataset(spec: MockSpec, out_dir: str) -> DatasetManifest:
    """Emit SCLP features, PNG masks, manifest.json and mockspec.json."""
    d = spec.dims
    store = MockTextStore(spec.seed, d.D_txt, groups=spec.groups, delta=spec.delta)
    group_of = spec.group_of()

    # CLS projection with orthonormal rows; image-space directions are the
    # lifted text-space directions so CLS lands near the class embedding.
    rng = _hash_rng(spec.seed, "projection")
    q, _ = np.linalg.qr(rng.standard_normal((d.D_img, d.D_txt)))
    proj = q[:, : d.D_txt].T  # (D_txt, D_img), P P^T = I

    entries: list[ManifestEntry] = []
    from .store import LAYER_INDICES

    for split, cats, count in (
        ("train", spec.train_categories, spec.images_per_category),
        ("test", spec.test_categories, spec.test_images_per_category),
    ):
        for cat in cats:
            if cat not in group_of:
                raise ValueError(f"category {cat!r} missing from the declared groups")
            damage = store.damage_direction()
            normal_txt = store.class_direction(cat) - spec.flaw_bias * damage
            normal_txt, _ = l2_normalize(normal_txt)
            normal_img = proj.T @ normal_txt
            anomaly_img = proj.T @ store.anomaly_class_direction(cat)
            n_anom = int(round(spec.anomaly_fraction * count))
            for idx in range(count):
                anomalous = idx < n_anom
                image_id = f"{cat}-{split}-{idx:03d}"
                img_rng = _hash_rng(spec.seed, "image", image_id)
                patch_mask = np.zeros((d.G, d.G), dtype=np.float32)
                if anomalous:
                    rh = int(img_rng.integers(max(1, d.G // 3), max(2, (2 * d.G) // 3) + 1))
                    rw = int(img_rng.integers(max(1, d.G // 3), max(2, (2 * d.G) // 3) + 1))
                    top = int(img_rng.integers(0, d.G - rh + 1))
                    left = int(img_rng.integers(0, d.G - rw + 1))
                    patch_mask[top : top + rh, left : left + rw] = 1.0
                layers = {}
                for l in LAYER_INDICES:
                    base = np.where(
                        patch_mask[:, :, None] > 0, anomaly_img[None, None, :], normal_img[None, None, :]
                    )
                    grid = base + spec.noise * img_rng.standard_normal((d.G, d.G, d.D_img))
                    layers[l] = grid.astype(np.float32)
                final = layers[LAYER_INDICES[-1]].reshape(-1, d.D_img)
                cls = (proj @ final.mean(axis=0)).astype(np.float32)
                bundle = FeatureBundle(
                    image_id=image_id,
                    category=cat,
                    layers=layers,
                    cls=cls,
                    label="anomalous" if anomalous else "normal",
                )
                feature_path = os.path.join("feat", f"{image_id}.sclp")
                write_feature_file(bundle, os.path.join(out_dir, feature_path))
                mask_path = None
                if anomalous:
                    mask_path = os.path.join("masks", f"{image_id}.png")
                    save_mask(
                        os.path.join(out_dir, mask_path),
                        _block_upscale(patch_mask, d.H, d.W),
                    )
                entries.append(
                    ManifestEntry(
                        image_id=image_id,
                        category=cat,
                        split=split,
                        feature_path=feature_path,
                        label="anomalous" if anomalous else "normal",
                        mask_path=mask_path,
                    )
                )

    manifest = DatasetManifest(dims=d, entries=entries)
    save_manifest(manifest, os.path.join(out_dir, MANIFEST_FILENAME))
    with open(os.path.join(out_dir, MOCKSPEC_FILENAME), "w", encoding="utf-8") as fh:
        json.dump(spec.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def store_from_mockspec(path: str, templates: PromptTemplateSet = DEFAULT_TEMPLATES) -> MockTextStore:
    spec = MockSpec.load(path)
    return MockTextStore(spec.seed, spec.dims.D_txt, groups=spec.groups, delta=spec.delta, templates=templates)
