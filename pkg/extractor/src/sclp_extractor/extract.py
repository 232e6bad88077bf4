"""Batch extraction: images and prompt lists to SCLP feature files."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .backbone import Backbone, load_backbone
from .sclp import write_feature_bundle, write_text_features

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
DEFAULT_LAYERS = (6, 12, 18, 24)


class ExtractError(Exception):
    pass


@dataclass
class ExtractJob:
    output_root: str
    backbone_id: str = "vit-l-14-336"
    checkpoint: str | None = None
    resize: int = 518
    layers: tuple[int, ...] = DEFAULT_LAYERS
    manifest_path: str | None = None
    images_root: str | None = None
    image_list: str | None = None
    prompt_list: str | None = None

    def validate_against(self, model: Backbone) -> None:
        if self.resize % model.cfg.patch_size != 0:
            raise ExtractError(
                f"resize {self.resize} is not divisible by patch size {model.cfg.patch_size}"
            )
        bad = [l for l in self.layers if not 1 <= l <= model.cfg.vision_layers]
        if bad:
            raise ExtractError(
                f"layer indices {bad} invalid for a {model.cfg.vision_layers}-layer backbone"
            )


def preprocess(path: str, resize: int) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((resize, resize), Image.BICUBIC)
    except (UnidentifiedImageError, OSError) as exc:
        raise ExtractError(f"undecodable image {path!r}: {exc}") from exc
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(CLIP_MEAN, dtype=np.float32)) / np.asarray(CLIP_STD, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1)


@dataclass
class ImageTask:
    image_id: str
    category: str
    label: str
    source: str
    target: str


def _tasks_from_manifest(job: ExtractJob) -> list[ImageTask]:
    with open(job.manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    tasks = []
    for entry in manifest["entries"]:
        source = os.path.join(job.images_root, entry["image_id"])
        for ext in ("", ".png", ".jpg", ".jpeg", ".bmp"):
            if os.path.exists(source + ext):
                source = source + ext
                break
        tasks.append(
            ImageTask(
                image_id=entry["image_id"],
                category=entry["category"],
                label=entry["label"],
                source=source,
                target=os.path.join(job.output_root, entry["feature_path"]),
            )
        )
    return tasks


def _tasks_from_list(job: ExtractJob) -> list[ImageTask]:
    tasks = []
    with open(job.image_list, "r", encoding="utf-8") as fh:
        for line in fh:
            path = line.strip()
            if not path:
                continue
            stem = os.path.splitext(os.path.basename(path))[0]
            category = os.path.basename(os.path.dirname(path)) or "unknown"
            tasks.append(
                ImageTask(
                    image_id=f"{category}/{stem}",
                    category=category,
                    label="normal",
                    source=path,
                    target=os.path.join(job.output_root, "features", category, f"{stem}.sclp"),
                )
            )
    return tasks


def extract_image_features(job: ExtractJob, model: Backbone | None = None) -> dict:
    """Write one FeatureBundle SCLP per image; returns the summary dict."""
    model = model or load_backbone(job.backbone_id, job.checkpoint)
    job.validate_against(model)
    torch.set_num_threads(1)  # bit-stable reductions across runs
    if job.manifest_path:
        if not job.images_root:
            raise ExtractError("--images-root is required with --manifest")
        tasks = _tasks_from_manifest(job)
    elif job.image_list:
        tasks = _tasks_from_list(job)
    else:
        raise ExtractError("either a manifest or an image list is required")
    grid = job.resize // model.cfg.patch_size
    for task in tasks:
        tensor = preprocess(task.source, job.resize)
        cls_embed, captured = model.encode_image(tensor, tuple(job.layers))
        layers = {l: captured[l].numpy().astype(np.float32) for l in job.layers}
        write_feature_bundle(
            task.target,
            image_id=task.image_id,
            category=task.category,
            label=task.label,
            layers=layers,
            cls=cls_embed.numpy().astype(np.float32),
        )
    summary = {
        "kind": "images",
        "count": len(tasks),
        "backbone": job.backbone_id,
        "resize": job.resize,
        "grid": grid,
        "layers": list(job.layers),
        "D_img": model.d_img,
        "D_txt": model.d_txt,
    }
    _write_summary(job.output_root, "extract_images_summary.json", summary)
    return summary


def embed_prompt_list(job: ExtractJob, model: Backbone | None = None, out_path: str | None = None) -> dict:
    """Embed a key<TAB>channel<TAB>prompt list into one text-feature SCLP.

    Each (key, channel) vector is the L2-normalized mean over that
    channel's state-template prompts. Over-length prompts error out with
    the offending text; nothing is silently truncated.
    """
    model = model or load_backbone(job.backbone_id, job.checkpoint)
    torch.set_num_threads(1)
    grouped: dict[str, dict[str, list[str]]] = {}
    order: list[str] = []
    with open(job.prompt_list, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[1] not in ("normal", "abnormal"):
                raise ExtractError(f"{job.prompt_list}:{lineno}: malformed prompt line {line!r}")
            key, channel, prompt = parts
            if key not in grouped:
                grouped[key] = {"normal": [], "abnormal": []}
                order.append(key)
            grouped[key][channel].append(prompt)
    if not order:
        raise ExtractError(f"empty prompt list {job.prompt_list!r}")

    features = []
    for key in order:
        channels = []
        for channel in ("normal", "abnormal"):
            prompts = grouped[key][channel]
            if not prompts:
                raise ExtractError(f"prompt key {key!r} has no {channel} prompts")
            embeds = [model.encode_text(p).numpy().astype(np.float64) for p in prompts]
            mean = np.mean(embeds, axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0:
                raise ExtractError(f"prompt key {key!r} embedded to the zero vector")
            channels.append((mean / norm).astype(np.float32))
        features.append((key, channels[0], channels[1]))
    out_path = out_path or os.path.join(job.output_root, "text_features.sclp")
    write_text_features(out_path, features)
    summary = {
        "kind": "prompts",
        "count": len(features),
        "backbone": job.backbone_id,
        "D_txt": model.d_txt,
        "output": os.path.basename(out_path),
    }
    _write_summary(job.output_root, "embed_prompts_summary.json", summary)
    return summary


def _write_summary(root: str, name: str, summary: dict) -> None:
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, name), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
