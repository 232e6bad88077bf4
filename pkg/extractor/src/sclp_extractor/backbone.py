"""Frozen CLIP-style dual encoder with multi-level patch-token capture.

Patch tokens are taken from the transformer residual stream (width
dimension, pre-projection); the CLS vector passes through the final norm
and projection (embedding dimension). Positional embeddings are bicubicly
interpolated whenever the requested grid differs from the native one.

Pretrained weights cannot be downloaded in this environment, so real
backbone ids require a local checkpoint; the ``toy[:seed]`` backbone is a
fully deterministic randomly initialized stand-in with the same layout
(24 blocks, patch 14) used by the contract tests.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_BACKBONE = "vit-l-14-336"


class BackboneUnavailableError(Exception):
    pass


class TokenizerOverflowError(Exception):
    pass


@dataclass
class BackboneConfig:
    name: str
    image_size: int = 336
    patch_size: int = 14
    vision_width: int = 1024
    vision_layers: int = 24
    vision_heads: int = 16
    embed_dim: int = 768
    text_width: int = 768
    text_layers: int = 12
    text_heads: int = 12
    context_length: int = 77
    vocab_size: int = 49408

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


TOY_CONFIG = BackboneConfig(
    name="toy",
    image_size=112,
    patch_size=14,
    vision_width=32,
    vision_layers=24,
    vision_heads=4,
    embed_dim=16,
    text_width=32,
    text_layers=4,
    text_heads=4,
    context_length=77,
    vocab_size=8192,
)

REAL_CONFIGS = {DEFAULT_BACKBONE: BackboneConfig(name=DEFAULT_BACKBONE)}


class HashTokenizer:
    """Stable hashed tokenization: lowercase alphanumeric words to ids."""

    BOS = 0
    EOS = 1
    RESERVED = 2

    def __init__(self, vocab_size: int, context_length: int):
        self.vocab_size = vocab_size
        self.context_length = context_length

    def _word_id(self, word: str) -> int:
        digest = hashlib.sha256(word.encode("utf-8")).digest()
        span = self.vocab_size - self.RESERVED
        return self.RESERVED + int.from_bytes(digest[:8], "little") % span

    def encode(self, text: str) -> list[int]:
        words = [w for w in re.split(r"[^0-9a-z]+", text.lower()) if w]
        ids = [self.BOS] + [self._word_id(w) for w in words] + [self.EOS]
        if len(ids) > self.context_length:
            raise TokenizerOverflowError(
                f"prompt exceeds the {self.context_length}-token context: {text!r}"
            )
        return ids


class ResidualBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, width * 4), nn.GELU(), nn.Linear(width * 4, width))

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        y = self.ln_1(x)
        y, _ = self.attn(y, y, y, need_weights=False, attn_mask=attn_mask)
        x = x + y
        x = x + self.mlp(self.ln_2(x))
        return x


class VisionEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv2d(3, cfg.vision_width, cfg.patch_size, stride=cfg.patch_size, bias=False)
        self.class_token = nn.Parameter(torch.randn(cfg.vision_width) * 0.02)
        native = (cfg.image_size // cfg.patch_size) ** 2
        self.pos_embed = nn.Parameter(torch.randn(native + 1, cfg.vision_width) * 0.02)
        self.blocks = nn.ModuleList(
            ResidualBlock(cfg.vision_width, cfg.vision_heads) for _ in range(cfg.vision_layers)
        )
        self.ln_post = nn.LayerNorm(cfg.vision_width)
        self.proj = nn.Parameter(torch.randn(cfg.vision_width, cfg.embed_dim) * cfg.vision_width**-0.5)

    def interpolated_pos_embed(self, grid: int) -> torch.Tensor:
        native = int((self.pos_embed.shape[0] - 1) ** 0.5)
        if native == grid:
            return self.pos_embed
        cls_pos = self.pos_embed[:1]
        patch_pos = self.pos_embed[1:].reshape(1, native, native, -1).permute(0, 3, 1, 2)
        resized = F.interpolate(patch_pos, size=(grid, grid), mode="bicubic", align_corners=False)
        resized = resized.permute(0, 2, 3, 1).reshape(grid * grid, -1)
        return torch.cat([cls_pos, resized], dim=0)

    def forward(self, image: torch.Tensor, layers: tuple[int, ...]) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """image: (3, H, W) normalized. Returns (cls_embed, {layer: (G, G, width)})."""
        x = self.conv(image.unsqueeze(0))  # (1, width, G, G)
        grid = x.shape[-1]
        x = x.flatten(2).transpose(1, 2)  # (1, G*G, width)
        cls_tok = self.class_token.expand(1, 1, -1)
        x = torch.cat([cls_tok, x], dim=1)
        x = x + self.interpolated_pos_embed(grid).unsqueeze(0)
        captured: dict[int, torch.Tensor] = {}
        for depth, block in enumerate(self.blocks, start=1):
            x = block(x)
            if depth in layers:
                captured[depth] = x[0, 1:].reshape(grid, grid, -1)
        cls_embed = self.ln_post(x[0, 0]) @ self.proj
        return cls_embed, captured


class TextEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.text_width)
        self.pos_embed = nn.Parameter(torch.randn(cfg.context_length, cfg.text_width) * 0.01)
        self.blocks = nn.ModuleList(
            ResidualBlock(cfg.text_width, cfg.text_heads) for _ in range(cfg.text_layers)
        )
        self.ln_final = nn.LayerNorm(cfg.text_width)
        self.proj = nn.Parameter(torch.randn(cfg.text_width, cfg.embed_dim) * cfg.text_width**-0.5)

    def forward(self, ids: list[int]) -> torch.Tensor:
        n = len(ids)
        x = self.token_embed(torch.tensor(ids, dtype=torch.long)).unsqueeze(0)
        x = x + self.pos_embed[:n].unsqueeze(0)
        mask = torch.full((n, n), float("-inf")).triu(1)
        for block in self.blocks:
            x = block(x, attn_mask=mask)
        return self.ln_final(x[0, -1]) @ self.proj  # EOS is the last token


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = VisionEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.tokenizer = HashTokenizer(cfg.vocab_size, cfg.context_length)

    @property
    def d_img(self) -> int:
        return self.cfg.vision_width

    @property
    def d_txt(self) -> int:
        return self.cfg.embed_dim

    def encode_image(self, image: torch.Tensor, layers: tuple[int, ...]):
        with torch.no_grad():
            return self.visual(image, layers)

    def encode_text(self, text: str) -> torch.Tensor:
        with torch.no_grad():
            return self.text(self.tokenizer.encode(text))


def load_backbone(backbone_id: str, checkpoint: str | None = None) -> Backbone:
    """Resolve a backbone id to a frozen model in eval mode.

    ``toy`` or ``toy:<seed>`` builds the deterministic random stand-in.
    Real ids need a checkpoint file ({"config": ..., "state_dict": ...});
    there is no weight download path in this tool.
    """
    if backbone_id.startswith("toy"):
        seed = 0
        if ":" in backbone_id:
            seed = int(backbone_id.split(":", 1)[1])
        torch.manual_seed(seed)
        model = Backbone(TOY_CONFIG)
    elif checkpoint is not None:
        payload = torch.load(checkpoint, map_location="cpu", weights_only=False)
        cfg = BackboneConfig(**payload["config"])
        torch.manual_seed(0)
        model = Backbone(cfg)
        model.load_state_dict(payload["state_dict"])
    elif backbone_id in REAL_CONFIGS:
        raise BackboneUnavailableError(
            f"pretrained weights for {backbone_id!r} are unavailable here: "
            "pass --checkpoint with a local weight file, or use the 'toy' backbone"
        )
    else:
        raise BackboneUnavailableError(f"unknown backbone id {backbone_id!r}")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_checkpoint(model: Backbone, path: str) -> None:
    torch.save({"config": model.cfg.to_json(), "state_dict": model.state_dict()}, path)
