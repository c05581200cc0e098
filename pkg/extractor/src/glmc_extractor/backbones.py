"""Vision-language backbones that expose paired global and local features.

Two encoder families are provided, both emitting features in the shared
text space:

- Attention-pooled convolutional trunk ("resnet style"). The pooled global
  feature is softmax(q(mean) . k(x_i) / sqrt(d)) applied to value
  embeddings and then projected to text space. Because the projection is
  linear and the weights sum to one, pooling and projection commute: the
  global feature equals the attention-weighted sum of the per-region
  projected value features. Local features are exactly those projected
  value embeddings, and `pool_weights` carries the attention map so the
  identity can be checked.

- ViT trunk. The global feature is the projected class token; local
  features take the value embeddings of the final transformer block,
  bypass attention, and run through the output projection, final layer
  norm, and text-space projection, with the class-token row dropped.
  `pool_weights` is None: the class-token pooling has no single softmax
  over regions to export.

The `tiny-*` registry entries are small, seed-determined instances of
these architectures meant for pipeline work and tests without checkpoint
downloads; `hf-clip-vit-*` entries adapt pretrained CLIP checkpoints when
the transformers package and weights are available.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision import transforms


@dataclass(frozen=True)
class ImageEncoding:
    global_feature: np.ndarray  # (C,)
    local_features: np.ndarray  # (H*W, C), row-major
    grid: tuple[int, int]
    pool_weights: np.ndarray | None  # (H*W,), resnet-style path only


class ByteTextEncoder(nn.Module):
    """Deterministic toy text encoder: byte embeddings, mean pool, MLP."""

    def __init__(self, width: int, out_width: int):
        super().__init__()
        self.embed = nn.Embedding(256, width)
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.Tanh(), nn.Linear(width, out_width))

    def forward(self, prompts: list[str]) -> torch.Tensor:
        pooled = []
        for prompt in prompts:
            data = prompt.encode("utf-8")
            tokens = torch.tensor(list(data), dtype=torch.long)
            pooled.append(self.embed(tokens).mean(dim=0))
        return self.mlp(torch.stack(pooled))


class AttentionPool(nn.Module):
    """Single-softmax attention pooling over a flattened feature map."""

    def __init__(self, feature_width: int, embed_width: int, out_width: int):
        super().__init__()
        self.q = nn.Linear(feature_width, embed_width)
        self.k = nn.Linear(feature_width, embed_width)
        self.v = nn.Linear(feature_width, embed_width)
        self.proj = nn.Linear(embed_width, out_width)
        self.scale = math.sqrt(embed_width)

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """tokens: (N, HW, C_v) -> (global (N, C), local (N, HW, C), weights (N, HW))."""
        mean_token = tokens.mean(dim=1)
        logits = torch.einsum("nd,npd->np", self.q(mean_token), self.k(tokens)) / self.scale
        weights = logits.softmax(dim=1)
        local = self.proj(self.v(tokens))
        pooled = self.proj(torch.einsum("np,npd->nd", weights, self.v(tokens)))
        return pooled, local, weights


class ConvAttnBackbone(nn.Module):
    """Small convolutional trunk with CLIP-style attention pooling."""

    def __init__(self, name: str, seed: int, input_size=64, trunk_width=32,
                 embed_width=48, out_width=24):
        super().__init__()
        self.name = name
        self.input_size = input_size
        self.feature_width = out_width
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.trunk = nn.Sequential(
                nn.Conv2d(3, trunk_width, kernel_size=7, stride=4, padding=3),
                nn.ReLU(),
                nn.Conv2d(trunk_width, trunk_width, kernel_size=3, stride=2, padding=1),
                nn.ReLU(),
            )
            self.pool = AttentionPool(trunk_width, embed_width, out_width)
            self.text = ByteTextEncoder(trunk_width, out_width)
        self.eval()

    @torch.no_grad()
    def encode_text(self, prompts: list[str]) -> np.ndarray:
        return self.text(prompts).numpy().astype(np.float64)

    @torch.no_grad()
    def encode_images(self, batch: torch.Tensor) -> list[ImageEncoding]:
        features = self.trunk(batch)
        n, _, h, w = features.shape
        tokens = features.flatten(2).transpose(1, 2)  # (N, HW, C_v)
        pooled, local, weights = self.pool(tokens)
        return [
            ImageEncoding(
                global_feature=pooled[i].numpy().astype(np.float64),
                local_features=local[i].numpy().astype(np.float64),
                grid=(h, w),
                pool_weights=weights[i].numpy().astype(np.float64),
            )
            for i in range(n)
        ]

    def meta(self) -> dict[str, str]:
        return {"backbone": self.name, "pooling": "attention", "input_size": str(self.input_size)}


class ViTBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, width * 2), nn.GELU(), nn.Linear(width * 2, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = self.ln_1(x)
        attn_out, _ = self.attn(u, u, u, need_weights=False)
        x = x + attn_out
        return x + self.mlp(self.ln_2(x))

    def value_projection(self, x: torch.Tensor) -> torch.Tensor:
        """Value embeddings of this block's attention, through its output
        projection, bypassing the attention weighting and residuals."""
        u = self.ln_1(x)
        width = u.shape[-1]
        w_v = self.attn.in_proj_weight[2 * width :]
        b_v = self.attn.in_proj_bias[2 * width :]
        return self.attn.out_proj(F.linear(u, w_v, b_v))


class ViTBackbone(nn.Module):
    """Small ViT with a class token; local features via final-block values."""

    def __init__(self, name: str, seed: int, input_size=32, patch=8, width=32,
                 heads=4, depth=2, out_width=24):
        super().__init__()
        self.name = name
        self.input_size = input_size
        self.feature_width = out_width
        side = input_size // patch
        self.side = side
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.patch_embed = nn.Conv2d(3, width, kernel_size=patch, stride=patch)
            self.cls_token = nn.Parameter(torch.randn(1, 1, width) * 0.02)
            self.pos_embed = nn.Parameter(torch.randn(1, side * side + 1, width) * 0.02)
            self.blocks = nn.ModuleList(ViTBlock(width, heads) for _ in range(depth))
            self.ln_post = nn.LayerNorm(width)
            self.proj = nn.Linear(width, out_width, bias=False)
            self.text = ByteTextEncoder(width, out_width)
        self.eval()

    @torch.no_grad()
    def encode_text(self, prompts: list[str]) -> np.ndarray:
        return self.text(prompts).numpy().astype(np.float64)

    @torch.no_grad()
    def encode_images(self, batch: torch.Tensor) -> list[ImageEncoding]:
        n = batch.shape[0]
        tokens = self.patch_embed(batch).flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls_token.expand(n, -1, -1), tokens], dim=1) + self.pos_embed
        for block in self.blocks[:-1]:
            tokens = block(tokens)
        final_input = tokens
        tokens = self.blocks[-1](tokens)
        global_feature = self.proj(self.ln_post(tokens[:, 0]))
        local = self.proj(self.ln_post(self.blocks[-1].value_projection(final_input)))[:, 1:]
        return [
            ImageEncoding(
                global_feature=global_feature[i].numpy().astype(np.float64),
                local_features=local[i].numpy().astype(np.float64),
                grid=(self.side, self.side),
                pool_weights=None,
            )
            for i in range(n)
        ]

    def meta(self) -> dict[str, str]:
        return {
            "backbone": self.name,
            "pooling": "class_token",
            "local_recipe": "final_block_value_projection_ln_post",
            "input_size": str(self.input_size),
        }


def _preprocess(input_size: int) -> transforms.Compose:
    return transforms.Compose([
        transforms.Resize(input_size, interpolation=transforms.InterpolationMode.BICUBIC),
        transforms.CenterCrop(input_size),
        transforms.ToTensor(),
        transforms.Normalize(mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)),
    ])


def preprocessor(backbone) -> transforms.Compose:
    custom = getattr(backbone, "preprocess", None)
    return custom if custom is not None else _preprocess(backbone.input_size)


def _stable_seed(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def load_backbone(name: str):
    """Instantiate a registry backbone; raises ValueError for unknown names."""
    if name == "tiny-resnet":
        return ConvAttnBackbone(name, seed=_stable_seed(name))
    if name == "tiny-vit":
        return ViTBackbone(name, seed=_stable_seed(name))
    if name.startswith("hf-clip"):
        from .hf_clip import HFClipViT

        return HFClipViT(name)
    raise ValueError(
        f"unknown backbone '{name}' (available: tiny-resnet, tiny-vit, hf-clip-vit-base-patch16)"
    )
