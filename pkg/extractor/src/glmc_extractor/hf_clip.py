"""Adapter for pretrained CLIP ViT checkpoints via the transformers package.

Loads lazily; importing this module does not require transformers. Global
features use the checkpoint's standard image-feature path. Local features
reuse the final encoder block's value embeddings: layer-norm the block
input, apply the value and output projections, then the post layer norm
and the visual projection, dropping the class token. The checkpoint's own
processor supplies preprocessing.
"""

from __future__ import annotations

import numpy as np
import torch

from .backbones import ImageEncoding

_CHECKPOINTS = {
    "hf-clip-vit-base-patch16": "openai/clip-vit-base-patch16",
    "hf-clip-vit-base-patch32": "openai/clip-vit-base-patch32",
}


class HFClipViT:
    def __init__(self, name: str):
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise RuntimeError("the transformers package is required for hf-clip backbones") from exc
        checkpoint = _CHECKPOINTS.get(name)
        if checkpoint is None:
            raise ValueError(f"unknown hf-clip backbone '{name}'")
        self.name = name
        self.checkpoint = checkpoint
        self.model = CLIPModel.from_pretrained(checkpoint).eval()
        self.processor = CLIPProcessor.from_pretrained(checkpoint)
        vision = self.model.config.vision_config
        self.side = vision.image_size // vision.patch_size
        self.input_size = vision.image_size
        self.feature_width = self.model.config.projection_dim

    def preprocess(self, image):
        return self.processor(images=image, return_tensors="pt")["pixel_values"][0]

    @torch.no_grad()
    def encode_text(self, prompts: list[str]) -> np.ndarray:
        tokens = self.processor(text=prompts, return_tensors="pt", padding=True)
        return self.model.get_text_features(**tokens).numpy().astype(np.float64)

    @torch.no_grad()
    def encode_images(self, batch: torch.Tensor) -> list[ImageEncoding]:
        vision = self.model.vision_model
        last = vision.encoder.layers[-1]
        captured: dict[str, torch.Tensor] = {}

        def grab(_module, args, _kwargs):
            captured["hidden"] = args[0]

        handle = last.register_forward_pre_hook(grab, with_kwargs=True)
        try:
            global_features = self.model.get_image_features(pixel_values=batch)
        finally:
            handle.remove()
        hidden = last.layer_norm1(captured["hidden"])
        values = last.self_attn.out_proj(last.self_attn.v_proj(hidden))
        local = self.model.visual_projection(vision.post_layernorm(values))[:, 1:]
        return [
            ImageEncoding(
                global_feature=global_features[i].numpy().astype(np.float64),
                local_features=local[i].numpy().astype(np.float64),
                grid=(self.side, self.side),
                pool_weights=None,
            )
            for i in range(batch.shape[0])
        ]

    def meta(self) -> dict[str, str]:
        return {
            "backbone": self.name,
            "checkpoint": self.checkpoint,
            "pooling": "class_token",
            "local_recipe": "final_block_value_projection_ln_post",
            "input_size": str(self.input_size),
        }
