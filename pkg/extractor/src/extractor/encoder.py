"""CLIP wrapper: batched image/prompt encoding with an optional patch hook.

Local features are the pre-pooling vision-transformer patch tokens (CLS
dropped), passed through the final layernorm and the visual projection so
they live in the same shared space as the global features and text
prototypes. That hook point is the whole story of `encode_images`; the
extract job stamps it into the output manifest.
"""

from __future__ import annotations

import numpy as np
import torch
from transformers import CLIPImageProcessor, CLIPModel, CLIPTokenizer

DEFAULT_MODEL = "openai/clip-vit-base-patch16"
LOCALS_HOOK = "projected post-layernorm patch tokens, CLS dropped"


class VisionTextEncoder:
    """Frozen CLIP encoders behind a numpy-in, numpy-out interface."""

    def __init__(self, model_id: str = DEFAULT_MODEL, batch_size: int = 8):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.model_id = model_id
        self.batch_size = batch_size
        self.model = CLIPModel.from_pretrained(model_id).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(model_id)
        self.image_processor = CLIPImageProcessor.from_pretrained(model_id)

    @property
    def embed_dim(self) -> int:
        return int(self.model.config.projection_dim)

    @property
    def patch_count(self) -> int:
        vc = self.model.config.vision_config
        return (vc.image_size // vc.patch_size) ** 2

    @torch.no_grad()
    def encode_images(self, images: list, with_patches: bool = False
                      ) -> tuple[np.ndarray, np.ndarray | None]:
        """(n, d) global features and, optionally, (n, p, d) patch features."""
        if not images:
            raise ValueError("no images to encode")
        g_chunks, p_chunks = [], []
        for start in range(0, len(images), self.batch_size):
            batch = images[start:start + self.batch_size]
            px = self.image_processor(images=batch, return_tensors="pt")["pixel_values"]
            out = self.model.vision_model(pixel_values=px)
            g_chunks.append(self.model.visual_projection(out.pooler_output))
            if with_patches:
                tokens = out.last_hidden_state[:, 1:, :]
                tokens = self.model.vision_model.post_layernorm(tokens)
                p_chunks.append(self.model.visual_projection(tokens))
        g = torch.cat(g_chunks).float().numpy()
        p = torch.cat(p_chunks).float().numpy() if with_patches else None
        return g, p

    @torch.no_grad()
    def encode_prompts(self, prompts: list[str]) -> np.ndarray:
        """(n, d) projected text features, one row per prompt."""
        if not prompts:
            raise ValueError("no prompts to encode")
        enc = self.tokenizer(prompts, padding=True, return_tensors="pt")
        out = self.model.text_model(input_ids=enc["input_ids"],
                                    attention_mask=enc["attention_mask"])
        return self.model.text_projection(out.pooler_output).float().numpy()
