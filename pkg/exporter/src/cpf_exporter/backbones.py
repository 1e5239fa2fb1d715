"""Frozen vision backbones with per-block token capture.

Every backbone yields, per image, the class token and patch tokens of the
final encoder block plus the requested shallow blocks. Block outputs are
taken directly after each encoder layer (before the final LayerNorm), so
deep and shallow tokens get a uniform treatment.
"""

from __future__ import annotations

import numpy as np
import torch
from torchvision import transforms
from torchvision.models import ViT_B_16_Weights, vit_b_16

from .spec import ExportSpec

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class TokenExtractor:
    """Runs a frozen backbone and returns per-block (class, patches) arrays."""

    def __init__(self, spec: ExportSpec):
        self.spec = spec
        torch.manual_seed(spec.seed)
        torch.set_num_threads(1)  # keeps CPU inference deterministic
        if spec.backbone == "vitb":
            self._init_vitb(spec)
        else:
            self._init_clip(spec)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    # -- construction -------------------------------------------------------

    def _init_vitb(self, spec: ExportSpec) -> None:
        weights = ViT_B_16_Weights.IMAGENET1K_V1 if spec.weights == "pretrained" else None
        self.model = vit_b_16(weights=weights)
        self.preprocess = transforms.Compose(
            [
                transforms.Resize(spec.resize, antialias=True),
                transforms.CenterCrop(spec.resize),
                transforms.ToTensor(),
                transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
            ]
        )
        self._layers = list(self.model.encoder.layers)

    def _init_clip(self, spec: ExportSpec) -> None:
        from transformers import CLIPVisionConfig, CLIPVisionModel

        if spec.weights == "pretrained":
            self.model = CLIPVisionModel.from_pretrained("openai/clip-vit-large-patch14")
        else:
            config = CLIPVisionConfig(
                hidden_size=1024,
                num_hidden_layers=24,
                num_attention_heads=16,
                intermediate_size=4096,
                image_size=spec.resize,
                patch_size=14,
            )
            self.model = CLIPVisionModel(config)
        self.preprocess = transforms.Compose(
            [
                transforms.Resize(spec.resize, antialias=True),
                transforms.CenterCrop(spec.resize),
                transforms.ToTensor(),
                transforms.Normalize(CLIP_MEAN, CLIP_STD),
            ]
        )

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def extract(self, images: list) -> list[dict[int, tuple[np.ndarray, np.ndarray]]]:
        """Per image: block index -> (class token (D,), patch tokens (T, D)).

        The final block is always included alongside the requested shallow
        blocks. Token shapes are validated against the backbone contract.
        """
        batch = torch.stack([self.preprocess(img.convert("RGB")) for img in images])
        wanted = sorted({*self.spec.blocks, self._depth})
        if self.spec.backbone == "vitb":
            tokens = self._vitb_tokens(batch, wanted)
        else:
            tokens = self._clip_tokens(batch, wanted)
        out = []
        for i in range(batch.shape[0]):
            per_block = {}
            for b, tok in tokens.items():
                cls = tok[i, 0].numpy().astype(np.float64)
                patches = tok[i, 1:].numpy().astype(np.float64)
                if patches.shape != (self.spec.patch_tokens, self.spec.token_width):
                    raise RuntimeError(
                        f"backbone produced {patches.shape}, expected "
                        f"({self.spec.patch_tokens}, {self.spec.token_width})"
                    )
                per_block[b] = (cls, patches)
            out.append(per_block)
        return out

    @property
    def _depth(self) -> int:
        return 12 if self.spec.backbone == "vitb" else 24

    def _vitb_tokens(self, batch: torch.Tensor, wanted: list[int]) -> dict[int, torch.Tensor]:
        captured: dict[int, torch.Tensor] = {}
        hooks = []
        for b in wanted:
            layer = self._layers[b - 1]

            def keep(_module, _inp, output, _b=b):
                captured[_b] = output.detach()

            hooks.append(layer.register_forward_hook(keep))
        try:
            self.model(batch)
        finally:
            for h in hooks:
                h.remove()
        return captured

    def _clip_tokens(self, batch: torch.Tensor, wanted: list[int]) -> dict[int, torch.Tensor]:
        result = self.model(pixel_values=batch, output_hidden_states=True)
        # hidden_states[0] is the embedding output; state k is block k's output
        return {b: result.hidden_states[b].detach() for b in wanted}
