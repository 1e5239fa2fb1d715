"""Export settings and validation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from cpf.errors import ConfigError

BACKBONES = {
    # name: (token width D, patch tokens T, encoder depth, default shallow blocks, text width d)
    "vitb": (768, 196, 12, (3, 6, 9), 300),
    "clip": (1024, 256, 24, (6, 12, 18), 1024),
}


@dataclass
class ExportSpec:
    backbone: str
    data_root: Path
    splits: Path
    out_dir: Path
    blocks: tuple[int, ...] | None = None  # 1-indexed encoder blocks
    resize: int = 224  # short-side resize before the center crop
    weights: str = "pretrained"  # or "random" (seeded, for offline runs)
    seed: int = 0
    glove: Path | None = None  # word-vector table for the vitb text path
    batch_size: int = 8

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {sorted(BACKBONES)}")
        d_width, t, depth, default_blocks, text_dim = BACKBONES[self.backbone]
        if self.blocks is None:
            self.blocks = default_blocks
        self.blocks = tuple(self.blocks)
        if any(b1 >= b2 for b1, b2 in zip(self.blocks, self.blocks[1:])):
            raise ConfigError(f"block indices must be strictly increasing, got {self.blocks}")
        if not all(1 <= b <= depth for b in self.blocks):
            raise ConfigError(f"block indices {self.blocks} outside backbone depth {depth}")
        if self.weights not in ("pretrained", "random"):
            raise ConfigError(f"weights must be 'pretrained' or 'random', got {self.weights!r}")
        if self.resize < 32:
            raise ConfigError(f"resize must be at least 32, got {self.resize}")
        if self.backbone == "vitb" and self.glove is None:
            raise ConfigError("the vitb path needs --glove for its word-embedding table")
        if self.backbone == "clip" and self.glove is not None:
            raise ConfigError("the clip path uses its own text space; drop --glove")

    @property
    def token_width(self) -> int:
        return BACKBONES[self.backbone][0]

    @property
    def patch_tokens(self) -> int:
        return BACKBONES[self.backbone][1]

    @property
    def text_width(self) -> int:
        return BACKBONES[self.backbone][4]
