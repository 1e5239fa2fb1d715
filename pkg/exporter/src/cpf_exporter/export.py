"""Walk a composition-labelled image folder, run the frozen backbone, and
emit the engine's feature/embedding files.

Dataset layout: one directory per composition named `<attribute>__<object>`
(double underscore separator), holding that composition's images. Label
indices come from the split file's vocabulary order.

Images of seen-train compositions are partitioned 8:1:1 into the
train/val/test files by their sorted position inside the composition
(positions 1 and 2 of every ten go to test and val, so small compositions
still populate the evaluation files), but only when the pair is declared
in the corresponding test_seen/val_seen split; images of unseen
compositions go to the val/test files per their split membership.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from cpf import data_io
from cpf.errors import DataError
from cpf.model import CompositionSpace, FeatureBundle, TextEmbeddings

from .backbones import TokenExtractor
from .spec import ExportSpec

log = logging.getLogger("cpf_exporter")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")
PAIR_SEPARATOR = "__"


@dataclass
class ExportResult:
    counts: dict[str, int]
    skipped: list[str]
    out_dir: Path


def discover_images(root: Path, space: CompositionSpace) -> list[tuple[Path, int, int]]:
    """Sorted (path, attr index, obj index) triples for every labelled image."""
    attr_index = {a: i for i, a in enumerate(space.attributes)}
    obj_index = {o: j for j, o in enumerate(space.objects)}
    found = []
    for comp_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if PAIR_SEPARATOR not in comp_dir.name:
            log.warning("skipping directory %s: no %r separator", comp_dir.name, PAIR_SEPARATOR)
            continue
        attr_name, obj_name = comp_dir.name.split(PAIR_SEPARATOR, 1)
        if attr_name not in attr_index or obj_name not in obj_index:
            raise DataError(
                f"directory {comp_dir.name!r} names a pair outside the split vocabulary"
            )
        a, o = attr_index[attr_name], obj_index[obj_name]
        for img in sorted(comp_dir.iterdir()):
            if img.suffix.lower() in IMAGE_SUFFIXES:
                found.append((img, a, o))
    return found


def _destination(position: int, pair: tuple[int, int], space: CompositionSpace) -> str | None:
    if pair in space.seen_set:
        # eval eligibility follows split membership: a seen composition only
        # feeds the val/test files when its pair is declared there
        slot = position % 10
        if slot == 1 and pair in set(space.test_seen):
            return "test"
        if slot == 2 and pair in set(space.val_seen):
            return "val"
        return "train"
    in_val = pair in set(space.val_unseen)
    in_test = pair in set(space.test_unseen)
    if in_val and in_test:
        return "test" if position % 2 == 0 else "val"
    if in_val:
        return "val"
    if in_test:
        return "test"
    return None


def build_text_embeddings(spec: ExportSpec, space: CompositionSpace) -> TextEmbeddings:
    if spec.backbone == "vitb":
        table, dim = data_io.load_word_table(spec.glove)
        return data_io.build_text_embeddings(table, dim, space.attributes, space.objects)
    # CLIP text towers need downloadable weights; with random backbone
    # weights a seeded deterministic table stands in.
    if spec.weights == "random":
        rng = np.random.default_rng(spec.seed)
        return TextEmbeddings(
            attr_names=list(space.attributes),
            obj_names=list(space.objects),
            attr_vecs=rng.normal(size=(len(space.attributes), spec.text_width)) / np.sqrt(spec.text_width),
            obj_vecs=rng.normal(size=(len(space.objects), spec.text_width)) / np.sqrt(spec.text_width),
        ).validate()
    return _clip_text_embeddings(spec, space)


def _clip_text_embeddings(spec: ExportSpec, space: CompositionSpace) -> TextEmbeddings:
    import torch
    from transformers import CLIPTextModelWithProjection, CLIPTokenizer

    tokenizer = CLIPTokenizer.from_pretrained("openai/clip-vit-large-patch14")
    model = CLIPTextModelWithProjection.from_pretrained("openai/clip-vit-large-patch14")
    model.eval()

    def encode(names: list[str]) -> np.ndarray:
        texts = [n.replace(PAIR_SEPARATOR, " ").replace(".", " ").replace("_", " ") for n in names]
        with torch.no_grad():
            tokens = tokenizer(texts, padding=True, return_tensors="pt")
            out = model(**tokens).text_embeds
        return out.numpy().astype(np.float64)

    return TextEmbeddings(
        attr_names=list(space.attributes),
        obj_names=list(space.objects),
        attr_vecs=encode(space.attributes),
        obj_vecs=encode(space.objects),
    ).validate()


def export(spec: ExportSpec) -> ExportResult:
    """Run the full export; deterministic for a fixed spec (no augmentation)."""
    space = data_io.load_splits(spec.splits)
    text = build_text_embeddings(spec, space)
    if text.dim != spec.text_width:
        raise DataError(
            f"text table width {text.dim} does not match the backbone's {spec.text_width}"
        )
    extractor = TokenExtractor(spec)
    images = discover_images(spec.data_root, space)

    splits: dict[str, list[FeatureBundle]] = {"train": [], "val": [], "test": []}
    skipped: list[str] = []
    position_in_comp: dict[tuple[int, int], int] = {}
    batch: list[tuple[Path, int, int]] = []

    def flush() -> None:
        if not batch:
            return
        loaded, meta = [], []
        for path, a, o in batch:
            try:
                loaded.append(Image.open(path))
                meta.append((path, a, o))
            except (OSError, UnidentifiedImageError):
                log.warning("skipping unreadable image %s", path)
                skipped.append(str(path))
        if not loaded:
            batch.clear()
            return
        tokens = extractor.extract(loaded)
        for img in loaded:
            img.close()
        deep_block = max(tokens[0])
        for (path, a, o), per_block in zip(meta, tokens):
            pair = (a, o)
            position = position_in_comp.get(pair, 0)
            position_in_comp[pair] = position + 1
            dest = _destination(position, pair, space)
            if dest is None:
                continue
            cls, patches = per_block[deep_block]
            shallow_class = [per_block[b][0] for b in spec.blocks]
            shallow_blocks = [per_block[b][1] for b in spec.blocks]
            splits[dest].append(
                FeatureBundle(
                    image_id=str(path.relative_to(spec.data_root)),
                    deep_class=cls,
                    deep_patches=patches,
                    shallow_blocks=shallow_blocks,
                    shallow_class=shallow_class,
                    attr_label=a,
                    obj_label=o,
                ).validate()
            )
        batch.clear()

    for item in images:
        batch.append(item)
        if len(batch) >= spec.batch_size:
            flush()
    flush()

    spec.out_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, bundles in splits.items():
        header = data_io.FeatureFileHeader(
            D=spec.token_width,
            T=spec.patch_tokens,
            B=len(spec.blocks),
            d=spec.text_width,
            M=len(space.attributes),
            N=len(space.objects),
            count=len(bundles),
        )
        data_io.write_features(spec.out_dir / f"{name}.cpff", bundles, header)
        counts[name] = len(bundles)
    data_io.write_text_embeddings(spec.out_dir / "embeddings.cpft", text)
    shutil.copyfile(spec.splits, spec.out_dir / "splits.txt")
    return ExportResult(counts=counts, skipped=skipped, out_dir=spec.out_dir)
