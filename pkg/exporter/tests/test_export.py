"""Exporter tests: the toy-folder round trip through the engine's reader,
deterministic checksums across reruns, and spec validation."""

import hashlib
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cpf import data_io
from cpf.errors import ConfigError

from cpf_exporter.cli import main
from cpf_exporter.export import discover_images, export
from cpf_exporter.spec import ExportSpec

ATTRS = ["red", "striped"]
OBJS = ["shirt", "boots.ankle"]


def write_splits(path: Path) -> None:
    path.write_text(
        "[attributes]\nred\nstriped\n"
        "[objects]\nshirt\nboots.ankle\n"
        "[train_seen]\nred,shirt\nstriped,shirt\nred,boots.ankle\n"
        "[val_seen]\nred,shirt\n"
        "[val_unseen]\nstriped,boots.ankle\n"
        "[test_seen]\nred,shirt\nstriped,shirt\n"
        "[test_unseen]\nstriped,boots.ankle\n",
        encoding="utf-8",
    )


def write_glove(path: Path, dim: int = 300) -> None:
    rng = np.random.default_rng(5)
    lines = []
    for word in ("red", "striped", "shirt", "boots", "ankle"):
        vec = " ".join(f"{x:.6f}" for x in rng.normal(size=dim))
        lines.append(f"{word} {vec}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_images(root: Path) -> int:
    """A 10-image toy folder across three seen and one unseen composition."""
    rng = np.random.default_rng(11)
    layout = {
        "red__shirt": 4,
        "striped__shirt": 3,
        "red__boots.ankle": 2,
        "striped__boots.ankle": 1,
    }
    total = 0
    for comp, count in layout.items():
        comp_dir = root / comp
        comp_dir.mkdir(parents=True)
        for k in range(count):
            arr = rng.integers(0, 255, size=(40, 56, 3), dtype=np.uint8)
            Image.fromarray(arr).save(comp_dir / f"img{k}.png")
            total += 1
    return total


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    data = root / "images"
    data.mkdir()
    n = write_images(data)
    splits = root / "splits.txt"
    write_splits(splits)
    glove = root / "glove.txt"
    write_glove(glove)
    return {"root": root, "data": data, "splits": splits, "glove": glove, "n_images": n}


def vitb_spec(toy, out, **kw):
    base = dict(
        backbone="vitb",
        data_root=toy["data"],
        splits=toy["splits"],
        out_dir=out,
        weights="random",
        seed=0,
        glove=toy["glove"],
    )
    base.update(kw)
    return ExportSpec(**base)


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSpecValidation:
    def test_default_blocks(self, toy, tmp_path):
        assert vitb_spec(toy, tmp_path).blocks == (3, 6, 9)

    def test_blocks_must_increase(self, toy, tmp_path):
        with pytest.raises(ConfigError, match="strictly increasing"):
            vitb_spec(toy, tmp_path, blocks=(3, 3, 9))

    def test_blocks_within_depth(self, toy, tmp_path):
        with pytest.raises(ConfigError, match="depth"):
            vitb_spec(toy, tmp_path, blocks=(3, 6, 13))

    def test_vitb_requires_glove(self, toy, tmp_path):
        with pytest.raises(ConfigError, match="glove"):
            vitb_spec(toy, tmp_path, glove=None)

    def test_unknown_backbone(self, toy, tmp_path):
        with pytest.raises(ConfigError, match="backbone"):
            ExportSpec(
                backbone="resnet",
                data_root=toy["data"],
                splits=toy["splits"],
                out_dir=tmp_path,
            )


class TestDiscovery:
    def test_labels_follow_vocabulary_order(self, toy):
        space = data_io.load_splits(toy["splits"])
        images = discover_images(toy["data"], space)
        assert len(images) == toy["n_images"]
        by_pair = {}
        for path, a, o in images:
            by_pair.setdefault((a, o), []).append(path)
        assert len(by_pair[(0, 0)]) == 4  # red__shirt
        assert len(by_pair[(1, 1)]) == 1  # striped__boots.ankle


@pytest.fixture(scope="module")
def exported(toy, tmp_path_factory):
    out = tmp_path_factory.mktemp("export")
    result = export(vitb_spec(toy, out))
    return out, result


class TestVitbExport:
    def test_round_trip_with_declared_shapes(self, exported, toy):
        out, result = exported
        total = 0
        for name in ("train", "val", "test"):
            bundles, header = data_io.read_features(out / f"{name}.cpff")
            assert (header.D, header.T, header.B) == (768, 196, 3)
            assert (header.d, header.M, header.N) == (300, 2, 2)
            assert header.count == len(bundles) == result.counts[name]
            total += len(bundles)
        assert total == toy["n_images"]
        assert result.skipped == []

    def test_partition_respects_split_membership(self, exported, toy):
        out, _ = exported
        space = data_io.load_splits(toy["splits"])
        train, _ = data_io.read_features(out / "train.cpff")
        val, _ = data_io.read_features(out / "val.cpff")
        test, _ = data_io.read_features(out / "test.cpff")
        assert train, "seen compositions must produce training images"
        for b in train:
            assert (b.attr_label, b.obj_label) in space.seen_set
        assert any((b.attr_label, b.obj_label) not in space.seen_set for b in test)
        # every eval image's pair sits inside its setting's candidate list,
        # so the engine accepts the files as-is
        cw = set(space.cw_candidates)
        for b in test:
            assert (b.attr_label, b.obj_label) in cw
        val_ok = set(space.val_seen) | set(space.val_unseen)
        for b in val:
            assert (b.attr_label, b.obj_label) in val_ok

    def test_embeddings_compose_from_words(self, exported, toy):
        out, _ = exported
        text = data_io.load_text_embeddings(out / "embeddings.cpft")
        table, dim = data_io.load_word_table(toy["glove"])
        expected = (table["boots"] + table["ankle"]) / 2.0
        np.testing.assert_array_equal(
            text.obj_vecs[1], expected.astype("<f4").astype(np.float64)
        )

    def test_rerun_checksums_identical(self, exported, toy, tmp_path):
        out_a, _ = exported
        out_b = tmp_path / "again"
        export(vitb_spec(toy, out_b))
        for name in ("train.cpff", "val.cpff", "test.cpff", "embeddings.cpft"):
            assert digest(out_a / name) == digest(out_b / name), name

    def test_unreadable_image_skipped(self, toy, tmp_path):
        data = tmp_path / "imgs"
        (data / "red__shirt").mkdir(parents=True)
        rng = np.random.default_rng(0)
        Image.fromarray(rng.integers(0, 255, (32, 32, 3), dtype=np.uint8)).save(
            data / "red__shirt" / "ok.png"
        )
        (data / "red__shirt" / "broken.png").write_bytes(b"not an image")
        result = export(vitb_spec(toy, tmp_path / "out", data_root=data))
        assert len(result.skipped) == 1
        assert sum(result.counts.values()) == 1

    def test_zero_images_yield_valid_empty_files(self, toy, tmp_path):
        data = tmp_path / "empty"
        data.mkdir()
        out = tmp_path / "out"
        export(vitb_spec(toy, out, data_root=data))
        bundles, header = data_io.read_features(out / "train.cpff")
        assert bundles == [] and header.count == 0


class TestCli:
    def test_end_to_end(self, toy, tmp_path, capsys):
        code = main([
            "--backbone", "vitb", "--blocks", "3,6,9",
            "--data", str(toy["data"]), "--splits", str(toy["splits"]),
            "--out", str(tmp_path / "out"), "--glove", str(toy["glove"]),
            "--weights", "random", "--seed", "0",
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "wrote train.cpff" in out
        bundles, header = data_io.read_features(tmp_path / "out" / "test.cpff")
        assert header.D == 768

    def test_bad_spec_exits_3(self, toy, tmp_path, capsys):
        code = main([
            "--backbone", "vitb", "--blocks", "9,6,3",
            "--data", str(toy["data"]), "--splits", str(toy["splits"]),
            "--out", str(tmp_path), "--glove", str(toy["glove"]),
        ])
        assert code == 3
        assert "error:" in capsys.readouterr().err


class TestClipShapes:
    def test_clip_random_export_shapes(self, toy, tmp_path):
        # CLIP path with seeded random weights: D=1024, T=256, blocks 6,12,18
        out = tmp_path / "clip"
        spec = ExportSpec(
            backbone="clip",
            data_root=toy["data"],
            splits=toy["splits"],
            out_dir=out,
            weights="random",
            seed=0,
            batch_size=4,
        )
        assert spec.blocks == (6, 12, 18)
        export(spec)
        bundles, header = data_io.read_features(out / "train.cpff")
        assert (header.D, header.T, header.B, header.d) == (1024, 256, 3, 1024)
        assert bundles
