"""Binary feature/embedding file formats, split files, and the synthetic
compositional dataset generator.

Feature files (`.cpff`) and text-embedding files (`.cpft`) are little-endian
with float32 payloads; the engine widens to float64 on load. Split files are
plain text with one `[section]` per vocabulary or pair list.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .model import CompositionSpace, FeatureBundle, TextEmbeddings

FEATURE_MAGIC = b"CPFF"
TEXT_MAGIC = b"CPFT"
FORMAT_VERSION = 1

# magic, version, D, T, B, d, M, N, reserved, count -> 44 bytes
_FEATURE_HEADER = struct.Struct("<4s8IQ")
_TEXT_HEADER = struct.Struct("<4s4I")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

SPLIT_SECTIONS = (
    "attributes",
    "objects",
    "train_seen",
    "val_seen",
    "val_unseen",
    "test_seen",
    "test_unseen",
)


@dataclass
class FeatureFileHeader:
    D: int
    T: int
    B: int
    d: int
    M: int
    N: int
    count: int
    version: int = FORMAT_VERSION

    def validate(self) -> "FeatureFileHeader":
        for name in ("D", "T", "B", "d", "M", "N"):
            if getattr(self, name) < 1:
                raise DataError(f"feature header dimension {name} must be >= 1")
        return self


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


def write_features(path: str | Path, bundles: Sequence[FeatureBundle], header: FeatureFileHeader) -> None:
    """Write bundles under the given header; shapes and labels are checked."""
    header.validate()
    if header.count != len(bundles):
        raise DataError(f"header count {header.count} != {len(bundles)} bundles")
    parts = [
        _FEATURE_HEADER.pack(
            FEATURE_MAGIC, header.version, header.D, header.T, header.B,
            header.d, header.M, header.N, 0, header.count,
        )
    ]
    for b in bundles:
        b.validate()
        if b.deep_class.shape[0] != header.D or b.deep_patches.shape != (header.T, header.D):
            raise DataError(f"bundle {b.image_id!r} does not conform to header dims")
        if len(b.shallow_blocks) != header.B:
            raise DataError(f"bundle {b.image_id!r} has {len(b.shallow_blocks)} blocks, header says {header.B}")
        if not 0 <= b.attr_label < header.M or not 0 <= b.obj_label < header.N:
            raise DataError(f"bundle {b.image_id!r} labels out of range for header vocab sizes")
        ident = b.image_id.encode("utf-8")
        if len(ident) > 0xFFFF:
            raise DataError(f"image id too long: {b.image_id!r}")
        parts.append(_U16.pack(len(ident)))
        parts.append(ident)
        parts.append(_U32.pack(b.attr_label))
        parts.append(_U32.pack(b.obj_label))
        parts.append(b.deep_class.astype("<f4").tobytes())
        parts.append(b.deep_patches.astype("<f4").tobytes())
        for cls, patches in zip(b.shallow_class, b.shallow_blocks):
            parts.append(cls.astype("<f4").tobytes())
            parts.append(patches.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    """Byte cursor that reports the offset of any truncated read."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def f32(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def read_features(path: str | Path) -> tuple[list[FeatureBundle], FeatureFileHeader]:
    """Read a `.cpff` file back into float64 bundles; round-trips f32 exactly."""
    r = _Reader(Path(path).read_bytes())
    raw = r.take(_FEATURE_HEADER.size, "header")
    magic, version, D, T, B, d, M, N, _reserved, count = _FEATURE_HEADER.unpack(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    header = FeatureFileHeader(D=D, T=T, B=B, d=d, M=M, N=N, count=count, version=version)
    for name in ("D", "T", "B", "d", "M", "N"):
        if getattr(header, name) < 1:
            raise FormatError(f"header dimension {name} must be >= 1", offset=8)
    bundles = []
    for k in range(count):
        (id_len,) = _U16.unpack(r.take(2, f"record {k} id length"))
        ident = r.take(id_len, f"record {k} id").decode("utf-8")
        (attr,) = _U32.unpack(r.take(4, f"record {k} attribute label"))
        (obj,) = _U32.unpack(r.take(4, f"record {k} object label"))
        if attr >= M or obj >= N:
            raise FormatError(
                f"record {k} labels ({attr}, {obj}) out of range for M={M}, N={N}", offset=r.pos - 8
            )
        deep_class = r.f32(D, f"record {k} class token")
        deep_patches = r.f32(T * D, f"record {k} patch tokens").reshape(T, D)
        shallow_class, shallow_blocks = [], []
        for b in range(B):
            shallow_class.append(r.f32(D, f"record {k} block {b} class token"))
            shallow_blocks.append(r.f32(T * D, f"record {k} block {b} patches").reshape(T, D))
        bundles.append(
            FeatureBundle(
                image_id=ident,
                deep_class=deep_class,
                deep_patches=deep_patches,
                shallow_blocks=shallow_blocks,
                shallow_class=shallow_class,
                attr_label=attr,
                obj_label=obj,
            ).validate()
        )
    if r.pos != len(r.blob):
        raise FormatError(f"{len(r.blob) - r.pos} trailing bytes after {count} records", offset=r.pos)
    return bundles, header


# ---------------------------------------------------------------------------
# Text embedding files
# ---------------------------------------------------------------------------


def write_text_embeddings(path: str | Path, text: TextEmbeddings) -> None:
    text.validate()
    parts = [_TEXT_HEADER.pack(TEXT_MAGIC, FORMAT_VERSION, text.dim, text.m, text.n)]
    for names, vecs in ((text.attr_names, text.attr_vecs), (text.obj_names, text.obj_vecs)):
        for name, vec in zip(names, vecs):
            raw = name.encode("utf-8")
            parts.append(_U16.pack(len(raw)))
            parts.append(raw)
            parts.append(vec.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_text_embeddings(path: str | Path) -> TextEmbeddings:
    """Load a `.cpft` table; row order defines the label indices."""
    r = _Reader(Path(path).read_bytes())
    magic, version, dim, m, n = _TEXT_HEADER.unpack(r.take(_TEXT_HEADER.size, "header"))
    if magic != TEXT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TEXT_MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dim < 1 or m < 1 or n < 1:
        raise DataError(f"embedding header dims must be >= 1, got d={dim}, M={m}, N={n}")

    def rows(count: int, what: str) -> tuple[list[str], np.ndarray]:
        names, vecs = [], np.empty((count, dim))
        for k in range(count):
            (name_len,) = _U16.unpack(r.take(2, f"{what} {k} name length"))
            names.append(r.take(name_len, f"{what} {k} name").decode("utf-8"))
            vecs[k] = r.f32(dim, f"{what} {k} vector")
        return names, vecs

    attr_names, attr_vecs = rows(m, "attribute")
    obj_names, obj_vecs = rows(n, "object")
    if r.pos != len(r.blob):
        raise FormatError(f"{len(r.blob) - r.pos} trailing bytes", offset=r.pos)
    return TextEmbeddings(attr_names, obj_names, attr_vecs, obj_vecs, frozen=True).validate()


def load_word_table(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    """GloVe-style text table: `word x1 ... xd` per line."""
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            word, vec = parts[0], np.array([float(x) for x in parts[1:]])
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise DataError(f"word table line {lineno}: expected {dim} floats, got {vec.shape[0]}")
            if word in table:
                raise DataError(f"word table line {lineno}: duplicate word {word!r}")
            table[word] = vec
    if dim is None:
        raise DataError(f"word table {path} is empty")
    return table, dim


def _name_words(name: str) -> list[str]:
    # Class names compose from words split on common separators.
    out = name.lower()
    for sep in (".", "_", "-"):
        out = out.replace(sep, " ")
    return out.split()


def embed_name(name: str, table: dict[str, np.ndarray], dim: int) -> np.ndarray:
    """Single words map verbatim; multi-word names take the word-vector mean."""
    words = _name_words(name)
    if not words:
        raise DataError(f"class name {name!r} has no words")
    vecs = []
    for w in words:
        if w not in table:
            raise DataError(f"word {w!r} of class {name!r} is missing from the word table")
        vecs.append(table[w])
    return np.mean(vecs, axis=0) if len(vecs) > 1 else vecs[0].copy()


def build_text_embeddings(
    table: dict[str, np.ndarray], dim: int, attributes: Sequence[str], objects: Sequence[str]
) -> TextEmbeddings:
    """Vocabulary embedding tables from a word-vector table."""
    attr_vecs = np.stack([embed_name(a, table, dim) for a in attributes])
    obj_vecs = np.stack([embed_name(o, table, dim) for o in objects])
    return TextEmbeddings(list(attributes), list(objects), attr_vecs, obj_vecs, frozen=True).validate()


# ---------------------------------------------------------------------------
# Split files
# ---------------------------------------------------------------------------


def write_splits(path: str | Path, space: CompositionSpace) -> None:
    space.validate()
    for name in (*space.attributes, *space.objects):
        if "," in name:
            raise DataError(f"class name {name!r} may not contain a comma")
    lines = ["[attributes]", *space.attributes, "", "[objects]", *space.objects]
    for section, pairs in (
        ("train_seen", space.seen_train),
        ("val_seen", space.val_seen),
        ("val_unseen", space.val_unseen),
        ("test_seen", space.test_seen),
        ("test_unseen", space.test_unseen),
    ):
        lines.append("")
        lines.append(f"[{section}]")
        lines.extend(f"{space.attributes[a]},{space.objects[o]}" for a, o in pairs)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_splits(path: str | Path) -> CompositionSpace:
    """Parse a split file and validate seen/unseen disjointness."""
    sections: dict[str, list[str]] = {s: [] for s in SPLIT_SECTIONS}
    current = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in sections:
                raise DataError(f"{path} line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise DataError(f"{path} line {lineno}: content before any section header")
        sections[current].append(line)
    attributes = sections["attributes"]
    objects = sections["objects"]
    if not attributes or not objects:
        raise DataError(f"{path}: [attributes] and [objects] must be non-empty")
    attr_index = {a: i for i, a in enumerate(attributes)}
    obj_index = {o: j for j, o in enumerate(objects)}
    if len(attr_index) != len(attributes) or len(obj_index) != len(objects):
        raise DataError(f"{path}: duplicate vocabulary names")

    def pairs(section: str) -> list[tuple[int, int]]:
        out = []
        for entry in sections[section]:
            if "," not in entry:
                raise DataError(f"{path} [{section}]: malformed pair {entry!r}")
            a, o = (part.strip() for part in entry.split(",", 1))
            if a not in attr_index:
                raise DataError(f"{path} [{section}]: unknown attribute {a!r}")
            if o not in obj_index:
                raise DataError(f"{path} [{section}]: unknown object {o!r}")
            out.append((attr_index[a], obj_index[o]))
        return out

    return CompositionSpace(
        attributes=attributes,
        objects=objects,
        seen_train=pairs("train_seen"),
        val_seen=pairs("val_seen"),
        val_unseen=pairs("val_unseen"),
        test_seen=pairs("test_seen"),
        test_unseen=pairs("test_unseen"),
    ).validate()


# ---------------------------------------------------------------------------
# Synthetic dataset generator
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Desk-scale compositional dataset with controllable attribute-object
    dependence.

    kappa drives how strongly an attribute's appearance is modulated by the
    object it composes with; sigma gates every stochastic corruption, so
    sigma=0 yields noiseless, clutter-free prototypes. Only a few patch
    slots per image carry the class signal; the rest hold clutter
    (other-attribute prototypes in shallow blocks, generic directions in
    deep blocks), which is what makes query-conditioned pooling matter.
    """

    M: int = 8
    N: int = 6
    D: int = 16
    d: int = 8
    T: int = 6
    B: int = 3
    seen_fraction: float = 0.7
    samples_per_composition: int = 40
    sigma: float = 0.1
    kappa: float = 0.8
    seed: int = 0
    signal_patches: int = 3
    clutter_gain: float = 6.0  # clutter amplitude in units of sigma
    feature_scale: float = 6.0  # token magnitude, mimics backbone norms
    eval_samples: int | None = None  # per-composition val/test count; None = samples//4

    def validate(self) -> "SynthConfig":
        for name in ("M", "N", "D", "d", "T", "B", "samples_per_composition"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.seen_fraction < 1.0:
            raise ConfigError(f"seen_fraction must lie in (0, 1), got {self.seen_fraction}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in [0, 1], got {self.kappa}")
        if not 1 <= self.signal_patches <= self.T:
            raise ConfigError(f"signal_patches must lie in [1, T={self.T}]")
        n_seen = round(self.seen_fraction * self.M * self.N)
        if n_seen < 1 or n_seen >= self.M * self.N:
            raise ConfigError(
                f"seen_fraction {self.seen_fraction} leaves no seen or no unseen compositions"
            )
        if self.M < 2:
            raise ConfigError("need at least 2 attributes for clutter sampling")
        return self

    @property
    def n_eval_samples(self) -> int:
        if self.eval_samples is not None:
            return self.eval_samples
        return max(1, self.samples_per_composition // 4)


@dataclass
class SynthDataset:
    train: list[FeatureBundle]
    val: list[FeatureBundle]
    test: list[FeatureBundle]
    space: CompositionSpace
    text: TextEmbeddings


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _unit_rows(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def synth_generate(cfg: SynthConfig) -> SynthDataset:
    """Deterministic synthetic dataset; same seed gives byte-identical output."""
    cfg.validate()
    M, N, D, T = cfg.M, cfg.N, cfg.D, cfg.T
    proto_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    attr_protos = _unit_rows(proto_rng, (M, D))
    obj_protos = _unit_rows(proto_rng, (N, D))
    pair_dirs = _unit_rows(proto_rng, (M, N, D))  # per-pair context directions
    projection = proto_rng.normal(size=(D, cfg.d)) / np.sqrt(D)

    # (1-kappa) * attribute prototype + kappa * mix(attribute, object prototype);
    # the mix blends the attribute with its object context and a per-pair
    # direction, so attribute appearance shifts with the composed object.
    mix = np.empty((M, N, D))
    for a in range(M):
        for o in range(N):
            mix[a, o] = _unit(attr_protos[a] + obj_protos[o] + pair_dirs[a, o])
    shallow_signal = (1.0 - cfg.kappa) * attr_protos[:, None, :] + cfg.kappa * mix

    split_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    total = M * N
    n_seen = round(cfg.seen_fraction * total)
    seen_flat = sorted(split_rng.choice(total, size=n_seen, replace=False).tolist())
    seen_pairs = [(k // N, k % N) for k in seen_flat]
    unseen_pairs = [(k // N, k % N) for k in range(total) if k not in set(seen_flat)]
    space = CompositionSpace(
        attributes=[f"attr{a:02d}" for a in range(M)],
        objects=[f"obj{o:02d}" for o in range(N)],
        seen_train=seen_pairs,
        val_seen=seen_pairs,
        val_unseen=unseen_pairs,
        test_seen=seen_pairs,
        test_unseen=unseen_pairs,
    ).validate()

    text = TextEmbeddings(
        attr_names=list(space.attributes),
        obj_names=list(space.objects),
        attr_vecs=attr_protos @ projection,
        obj_vecs=obj_protos @ projection,
        frozen=True,
    ).validate()

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    F = cfg.feature_scale
    clutter_amp = cfg.clutter_gain * cfg.sigma
    noise_scale = F * cfg.sigma / np.sqrt(D)

    def make_bundle(a: int, o: int, ident: str) -> FeatureBundle:
        slots = rng.choice(T, size=cfg.signal_patches, replace=False)
        # Deep tokens: object prototype at the signal slots, other-object
        # prototypes as clutter elsewhere (object-confusable background).
        deep_content = np.zeros((T, D))
        deep_content[slots] = obj_protos[o]
        distractor_obj = int(rng.integers(N - 1))
        distractor_obj += distractor_obj >= o
        for t in range(T):
            if t not in slots:
                deep_content[t] = clutter_amp * obj_protos[distractor_obj]
        deep_patches = F * deep_content + noise_scale * rng.normal(size=(T, D))
        deep_class = deep_patches.mean(axis=0) + noise_scale * rng.normal(size=D)
        # Shallow tokens: the kappa-mixed attribute signal at the same slots,
        # other-attribute prototypes as clutter elsewhere; blocks share the
        # spatial content and differ by independent noise.
        shallow_content = np.zeros((T, D))
        shallow_content[slots] = shallow_signal[a, o]
        distractor_attr = int(rng.integers(M - 1))
        distractor_attr += distractor_attr >= a
        for t in range(T):
            if t not in slots:
                shallow_content[t] = clutter_amp * attr_protos[distractor_attr]
        shallow_blocks, shallow_class = [], []
        for _ in range(cfg.B):
            block = F * shallow_content + noise_scale * rng.normal(size=(T, D))
            shallow_blocks.append(block)
            shallow_class.append(block.mean(axis=0) + noise_scale * rng.normal(size=D))
        return FeatureBundle(
            image_id=ident,
            deep_class=deep_class,
            deep_patches=deep_patches,
            shallow_blocks=shallow_blocks,
            shallow_class=shallow_class,
            attr_label=a,
            obj_label=o,
        )

    def make_split(name: str, pairs: Iterable[tuple[int, int]], count: int) -> list[FeatureBundle]:
        out = []
        for a, o in pairs:
            for k in range(count):
                out.append(make_bundle(a, o, f"synth-{name}-a{a:02d}-o{o:02d}-{k:03d}"))
        return out

    all_pairs = sorted(set(seen_pairs) | set(unseen_pairs))
    train = make_split("train", seen_pairs, cfg.samples_per_composition)
    val = make_split("val", all_pairs, cfg.n_eval_samples)
    test = make_split("test", all_pairs, cfg.n_eval_samples)
    return SynthDataset(train=train, val=val, test=test, space=space, text=text)


def synth_header(cfg: SynthConfig, count: int) -> FeatureFileHeader:
    return FeatureFileHeader(D=cfg.D, T=cfg.T, B=cfg.B, d=cfg.d, M=cfg.M, N=cfg.N, count=count)
