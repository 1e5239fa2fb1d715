"""Typed embeddings and the conditional object/attribute decomposition head.

The head consumes precomputed backbone features: a deep class token, deep
patch tokens, and raw per-block shallow patch tokens. Object features are
text-enhanced (a textual descriptor pooled from the object vocabulary keys
deep-patch attention), then the object feature itself keys attention over
the fused shallow patches to produce the attribute feature. All three
classification heads share one temperature, and the joint loss is
L_com + alpha1 * L_att + alpha2 * L_obj.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError
from .tensor import (
    Tensor,
    add,
    concat_lastdim,
    cross_entropy,
    matmul,
    scale,
    scaled_dot_attention,
    select_rows,
    softmax_lastdim,
)

VARIANTS = ("full", "no_teo", "no_teo_oga")

DEFAULT_TAU = 0.05
DEFAULT_ALPHA1 = 0.6
DEFAULT_ALPHA2 = 0.4


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class FeatureBundle:
    """One image's backbone embeddings plus its composition label.

    shallow_class tokens are carried for format fidelity but unused by the
    head (attribute pooling consumes only the fused shallow patches).
    """

    image_id: str
    deep_class: np.ndarray  # (D,)
    deep_patches: np.ndarray  # (T, D)
    shallow_blocks: list[np.ndarray]  # B x (T, D), raw pre-fusion tokens
    shallow_class: list[np.ndarray]  # B x (D,)
    attr_label: int
    obj_label: int

    def validate(self) -> "FeatureBundle":
        self.deep_class = np.asarray(self.deep_class, dtype=np.float64).reshape(-1)
        self.deep_patches = np.ascontiguousarray(self.deep_patches, dtype=np.float64)
        self.shallow_blocks = [
            np.ascontiguousarray(b, dtype=np.float64) for b in self.shallow_blocks
        ]
        self.shallow_class = [
            np.asarray(c, dtype=np.float64).reshape(-1) for c in self.shallow_class
        ]
        d_dim = self.deep_class.shape[0]
        t, d2 = self.deep_patches.shape
        if d2 != d_dim:
            raise DimensionError(
                f"bundle {self.image_id}: patch width {d2} != class token width {d_dim}"
            )
        if not self.shallow_blocks:
            raise DimensionError(f"bundle {self.image_id}: needs at least one shallow block")
        for b in self.shallow_blocks:
            if b.shape != (t, d_dim):
                raise DimensionError(
                    f"bundle {self.image_id}: shallow block shape {b.shape} != {(t, d_dim)}"
                )
        if len(self.shallow_class) != len(self.shallow_blocks):
            raise DimensionError(
                f"bundle {self.image_id}: {len(self.shallow_class)} shallow class tokens "
                f"for {len(self.shallow_blocks)} blocks"
            )
        return self

    def select_blocks(self, indices: Sequence[int]) -> "FeatureBundle":
        """A view of this bundle keeping only the given shallow blocks."""
        b = len(self.shallow_blocks)
        for i in indices:
            if not 0 <= i < b:
                raise DimensionError(f"shallow block index {i} out of range for {b} blocks")
        return FeatureBundle(
            image_id=self.image_id,
            deep_class=self.deep_class,
            deep_patches=self.deep_patches,
            shallow_blocks=[self.shallow_blocks[i] for i in indices],
            shallow_class=[self.shallow_class[i] for i in indices],
            attr_label=self.attr_label,
            obj_label=self.obj_label,
        )


@dataclass
class TextEmbeddings:
    """Frozen attribute (M x d) and object (N x d) embedding tables."""

    attr_names: list[str]
    obj_names: list[str]
    attr_vecs: np.ndarray
    obj_vecs: np.ndarray
    frozen: bool = True

    def validate(self) -> "TextEmbeddings":
        self.attr_vecs = np.ascontiguousarray(self.attr_vecs, dtype=np.float64)
        self.obj_vecs = np.ascontiguousarray(self.obj_vecs, dtype=np.float64)
        if self.attr_vecs.ndim != 2 or self.obj_vecs.ndim != 2:
            raise DimensionError("embedding tables must be 2-D")
        if self.attr_vecs.shape[1] != self.obj_vecs.shape[1]:
            raise DimensionError(
                f"attribute width {self.attr_vecs.shape[1]} != object width {self.obj_vecs.shape[1]}"
            )
        if len(self.attr_names) != self.attr_vecs.shape[0]:
            raise DataError("attribute name count does not match table rows")
        if len(self.obj_names) != self.obj_vecs.shape[0]:
            raise DataError("object name count does not match table rows")
        if len(set(self.attr_names)) != len(self.attr_names):
            raise DataError("duplicate attribute names")
        if len(set(self.obj_names)) != len(self.obj_names):
            raise DataError("duplicate object names")
        if not np.isfinite(self.attr_vecs).all() or not np.isfinite(self.obj_vecs).all():
            raise DataError("embedding tables contain non-finite values")
        return self

    @property
    def m(self) -> int:
        return self.attr_vecs.shape[0]

    @property
    def n(self) -> int:
        return self.obj_vecs.shape[0]

    @property
    def dim(self) -> int:
        return self.attr_vecs.shape[1]

    def tensors(self) -> tuple[Tensor, Tensor]:
        """Constant tensors sharing the tables' storage."""
        return Tensor._wrap(self.attr_vecs), Tensor._wrap(self.obj_vecs)


@dataclass
class CompositionSpace:
    """Attribute/object vocabularies and the seen/unseen pair structure."""

    attributes: list[str]
    objects: list[str]
    seen_train: list[tuple[int, int]]
    val_seen: list[tuple[int, int]] = field(default_factory=list)
    val_unseen: list[tuple[int, int]] = field(default_factory=list)
    test_seen: list[tuple[int, int]] = field(default_factory=list)
    test_unseen: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.seen_set = frozenset(self.seen_train)

    @property
    def m(self) -> int:
        return len(self.attributes)

    @property
    def n(self) -> int:
        return len(self.objects)

    def pair_name(self, pair: tuple[int, int]) -> str:
        return f"({self.attributes[pair[0]]}, {self.objects[pair[1]]})"

    @property
    def cw_candidates(self) -> list[tuple[int, int]]:
        """Closed-world candidates: test pairs, sorted for deterministic order."""
        return sorted(set(self.test_seen) | set(self.test_unseen))

    @property
    def ow_candidates(self) -> list[tuple[int, int]]:
        """Open-world candidates: the full product, row-major."""
        return [(i, j) for i in range(self.m) for j in range(self.n)]

    def validate(self) -> "CompositionSpace":
        if not self.attributes or not self.objects:
            raise DataError("vocabularies must be non-empty")
        if len(set(self.attributes)) != len(self.attributes):
            raise DataError("duplicate attribute names")
        if len(set(self.objects)) != len(self.objects):
            raise DataError("duplicate object names")
        for split in (self.seen_train, self.val_seen, self.val_unseen, self.test_seen, self.test_unseen):
            for a, o in split:
                if not (0 <= a < self.m and 0 <= o < self.n):
                    raise DataError(f"pair ({a}, {o}) out of vocabulary range")
        seen = self.seen_set
        for name, unseen in (("val_unseen", self.val_unseen), ("test_unseen", self.test_unseen)):
            for pair in unseen:
                if pair in seen:
                    raise DataError(f"{name} pair {self.pair_name(pair)} overlaps the seen set")
        for name, s, u in (
            ("val", self.val_seen, self.val_unseen),
            ("test", self.test_seen, self.test_unseen),
        ):
            overlap = set(s) & set(u)
            if overlap:
                pair = sorted(overlap)[0]
                raise DataError(f"{name} seen/unseen overlap at {self.pair_name(pair)}")
        return self


@dataclass
class CpfParams:
    """All trainable tensors of the head, plus shared loss hyperparameters."""

    proj_obj_w: Tensor
    proj_obj_b: Tensor
    proj_attr_w: Tensor
    proj_attr_b: Tensor
    fusion_w: Tensor
    fusion_b: Tensor
    comp_visual_w: Tensor
    comp_visual_b: Tensor
    comp_text_w: Tensor
    comp_text_b: Tensor
    tau: float = DEFAULT_TAU
    alpha1: float = DEFAULT_ALPHA1
    alpha2: float = DEFAULT_ALPHA2

    @classmethod
    def initialize(
        cls,
        visual_dim: int,
        text_dim: int,
        n_blocks: int,
        rng: np.random.Generator,
        comp_dim: int | None = None,
        tau: float = DEFAULT_TAU,
        alpha1: float = DEFAULT_ALPHA1,
        alpha2: float = DEFAULT_ALPHA2,
    ) -> "CpfParams":
        """Fan-in uniform init (+-1/sqrt(fan_in)), zero biases, fixed draw order."""
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        if alpha1 < 0 or alpha2 < 0:
            raise ValueError("loss weights must be nonnegative")
        j = text_dim if comp_dim is None else comp_dim

        def linear(fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
            bound = 1.0 / math.sqrt(fan_in)
            w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
            b = Tensor(np.zeros((1, fan_out)), requires_grad=True)
            return w, b

        po_w, po_b = linear(visual_dim, text_dim)
        pa_w, pa_b = linear(visual_dim, text_dim)
        fu_w, fu_b = linear(n_blocks * visual_dim, visual_dim)
        cv_w, cv_b = linear(2 * visual_dim, j)
        ct_w, ct_b = linear(2 * text_dim, j)
        return cls(po_w, po_b, pa_w, pa_b, fu_w, fu_b, cv_w, cv_b, ct_w, ct_b, tau, alpha1, alpha2)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("proj_obj.w", self.proj_obj_w),
            ("proj_obj.b", self.proj_obj_b),
            ("proj_attr.w", self.proj_attr_w),
            ("proj_attr.b", self.proj_attr_b),
            ("fusion.w", self.fusion_w),
            ("fusion.b", self.fusion_b),
            ("comp_visual.w", self.comp_visual_w),
            ("comp_visual.b", self.comp_visual_b),
            ("comp_text.w", self.comp_text_w),
            ("comp_text.b", self.comp_text_b),
        ]

    def zero_grads(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    @property
    def visual_dim(self) -> int:
        return self.proj_obj_w.data.shape[0]

    @property
    def text_dim(self) -> int:
        return self.proj_obj_w.data.shape[1]

    @property
    def n_blocks(self) -> int:
        return self.fusion_w.data.shape[0] // self.visual_dim

    @property
    def comp_dim(self) -> int:
        return self.comp_text_w.data.shape[1]


# ---------------------------------------------------------------------------
# Forward computations
# ---------------------------------------------------------------------------


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def fuse_shallow(blocks: Sequence[Tensor], params: CpfParams) -> Tensor:
    """Per-token fusion: concat the B blocks along features, one affine map."""
    if len(blocks) != params.n_blocks:
        raise DimensionError(f"fusion expects {params.n_blocks} blocks, got {len(blocks)}")
    return _affine(concat_lastdim(blocks), params.fusion_w, params.fusion_b)


def textual_descriptor(deep_class: Tensor, obj_text: Tensor, params: CpfParams) -> Tensor:
    """Pool the object vocabulary into a 1xd descriptor keyed by the class token."""
    q = _affine(deep_class, params.proj_obj_w, params.proj_obj_b)
    out, _ = scaled_dot_attention(q, obj_text, obj_text, math.sqrt(params.text_dim))
    return out


def text_enhanced_object(
    deep_class: Tensor, deep_patches: Tensor, descriptor: Tensor, params: CpfParams
) -> Tensor:
    """Class token plus descriptor-keyed pooling over the deep patches.

    Keys are the projected (d-wide) patches, values the raw (D-wide)
    patches; the attention scale stays sqrt(d) with the key width.
    """
    keys = _affine(deep_patches, params.proj_obj_w, params.proj_obj_b)
    pooled, _ = scaled_dot_attention(descriptor, keys, deep_patches, math.sqrt(params.text_dim))
    return add(deep_class, pooled)


def object_guided_attribute(object_feature: Tensor, shallow_fused: Tensor) -> Tensor:
    """Attribute feature: object-feature-keyed pooling over fused shallow patches.

    Query and keys are both D-wide, so the scale is sqrt(D).
    """
    out, _ = scaled_dot_attention(
        object_feature, shallow_fused, shallow_fused, math.sqrt(shallow_fused.data.shape[1])
    )
    return out


def object_logits(object_feature: Tensor, obj_text: Tensor, params: CpfParams) -> Tensor:
    """Pre-temperature object scores: projected feature against the object table."""
    return matmul(_affine(object_feature, params.proj_obj_w, params.proj_obj_b), obj_text, transpose_b=True)


def attribute_logits(attr_feature: Tensor, attr_text: Tensor, params: CpfParams) -> Tensor:
    return matmul(_affine(attr_feature, params.proj_attr_w, params.proj_attr_b), attr_text, transpose_b=True)


def candidate_text_matrix(
    attr_text: Tensor, obj_text: Tensor, candidates: Sequence[tuple[int, int]], params: CpfParams
) -> Tensor:
    """K x j composition embeddings: affine map of [w_a | w_o] per candidate."""
    if not candidates:
        raise DataError("candidate list is empty")
    wa = select_rows(attr_text, [i for i, _ in candidates])
    wo = select_rows(obj_text, [j for _, j in candidates])
    return _affine(concat_lastdim((wa, wo)), params.comp_text_w, params.comp_text_b)


def composition_logits(
    attr_feature: Tensor, object_feature: Tensor, cand_matrix: Tensor, params: CpfParams
) -> Tensor:
    """Pre-temperature candidate scores for the [v_a | v_o] composition feature."""
    vc = _affine(concat_lastdim((attr_feature, object_feature)), params.comp_visual_w, params.comp_visual_b)
    return matmul(vc, cand_matrix, transpose_b=True)


def _mean_rows(x: Tensor) -> Tensor:
    ones = Tensor._wrap(np.full((1, x.data.shape[0]), 1.0 / x.data.shape[0]))
    return matmul(ones, x)


def sample_features(
    bundle: FeatureBundle,
    attr_text: Tensor,
    obj_text: Tensor,
    params: CpfParams,
    variant: str = "full",
) -> tuple[Tensor, Tensor]:
    """Run the decomposition for one image -> (object feature, attribute feature).

    Variants: "full" keeps both attention stages; "no_teo" replaces the
    text-enhanced pooling with a plain patch mean; "no_teo_oga" additionally
    mean-pools the fused shallow patches (the fully disentangled ablation).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    deep_class = Tensor._wrap(bundle.deep_class.reshape(1, -1))
    deep_patches = Tensor._wrap(bundle.deep_patches)
    shallow = fuse_shallow([Tensor._wrap(b) for b in bundle.shallow_blocks], params)
    if variant == "full":
        descriptor = textual_descriptor(deep_class, obj_text, params)
        v_obj = text_enhanced_object(deep_class, deep_patches, descriptor, params)
    else:
        v_obj = add(deep_class, _mean_rows(deep_patches))
    if variant == "no_teo_oga":
        v_attr = _mean_rows(shallow)
    else:
        v_attr = object_guided_attribute(v_obj, shallow)
    return v_obj, v_attr


def _probs(logits: Tensor, tau: float) -> np.ndarray:
    return softmax_lastdim(scale(logits, 1.0 / tau)).data[0]


def object_probs(object_feature: Tensor, obj_text: Tensor, params: CpfParams) -> np.ndarray:
    return _probs(object_logits(object_feature, obj_text, params), params.tau)


def attribute_probs(attr_feature: Tensor, attr_text: Tensor, params: CpfParams) -> np.ndarray:
    return _probs(attribute_logits(attr_feature, attr_text, params), params.tau)


def composition_probs(
    attr_feature: Tensor, object_feature: Tensor, cand_matrix: Tensor, params: CpfParams
) -> np.ndarray:
    return _probs(composition_logits(attr_feature, object_feature, cand_matrix, params), params.tau)


def forward_probs(
    bundle: FeatureBundle,
    attr_text: Tensor,
    obj_text: Tensor,
    cand_matrix: Tensor,
    params: CpfParams,
    variant: str = "full",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inference probabilities: (composition over candidates, attribute, object)."""
    v_obj, v_attr = sample_features(bundle, attr_text, obj_text, params, variant)
    return (
        composition_probs(v_attr, v_obj, cand_matrix, params),
        attribute_probs(v_attr, attr_text, params),
        object_probs(v_obj, obj_text, params),
    )


@dataclass
class LossBreakdown:
    l_com: Tensor
    l_att: Tensor
    l_obj: Tensor
    l_total: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return (self.l_com.item(), self.l_att.item(), self.l_obj.item(), self.l_total.item())


def training_candidates(
    space: CompositionSpace, full_train_softmax: bool = False
) -> tuple[list[tuple[int, int]], dict[tuple[int, int], int]]:
    """Candidate list and pair->class-index map for the composition loss.

    By default the softmax spans only the labelled seen-train pairs; the
    full product denominator is available behind full_train_softmax.
    """
    candidates = space.ow_candidates if full_train_softmax else list(space.seen_train)
    return candidates, {pair: k for k, pair in enumerate(candidates)}


def forward_losses(
    batch: Sequence[FeatureBundle],
    text: TextEmbeddings,
    params: CpfParams,
    space: CompositionSpace,
    variant: str = "full",
    full_train_softmax: bool = False,
) -> LossBreakdown:
    """Batch-mean losses; L_total = L_com + alpha1 * L_att + alpha2 * L_obj."""
    if not batch:
        raise DataError("empty training batch")
    attr_text, obj_text = text.tensors()
    candidates, class_of = training_candidates(space, full_train_softmax)
    cand_matrix = candidate_text_matrix(attr_text, obj_text, candidates, params)
    sum_com = sum_att = sum_obj = None
    for bundle in batch:
        pair = (bundle.attr_label, bundle.obj_label)
        if pair not in class_of:
            raise DataError(
                f"training label {space.pair_name(pair)} of image {bundle.image_id!r} "
                "is not in the seen-train composition set"
            )
        v_obj, v_attr = sample_features(bundle, attr_text, obj_text, params, variant)
        l_obj = cross_entropy(object_logits(v_obj, obj_text, params), bundle.obj_label, params.tau)
        l_att = cross_entropy(attribute_logits(v_attr, attr_text, params), bundle.attr_label, params.tau)
        l_com = cross_entropy(
            composition_logits(v_attr, v_obj, cand_matrix, params), class_of[pair], params.tau
        )
        sum_com = l_com if sum_com is None else add(sum_com, l_com)
        sum_att = l_att if sum_att is None else add(sum_att, l_att)
        sum_obj = l_obj if sum_obj is None else add(sum_obj, l_obj)
    inv = 1.0 / len(batch)
    l_com = scale(sum_com, inv)
    l_att = scale(sum_att, inv)
    l_obj = scale(sum_obj, inv)
    l_total = add(l_com, add(scale(l_att, params.alpha1), scale(l_obj, params.alpha2)))
    return LossBreakdown(l_com, l_att, l_obj, l_total)
