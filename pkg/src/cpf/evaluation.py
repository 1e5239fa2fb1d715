"""Additive-score inference with calibration sweep, AUC, and best harmonic mean.

A candidate's score is the sum of its composition, attribute, and object
probabilities. A calibration bias added to unseen candidates trades seen
against unseen accuracy; sweeping the bias over every per-image flip margin
(plus -inf/+inf sentinels) traces the exact seen-unseen curve. AUC is the
trapezoidal area of that curve with the conventional endpoint extension;
headline Seen/Unseen accuracies are read at their favorable extremes.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .model import (
    CompositionSpace,
    CpfParams,
    FeatureBundle,
    TextEmbeddings,
    candidate_text_matrix,
    forward_probs,
)

SETTINGS = ("cw", "ow")


@dataclass
class ScoreRow:
    """One test image's probabilities and ground truth."""

    image_id: str
    comp_probs: np.ndarray  # over the active candidate list
    attr_probs: np.ndarray  # (M,)
    obj_probs: np.ndarray  # (N,)
    attr_label: int
    obj_label: int
    seen: bool  # true pair is in the seen-train set

    def validate(self) -> "ScoreRow":
        for name, p in (("composition", self.comp_probs), ("attribute", self.attr_probs), ("object", self.obj_probs)):
            if abs(float(p.sum()) - 1.0) > 1e-8:
                raise DataError(f"{name} probabilities of {self.image_id!r} sum to {p.sum()!r}")
        return self


@dataclass
class CurvePoint:
    bias: float
    seen_acc: float
    unseen_acc: float
    hm: float


@dataclass
class EvalReport:
    setting: str
    curve: list[CurvePoint]
    auc: float  # in [0, 1]; reported x100
    best_hm: float
    best_seen: float  # seen accuracy at the bias -> -inf extreme
    best_unseen: float  # unseen accuracy at the bias -> +inf extreme
    n_images: int
    n_seen: int
    n_unseen: int
    n_candidates: int

    def summary_line(self) -> str:
        return (
            f"{self.auc * 100:.2f} {self.best_hm * 100:.2f} "
            f"{self.best_seen * 100:.2f} {self.best_unseen * 100:.2f}"
        )

    def curve_lines(self) -> list[str]:
        return [f"{p.bias!r}, {p.seen_acc!r}, {p.unseen_acc!r}, {p.hm!r}" for p in self.curve]

    def to_text(self) -> str:
        lines = [
            f"setting: {self.setting}",
            f"images: {self.n_images} (seen {self.n_seen} / unseen {self.n_unseen})",
            f"candidates: {self.n_candidates}",
            "curve: bias, seen, unseen, hm",
        ]
        lines.extend(self.curve_lines())
        lines.append("summary: AUC, bestHM, Seen, Unseen (x100)")
        lines.append(self.summary_line())
        return "\n".join(lines) + "\n"


def aggregate_score(
    comp_probs: np.ndarray,
    attr_probs: np.ndarray,
    obj_probs: np.ndarray,
    candidates: Sequence[tuple[int, int]],
    position: int,
) -> float:
    """Additive score of one candidate: p(c) + p(a) + p(o), in [0, 3]."""
    i, j = candidates[position]
    return float(comp_probs[position] + attr_probs[i] + obj_probs[j])


def row_scores(row: ScoreRow, candidates: Sequence[tuple[int, int]]) -> np.ndarray:
    """Vector of additive scores over the whole candidate list."""
    ai = np.fromiter((i for i, _ in candidates), dtype=np.intp, count=len(candidates))
    oj = np.fromiter((j for _, j in candidates), dtype=np.intp, count=len(candidates))
    return row.comp_probs + row.attr_probs[ai] + row.obj_probs[oj]


def predict_index(scores: np.ndarray, unseen_mask: np.ndarray, bias: float) -> int:
    """Argmax of score + bias on unseen candidates; ties go to the lowest index.

    The -inf/+inf sentinels restrict the argmax to the seen (resp. unseen)
    side when that side is non-empty, realizing the calibration extremes.
    """
    if math.isinf(bias):
        pool = unseen_mask if bias > 0 else ~unseen_mask
        if pool.any():
            idx = np.flatnonzero(pool)
            return int(idx[np.argmax(scores[idx])])
        return int(np.argmax(scores))
    return int(np.argmax(scores + bias * unseen_mask))


def predict(
    row: ScoreRow, candidates: Sequence[tuple[int, int]], unseen_mask: np.ndarray, bias: float
) -> tuple[int, int]:
    """The predicted (attribute, object) pair at the given calibration bias."""
    return candidates[predict_index(row_scores(row, candidates), unseen_mask, bias)]


def bias_grid_from_margins(
    all_scores: Sequence[np.ndarray], unseen_mask: np.ndarray
) -> list[float]:
    """Every bias where any prediction can flip, plus the -inf/+inf sentinels.

    Flips happen only at the per-image margins (max seen score minus max
    unseen score), but with deterministic lowest-index tie-breaking a flip
    can take effect just above a margin, so the open interval between
    consecutive margins is sampled at its midpoint. The resulting curve is
    exact: accuracies are constant between grid points.
    """
    margins: set[float] = set()
    if unseen_mask.any() and (~unseen_mask).any():
        for scores in all_scores:
            margins.add(float(scores[~unseen_mask].max() - scores[unseen_mask].max()))
    ordered = sorted(margins)
    grid = [-math.inf]
    for k, m in enumerate(ordered):
        grid.append(m)
        if k + 1 < len(ordered):
            grid.append((m + ordered[k + 1]) / 2.0)
    grid.append(math.inf)
    return grid


def linear_bias_grid(
    all_scores: Sequence[np.ndarray], unseen_mask: np.ndarray, k: int
) -> list[float]:
    """Fallback grid: k evenly spaced biases spanning the margin range."""
    if k < 1:
        raise ValueError("bias grid size must be >= 1")
    margins = bias_grid_from_margins(all_scores, unseen_mask)[1:-1]
    if not margins:
        return [-math.inf, 0.0, math.inf]
    lo, hi = min(margins), max(margins)
    return [-math.inf, *np.linspace(lo, hi, k).tolist(), math.inf]


def calibration_sweep(
    rows: Sequence[ScoreRow],
    candidates: Sequence[tuple[int, int]],
    unseen_mask: np.ndarray,
    bias_grid: Sequence[float] | None = None,
) -> list[CurvePoint]:
    """Seen/unseen accuracy and harmonic mean at every swept bias."""
    if not rows:
        raise DataError("cannot sweep an empty score table")
    n_seen = sum(r.seen for r in rows)
    n_unseen = len(rows) - n_seen
    if n_seen == 0 or n_unseen == 0:
        warnings.warn(
            "degenerate seen/unseen curve: table has only "
            + ("seen" if n_unseen == 0 else "unseen")
            + " images",
            stacklevel=2,
        )
    all_scores = [row_scores(r, candidates) for r in rows]
    position = {pair: k for k, pair in enumerate(candidates)}
    truth = [position.get((r.attr_label, r.obj_label), -1) for r in rows]
    grid = bias_grid_from_margins(all_scores, unseen_mask) if bias_grid is None else list(bias_grid)
    curve = []
    for bias in grid:
        seen_hits = unseen_hits = 0
        for r, scores, t in zip(rows, all_scores, truth):
            hit = predict_index(scores, unseen_mask, bias) == t
            if r.seen:
                seen_hits += hit
            else:
                unseen_hits += hit
        s = seen_hits / n_seen if n_seen else 0.0
        u = unseen_hits / n_unseen if n_unseen else 0.0
        hm = 2.0 * s * u / (s + u) if s + u > 0 else 0.0
        curve.append(CurvePoint(bias, s, u, hm))
    return curve


def auc(curve: Sequence[CurvePoint]) -> float:
    """Trapezoidal area of unseen-over-seen accuracy, in [0, 1].

    The curve is extended to the (0, max unseen) and (max seen, 0)
    endpoints before integration, the prevailing reporting convention.
    """
    if not curve:
        raise ValueError("auc of an empty curve")
    pts = [(p.seen_acc, p.unseen_acc) for p in curve]
    max_s = max(x for x, _ in pts)
    max_u = max(y for _, y in pts)
    pts.append((0.0, max_u))
    pts.append((max_s, 0.0))
    # Upper envelope per distinct seen-accuracy, so the appended endpoints
    # never undercut an attained point at the same x.
    best: dict[float, float] = {}
    for x, y in pts:
        if y > best.get(x, -1.0):
            best[x] = y
    env = sorted(best.items())
    area = 0.0
    for (x0, y0), (x1, y1) in zip(env, env[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def report_from_rows(
    rows: Sequence[ScoreRow],
    candidates: Sequence[tuple[int, int]],
    unseen_mask: np.ndarray,
    setting: str,
    bias_grid: Sequence[float] | None = None,
) -> EvalReport:
    curve = calibration_sweep(rows, candidates, unseen_mask, bias_grid)
    n_seen = sum(r.seen for r in rows)
    return EvalReport(
        setting=setting,
        curve=curve,
        auc=auc(curve),
        best_hm=max(p.hm for p in curve),
        best_seen=curve[0].seen_acc,
        best_unseen=curve[-1].unseen_acc,
        n_images=len(rows),
        n_seen=n_seen,
        n_unseen=len(rows) - n_seen,
        n_candidates=len(candidates),
    )


def build_score_table(
    test_set: Sequence[FeatureBundle],
    params: CpfParams,
    text: TextEmbeddings,
    space: CompositionSpace,
    candidates: Sequence[tuple[int, int]],
    variant: str = "full",
    threads: int = 1,
) -> list[ScoreRow]:
    """Run inference per image; embarrassingly parallel, order-preserving."""
    cand_set = set(candidates)
    for b in test_set:
        if (b.attr_label, b.obj_label) not in cand_set:
            raise DataError(
                f"test label {space.pair_name((b.attr_label, b.obj_label))} of image "
                f"{b.image_id!r} is outside the candidate list"
            )
    attr_text, obj_text = text.tensors()
    cand_matrix = candidate_text_matrix(attr_text, obj_text, candidates, params)

    def score_one(bundle: FeatureBundle) -> ScoreRow:
        comp, attr, obj = forward_probs(bundle, attr_text, obj_text, cand_matrix, params, variant)
        return ScoreRow(
            image_id=bundle.image_id,
            comp_probs=comp,
            attr_probs=attr,
            obj_probs=obj,
            attr_label=bundle.attr_label,
            obj_label=bundle.obj_label,
            seen=(bundle.attr_label, bundle.obj_label) in space.seen_set,
        ).validate()

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(score_one, test_set))
    return [score_one(b) for b in test_set]


def evaluate(
    test_set: Sequence[FeatureBundle],
    params: CpfParams,
    text: TextEmbeddings,
    space: CompositionSpace,
    setting: str,
    variant: str = "full",
    threads: int = 1,
    bias_grid_size: int | None = None,
    shallow_blocks: Sequence[int] | None = None,
) -> EvalReport:
    """Closed- or open-world report for a trained head on a test set."""
    setting = setting.lower()
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}, got {setting!r}")
    candidates = space.cw_candidates if setting == "cw" else space.ow_candidates
    if not candidates:
        raise DataError(f"no candidates for setting {setting!r}")
    if shallow_blocks is not None:
        test_set = [b.select_blocks(shallow_blocks) for b in test_set]
    unseen_mask = np.array([pair not in space.seen_set for pair in candidates])
    rows = build_score_table(test_set, params, text, space, candidates, variant, threads)
    grid = None
    if bias_grid_size is not None:
        grid = linear_bias_grid([row_scores(r, candidates) for r in rows], unseen_mask, bias_grid_size)
    return report_from_rows(rows, candidates, unseen_mask, setting, grid)
