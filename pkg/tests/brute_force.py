"""Independent brute-force metric evaluator used as the test oracle.

Shares no code with the engine: its own score enumeration, its own bias
grid built from all pairwise seen/unseen score differences, its own
argmax with the documented sentinel semantics, and its own trapezoid.
"""

import math


def brute_scores(row, candidates):
    return [
        row.comp_probs[k] + row.attr_probs[i] + row.obj_probs[j]
        for k, (i, j) in enumerate(candidates)
    ]


def brute_predict(row, candidates, unseen_mask, bias):
    scores = brute_scores(row, candidates)
    pool = range(len(candidates))
    if math.isinf(bias):
        # sentinel semantics: the best candidate of the forced side
        side = [k for k in pool if unseen_mask[k] == (bias > 0)]
        pool = side or pool
        bias = 0.0
    best, best_score = None, -math.inf
    for k in pool:
        adjusted = scores[k] + (bias if unseen_mask[k] else 0.0)
        if adjusted > best_score:
            best, best_score = k, adjusted
    return best


def brute_grid(rows, candidates, unseen_mask):
    """All pairwise seen-unseen score differences: a superset of flip points."""
    grid = {0.0}
    for row in rows:
        s = brute_scores(row, candidates)
        for k1 in range(len(candidates)):
            for k2 in range(len(candidates)):
                if unseen_mask[k1] != unseen_mask[k2]:
                    grid.add(abs(s[k1] - s[k2]))
                    grid.add(-abs(s[k1] - s[k2]))
    return [-math.inf, *sorted(grid), math.inf]


def brute_accuracies(rows, candidates, unseen_mask, bias):
    seen_hits = seen_total = unseen_hits = unseen_total = 0
    for row in rows:
        pred = brute_predict(row, candidates, unseen_mask, bias)
        correct = candidates[pred] == (row.attr_label, row.obj_label)
        if row.seen:
            seen_total += 1
            seen_hits += correct
        else:
            unseen_total += 1
            unseen_hits += correct
    s = seen_hits / seen_total if seen_total else 0.0
    u = unseen_hits / unseen_total if unseen_total else 0.0
    return s, u


def brute_auc(points):
    """Direct trapezoid over the per-x upper envelope of the points plus the
    (0, max unseen) and (max seen, 0) endpoint extensions."""
    pts = list(points) + [(0.0, max(p[1] for p in points)), (max(p[0] for p in points), 0.0)]
    envelope = {}
    for x, y in pts:
        envelope[x] = max(y, envelope.get(x, 0.0))
    env = sorted(envelope.items())
    total = 0.0
    for (x0, y0), (x1, y1) in zip(env, env[1:]):
        total += (x1 - x0) * (y0 + y1) / 2.0
    return total
