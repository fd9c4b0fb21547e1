"""Slow reference evaluators used to cross-check the fast metric kernels.

Everything here trades speed for obviousness: rational arithmetic where
the quantity is a ratio of exact sums, per-element Python loops instead
of vectorized numpy, memoized recursion instead of iterative tables.
None of this shares code with `metrics`; agreement between the two
routes is what the tests certify.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache

from .datagen import CAUSE_TEMPLATES
from .errors import ContractError


def confusion_reference(pred_labels, gt_labels):
    """(tp, fp, fn, tn) counted one frame at a time."""
    pred = [bool(x) for x in pred_labels]
    gt = [bool(x) for x in gt_labels]
    if len(pred) != len(gt):
        raise ContractError("label length mismatch")
    tp = fp = fn = tn = 0
    for p, g in zip(pred, gt):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def fnr_reference(tp: int, fn: int) -> float:
    if tp + fn == 0:
        return 0.0
    return float(Fraction(fn, fn + tp))


def f_beta_reference(tp: int, fp: int, fn: int, beta: float = 2.0) -> float:
    if tp == 0:
        return 0.0
    b2 = Fraction(beta).limit_denominator(10**9) ** 2
    p = Fraction(tp, tp + fp)
    r = Fraction(tp, tp + fn)
    return float((1 + b2) * p * r / (b2 * p + r))


def temporal_iou_reference(a, b) -> float:
    sa, ea = Fraction(a[0]), Fraction(a[1])
    sb, eb = Fraction(b[0]), Fraction(b[1])
    if not (sa < ea and sb < eb):
        raise ContractError("degenerate interval")
    lo = sa if sa > sb else sb
    hi = ea if ea < eb else eb
    inter = hi - lo if hi > lo else Fraction(0)
    union = (ea - sa) + (eb - sb) - inter
    return float(inter / union)


def average_precision_reference(preds_by_video, gts_by_video, threshold) -> float:
    """Greedy matching and all-point interpolation, all in rationals."""
    pool = []
    for vid in sorted(preds_by_video):
        for p in preds_by_video[vid]:
            pool.append((vid, p))
    pool.sort(key=lambda vp: (-vp[1].confidence, vp[0], vp[1].start))

    total_gt = 0
    for gts in gts_by_video.values():
        total_gt += len(gts)
    if total_gt == 0:
        return 1.0 if len(pool) == 0 else 0.0

    thr = Fraction(threshold).limit_denominator(10**9)
    used = {vid: set() for vid in gts_by_video}
    flags = []
    for vid, p in pool:
        gts = gts_by_video.get(vid, [])
        chosen = None
        chosen_iou = Fraction(0)
        for j in range(len(gts)):
            if j in used.get(vid, set()):
                continue
            s, e = Fraction(gts[j][0]), Fraction(gts[j][1])
            ps, pe = Fraction(p.start), Fraction(p.end)
            lo = ps if ps > s else s
            hi = pe if pe < e else e
            inter = hi - lo if hi > lo else Fraction(0)
            iou = inter / ((e - s) + (pe - ps) - inter)
            if iou >= thr and iou > chosen_iou:
                chosen, chosen_iou = j, iou
        if chosen is not None:
            used[vid].add(chosen)
            flags.append(1)
        else:
            flags.append(0)

    precisions, recalls = [], []
    tp = 0
    for k, f in enumerate(flags, start=1):
        tp += f
        precisions.append(Fraction(tp, k))
        recalls.append(Fraction(tp, total_gt))
    ap = Fraction(0)
    prev_r = Fraction(0)
    for k in range(len(flags)):
        best_p = max(precisions[k:])  # interpolation: best precision ahead
        ap += (recalls[k] - prev_r) * best_p
        prev_r = recalls[k]
    return float(ap)


def rouge_l_reference(candidate: str, reference: str) -> float:
    cand = tuple(candidate.lower().split())
    ref = tuple(reference.lower().split())
    if not ref:
        raise ContractError("empty reference")
    if not cand:
        return 0.0

    @lru_cache(maxsize=None)
    def lcs(i: int, j: int) -> int:
        if i == 0 or j == 0:
            return 0
        if cand[i - 1] == ref[j - 1]:
            return lcs(i - 1, j - 1) + 1
        return max(lcs(i - 1, j), lcs(i, j - 1))

    length = lcs(len(cand), len(ref))
    if length == 0:
        return 0.0
    p = Fraction(length, len(cand))
    r = Fraction(length, len(ref))
    return float(2 * p * r / (p + r))


def bleu_reference(candidate: str, reference: str, max_n: int = 4) -> float:
    cand = candidate.lower().split()
    ref = reference.lower().split()
    if not ref:
        raise ContractError("empty reference")
    if not cand:
        return 0.0
    product = 1.0
    for n in range(1, max_n + 1):
        cgrams = {}
        for i in range(len(cand) - n + 1):
            g = tuple(cand[i:i + n])
            cgrams[g] = cgrams.get(g, 0) + 1
        rgrams = {}
        for i in range(len(ref) - n + 1):
            g = tuple(ref[i:i + n])
            rgrams[g] = rgrams.get(g, 0) + 1
        total = 0
        match = 0
        for g, c in cgrams.items():
            total += c
            r = rgrams.get(g, 0)
            match += c if c < r else r
        if n == 1:
            if match == 0:
                return 0.0
            p = match / total
        elif match == 0:
            p = (match + 1.0) / (total + 1.0)
        else:
            p = match / total
        product *= p
    bp = min(1.0, math.exp(1.0 - len(ref) / len(cand)))
    return bp * product ** (1.0 / max_n)


def _frame_labels_reference(preds, n_frames):
    labels = []
    for t in range(n_frames):
        covered = False
        for p in preds:
            if math.floor(p.start) <= t < math.ceil(p.end):
                covered = True
        labels.append(1 if covered else 0)
    return labels


def _attribution_reference(preds_by_video, videos):
    rouges, bleus = [], []
    for v in videos:
        preds = list(preds_by_video.get(v.id, []))
        preds.sort(key=lambda p: (-p.confidence, p.start, p.cause_id))
        for s, e, c in sorted(v.ground_truth):
            text = ""
            for p in preds:
                if min(e, p.end) - max(s, p.start) > 0:
                    text = CAUSE_TEMPLATES[p.cause_id]
                    break
            reftext = CAUSE_TEMPLATES[c]
            rouges.append(rouge_l_reference(text, reftext) if text else 0.0)
            bleus.append(bleu_reference(text, reftext) if text else 0.0)
    if not rouges:
        return 1.0, 1.0
    return sum(rouges) / len(rouges), sum(bleus) / len(bleus)


def evaluate_reference(preds_by_video, videos, thresholds):
    """Whole-report twin of `metrics.evaluate`, flat scope only.

    Returns a plain dict so the comparison in tests cannot accidentally
    reuse the fast report's fields.
    """
    for vid in preds_by_video:
        if vid not in {v.id for v in videos}:
            raise ContractError(f"predictions for unknown video id {vid}")
    tp = fp = fn = tn = 0
    for v in videos:
        a, b, c, d = confusion_reference(
            _frame_labels_reference(preds_by_video.get(v.id, []), v.n_frames),
            v.per_frame_labels,
        )
        tp, fp, fn, tn = tp + a, fp + b, fn + c, tn + d
    gts = {v.id: [(s, e) for s, e, _ in v.ground_truth] for v in videos}
    preds = {v.id: preds_by_video.get(v.id, []) for v in videos}
    map_at = {float(t): average_precision_reference(preds, gts, t)
              for t in thresholds}
    rouge, bl = _attribution_reference(preds_by_video, videos)
    return {
        "fnr": fnr_reference(tp, fn),
        "f2": f_beta_reference(tp, fp, fn),
        "map_at": map_at,
        "mean_map": sum(map_at.values()) / len(map_at),
        "rouge_l": rouge,
        "bleu": bl,
    }
