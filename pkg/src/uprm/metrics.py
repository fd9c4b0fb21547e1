"""Evaluation kernels for identifying, locating, and attributing threats.

Identification is frame-level (false-negative rate and F2 over threat
frames), localization is segment-level (AP at temporal-IoU thresholds,
pooled over videos), attribution compares cause template texts with
ROUGE-L and smoothed BLEU. Every kernel here has a slow brute-force
twin in `reference`; the two must agree to 1e-9.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .datagen import CAUSE_TEMPLATES
from .errors import ConfigError, ContractError
from .parallel import ordered_map

DEFAULT_TIOU_THRESHOLDS = (0.1, 0.3, 0.5)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def fnr(self) -> float:
        pos = self.fn + self.tp
        return self.fn / pos if pos else 0.0

    @property
    def precision(self) -> float:
        den = self.tp + self.fp
        return self.tp / den if den else 0.0

    @property
    def recall(self) -> float:
        den = self.tp + self.fn
        return self.tp / den if den else 0.0


@dataclass
class MetricReport:
    fnr: float
    f2: float
    map_at: dict  # tIoU threshold -> AP
    mean_map: float
    rouge_l: float
    bleu: float
    counts: ConfusionCounts
    video_fnr: float  # video-level extra, no acceptance weight
    per_category: dict = field(default_factory=dict)  # cause_id -> MetricReport


def frame_confusion(pred_labels, gt_labels) -> ConfusionCounts:
    pred = np.asarray(pred_labels).astype(bool)
    gt = np.asarray(gt_labels).astype(bool)
    if pred.shape != gt.shape:
        raise ContractError(
            f"label length mismatch: {pred.shape} vs {gt.shape}"
        )
    return ConfusionCounts(
        tp=int(np.sum(pred & gt)),
        fp=int(np.sum(pred & ~gt)),
        fn=int(np.sum(~pred & gt)),
        tn=int(np.sum(~pred & ~gt)),
    )


def f_beta(counts: ConfusionCounts, beta: float = 2.0) -> float:
    p, r = counts.precision, counts.recall
    if p + r == 0.0:
        return 0.0
    b2 = beta * beta
    return (1.0 + b2) * p * r / (b2 * p + r)


def temporal_iou(a, b) -> float:
    (sa, ea), (sb, eb) = (a[0], a[1]), (b[0], b[1])
    if not (sa < ea and sb < eb):
        raise ContractError(f"degenerate interval: {a} vs {b}")
    inter = max(0.0, min(ea, eb) - max(sa, sb))
    union = (ea - sa) + (eb - sb) - inter
    return inter / union


def _pooled_predictions(preds_by_video):
    pool = []
    for vid in sorted(preds_by_video):
        for p in preds_by_video[vid]:
            pool.append((vid, p))
    pool.sort(key=lambda vp: (-vp[1].confidence, vp[0], vp[1].start))
    return pool


def _average_precision(pool, gts_by_video, threshold: float) -> float:
    total_gt = sum(len(g) for g in gts_by_video.values())
    if total_gt == 0:
        return 1.0 if not pool else 0.0
    matched = {vid: [False] * len(g) for vid, g in gts_by_video.items()}
    hits = []
    for vid, p in pool:
        gts = gts_by_video.get(vid, [])
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            if matched[vid][j]:
                continue
            iou = temporal_iou((p.start, p.end), g)
            # strictly-better keeps ties on the earliest ground truth
            if iou >= threshold and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            matched[vid][best_j] = True
            hits.append(1)
        else:
            hits.append(0)
    tp = np.cumsum(hits)
    k = np.arange(1, len(hits) + 1)
    precision = tp / k
    recall = tp / total_gt
    # all-point interpolation: running max of precision from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for pr, rc in zip(interp, recall):
        ap += (rc - prev_r) * pr
        prev_r = rc
    return float(ap)


def map_at_tiou(preds_by_video: dict, gts_by_video: dict, thresholds) -> tuple:
    """AP per threshold plus their mean, pooled over all videos."""
    for t in thresholds:
        if not 0.0 < t <= 1.0:
            raise ConfigError(f"tIoU threshold must be in (0, 1], got {t}")
    pool = _pooled_predictions(preds_by_video)
    per = {float(t): _average_precision(pool, gts_by_video, float(t))
           for t in thresholds}
    return per, float(np.mean(list(per.values())))


# ---------------------------------------------------------------------------
# text kernels


def _tokens(x):
    if isinstance(x, str):
        return x.lower().split()
    return [str(t).lower() for t in x]


def rouge_l(candidate, reference) -> float:
    """Longest-common-subsequence F1 over lowercase whitespace tokens."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise ContractError("rouge_l reference must be non-empty")
    if not cand:
        return 0.0
    # standard O(len(cand) * len(ref)) LCS table
    prev = [0] * (len(ref) + 1)
    for a in cand:
        cur = [0]
        for j, b in enumerate(ref, start=1):
            cur.append(prev[j - 1] + 1 if a == b else max(prev[j], cur[-1]))
        prev = cur
    lcs = prev[-1]
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2.0 * p * r / (p + r)


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Clipped n-gram geometric mean with +1 smoothing and brevity penalty."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise ContractError("bleu reference must be non-empty")
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        c_counts = _ngram_counts(cand, n)
        r_counts = _ngram_counts(ref, n)
        total = sum(c_counts.values())
        match = sum(min(c, r_counts[g]) for g, c in c_counts.items())
        if n == 1:
            if match == 0:
                return 0.0
            p = match / total
        elif match == 0:
            p = (match + 1.0) / (total + 1.0)  # smoothing for short texts
        else:
            p = match / total
        log_sum += np.log(p)
    bp = min(1.0, float(np.exp(1.0 - len(ref) / len(cand))))
    return bp * float(np.exp(log_sum / max_n))


# ---------------------------------------------------------------------------
# end-to-end evaluation


def _pred_frame_labels(preds, n_frames: int) -> np.ndarray:
    labels = np.zeros(n_frames, dtype=np.int64)
    for p in preds:
        s = max(0, int(np.floor(p.start)))
        e = min(n_frames, int(np.ceil(p.end)))
        if s < e:
            labels[s:e] = 1
    return labels


def _attribution_pairs(preds_by_video, videos):
    """(candidate, reference) cause texts, one per ground-truth interval.

    Each interval is paired with the best-confidence overlapping
    prediction; an uncovered interval contributes an empty candidate.
    """
    pairs = []
    for v in videos:
        preds = preds_by_video.get(v.id, [])
        for s, e, c in sorted(v.ground_truth):
            best = None
            for p in sorted(preds, key=lambda p: (-p.confidence, p.start, p.cause_id)):
                if min(e, p.end) - max(s, p.start) > 0:
                    best = p
                    break
            cand = CAUSE_TEMPLATES[best.cause_id] if best is not None else ""
            pairs.append((cand, CAUSE_TEMPLATES[c]))
    return pairs


def _attribution_scores(pairs) -> tuple:
    if not pairs:
        return 1.0, 1.0  # vacuous: nothing to attribute
    rouges = [rouge_l(c, r) if c else 0.0 for c, r in pairs]
    bleus = [bleu(c, r) if c else 0.0 for c, r in pairs]
    return float(np.mean(rouges)), float(np.mean(bleus))


def _evaluate_flat(preds_by_video, videos, thresholds) -> MetricReport:
    confusions = ordered_map(
        lambda v: frame_confusion(
            _pred_frame_labels(preds_by_video.get(v.id, []), v.n_frames),
            v.per_frame_labels,
        ),
        videos,
    )
    counts = ConfusionCounts()
    for c in confusions:
        counts = counts + c

    video_counts = ConfusionCounts()
    for v, c in zip(videos, confusions):
        has_pred = bool(c.tp or c.fp)
        has_gt = bool(v.ground_truth)
        video_counts = video_counts + ConfusionCounts(
            tp=int(has_pred and has_gt), fp=int(has_pred and not has_gt),
            fn=int(has_gt and not has_pred), tn=int(not has_gt and not has_pred),
        )

    gts_by_video = {v.id: [(s, e) for s, e, _ in v.ground_truth] for v in videos}
    map_at, mean_map = map_at_tiou(
        {v.id: preds_by_video.get(v.id, []) for v in videos},
        gts_by_video, thresholds,
    )
    rouge, bl = _attribution_scores(_attribution_pairs(preds_by_video, videos))
    return MetricReport(
        fnr=counts.fnr, f2=f_beta(counts), map_at=map_at, mean_map=mean_map,
        rouge_l=rouge, bleu=bl, counts=counts, video_fnr=video_counts.fnr,
    )


def evaluate(preds_by_video: dict, videos, thresholds=DEFAULT_TIOU_THRESHOLDS) -> MetricReport:
    """Aggregate all kernels over a dataset, plus per-cause sub-reports."""
    known = {v.id for v in videos}
    for vid in preds_by_video:
        if vid not in known:
            raise ContractError(f"predictions for unknown video id {vid}")
    report = _evaluate_flat(preds_by_video, videos, thresholds)
    causes = sorted({c for v in videos for _, _, c in v.ground_truth})
    for cause in causes:
        subset = [v for v in videos
                  if any(c == cause for _, _, c in v.ground_truth)]
        sub_preds = {v.id: preds_by_video.get(v.id, []) for v in subset}
        report.per_category[cause] = _evaluate_flat(sub_preds, subset, thresholds)
    return report


# ---------------------------------------------------------------------------
# report rendering


def report_table(report: MetricReport, title: str = "overall") -> str:
    """Aligned text table with one row per scope (overall + per cause)."""
    thresholds = sorted(report.map_at)
    headers = (["scope", "FNR", "F2"]
               + [f"mAP@{t:g}" for t in thresholds]
               + ["Average", "ROUGE-L", "BLEU"])

    def row(name, r):
        return ([name, f"{r.fnr:.4f}", f"{r.f2:.4f}"]
                + [f"{r.map_at[t]:.4f}" for t in thresholds]
                + [f"{r.mean_map:.4f}", f"{r.rouge_l:.4f}", f"{r.bleu:.4f}"])

    rows = [row(title, report)]
    for cause in sorted(report.per_category):
        rows.append(row(f"cause-{cause}", report.per_category[cause]))
    widths = [max(len(h), *(len(r[i]) for r in rows))
              for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_report(report: MetricReport, path) -> None:
    """Structured key=value lines, stable across reruns for diffing."""
    lines = []

    def emit(prefix, r):
        lines.append(f"{prefix}.fnr={r.fnr!r}")
        lines.append(f"{prefix}.f2={r.f2!r}")
        for t in sorted(r.map_at):
            lines.append(f"{prefix}.map@{t:g}={r.map_at[t]!r}")
        lines.append(f"{prefix}.mean_map={r.mean_map!r}")
        lines.append(f"{prefix}.rouge_l={r.rouge_l!r}")
        lines.append(f"{prefix}.bleu={r.bleu!r}")
        lines.append(f"{prefix}.video_fnr={r.video_fnr!r}")

    emit("overall", report)
    for cause in sorted(report.per_category):
        emit(f"cause.{cause}", report.per_category[cause])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
