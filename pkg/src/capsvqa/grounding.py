"""From attention maps to detections, and from detections to grounding scores.

Post-processing: a grid cell is active when its attention is at least
(alpha / 2) times the uniform level; 8-connected components of active cells
become pixel-space boxes. Matching compares detections against ground truth
under two criteria (intersection-over-detection and intersection-over-union)
with greedy score-ordered assignment at threshold 0.5, micro-aggregated into
precision / recall / F1.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

Box = Tuple[int, int, int, int]  # (x, y, w, h) in pixels

CRITERIA = ("overlap", "iou")
POLICIES = ("best", "last")

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class DetectionSet:
    boxes: List[Box]
    step: int
    alpha: float


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    criterion: str = "overlap"

    def __iadd__(self, other: "MatchCounts") -> "MatchCounts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


def active_cells(attention: np.ndarray, alpha: float) -> np.ndarray:
    """Boolean grid of cells whose attention reaches (alpha/2) x uniform."""
    a = np.asarray(attention, dtype=np.float64)
    return a * a.size >= 0.5 * alpha


def postprocess(attention: np.ndarray, alpha: float, stride: int = 8, step: int = 0) -> DetectionSet:
    """Threshold an attention map and box its 8-connected components."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    active = active_cells(attention, alpha)
    labels, n = ndimage.label(active, structure=_EIGHT_CONNECTED)
    boxes: List[Box] = []
    for comp in range(1, n + 1):
        rows, cols = np.nonzero(labels == comp)
        x = int(cols.min()) * stride
        y = int(rows.min()) * stride
        w = (int(cols.max()) - int(cols.min()) + 1) * stride
        h = (int(rows.max()) - int(rows.min()) + 1) * stride
        boxes.append((x, y, w, h))
    return DetectionSet(boxes=boxes, step=step, alpha=alpha)


def box_area(box: Box) -> int:
    return box[2] * box[3]


def intersection_area(a: Box, b: Box) -> int:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    return max(iw, 0) * max(ih, 0)


def pair_score(det: Box, gt: Box, criterion: str) -> float:
    inter = intersection_area(det, gt)
    if criterion == "overlap":
        return inter / box_area(det)
    if criterion == "iou":
        union = box_area(det) + box_area(gt) - inter
        return inter / union if union > 0 else 0.0
    raise ValueError(f"unknown criterion {criterion!r}")


def match(
    dets: Sequence[Box], gts: Sequence[Box], criterion: str, tau: float = 0.5
) -> MatchCounts:
    """Greedy one-to-one matching in descending score order.

    Ties break on lower detection index, then lower ground-truth index. A
    pair is a candidate when its score is >= tau.
    """
    for d in dets:
        if box_area(d) <= 0:
            raise ValueError(f"zero-area detection {d}")
    candidates = []
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            s = pair_score(d, g, criterion)
            if s >= tau:
                candidates.append((-s, i, j))
    candidates.sort()
    used_d, used_g = set(), set()
    tp = 0
    for _, i, j in candidates:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        tp += 1
    return MatchCounts(
        tp=tp, fp=len(dets) - tp, fn=len(gts) - tp, criterion=criterion
    )


def prf(counts: MatchCounts) -> Tuple[float, float, float]:
    """Precision / recall / F1 with the 0/0 -> 0 convention."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def sample_f1(dets: Sequence[Box], gts: Sequence[Box], criterion: str, tau: float = 0.5):
    """Per-sample F1 used for best-step selection: both sides empty scores 1,
    exactly one empty scores 0."""
    if not dets and not gts:
        return 1.0, MatchCounts(criterion=criterion)
    if not dets or not gts:
        return 0.0, MatchCounts(fp=len(dets), fn=len(gts), criterion=criterion)
    counts = match(dets, gts, criterion, tau)
    return prf(counts)[2], counts


def best_step(
    step_dets: Sequence[DetectionSet], gts: Sequence[Box], criterion: str, tau: float = 0.5
) -> Tuple[int, MatchCounts]:
    """Step with the highest per-sample F1 (earliest wins ties)."""
    best = (-1.0, 0, MatchCounts(criterion=criterion))
    for s, ds in enumerate(step_dets):
        f1, counts = sample_f1(ds.boxes, gts, criterion, tau)
        if f1 > best[0]:
            best = (f1, s, counts)
    return best[1], best[2]


def last_step(
    step_dets: Sequence[DetectionSet], gts: Sequence[Box], criterion: str, tau: float = 0.5
) -> Tuple[int, MatchCounts]:
    s = len(step_dets) - 1
    _, counts = sample_f1(step_dets[s].boxes, gts, criterion, tau)
    return s, counts


def attention_mass(
    attention: np.ndarray, gt_boxes: Sequence[Box], stride: int = 8
) -> Optional[float]:
    """Attention captured by the ground-truth region: sum of per-cell
    attention weighted by the fraction of the cell covered by gt boxes.

    Grounding boxes never overlap each other, so summing per-box coverage is
    exact (clipped defensively at full coverage). Returns None when there is
    no ground truth (such samples are excluded from dataset means).
    """
    if not gt_boxes:
        return None
    a = np.asarray(attention, dtype=np.float64)
    h, w = a.shape
    coverage = np.zeros((h, w), dtype=np.float64)
    for box in gt_boxes:
        for r in range(h):
            for c in range(w):
                cell = (c * stride, r * stride, stride, stride)
                coverage[r, c] += intersection_area(cell, box)
    coverage = np.minimum(coverage / float(stride * stride), 1.0)
    return float((a * coverage).sum())


@dataclass
class GroundingReport:
    """Micro-aggregated grounding metrics for one (model, alpha) evaluation."""

    alpha: float
    tau: float
    n_samples: int
    answer_accuracy: float
    metrics: Dict[str, Dict[str, Dict[str, float]]]  # criterion -> policy -> P/R/F1+counts
    per_family: Dict[str, Dict[str, Dict[str, Dict[str, float]]]]
    attention_mass_last: Optional[float]
    best_step_histogram: Dict[str, List[int]]
    empty_detection_rate_last: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "tau": self.tau,
            "n_samples": self.n_samples,
            "answer_accuracy": self.answer_accuracy,
            "metrics": self.metrics,
            "per_family": self.per_family,
            "attention_mass_last": self.attention_mass_last,
            "best_step_histogram": self.best_step_histogram,
            "empty_detection_rate_last": self.empty_detection_rate_last,
        }


def _metric_block(counts: MatchCounts) -> Dict[str, float]:
    p, r, f1 = prf(counts)
    return {
        "precision": p,
        "recall": r,
        "f1": f1,
        "tp": counts.tp,
        "fp": counts.fp,
        "fn": counts.fn,
    }


def evaluate_samples(
    samples: Sequence[dict],
    alpha: float,
    stride: int = 8,
    tau: float = 0.5,
    n_steps: Optional[int] = None,
) -> GroundingReport:
    """Score a list of evaluated samples.

    Each sample dict needs: "attention" (T, H, W), "gt_boxes" (list of boxes),
    "family" (str), "correct" (bool).
    """
    totals = {c: {p: MatchCounts(criterion=c) for p in POLICIES} for c in CRITERIA}
    fam_totals: Dict[str, Dict[str, Dict[str, MatchCounts]]] = {}
    histogram: Dict[str, List[int]] = {}
    masses: List[float] = []
    n_correct = 0
    n_empty_last = 0
    for sample in samples:
        attention = np.asarray(sample["attention"], dtype=np.float64)
        steps = attention.shape[0] if n_steps is None else n_steps
        step_dets = [postprocess(attention[t], alpha, stride, step=t) for t in range(steps)]
        gts = [tuple(b) for b in sample["gt_boxes"]]
        family = sample.get("family", "all")
        n_correct += bool(sample.get("correct", False))
        if not step_dets[-1].boxes:
            n_empty_last += 1
        mass = attention_mass(attention[-1], gts, stride)
        if mass is not None:
            masses.append(mass)
        fam = fam_totals.setdefault(
            family,
            {c: {p: MatchCounts(criterion=c) for p in POLICIES} for c in CRITERIA},
        )
        for criterion in CRITERIA:
            step, counts = best_step(step_dets, gts, criterion, tau)
            histogram.setdefault(criterion, [0] * steps)
            histogram[criterion][step] += 1
            totals[criterion]["best"] += counts
            fam[criterion]["best"] += counts
            _, last_counts = last_step(step_dets, gts, criterion, tau)
            totals[criterion]["last"] += last_counts
            fam[criterion]["last"] += last_counts
    n = len(samples)
    return GroundingReport(
        alpha=alpha,
        tau=tau,
        n_samples=n,
        answer_accuracy=n_correct / n if n else 0.0,
        metrics={
            c: {p: _metric_block(totals[c][p]) for p in POLICIES} for c in CRITERIA
        },
        per_family={
            fam: {c: {p: _metric_block(blocks[c][p]) for p in POLICIES} for c in CRITERIA}
            for fam, blocks in fam_totals.items()
        },
        attention_mass_last=float(np.mean(masses)) if masses else None,
        best_step_histogram=histogram,
        empty_detection_rate_last=n_empty_last / n if n else 0.0,
    )
