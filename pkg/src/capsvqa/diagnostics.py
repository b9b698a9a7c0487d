"""Capsule-selection diagnostics for questions with no grounding evidence.

For every empty-grounding question, record which capsule type the final
masked reasoning step picked and whether the final attention map produced any
detection. A dominant capsule on such questions indicates the model routes
"no evidence" scenes to a dedicated background capsule.
"""

from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .grounding import postprocess


@dataclass
class DiagnosticsRecord:
    index: int
    selected_capsule: Optional[int]  # None when the model never masks
    attention_entropy: float
    grounding_empty: bool
    empty_detection_last: bool


def attention_entropy(attention: np.ndarray) -> float:
    a = np.asarray(attention, dtype=np.float64).reshape(-1)
    a = np.clip(a, 1e-12, None)
    a = a / a.sum()
    return float(-(a * np.log(a)).sum())


def final_mask_argmax(mask_weights: np.ndarray, has_mask: np.ndarray) -> Optional[int]:
    """Capsule picked at the last step that actually masked."""
    steps = np.nonzero(has_mask)[0]
    if len(steps) == 0:
        return None
    return int(np.argmax(mask_weights[steps[-1]]))


def diagnose_samples(samples: Sequence[dict], alpha: float, stride: int = 8) -> dict:
    """Build DiagnosticsRecords plus the empty-grounding summary.

    `samples` are the dicts produced by evalrun.collect_traces.
    """
    records: List[DiagnosticsRecord] = []
    for s in samples:
        attention = np.asarray(s["attention"], dtype=np.float64)
        last = attention[-1]
        dets = postprocess(last, alpha=alpha, stride=stride)
        records.append(
            DiagnosticsRecord(
                index=s["index"],
                selected_capsule=final_mask_argmax(s["mask_weights"], s["has_mask"]),
                attention_entropy=attention_entropy(last),
                grounding_empty=bool(s["grounding_empty"]),
                empty_detection_last=not dets.boxes,
            )
        )
    empty = [r for r in records if r.grounding_empty]
    histogram: Counter = Counter(
        r.selected_capsule for r in empty if r.selected_capsule is not None
    )
    mode_capsule, mode_count = (None, 0)
    if histogram:
        mode_capsule, mode_count = histogram.most_common(1)[0]
    summary = {
        "alpha": alpha,
        "n_questions": len(records),
        "n_empty_grounding": len(empty),
        "capsule_histogram": {str(k): v for k, v in sorted(histogram.items())},
        "mode_capsule": mode_capsule,
        "mode_frequency": mode_count / len(empty) if empty else 0.0,
        "empty_detection_rate": (
            float(np.mean([r.empty_detection_last for r in empty])) if empty else 0.0
        ),
        "mean_entropy_empty": (
            float(np.mean([r.attention_entropy for r in empty])) if empty else 0.0
        ),
        "mean_entropy_all": float(np.mean([r.attention_entropy for r in records])),
    }
    return {"records": records, "summary": summary}


def records_to_dicts(records: Sequence[DiagnosticsRecord]) -> List[Dict]:
    return [
        {
            "index": r.index,
            "selected_capsule": r.selected_capsule,
            "attention_entropy": r.attention_entropy,
            "grounding_empty": r.grounding_empty,
            "empty_detection_last": r.empty_detection_last,
        }
        for r in records
    ]
