"""Evaluation orchestration: run a checkpoint over a validation split and
score its attention maps for grounding at one or more opacity values."""

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .grounding import GroundingReport, evaluate_samples
from .model import VqaModel, count_parameters
from .train import PreparedData, TrainConfig, load_checkpoint, load_splits, make_batch, prepare_data
from .text import Vocabulary

EVAL_BATCH = 256


def collect_traces(model: VqaModel, data: PreparedData) -> List[dict]:
    """Forward the whole split; one sample dict per question.

    Keys: attention (T, H, W), word_attention, mask_weights, has_mask,
    gt_boxes, family, correct, predicted, target, grounding_empty.
    """
    model.eval()
    samples: List[dict] = []
    with torch.no_grad():
        for start in range(0, len(data), EVAL_BATCH):
            idx = np.arange(start, min(start + EVAL_BATCH, len(data)))
            tokens, lengths, feats, targets, layouts = make_batch(data, idx)
            out = model(tokens, lengths, feats, layouts)
            preds = out.answer_logits.argmax(dim=-1)
            for row, i in enumerate(idx):
                samples.append(
                    {
                        "index": int(i),
                        "attention": out.attention[row].numpy().copy(),
                        "word_attention": out.word_attention[row].numpy().copy(),
                        "mask_weights": out.mask_weights[row].numpy().copy(),
                        "has_mask": out.has_mask[row].numpy().copy(),
                        "gt_boxes": data.gt_boxes[i],
                        "family": data.families[i],
                        "correct": bool(preds[row] == targets[row]),
                        "predicted": int(preds[row]),
                        "target": int(targets[row]),
                        "grounding_empty": len(data.gt_boxes[i]) == 0,
                    }
                )
    return samples


def evaluate_checkpoint(
    checkpoint_path,
    alphas: Sequence[float] = (7.0,),
    data_dir: Optional[str] = None,
    stride: int = 8,
) -> dict:
    """Full evaluation of a stored model; returns the report dict."""
    model, config, vocab, header = load_checkpoint(checkpoint_path)
    if data_dir:
        config.data_dir = str(data_dir)
    _, val_ds = load_splits(config)
    data = prepare_data(val_ds, vocab, config.feature_mode, config.mode, config.steps)
    samples = collect_traces(model, data)
    accuracy = float(np.mean([s["correct"] for s in samples]))
    reports: Dict[str, dict] = {}
    for alpha in alphas:
        rep = evaluate_samples(samples, alpha=alpha, stride=stride)
        reports[f"{alpha:g}"] = rep.to_dict()
    return {
        "checkpoint": str(checkpoint_path),
        "checkpoint_epoch": header["epoch"],
        "checkpoint_val_accuracy": header["val_accuracy"],
        "answer_accuracy": accuracy,
        "param_count": count_parameters(model),
        "n_samples": len(samples),
        "alphas": reports,
    }


def best_alpha(report: dict, criterion: str = "iou", policy: str = "best") -> dict:
    """Pick the alpha block with the highest micro F1 for a criterion/policy."""
    best_key, best_f1 = None, -1.0
    for key, rep in report["alphas"].items():
        f1 = rep["metrics"][criterion][policy]["f1"]
        if f1 > best_f1:
            best_key, best_f1 = key, f1
    block = dict(report["alphas"][best_key])
    block["alpha_selected"] = float(best_key)
    return block


def write_report(report: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
