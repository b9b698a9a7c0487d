"""Attention visualizations: per-step heat overlays with predicted (red) and
ground-truth (green) boxes plus the word-attention bar."""

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib import patches

from .grounding import postprocess
from .train import load_checkpoint, load_splits, prepare_data
from .evalrun import collect_traces
from .world import render_raster

log = logging.getLogger(__name__)


def _active_steps(sample: dict, layout: Optional[List[str]]) -> List[int]:
    """Steps to draw; trailing NoOp padding is stripped for layout models."""
    steps = sample["attention"].shape[0]
    if layout is None:
        return list(range(steps))
    active = [t for t, name in enumerate(layout) if name != "NoOp"]
    return active or [0]


def draw_step(ax, image, attention, det_boxes, gt_boxes, stride: int = 8) -> None:
    ax.imshow(image)
    h, w = attention.shape
    heat = np.kron(attention, np.ones((stride, stride)))
    ax.imshow(heat, cmap="viridis", alpha=0.5, vmin=0.0)
    for (x, y, bw, bh) in det_boxes:
        ax.add_patch(patches.Rectangle((x - 0.5, y - 0.5), bw, bh, fill=False, edgecolor="red", lw=1.5))
    for (x, y, bw, bh) in gt_boxes:
        ax.add_patch(patches.Rectangle((x - 0.5, y - 0.5), bw, bh, fill=False, edgecolor="lime", lw=1.5))
    ax.set_xticks([])
    ax.set_yticks([])


def render_sample(
    sample: dict,
    image: np.ndarray,
    tokens: Sequence[str],
    out_dir: Path,
    prefix: str,
    alpha: float,
    layout: Optional[List[str]] = None,
    stride: int = 8,
) -> List[Path]:
    """One image per reasoning step plus a composite; returns written paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = _active_steps(sample, layout)
    written = []
    for t in steps:
        attention = sample["attention"][t]
        dets = postprocess(attention, alpha=alpha, stride=stride, step=t)
        fig, (ax_img, ax_words) = plt.subplots(
            2, 1, figsize=(4, 5.4), gridspec_kw={"height_ratios": [4, 1]}
        )
        draw_step(ax_img, image, attention, dets.boxes, sample["gt_boxes"], stride)
        title = f"step {t}"
        if layout is not None:
            title += f" ({layout[t]})"
        ax_img.set_title(title, fontsize=9)
        word_attn = sample["word_attention"][t][: len(tokens)]
        ax_words.bar(range(len(tokens)), word_attn, color="steelblue")
        ax_words.set_xticks(range(len(tokens)))
        ax_words.set_xticklabels(tokens, rotation=90, fontsize=6)
        ax_words.set_ylim(0, 1)
        fig.tight_layout()
        path = out_dir / f"{prefix}_step{t}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

    fig, axes = plt.subplots(1, len(steps), figsize=(3 * len(steps), 3.4))
    if len(steps) == 1:
        axes = [axes]
    for ax, t in zip(axes, steps):
        attention = sample["attention"][t]
        dets = postprocess(attention, alpha=alpha, stride=stride, step=t)
        draw_step(ax, image, attention, dets.boxes, sample["gt_boxes"], stride)
        ax.set_title(f"step {t}", fontsize=9)
    fig.suptitle(" ".join(tokens), fontsize=9)
    fig.tight_layout()
    path = out_dir / f"{prefix}_composite.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)
    return written


def visualize_checkpoint(
    checkpoint_path,
    sample_ids: Sequence[int],
    out_dir,
    alpha: Optional[float] = None,
    data_dir: Optional[str] = None,
) -> List[Path]:
    """Render attention visualizations for validation samples by index."""
    from .reasoners import layout_from_program

    model, config, vocab, _ = load_checkpoint(checkpoint_path)
    if data_dir:
        config.data_dir = str(data_dir)
    if alpha is None:
        alpha = config.alpha
    _, val_ds = load_splits(config)
    data = prepare_data(val_ds, vocab, config.feature_mode, config.mode, config.steps)
    out_dir = Path(out_dir)
    valid_ids = [i for i in sample_ids if 0 <= i < len(data)]
    for missing in set(sample_ids) - set(valid_ids):
        log.warning("skipping unknown sample id %s", missing)
    if not valid_ids:
        return []
    samples = {s["index"]: s for s in collect_traces(model, data)}
    written: List[Path] = []
    for i in valid_ids:
        qa = val_ds.questions[i]
        scene = val_ds.scenes[qa.scene_seed]
        layout = None
        if config.mode == "snmn":
            layout = [name for name, _ in layout_from_program(qa.program, config.steps)]
        written += render_sample(
            samples[i],
            render_raster(scene),
            list(qa.question_tokens),
            out_dir,
            prefix=f"sample{i}",
            alpha=alpha,
            layout=layout,
        )
    return written
