"""Training harness: config parsing, data preparation, the answer-supervised
training loop, and self-contained binary checkpoints.

Supervision is answer cross-entropy only; grounding boxes are carried through
the data pipeline for evaluation but never touch the loss. Three independent
seeds control data generation, parameter init, and batch shuffling, and all
arithmetic is float64, so runs are exactly reproducible.
"""

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .model import ModelConfig, VqaModel, count_parameters, init_parameters
from .reasoners import SNMN_STEPS, layout_ids
from .text import Vocabulary, pad_batch
from .world import (
    ANSWERS,
    Dataset,
    ORACLE_CHANNELS,
    gen_dataset,
    read_dataset,
    render_oracle,
    render_raster,
)

log = logging.getLogger(__name__)

VAL_SEED_OFFSET = 1_000_000


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "mac"
    steps: int = 4
    num_caps: int = 8
    d: int = 64
    d_embed: int = 32
    mask_mode: str = "soft"
    mask_sharing: str = "shared"
    mask_head: str = "direct"
    alpha: float = 7.0
    learning_rate: float = 1e-3
    lr_decay_epoch: int = 0  # 0 disables the single step decay
    lr_decay_factor: float = 0.3
    batch_size: int = 64
    epochs: int = 30
    grad_clip: float = 8.0
    data_seed: int = 0
    init_seed: int = 0
    shuffle_seed: int = 0
    feature_mode: str = "oracle"
    train_scenes: int = 2000
    val_scenes: int = 200
    qa_per_scene: int = 10
    routing_iters: int = 3
    max_len: int = 24
    data_dir: str = ""

    def validate(self) -> None:
        if self.feature_mode not in ("oracle", "raster"):
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")
        if self.mode == "snmn" and self.steps != SNMN_STEPS:
            raise ValueError("snmn mode uses the fixed expert-layout step budget")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        # ModelConfig.validate covers mode/mask combinations.
        self.model_config(vocab_size=2, feature_dim=1).validate()

    def model_config(self, vocab_size: int, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            n_answers=len(ANSWERS),
            feature_dim=feature_dim,
            mode=self.mode,
            steps=self.steps,
            num_caps=self.num_caps,
            d=self.d,
            d_embed=self.d_embed,
            mask_mode=self.mask_mode,
            mask_sharing=self.mask_sharing,
            mask_head=self.mask_head,
            routing_iters=self.routing_iters,
            max_len=self.max_len,
        )

    def to_file(self, path) -> None:
        with open(path, "w") as f:
            for fld in dataclasses.fields(self):
                f.write(f"{fld.name} = {getattr(self, fld.name)}\n")

    @staticmethod
    def from_file(path) -> "TrainConfig":
        values: Dict[str, str] = {}
        with open(path) as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"bad config line: {line!r}")
                key, val = (part.strip() for part in line.split("=", 1))
                values[key] = val
        return TrainConfig.from_dict(values)

    @staticmethod
    def from_dict(values: Dict[str, str]) -> "TrainConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
        for key, val in values.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            typ = fields[key].type
            if typ == "int" or typ is int:
                kwargs[key] = int(val)
            elif typ == "float" or typ is float:
                kwargs[key] = float(val)
            else:
                kwargs[key] = str(val)
        return TrainConfig(**kwargs)


def feature_dim(feature_mode: str, grid: int = 8, raster: int = 64) -> int:
    if feature_mode == "oracle":
        return ORACLE_CHANNELS
    patch = raster // grid
    return patch * patch * 3


def scene_features(scene, feature_mode: str) -> np.ndarray:
    """(grid, grid, d_f) float64 features for one scene."""
    if feature_mode == "oracle":
        return render_oracle(scene)
    img = render_raster(scene).astype(np.float64) / 255.0
    g = 8
    patch = img.shape[0] // g
    # Non-overlapping patches, flattened per cell.
    return (
        img.reshape(g, patch, g, patch, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g, g, patch * patch * 3)
    )


@dataclass
class PreparedData:
    tokens: List[List[int]]
    lengths: List[int]
    targets: np.ndarray
    features: np.ndarray  # (n_scenes, g, g, d_f)
    scene_index: np.ndarray  # question -> row of features
    layouts: Optional[np.ndarray]  # (n, steps) or None for mac
    gt_boxes: List[List[Tuple[int, int, int, int]]]
    families: List[str]
    scene_seeds: List[int]

    def __len__(self) -> int:
        return len(self.tokens)


def prepare_data(
    ds: Dataset, vocab: Vocabulary, feature_mode: str, mode: str, steps: int
) -> PreparedData:
    seeds = sorted(ds.scenes)
    seed_row = {s: i for i, s in enumerate(seeds)}
    features = np.stack([scene_features(ds.scenes[s], feature_mode) for s in seeds])
    tokens = [vocab.encode(q.question_tokens) for q in ds.questions]
    lengths = [len(t) for t in tokens]
    targets = np.array([ANSWERS.index(q.answer) for q in ds.questions])
    layouts = None
    if mode == "snmn":
        layouts = np.array([layout_ids(q.program, steps) for q in ds.questions])
    return PreparedData(
        tokens=tokens,
        lengths=lengths,
        targets=targets,
        features=features,
        scene_index=np.array([seed_row[q.scene_seed] for q in ds.questions]),
        layouts=layouts,
        gt_boxes=[list(q.grounding_boxes) for q in ds.questions],
        families=[q.family for q in ds.questions],
        scene_seeds=[q.scene_seed for q in ds.questions],
    )


def load_splits(config: TrainConfig) -> Tuple[Dataset, Dataset]:
    """Train/val datasets, from data_dir if set, else generated from seeds."""
    if config.data_dir:
        root = Path(config.data_dir)
        return read_dataset(root / "train"), read_dataset(root / "val")
    train = gen_dataset(config.train_scenes, config.qa_per_scene, config.data_seed)
    val = gen_dataset(
        config.val_scenes, config.qa_per_scene, config.data_seed + VAL_SEED_OFFSET
    )
    return train, val


def make_batch(data: PreparedData, idx: np.ndarray):
    tokens, lengths = pad_batch([data.tokens[i] for i in idx])
    feats = torch.from_numpy(data.features[data.scene_index[idx]])
    targets = torch.from_numpy(data.targets[idx])
    layouts = None
    if data.layouts is not None:
        layouts = torch.from_numpy(data.layouts[idx])
    return tokens, lengths, feats, targets, layouts


def evaluate_accuracy(model: VqaModel, data: PreparedData, batch_size: int = 256) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            tokens, lengths, feats, targets, layouts = make_batch(data, idx)
            out = model(tokens, lengths, feats, layouts)
            correct += int((out.answer_logits.argmax(dim=-1) == targets).sum())
    return correct / len(data)


def train(
    config: TrainConfig,
    out_dir,
    keep_epoch_checkpoints: bool = False,
) -> dict:
    """Train a model per config; returns a summary dict.

    Writes to out_dir: vocab.txt, best.ckpt, final.ckpt, log.jsonl, config.cfg.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, val_ds = load_splits(config)
    vocab = Vocabulary(t for q in train_ds.questions for t in q.question_tokens)
    vocab.save(out_dir / "vocab.txt")
    config.to_file(out_dir / "config.cfg")

    d_f = feature_dim(config.feature_mode)
    train_data = prepare_data(train_ds, vocab, config.feature_mode, config.mode, config.steps)
    val_data = prepare_data(val_ds, vocab, config.feature_mode, config.mode, config.steps)

    model = VqaModel(config.model_config(len(vocab), d_f))
    init_parameters(model, config.init_seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(config.shuffle_seed)

    best_acc = -1.0
    best_epoch = -1
    history: List[dict] = []
    log_path = out_dir / "log.jsonl"
    with open(log_path, "w") as log_file:
        for epoch in range(1, config.epochs + 1):
            t0 = time.time()
            if config.lr_decay_epoch and epoch == config.lr_decay_epoch:
                for group in optimizer.param_groups:
                    group["lr"] *= config.lr_decay_factor
            model.train()
            order = shuffle_rng.permutation(len(train_data))
            losses = []
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                tokens, lengths, feats, targets, layouts = make_batch(train_data, idx)
                optimizer.zero_grad()
                out = model(tokens, lengths, feats, layouts)
                loss = F.cross_entropy(out.answer_logits, targets)
                if not torch.isfinite(loss):
                    dump = out_dir / "divergence.json"
                    dump.write_text(
                        json.dumps(
                            {
                                "epoch": epoch,
                                "step": start // config.batch_size,
                                "loss": float(loss),
                                "recent_losses": losses[-20:],
                            },
                            indent=2,
                        )
                    )
                    raise TrainingDivergedError(f"non-finite loss; dump at {dump}")
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                losses.append(float(loss.detach()))
            val_acc = evaluate_accuracy(model, val_data)
            entry = {
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "val_accuracy": val_acc,
                "seconds": time.time() - t0,
            }
            history.append(entry)
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()
            log.info(
                "epoch %d: loss %.4f, val acc %.4f (%.1fs)",
                epoch, entry["loss"], val_acc, entry["seconds"],
            )
            if keep_epoch_checkpoints:
                save_checkpoint(out_dir / f"epoch{epoch:03d}.ckpt", model, config, vocab, epoch, val_acc)
            if val_acc > best_acc:
                best_acc = val_acc
                best_epoch = epoch
                save_checkpoint(out_dir / "best.ckpt", model, config, vocab, epoch, val_acc)
    save_checkpoint(out_dir / "final.ckpt", model, config, vocab, config.epochs, val_acc)
    return {
        "best_val_accuracy": best_acc,
        "best_epoch": best_epoch,
        "final_val_accuracy": val_acc,
        "param_count": count_parameters(model),
        "history": history,
        "out_dir": str(out_dir),
    }


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(path, model: VqaModel, config: TrainConfig, vocab: Vocabulary,
                    epoch: int, val_accuracy: float) -> None:
    """Self-contained binary checkpoint: a JSON header line (manifest, config,
    vocab, metadata) followed by the flat float64 parameter payload."""
    state = model.state_dict()
    names = sorted(state)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        tensor = state[name].detach().to(torch.float64).contiguous()
        blob = tensor.numpy().tobytes()
        manifest.append(
            {"name": name, "shape": list(tensor.shape), "offset": offset, "numel": tensor.numel()}
        )
        offset += len(blob)
        blobs.append(blob)
    header = {
        "config": dataclasses.asdict(config),
        "epoch": epoch,
        "val_accuracy": val_accuracy,
        "vocab": vocab.words,
        "answers": list(ANSWERS),
        "feature_dim": feature_dim(config.feature_mode),
        "manifest": manifest,
        "payload_bytes": offset,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Tuple[VqaModel, TrainConfig, Vocabulary, dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        payload = f.read()
    if len(payload) != header["payload_bytes"]:
        raise ValueError("checkpoint payload truncated")
    config = TrainConfig(**header["config"])
    vocab = Vocabulary([])
    vocab.words = list(header["vocab"])
    vocab.index = {w: i for i, w in enumerate(vocab.words)}
    model = VqaModel(config.model_config(len(vocab), header["feature_dim"]))
    state = {}
    for entry in header["manifest"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["numel"] * 8]
        arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model, config, vocab, header
