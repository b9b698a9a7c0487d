"""Dataset generation, serialization, and validation.

Layout of a dataset directory:
    scenes.jsonl     one scene per line
    questions.jsonl  one QA record per line
    meta.json        generation parameters
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .programs import execute_program, grounding_objects
from .questions import QAGenerationError, QAPair, scene_questions
from .scene import (
    DEFAULT_CONFIG,
    Scene,
    WorldConfig,
    gen_scene,
    render_raster,
    tight_bbox_of_mask,
)

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    scenes: Dict[int, Scene]
    questions: List[QAPair]
    meta: dict

    def __len__(self) -> int:
        return len(self.questions)


def gen_dataset(
    n_scenes: int,
    qa_per_scene: int = 10,
    seed: int = 0,
    config: WorldConfig = DEFAULT_CONFIG,
) -> Dataset:
    """Generate scenes and QA pairs; pure function of (seed, config)."""
    scenes: Dict[int, Scene] = {}
    questions: List[QAPair] = []
    for i in range(n_scenes):
        scene_seed = seed + i
        scene = gen_scene(scene_seed, config)
        rng = np.random.default_rng([seed, scene_seed, 2])
        try:
            qas = scene_questions(scene, qa_per_scene, rng)
        except QAGenerationError as exc:
            log.warning("skipping scene %d: %s", scene_seed, exc)
            continue
        scenes[scene_seed] = scene
        questions.extend(qas)
    meta = {
        "n_scenes": n_scenes,
        "qa_per_scene": qa_per_scene,
        "seed": seed,
        "grid_size": config.grid_size,
        "raster_size": config.raster_size,
    }
    return Dataset(scenes=scenes, questions=questions, meta=meta)


def write_dataset(ds: Dataset, out_dir: Path, mode: str = "oracle") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "scenes.jsonl", "w") as f:
        for seed in sorted(ds.scenes):
            f.write(json.dumps(ds.scenes[seed].to_dict()) + "\n")
    with open(out_dir / "questions.jsonl", "w") as f:
        for qa in ds.questions:
            f.write(json.dumps(qa.to_dict()) + "\n")
    meta = dict(ds.meta, mode=mode)
    with open(out_dir / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def read_dataset(data_dir: Path) -> Dataset:
    data_dir = Path(data_dir)
    scenes: Dict[int, Scene] = {}
    with open(data_dir / "scenes.jsonl") as f:
        for line in f:
            scene = Scene.from_dict(json.loads(line))
            scenes[scene.seed] = scene
    questions: List[QAPair] = []
    with open(data_dir / "questions.jsonl") as f:
        for line in f:
            questions.append(QAPair.from_dict(json.loads(line)))
    with open(data_dir / "meta.json") as f:
        meta = json.load(f)
    return Dataset(scenes=scenes, questions=questions, meta=meta)


def validate_qa(qa: QAPair, scene: Scene, config: WorldConfig = DEFAULT_CONFIG) -> List[str]:
    """Re-derive everything a QA record claims; returns a list of violations."""
    problems = []
    answer, trace = execute_program(qa.program, scene)
    if answer != qa.answer:
        problems.append(f"answer mismatch: stored {qa.answer!r}, re-executed {answer!r}")
    ids = grounding_objects(qa.program, trace)
    if ids != qa.grounding_ids:
        problems.append(f"grounding ids mismatch: stored {sorted(qa.grounding_ids)}, derived {sorted(ids)}")
    expected_boxes = tuple(scene.objects[i].bbox for i in sorted(ids))
    if expected_boxes != qa.grounding_boxes:
        problems.append("grounding boxes do not match object bboxes in id order")
    return problems


def validate_scene(scene: Scene, config: WorldConfig = DEFAULT_CONFIG) -> List[str]:
    problems = []
    img = render_raster(scene, config)
    for obj in scene.objects:
        x, y, w, h = obj.bbox
        if x < 0 or y < 0 or x + w > config.raster_size or y + h > config.raster_size:
            problems.append(f"object {obj.id} bbox outside raster")
        mask = np.all(img == np.array(_rgb(obj.color)), axis=-1)
        mask[: y, :] = False
        mask[y + h :, :] = False
        mask[:, : x] = False
        mask[:, x + w :] = False
        if not mask.any():
            problems.append(f"object {obj.id} rendered no pixels")
            continue
        tight = tight_bbox_of_mask(mask)
        if tight != obj.bbox:
            problems.append(f"object {obj.id} tight bbox {tight} != stored {obj.bbox}")
    for a in scene.objects:
        for b in scene.objects:
            if a.id < b.id and _boxes_intersect(a.bbox, b.bbox):
                problems.append(f"objects {a.id} and {b.id} bboxes intersect")
    return problems


def _rgb(color: str):
    from .scene import COLOR_RGB

    return COLOR_RGB[color]


def _boxes_intersect(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def validate_dataset(ds: Dataset, config: WorldConfig = DEFAULT_CONFIG) -> Tuple[int, List[str]]:
    """Validate every scene and QA record; returns (n_checked, problems)."""
    problems: List[str] = []
    for scene in ds.scenes.values():
        for p in validate_scene(scene, config):
            problems.append(f"scene {scene.seed}: {p}")
    for k, qa in enumerate(ds.questions):
        scene = ds.scenes[qa.scene_seed]
        for p in validate_qa(qa, scene, config):
            problems.append(f"qa {k}: {p}")
    return len(ds.questions), problems
