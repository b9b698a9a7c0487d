"""Template-based question generation with exact grounding labels.

Five question families (exist / count / compare_number / compare_attribute /
query_attribute) are instantiated against a scene by sampling attribute
bindings, executing the program, and deriving grounding boxes from the
program trace. Ill-posed instantiations (non-unique references) are resampled.
"""

from dataclasses import dataclass
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .programs import (
    ATTRIBUTES,
    DIRECTIONS,
    FAMILIES,
    IllPosedQuestionError,
    Program,
    ProgramNode,
    execute_program,
    grounding_objects,
)
from .scene import COLORS, SHAPES, SIZES, Scene, SceneObject

PLURAL_SHAPE = {"square": "squares", "circle": "circles", "triangle": "triangles"}
DIRECTION_TOKENS = {
    "left": ("left", "of"),
    "right": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
}


@dataclass(frozen=True)
class QAPair:
    scene_seed: int
    question_tokens: Tuple[str, ...]
    program: Program
    answer: str
    grounding_ids: FrozenSet[int]
    grounding_boxes: Tuple[Tuple[int, int, int, int], ...]
    family: str

    def to_dict(self) -> dict:
        ids = sorted(self.grounding_ids)
        return {
            "scene_seed": self.scene_seed,
            "tokens": list(self.question_tokens),
            "program": [n.to_dict() for n in self.program],
            "answer": self.answer,
            "grounding_ids": ids,
            "grounding_boxes": [list(b) for b in self.grounding_boxes],
            "family": self.family,
        }

    @staticmethod
    def from_dict(d: dict) -> "QAPair":
        return QAPair(
            scene_seed=d["scene_seed"],
            question_tokens=tuple(d["tokens"]),
            program=tuple(ProgramNode.from_dict(n) for n in d["program"]),
            answer=d["answer"],
            grounding_ids=frozenset(d["grounding_ids"]),
            grounding_boxes=tuple(tuple(b) for b in d["grounding_boxes"]),
            family=d["family"],
        )


@dataclass(frozen=True)
class FilterSpec:
    size: Optional[str] = None
    color: Optional[str] = None
    shape: Optional[str] = None

    @property
    def attrs(self) -> Tuple[str, ...]:
        out = []
        if self.size is not None:
            out.append("size")
        if self.color is not None:
            out.append("color")
        if self.shape is not None:
            out.append("shape")
        return tuple(out)

    def words(self) -> List[str]:
        out = []
        if self.size is not None:
            out.append(self.size)
        if self.color is not None:
            out.append(self.color)
        return out

    def singular(self) -> List[str]:
        return self.words() + [self.shape if self.shape is not None else "thing"]

    def plural(self) -> List[str]:
        noun = PLURAL_SHAPE[self.shape] if self.shape is not None else "things"
        return self.words() + [noun]

    def matches(self, obj: SceneObject) -> bool:
        return (
            (self.size is None or obj.size == self.size)
            and (self.color is None or obj.color == self.color)
            and (self.shape is None or obj.shape == self.shape)
        )

    def chain(self, nodes: List[ProgramNode], base: int) -> int:
        """Append filter nodes onto `nodes` starting from node index `base`;
        returns the index of the last node of the chain."""
        idx = base
        if self.size is not None:
            nodes.append(ProgramNode("filter_size", (self.size,), (idx,)))
            idx = len(nodes) - 1
        if self.color is not None:
            nodes.append(ProgramNode("filter_color", (self.color,), (idx,)))
            idx = len(nodes) - 1
        if self.shape is not None:
            nodes.append(ProgramNode("filter_shape", (self.shape,), (idx,)))
            idx = len(nodes) - 1
        return idx


def _from_object(obj: SceneObject, keep: Sequence[str]) -> FilterSpec:
    return FilterSpec(
        size=obj.size if "size" in keep else None,
        color=obj.color if "color" in keep else None,
        shape=obj.shape if "shape" in keep else None,
    )


def sample_filter(
    rng: np.random.Generator, scene: Scene, min_attrs: int = 1, anchor_prob: float = 0.55
) -> FilterSpec:
    """Sample attribute constraints, anchored to a real object half the time
    so answers are not dominated by empty filter sets."""
    while True:
        if scene.objects and rng.random() < anchor_prob:
            obj = scene.objects[rng.integers(len(scene.objects))]
            keep = [a for a in ATTRIBUTES if rng.random() < 0.5]
            spec = _from_object(obj, keep)
        else:
            spec = FilterSpec(
                size=SIZES[rng.integers(len(SIZES))] if rng.random() < 0.4 else None,
                color=COLORS[rng.integers(len(COLORS))] if rng.random() < 0.6 else None,
                shape=SHAPES[rng.integers(len(SHAPES))] if rng.random() < 0.6 else None,
            )
        if len(spec.attrs) >= min_attrs:
            return spec


def unique_ref(rng: np.random.Generator, scene: Scene, obj: SceneObject) -> Optional[FilterSpec]:
    """Smallest attribute subset that singles out `obj`, or None."""
    subsets = [
        keep
        for r in (1, 2, 3)
        for keep in _combinations(ATTRIBUTES, r)
    ]
    # Shuffle within each subset size so phrasing varies.
    order = sorted(range(len(subsets)), key=lambda i: (len(subsets[i]), rng.random()))
    for i in order:
        spec = _from_object(obj, subsets[i])
        if sum(spec.matches(o) for o in scene.objects) == 1:
            return spec
    return None


def _combinations(items: Sequence[str], r: int) -> List[Tuple[str, ...]]:
    out: List[Tuple[str, ...]] = []
    n = len(items)

    def rec(start: int, acc: Tuple[str, ...]) -> None:
        if len(acc) == r:
            out.append(acc)
            return
        for i in range(start, n):
            rec(i + 1, acc + (items[i],))

    rec(0, ())
    return out


def sample_unique_ref(
    rng: np.random.Generator, scene: Scene, exclude: Tuple[int, ...] = ()
) -> Optional[Tuple[SceneObject, FilterSpec]]:
    candidates = [o for o in scene.objects if o.id not in exclude]
    for i in rng.permutation(len(candidates)):
        obj = candidates[int(i)]
        spec = unique_ref(rng, scene, obj)
        if spec is not None:
            return obj, spec
    return None


def unique_ref_without(
    rng: np.random.Generator, scene: Scene, obj: SceneObject, excluded_attr: str
) -> Optional[FilterSpec]:
    """Unique reference to `obj` that never mentions `excluded_attr`."""
    pool = [a for a in ATTRIBUTES if a != excluded_attr]
    subsets = [keep for r in (1, 2) for keep in _combinations(pool, r)]
    order = sorted(range(len(subsets)), key=lambda i: (len(subsets[i]), rng.random()))
    for i in order:
        spec = _from_object(obj, subsets[i])
        if sum(spec.matches(o) for o in scene.objects) == 1:
            return spec
    return None


def _valid_directions(target: SceneObject, ref: SceneObject) -> List[str]:
    dirs = []
    if target.cell[1] < ref.cell[1]:
        dirs.append("left")
    if target.cell[1] > ref.cell[1]:
        dirs.append("right")
    if target.cell[0] < ref.cell[0]:
        dirs.append("above")
    if target.cell[0] > ref.cell[0]:
        dirs.append("below")
    return dirs


def _pick_direction(rng, scene, ref):
    """Direction anchored to a real spatial relation when possible."""
    others = [o for o in scene.objects if o.id != ref.id]
    if others and rng.random() < 0.7:
        target = others[rng.integers(len(others))]
        dirs = _valid_directions(target, ref)
        if dirs:
            return dirs[rng.integers(len(dirs))]
    return DIRECTIONS[rng.integers(len(DIRECTIONS))]


# --- template builders ------------------------------------------------------
# Each builder returns (tokens, program) or None when the binding attempt
# should be resampled. IllPosedQuestionError from execution is handled by the
# caller the same way.


def _t_exist_plain(rng, scene):
    spec = sample_filter(rng, scene, min_attrs=1)
    nodes = [ProgramNode("scene")]
    idx = spec.chain(nodes, 0)
    nodes.append(ProgramNode("exist", (), (idx,)))
    return ["is", "there", "a"] + spec.singular(), nodes


def _t_exist_relate(rng, scene):
    picked = sample_unique_ref(rng, scene)
    if picked is None:
        return None
    ref_obj, ref_spec = picked
    direction = _pick_direction(rng, scene, ref_obj)
    spec = sample_filter(rng, scene, min_attrs=1)
    nodes = [ProgramNode("scene")]
    ridx = ref_spec.chain(nodes, 0)
    nodes.append(ProgramNode("unique", (), (ridx,)))
    nodes.append(ProgramNode("relate", (direction,), (len(nodes) - 1,)))
    idx = spec.chain(nodes, len(nodes) - 1)
    nodes.append(ProgramNode("exist", (), (idx,)))
    tokens = (
        ["is", "there", "a"]
        + spec.singular()
        + list(DIRECTION_TOKENS[direction])
        + ["the"]
        + ref_spec.singular()
    )
    return tokens, nodes


def _t_exist_or(rng, scene):
    a = sample_filter(rng, scene, min_attrs=1)
    b = sample_filter(rng, scene, min_attrs=1)
    if a == b:
        return None
    nodes = [ProgramNode("scene")]
    ia = a.chain(nodes, 0)
    ib = b.chain(nodes, 0)
    nodes.append(ProgramNode("or", (), (ia, ib)))
    nodes.append(ProgramNode("exist", (), (len(nodes) - 1,)))
    tokens = ["is", "there", "a"] + a.singular() + ["or", "a"] + b.singular()
    return tokens, nodes


def _t_count_plain(rng, scene):
    spec = sample_filter(rng, scene, min_attrs=0)
    nodes = [ProgramNode("scene")]
    idx = spec.chain(nodes, 0)
    nodes.append(ProgramNode("count", (), (idx,)))
    return ["how", "many"] + spec.plural() + ["are", "there"], nodes


def _t_count_relate(rng, scene):
    picked = sample_unique_ref(rng, scene)
    if picked is None:
        return None
    ref_obj, ref_spec = picked
    direction = _pick_direction(rng, scene, ref_obj)
    spec = sample_filter(rng, scene, min_attrs=0)
    nodes = [ProgramNode("scene")]
    ridx = ref_spec.chain(nodes, 0)
    nodes.append(ProgramNode("unique", (), (ridx,)))
    nodes.append(ProgramNode("relate", (direction,), (len(nodes) - 1,)))
    idx = spec.chain(nodes, len(nodes) - 1)
    nodes.append(ProgramNode("count", (), (idx,)))
    tokens = (
        ["how", "many"]
        + spec.plural()
        + ["are"]
        + list(DIRECTION_TOKENS[direction])
        + ["the"]
        + ref_spec.singular()
    )
    return tokens, nodes


def _t_count_and(rng, scene):
    p1 = sample_unique_ref(rng, scene)
    if p1 is None:
        return None
    ref1, spec1 = p1
    p2 = sample_unique_ref(rng, scene, exclude=(ref1.id,))
    if p2 is None:
        return None
    ref2, spec2 = p2
    d1 = _pick_direction(rng, scene, ref1)
    d2 = _pick_direction(rng, scene, ref2)
    nodes = [ProgramNode("scene")]
    i1 = spec1.chain(nodes, 0)
    nodes.append(ProgramNode("unique", (), (i1,)))
    nodes.append(ProgramNode("relate", (d1,), (len(nodes) - 1,)))
    r1 = len(nodes) - 1
    i2 = spec2.chain(nodes, 0)
    nodes.append(ProgramNode("unique", (), (i2,)))
    nodes.append(ProgramNode("relate", (d2,), (len(nodes) - 1,)))
    r2 = len(nodes) - 1
    nodes.append(ProgramNode("and", (), (r1, r2)))
    nodes.append(ProgramNode("count", (), (len(nodes) - 1,)))
    tokens = (
        ["how", "many", "things", "are"]
        + list(DIRECTION_TOKENS[d1])
        + ["the"]
        + spec1.singular()
        + ["and"]
        + list(DIRECTION_TOKENS[d2])
        + ["the"]
        + spec2.singular()
    )
    return tokens, nodes


def _two_count_branches(rng, scene):
    a = sample_filter(rng, scene, min_attrs=1)
    b = sample_filter(rng, scene, min_attrs=1)
    if a == b:
        return None
    nodes = [ProgramNode("scene")]
    ia = a.chain(nodes, 0)
    nodes.append(ProgramNode("count", (), (ia,)))
    ca = len(nodes) - 1
    ib = b.chain(nodes, 0)
    nodes.append(ProgramNode("count", (), (ib,)))
    cb = len(nodes) - 1
    return a, b, nodes, ca, cb


def _t_compare_more(rng, scene):
    parts = _two_count_branches(rng, scene)
    if parts is None:
        return None
    a, b, nodes, ca, cb = parts
    nodes.append(ProgramNode("greater_than", (), (ca, cb)))
    return ["are", "there", "more"] + a.plural() + ["than"] + b.plural(), nodes


def _t_compare_fewer(rng, scene):
    parts = _two_count_branches(rng, scene)
    if parts is None:
        return None
    a, b, nodes, ca, cb = parts
    nodes.append(ProgramNode("less_than", (), (ca, cb)))
    return ["are", "there", "fewer"] + a.plural() + ["than"] + b.plural(), nodes


def _t_compare_equal(rng, scene):
    parts = _two_count_branches(rng, scene)
    if parts is None:
        return None
    a, b, nodes, ca, cb = parts
    nodes.append(ProgramNode("equal_integer", (), (ca, cb)))
    tokens = (
        ["are", "there", "an", "equal", "number", "of"]
        + a.plural()
        + ["and"]
        + b.plural()
    )
    return tokens, nodes


def _t_compare_attr(rng, scene):
    if len(scene.objects) < 2:
        return None
    ids = rng.permutation(len(scene.objects))
    ref1 = scene.objects[int(ids[0])]
    ref2 = scene.objects[int(ids[1])]
    spec1 = spec2 = None
    attr = None
    for a in rng.permutation(ATTRIBUTES):
        s1 = unique_ref_without(rng, scene, ref1, str(a))
        s2 = unique_ref_without(rng, scene, ref2, str(a))
        if s1 is not None and s2 is not None:
            spec1, spec2, attr = s1, s2, str(a)
            break
    if attr is None:
        return None
    nodes = [ProgramNode("scene")]
    i1 = spec1.chain(nodes, 0)
    nodes.append(ProgramNode("unique", (), (i1,)))
    u1 = len(nodes) - 1
    i2 = spec2.chain(nodes, 0)
    nodes.append(ProgramNode("unique", (), (i2,)))
    u2 = len(nodes) - 1
    nodes.append(ProgramNode("equal_attr", (attr,), (u1, u2)))
    tokens = (
        ["does", "the"]
        + spec1.singular()
        + ["have", "the", "same", attr, "as", "the"]
        + spec2.singular()
    )
    return tokens, nodes


def _t_query_plain(rng, scene):
    ref = scene.objects[int(rng.integers(len(scene.objects)))]
    spec = None
    attr = None
    for a in rng.permutation(ATTRIBUTES):
        s = unique_ref_without(rng, scene, ref, str(a))
        if s is not None:
            spec, attr = s, str(a)
            break
    if attr is None:
        return None
    nodes = [ProgramNode("scene")]
    idx = spec.chain(nodes, 0)
    nodes.append(ProgramNode("unique", (), (idx,)))
    nodes.append(ProgramNode("query_attr", (attr,), (len(nodes) - 1,)))
    return ["what", attr, "is", "the"] + spec.singular(), nodes


def _t_query_relate(rng, scene):
    picked = sample_unique_ref(rng, scene)
    if picked is None:
        return None
    ref_obj, ref_spec = picked
    direction = _pick_direction(rng, scene, ref_obj)
    spec = sample_filter(rng, scene, min_attrs=0, anchor_prob=0.7)
    free = [a for a in ATTRIBUTES if a not in spec.attrs]
    if not free:
        return None
    attr = free[rng.integers(len(free))]
    nodes = [ProgramNode("scene")]
    ridx = ref_spec.chain(nodes, 0)
    nodes.append(ProgramNode("unique", (), (ridx,)))
    nodes.append(ProgramNode("relate", (direction,), (len(nodes) - 1,)))
    idx = spec.chain(nodes, len(nodes) - 1)
    nodes.append(ProgramNode("unique", (), (idx,)))
    nodes.append(ProgramNode("query_attr", (attr,), (len(nodes) - 1,)))
    tokens = (
        ["what", attr, "is", "the"]
        + spec.singular()
        + list(DIRECTION_TOKENS[direction])
        + ["the"]
        + ref_spec.singular()
    )
    return tokens, nodes


# Builders with sampling weights. Directional templates stay a minority:
# attention reads are per-cell and permutation-invariant, so spatial-relation
# answers are only fully resolvable by the layout-driven reasoner, and the
# recurrent one must not be dominated by them.
TEMPLATES = {
    "exist": ((_t_exist_plain, 0.55), (_t_exist_relate, 0.20), (_t_exist_or, 0.25)),
    "count": ((_t_count_plain, 0.70), (_t_count_relate, 0.20), (_t_count_and, 0.10)),
    "compare_number": (
        (_t_compare_more, 1 / 3),
        (_t_compare_fewer, 1 / 3),
        (_t_compare_equal, 1 / 3),
    ),
    "compare_attribute": ((_t_compare_attr, 1.0),),
    "query_attribute": ((_t_query_plain, 0.75), (_t_query_relate, 0.25)),
}


class QAGenerationError(RuntimeError):
    """Resampling budget exhausted for one QA slot."""


def make_qa(
    scene: Scene, family: str, rng: np.random.Generator, max_tries: int = 200
) -> QAPair:
    builders = [b for b, _ in TEMPLATES[family]]
    weights = np.array([w for _, w in TEMPLATES[family]])
    weights = weights / weights.sum()
    for _ in range(max_tries):
        built = builders[rng.choice(len(builders), p=weights)](rng, scene)
        if built is None:
            continue
        tokens, nodes = built
        program = tuple(nodes)
        try:
            answer, trace = execute_program(program, scene)
        except IllPosedQuestionError:
            continue
        ids = grounding_objects(program, trace)
        boxes = tuple(scene.objects[i].bbox for i in sorted(ids))
        return QAPair(
            scene_seed=scene.seed,
            question_tokens=tuple(tokens),
            program=program,
            answer=answer,
            grounding_ids=ids,
            grounding_boxes=boxes,
            family=family,
        )
    raise QAGenerationError(f"no valid {family} question for scene {scene.seed}")


# Family quota pattern per 10 questions: every family keeps at least a 10%
# share; attribute-centric families get more mass because exact counting is
# by far the slowest skill to optimize at desk scale.
FAMILY_PATTERN = (
    "exist",
    "query_attribute",
    "compare_number",
    "compare_attribute",
    "count",
    "exist",
    "query_attribute",
    "compare_number",
    "compare_attribute",
    "query_attribute",
)


def scene_questions(
    scene: Scene, qa_per_scene: int, rng: np.random.Generator
) -> List[QAPair]:
    """Cycle the family quota pattern; per-scene shares follow it exactly."""
    out = []
    for k in range(qa_per_scene):
        family = FAMILY_PATTERN[k % len(FAMILY_PATTERN)]
        out.append(make_qa(scene, family, rng))
    return out
