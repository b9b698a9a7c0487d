"""Functional question programs over scenes.

A program is a topologically ordered list of nodes forming a DAG with a single
sink; executing it yields the answer plus a per-node trace of object-id sets.
The trace powers grounding labels: the evidence for an answer is the union of
the object sets feeding directly into the sink node.
"""

from dataclasses import dataclass
from typing import FrozenSet, List, Sequence, Tuple, Union

from .scene import COLORS, SHAPES, SIZES, Scene

SET_OPS = {
    "scene": 0,
    "filter_color": 1,
    "filter_shape": 1,
    "filter_size": 1,
    "relate": 1,
    "unique": 1,
    "and": 2,
    "or": 2,
}
VALUE_OPS = {
    "count": 1,
    "exist": 1,
    "query_attr": 1,
    "equal_attr": 2,
    "equal_integer": 2,
    "greater_than": 2,
    "less_than": 2,
}
DIRECTIONS = ("left", "right", "above", "below")
ATTRIBUTES = ("size", "color", "shape")

ANSWERS = (
    ("yes", "no")
    + tuple(str(i) for i in range(7))
    + COLORS
    + SHAPES
    + SIZES
)

FAMILIES = ("exist", "count", "compare_number", "compare_attribute", "query_attribute")


class ProgramError(ValueError):
    """Structurally invalid program (bad op, arity, args, or topology)."""


class IllPosedQuestionError(RuntimeError):
    """`unique`/`relate` hit a set whose size is not exactly 1; resample."""


@dataclass(frozen=True)
class ProgramNode:
    op: str
    args: Tuple[str, ...] = ()
    inputs: Tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"op": self.op, "args": list(self.args), "inputs": list(self.inputs)}

    @staticmethod
    def from_dict(d: dict) -> "ProgramNode":
        return ProgramNode(op=d["op"], args=tuple(d["args"]), inputs=tuple(d["inputs"]))


Program = Tuple[ProgramNode, ...]


def sink_index(program: Sequence[ProgramNode]) -> int:
    used = {i for node in program for i in node.inputs}
    sinks = [i for i in range(len(program)) if i not in used]
    if len(sinks) != 1:
        raise ProgramError(f"program must have exactly one sink, found {len(sinks)}")
    return sinks[0]


def validate_program(program: Sequence[ProgramNode]) -> None:
    if not program:
        raise ProgramError("empty program")
    valid_args = {
        "filter_color": COLORS,
        "filter_shape": SHAPES,
        "filter_size": SIZES,
        "relate": DIRECTIONS,
        "query_attr": ATTRIBUTES,
        "equal_attr": ATTRIBUTES,
    }
    for idx, node in enumerate(program):
        if node.op in SET_OPS:
            arity = SET_OPS[node.op]
        elif node.op in VALUE_OPS:
            arity = VALUE_OPS[node.op]
        else:
            raise ProgramError(f"unknown op {node.op!r} at node {idx}")
        if len(node.inputs) != arity:
            raise ProgramError(f"{node.op} at node {idx} expects {arity} inputs")
        if any(j >= idx or j < 0 for j in node.inputs):
            raise ProgramError(f"node {idx} inputs must reference earlier nodes")
        if node.op in valid_args:
            if len(node.args) != 1 or node.args[0] not in valid_args[node.op]:
                raise ProgramError(f"{node.op} at node {idx} has invalid args {node.args}")
        elif node.args:
            raise ProgramError(f"{node.op} at node {idx} takes no args")
    sink_index(program)


def _attr(scene: Scene, obj_id: int, attr: str) -> str:
    obj = scene.objects[obj_id]
    return {"size": obj.size, "color": obj.color, "shape": obj.shape}[attr]


def _relate(scene: Scene, ref_id: int, direction: str) -> FrozenSet[int]:
    ref = scene.objects[ref_id]
    out = set()
    for obj in scene.objects:
        if direction == "left" and obj.cell[1] < ref.cell[1]:
            out.add(obj.id)
        elif direction == "right" and obj.cell[1] > ref.cell[1]:
            out.add(obj.id)
        elif direction == "above" and obj.cell[0] < ref.cell[0]:
            out.add(obj.id)
        elif direction == "below" and obj.cell[0] > ref.cell[0]:
            out.add(obj.id)
    return frozenset(out)


def execute_program(
    program: Sequence[ProgramNode], scene: Scene
) -> Tuple[str, List[FrozenSet[int]]]:
    """Run the program; returns (answer, per-node object-set trace).

    Set-typed nodes record their output set; value-typed nodes record the
    union of their inputs' sets (their provenance).
    """
    validate_program(program)
    values: List[Union[FrozenSet[int], int, bool, str]] = []
    trace: List[FrozenSet[int]] = []
    for node in program:
        ins = [values[j] for j in node.inputs]
        if node.op == "scene":
            out: Union[FrozenSet[int], int, bool, str] = frozenset(
                o.id for o in scene.objects
            )
        elif node.op == "filter_color":
            out = frozenset(i for i in ins[0] if scene.objects[i].color == node.args[0])
        elif node.op == "filter_shape":
            out = frozenset(i for i in ins[0] if scene.objects[i].shape == node.args[0])
        elif node.op == "filter_size":
            out = frozenset(i for i in ins[0] if scene.objects[i].size == node.args[0])
        elif node.op == "unique":
            if len(ins[0]) != 1:
                raise IllPosedQuestionError(f"unique over set of size {len(ins[0])}")
            out = ins[0]
        elif node.op == "relate":
            if len(ins[0]) != 1:
                raise IllPosedQuestionError("relate needs a single reference object")
            out = _relate(scene, next(iter(ins[0])), node.args[0])
        elif node.op == "and":
            out = ins[0] & ins[1]
        elif node.op == "or":
            out = ins[0] | ins[1]
        elif node.op == "count":
            out = len(ins[0])
        elif node.op == "exist":
            out = len(ins[0]) > 0
        elif node.op == "query_attr":
            if len(ins[0]) != 1:
                raise IllPosedQuestionError("query_attr needs a single object")
            out = _attr(scene, next(iter(ins[0])), node.args[0])
        elif node.op == "equal_attr":
            for s in ins:
                if len(s) != 1:
                    raise IllPosedQuestionError("equal_attr needs single objects")
            a, b = (next(iter(s)) for s in ins)
            out = _attr(scene, a, node.args[0]) == _attr(scene, b, node.args[0])
        elif node.op == "equal_integer":
            out = ins[0] == ins[1]
        elif node.op == "greater_than":
            out = ins[0] > ins[1]
        elif node.op == "less_than":
            out = ins[0] < ins[1]
        else:  # pragma: no cover - guarded by validate_program
            raise ProgramError(f"unknown op {node.op!r}")
        values.append(out)
        if node.op in SET_OPS:
            trace.append(out)  # type: ignore[arg-type]
        else:
            trace.append(frozenset().union(*(trace[j] for j in node.inputs)))

    answer = values[sink_index(program)]
    if isinstance(answer, bool):
        answer_str = "yes" if answer else "no"
    elif isinstance(answer, int):
        answer_str = str(answer)
    else:
        answer_str = str(answer)
    if answer_str not in ANSWERS:
        raise ProgramError(f"answer {answer_str!r} outside the answer vocabulary")
    return answer_str, trace


def grounding_objects(
    program: Sequence[ProgramNode], trace: Sequence[FrozenSet[int]]
) -> FrozenSet[int]:
    """Objects grounding the answer: union of the sets attached to the nodes
    one edge upstream of the sink (breadth level 1 of a backward BFS)."""
    sink = sink_index(program)
    return frozenset().union(*(trace[j] for j in program[sink].inputs), frozenset())
