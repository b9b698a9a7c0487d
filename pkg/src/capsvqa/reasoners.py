"""Attentional reasoning over masked capsules.

Two reasoner styles share the same visual interface (a per-cell knowledge
grid K):
  * a MAC-style recurrent cell: query -> spatial attention -> read -> memory;
  * an SNMN-style module stack executing an expert layout derived from the
    question program, with an attention-map stack of depth <= 4.
"""

from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from .world.programs import ProgramNode, SET_OPS, sink_index

MODULES = ("NoOp", "Scene", "Find", "Relate", "And", "Or", "Answer", "Compare")
MODULE_INDEX = {name: i for i, name in enumerate(MODULES)}
# Modules whose computation consumes the textual query (and therefore own a
# capsule masking layer); Scene/And/Or/NoOp operate on attention maps alone.
MASKED_MODULES = ("Find", "Relate", "Answer", "Compare")
STACK_DEPTH = 4
SNMN_STEPS = 9

_FILTER_OPS = ("filter_size", "filter_color", "filter_shape")
_VALUE_2IN = ("equal_attr", "equal_integer", "greater_than", "less_than")


class LayoutError(RuntimeError):
    """Module sequence inconsistent with stack arity or step budget."""


def layout_from_program(
    program: Sequence[ProgramNode], steps: int = SNMN_STEPS
) -> List[Tuple[str, int]]:
    """Expert module layout for a program, padded with NoOp to `steps`.

    Filter chains rooted at the scene become a single Find; chains applied to
    an intermediate set become Find + And; relate becomes Relate; value nodes
    become Answer (plus Compare for two-branch comparisons).
    """

    def compile_node(i: int) -> List[Tuple[str, int]]:
        node = program[i]
        if node.op == "scene":
            return [("Scene", i)]
        if node.op in _FILTER_OPS:
            j = i
            while program[j].op in _FILTER_OPS:
                j = program[j].inputs[0]
            if program[j].op == "scene":
                return [("Find", i)]
            return compile_node(j) + [("Find", i), ("And", i)]
        if node.op == "unique":
            return compile_node(node.inputs[0])
        if node.op == "relate":
            return compile_node(node.inputs[0]) + [("Relate", i)]
        if node.op in ("and", "or"):
            a, b = node.inputs
            mod = "And" if node.op == "and" else "Or"
            return compile_node(a) + compile_node(b) + [(mod, i)]
        if node.op in ("count", "exist", "query_attr"):
            return compile_node(node.inputs[0]) + [("Answer", i)]
        if node.op in _VALUE_2IN:
            out: List[Tuple[str, int]] = []
            for j in node.inputs:
                out += compile_node(j)
                if program[j].op in SET_OPS:
                    out.append(("Answer", j))
            return out + [("Compare", i)]
        raise LayoutError(f"cannot lay out op {node.op!r}")

    layout = compile_node(sink_index(program))
    if len(layout) > steps:
        raise LayoutError(f"layout needs {len(layout)} steps, budget is {steps}")
    layout += [("NoOp", -1)] * (steps - len(layout))

    depth = 0
    for name, _ in layout:
        if name in ("Scene", "Find"):
            depth += 1
        elif name == "Relate":
            if depth < 1:
                raise LayoutError("Relate pops an empty stack")
        elif name in ("And", "Or"):
            if depth < 2:
                raise LayoutError(f"{name} needs two stack entries")
            depth -= 1
        elif name == "Answer":
            if depth < 1:
                raise LayoutError("Answer pops an empty stack")
            depth -= 1
        if depth > STACK_DEPTH:
            raise LayoutError("layout exceeds the stack depth limit")
    return layout


def layout_ids(program: Sequence[ProgramNode], steps: int = SNMN_STEPS) -> List[int]:
    return [MODULE_INDEX[name] for name, _ in layout_from_program(program, steps)]


class KnowledgeProjection(nn.Module):
    """Affine map from flattened per-cell capsule components to d dims."""

    def __init__(self, in_dim: int, d: int):
        super().__init__()
        self.map = nn.Linear(in_dim, d)

    def forward(self, components: torch.Tensor) -> torch.Tensor:
        return self.map(components)


class MacCell(nn.Module):
    """One recurrent reasoning step: attend over cells, read, update memory."""

    def __init__(self, d: int):
        super().__init__()
        self.memory_proj = nn.Linear(d, d)
        self.interaction = nn.Linear(2 * d, d)
        self.attend = nn.Linear(d, 1)
        self.write = nn.Linear(2 * d, d)

    def forward(self, q_t: torch.Tensor, m_prev: torch.Tensor, knowledge: torch.Tensor):
        b, h, w, d = knowledge.shape
        k = knowledge.reshape(b, h * w, d)
        m = self.memory_proj(m_prev).unsqueeze(1)
        inter = self.interaction(torch.cat([k * m, k], dim=-1))
        logits = self.attend(q_t.unsqueeze(1) * inter).squeeze(-1)
        attention = torch.softmax(logits, dim=-1)
        read = torch.einsum("bn,bnd->bd", attention, k)
        m_t = self.write(torch.cat([read, m_prev], dim=-1))
        return m_t, attention.reshape(b, h, w)


class SnmnModules(nn.Module):
    """Parameter bundle for the stack modules.

    Find and Relate score cells against the query; Relate additionally mixes
    four directional aggregations of the popped map (mass strictly left/right/
    above/below each cell), gated by the query. Answer reads the knowledge
    grid under the popped map; Compare fuses the two most recent reads.
    """

    def __init__(self, d: int):
        super().__init__()
        self.find_inter = nn.Linear(d, d)
        self.find_attend = nn.Linear(d, 1)
        self.relate_inter = nn.Linear(d, d)
        self.relate_attend = nn.Linear(d, 1)
        self.relate_gate = nn.Linear(d, 4)
        self.relate_mix = nn.Parameter(torch.tensor(1.0))
        self.answer_proj = nn.Linear(d, d)
        self.compare_fuse = nn.Linear(2 * d, d)
        self.compare_proj = nn.Linear(d, d)

    def find_logits(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        # k: (B, N, d) -> (B, N)
        return self.find_attend(q.unsqueeze(1) * self.find_inter(k)).squeeze(-1)

    def relate_logits(
        self, q: torch.Tensor, k: torch.Tensor, popped: torch.Tensor, h: int, w: int
    ) -> torch.Tensor:
        base = self.relate_attend(q.unsqueeze(1) * self.relate_inter(k)).squeeze(-1)
        maps = popped.reshape(-1, h, w)
        col_mass = maps.sum(dim=1)  # (B, W)
        row_mass = maps.sum(dim=2)  # (B, H)
        right_of = _exclusive_cumsum(col_mass)  # mass strictly left of column
        left_of = _exclusive_cumsum(col_mass.flip(-1)).flip(-1)
        below_of = _exclusive_cumsum(row_mass)  # mass strictly above row
        above_of = _exclusive_cumsum(row_mass.flip(-1)).flip(-1)
        stacked = torch.stack(
            [
                left_of.unsqueeze(1).expand(-1, h, -1),
                right_of.unsqueeze(1).expand(-1, h, -1),
                above_of.unsqueeze(2).expand(-1, -1, w),
                below_of.unsqueeze(2).expand(-1, -1, w),
            ],
            dim=1,
        )  # (B, 4, H, W)
        gates = torch.softmax(self.relate_gate(q), dim=-1)
        combined = torch.einsum("bk,bkhw->bhw", gates, stacked).reshape(-1, h * w)
        return base + self.relate_mix * combined

    def answer_read(self, q: torch.Tensor, k: torch.Tensor, popped: torch.Tensor):
        read = torch.einsum("bn,bnd->bd", popped, k)
        return read * self.answer_proj(q)

    def compare_read(self, q: torch.Tensor, f1: torch.Tensor, f2: torch.Tensor):
        return self.compare_fuse(torch.cat([f1, f2], dim=-1)) * self.compare_proj(q)


def _exclusive_cumsum(x: torch.Tensor) -> torch.Tensor:
    """Cumulative sum along the last dim, excluding the current entry.

    For "left_of" semantics: a cell counts the mass strictly beyond it.
    """
    c = torch.cumsum(x, dim=-1)
    return c - x


def normalize_map(m: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Renormalize attention maps to sum 1; all-zero maps become uniform."""
    total = m.sum(dim=-1, keepdim=True)
    uniform = torch.full_like(m, 1.0 / m.shape[-1])
    return torch.where(total > eps, m / total.clamp(min=eps), uniform)


class Classifier(nn.Module):
    """Two-layer perceptron over [reasoner state; sentence feature]."""

    def __init__(self, d: int, d_q: int, n_answers: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d + d_q, hidden), nn.ELU(), nn.Linear(hidden, n_answers)
        )

    def forward(self, state: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([state, f_s], dim=-1))
