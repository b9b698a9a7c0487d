"""Finite-difference verification of analytic gradients.

Every checkable component is wired up at tiny dimensions in float64; the
scalar probe is a fixed random projection of all outputs. Central differences
(eps = 1e-5) are compared entrywise against reverse-mode gradients over all
parameters and inputs. Errors are relative with a small scale floor so
near-zero gradients are judged on absolute error.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import torch

from .capsules import (
    CAPSULE_COMPONENTS,
    CapsuleField,
    EmRouting,
    MaskHead,
    PrimaryCapsules,
    masked_components,
    soft_mask,
)
from .reasoners import Classifier, KnowledgeProjection, MacCell, SnmnModules
from .text import QueryGenerator, QuestionEncoder

EPS = 1e-5
SCALE_FLOOR = 1e-3

COMPONENTS = (
    "query_step",
    "encode_question",
    "primary_capsules",
    "em_routing",
    "soft_mask",
    "hard_mask",
    "mac_cell",
    "snmn_find",
    "classify",
    "masked_conv_baseline",
)


@dataclass
class GradCheckResult:
    component: str
    max_rel_error: float
    n_entries: int
    note: str = ""

    @property
    def differentiable(self) -> bool:
        return not math.isnan(self.max_rel_error)


def _rand(gen: np.random.Generator, *shape) -> torch.Tensor:
    return torch.tensor(gen.standard_normal(shape), dtype=torch.float64)


def _leaf(gen: np.random.Generator, *shape) -> torch.Tensor:
    return _rand(gen, *shape).requires_grad_(True)


def _flatten_outputs(out) -> List[torch.Tensor]:
    if isinstance(out, torch.Tensor):
        return [out]
    if isinstance(out, CapsuleField):
        return [out.poses, out.activations]
    return [t for item in out for t in _flatten_outputs(item)]


def check_function(
    fn: Callable[[], object],
    leaves: Sequence[torch.Tensor],
    seed: int = 0,
    eps: float = EPS,
) -> Tuple[float, int]:
    """Max relative error between autograd and central differences.

    `fn` must recompute its outputs from the current leaf values on every
    call; leaves are perturbed in place for the difference quotients.
    """
    gen = np.random.default_rng(seed)
    probes = [_rand(gen, *t.shape) for t in _flatten_outputs(fn())]

    def scalar() -> torch.Tensor:
        outs = _flatten_outputs(fn())
        return sum((p * o).sum() for p, o in zip(probes, outs))

    # Leaves that do not reach the output (e.g. parameters of other steps)
    # get zero analytic gradients; finite differences confirm the zeros.
    analytic = [
        g if g is not None else torch.zeros_like(leaf)
        for g, leaf in zip(
            torch.autograd.grad(scalar(), leaves, allow_unused=True), leaves
        )
    ]
    max_err = 0.0
    n_entries = 0
    with torch.no_grad():
        for leaf, grad in zip(leaves, analytic):
            flat = leaf.reshape(-1)
            gflat = grad.reshape(-1)
            for k in range(flat.numel()):
                orig = float(flat[k])
                flat[k] = orig + eps
                f_plus = float(scalar())
                flat[k] = orig - eps
                f_minus = float(scalar())
                flat[k] = orig
                fd = (f_plus - f_minus) / (2.0 * eps)
                a = float(gflat[k])
                err = abs(a - fd) / max(abs(a), abs(fd), SCALE_FLOOR)
                max_err = max(max_err, err)
                n_entries += 1
    return max_err, n_entries


def _params(*modules: torch.nn.Module) -> List[torch.Tensor]:
    return [p for m in modules for p in m.parameters()]


def _build(component: str, seed: int):
    """Returns (fn, leaves, note) for a component at tiny dimensions."""
    gen = np.random.default_rng(seed + 1)
    torch.manual_seed(seed + 1)
    d, c, grid = 6, 2, 2

    if component == "query_step":
        qg = QueryGenerator(d=d, steps=2).double()
        f_s = _leaf(gen, 1, 2 * d)
        f_w = _leaf(gen, 1, 3, 2 * d)
        q_prev = _leaf(gen, 1, d)
        lengths = torch.tensor([3])
        fn = lambda: qg.step(f_s, f_w, lengths, q_prev, 1)
        return fn, _params(qg) + [f_s, f_w, q_prev], ""

    if component == "encode_question":
        enc = QuestionEncoder(vocab_size=5, d_embed=3, d=4, max_len=6).double()
        tokens = torch.tensor([[2, 3, 4, 1]])
        lengths = torch.tensor([4])
        fn = lambda: enc(tokens, lengths)
        return fn, _params(enc), ""

    if component == "primary_capsules":
        pc = PrimaryCapsules(5, c).double()
        feats = _leaf(gen, 1, grid, grid, 5)
        fn = lambda: pc(feats)
        return fn, _params(pc) + [feats], ""

    if component == "em_routing":
        # Resample until every per-dimension vote variance is comfortably
        # positive: near-zero variances put the instance next to the floor,
        # where huge curvature makes finite differences meaningless.
        for attempt in range(100):
            sub = np.random.default_rng((seed + 1) * 1000 + attempt)
            er = EmRouting(3, c, n_iter=3).double()
            with torch.no_grad():
                er.transforms.copy_(_rand(sub, 3, c, 4, 4) * 0.5)
                er.beta_a.copy_(_rand(sub, c) * 0.1)
                er.beta_u.copy_(_rand(sub, c) * 0.1)
            poses = _leaf(sub, 1, 1, 2, 3, 4, 4)
            acts = torch.tensor(
                sub.uniform(0.3, 0.9, (1, 1, 2, 3)), dtype=torch.float64
            ).requires_grad_(True)
            fn = lambda: er(CapsuleField(poses, acts))
            with torch.no_grad():
                fn()
            if er.last_min_raw_var >= 1e-2:
                break
        return fn, _params(er) + [poses, acts], "tolerance 1e-3 (unrolled iterations)"

    if component in ("soft_mask", "hard_mask"):
        logits = _leaf(gen, 1, c + 1)
        poses = _leaf(gen, 1, grid, grid, c + 1, 4, 4)
        acts = _leaf(gen, 1, grid, grid, c + 1)
        fn = lambda: soft_mask(logits, CapsuleField(poses, acts))[0]
        return fn, [logits, poses, acts], ""

    if component == "mac_cell":
        head = MaskHead(d, c).double()
        kproj = KnowledgeProjection(c * CAPSULE_COMPONENTS, d).double()
        cell = MacCell(d).double()
        q = _leaf(gen, 1, d)
        m_prev = _leaf(gen, 1, d)
        poses = _leaf(gen, 1, grid, grid, c, 4, 4)
        acts = _leaf(gen, 1, grid, grid, c)

        def fn():
            field = CapsuleField(poses, acts)
            masked, _ = soft_mask(head(q, field), field)
            return cell(q, m_prev, kproj(masked_components(masked)))

        return fn, _params(head, kproj, cell) + [q, m_prev, poses, acts], ""

    if component == "snmn_find":
        head = MaskHead(d, c).double()
        kproj = KnowledgeProjection(c * CAPSULE_COMPONENTS, d).double()
        mods = SnmnModules(d).double()
        q = _leaf(gen, 1, d)
        poses = _leaf(gen, 1, grid, grid, c, 4, 4)
        acts = _leaf(gen, 1, grid, grid, c)

        def fn():
            field = CapsuleField(poses, acts)
            masked, _ = soft_mask(head(q, field), field)
            k = kproj(masked_components(masked)).reshape(1, grid * grid, d)
            return torch.softmax(mods.find_logits(q, k), dim=-1)

        leaves = _params(head, kproj) + [
            mods.find_inter.weight, mods.find_inter.bias,
            mods.find_attend.weight, mods.find_attend.bias,
            q, poses, acts,
        ]
        return fn, leaves, ""

    if component == "classify":
        clf = Classifier(d, 2 * d, 7).double()
        state = _leaf(gen, 1, d)
        f_s = _leaf(gen, 1, 2 * d)
        fn = lambda: clf(state, f_s)
        return fn, _params(clf) + [state, f_s], ""

    if component == "masked_conv_baseline":
        head = MaskHead(d, c).double()
        kproj = KnowledgeProjection(c * CAPSULE_COMPONENTS, d).double()
        q = _leaf(gen, 1, d)
        groups = _leaf(gen, 1, grid, grid, c, CAPSULE_COMPONENTS)

        def fn():
            w = torch.softmax(head(q), dim=-1)
            masked = groups * w[:, None, None, :, None]
            return kproj(masked.reshape(1, grid, grid, c * CAPSULE_COMPONENTS))

        return fn, _params(head, kproj) + [q, groups], ""

    raise ValueError(f"unknown component {component!r}")


def gradcheck_component(component: str, seed: int = 0) -> GradCheckResult:
    if component == "hard_mask":
        return GradCheckResult(
            component="hard_mask",
            max_rel_error=float("nan"),
            n_entries=0,
            note=(
                "non-differentiable at the selection: the one-hot mask is "
                "piecewise constant in the logits, so only the selected "
                "capsule type receives gradients"
            ),
        )
    fn, leaves, note = _build(component, seed)
    err, n = check_function(fn, leaves, seed)
    return GradCheckResult(component=component, max_rel_error=err, n_entries=n, note=note)


def run_all(seed: int = 0) -> Dict[str, GradCheckResult]:
    return {c: gradcheck_component(c, seed) for c in COMPONENTS}
