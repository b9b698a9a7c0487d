"""Model assembly: question encoder + visual backbone + reasoner + classifier.

Visual backbones (selected by mask_mode):
    soft / hard  primary capsules -> EM routing -> per-step query mask
    conv         a grouped linear stem with C groups of 17 channels, soft
                 masked per group exactly like capsule types (ablation)
    none         plain linear stem, no masking (baseline)

Everything runs in float64 on CPU; forward passes are pure functions of
(parameters, inputs), so traces are exactly reproducible.
"""

import math
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .capsules import (
    CAPSULE_COMPONENTS,
    CapsuleField,
    EmRouting,
    MaskHead,
    MaskWeights,
    PrimaryCapsules,
    hard_mask,
    masked_components,
    soft_mask,
)
from .reasoners import (
    Classifier,
    KnowledgeProjection,
    LayoutError,
    MacCell,
    MASKED_MODULES,
    MODULE_INDEX,
    MODULES,
    SNMN_STEPS,
    SnmnModules,
    STACK_DEPTH,
    normalize_map,
)
from .text import QueryGenerator, QuestionEncoder

MASK_MODES = ("soft", "hard", "conv", "none")


@dataclass
class ModelConfig:
    vocab_size: int
    n_answers: int
    feature_dim: int
    mode: str = "mac"
    steps: int = 4
    num_caps: int = 8
    d: int = 64
    d_embed: int = 32
    mask_mode: str = "soft"
    mask_sharing: str = "shared"
    mask_head: str = "direct"
    routing_iters: int = 3
    grid: int = 8
    max_len: int = 24

    def validate(self) -> None:
        if self.mode not in ("mac", "snmn"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.mask_sharing not in ("shared", "separate"):
            raise ValueError(f"unknown mask sharing {self.mask_sharing!r}")
        if self.mode == "mac" and self.mask_sharing != "shared":
            raise ValueError("mask-layer sharing is only configurable for snmn")
        if self.mask_mode in ("conv", "none") and self.mask_head != "direct":
            raise ValueError("per-component mask head requires a capsule backbone")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class ModelOutput:
    answer_logits: torch.Tensor  # (B, A)
    attention: torch.Tensor  # (B, T, H, W)
    word_attention: torch.Tensor  # (B, T, L)
    mask_weights: torch.Tensor  # (B, T, C); NaN rows where no mask applies
    has_mask: torch.Tensor  # (B, T) bool


@dataclass
class AttentionTrace:
    """Per-sample record of one reasoning episode."""

    attention: np.ndarray  # (T, H, W)
    word_attention: np.ndarray  # (T, L)
    mask_weights: np.ndarray  # (T, C), NaN rows = no-mask sentinel
    has_mask: np.ndarray  # (T,) bool
    answer_logits: np.ndarray  # (A,)
    predicted: int
    layout: Optional[List[str]] = None


class VqaModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c, d = config.num_caps, config.d
        self.encoder = QuestionEncoder(config.vocab_size, config.d_embed, d, config.max_len)
        self.queries = QueryGenerator(d, config.steps)

        if config.mask_mode in ("soft", "hard"):
            self.primary = PrimaryCapsules(config.feature_dim, c)
            self.routing = EmRouting(c, c, n_iter=config.routing_iters)
            self.kproj = KnowledgeProjection(c * CAPSULE_COMPONENTS, d)
        elif config.mask_mode == "conv":
            self.conv_stem = nn.Linear(config.feature_dim, c * CAPSULE_COMPONENTS)
            self.kproj = KnowledgeProjection(c * CAPSULE_COMPONENTS, d)
        else:
            self.plain_stem = nn.Linear(config.feature_dim, d)

        heads: Dict[str, MaskHead] = {}
        if config.mask_mode != "none":
            if config.mode == "snmn" and config.mask_sharing == "separate":
                for name in MASKED_MODULES:
                    heads[name.lower()] = MaskHead(d, c, config.mask_head)
            else:
                heads["shared"] = MaskHead(d, c, config.mask_head)
        self.mask_heads = nn.ModuleDict(heads)

        if config.mode == "mac":
            self.cell = MacCell(d)
            self.memory_init = nn.Parameter(torch.zeros(d))
        else:
            self.modules_snmn = SnmnModules(d)
        self.classifier = Classifier(d, 2 * d, config.n_answers)
        self.double()

    # --- visual backbone -------------------------------------------------

    def prepare_visual(self, features: torch.Tensor):
        if self.config.mask_mode in ("soft", "hard"):
            return self._route(features)
        if self.config.mask_mode == "conv":
            b, h, w, _ = features.shape
            return self.conv_stem(features).reshape(
                b, h, w, self.config.num_caps, CAPSULE_COMPONENTS
            )
        return self.plain_stem(features)

    def _route(self, features: torch.Tensor) -> CapsuleField:
        """Primary capsules + EM routing, deduplicating identical cells.

        Routing is a pure per-cell function with transforms shared across
        cells, so cells with bitwise-equal feature vectors have equal outputs;
        on the synthetic grids only a handful of distinct cell vectors occur
        per batch. Falls back to the dense path when features carry gradients
        (torch.unique is not differentiable w.r.t. its input).
        """
        b, h, w, f = features.shape
        if features.requires_grad:
            return self.routing(self.primary(features))
        flat = features.reshape(b * h * w, f)
        uniq, inverse = torch.unique(flat, dim=0, return_inverse=True)
        u = uniq.shape[0]
        if u >= b * h * w // 2:
            return self.routing(self.primary(features))
        field = self.routing(self.primary(uniq.reshape(1, u, 1, f)))
        c = self.config.num_caps
        poses = field.poses.reshape(u, c, 4, 4)[inverse].reshape(b, h, w, c, 4, 4)
        acts = field.activations.reshape(u, c)[inverse].reshape(b, h, w, c)
        return CapsuleField(poses, acts)

    def head_for(self, module_name: str) -> MaskHead:
        if "shared" in self.mask_heads:
            return self.mask_heads["shared"]
        return self.mask_heads[module_name.lower()]

    def knowledge(self, q: torch.Tensor, visual, module_name: str = "shared"):
        """Query-conditioned knowledge grid (B, H, W, d) plus mask record."""
        cfg = self.config
        if cfg.mask_mode in ("soft", "hard"):
            field: CapsuleField = visual
            head = self.head_for(module_name)
            logits = head(q, field)
            masker = soft_mask if cfg.mask_mode == "soft" else hard_mask
            masked, weights = masker(logits, field)
            return self.kproj(masked_components(masked)), weights
        if cfg.mask_mode == "conv":
            groups: torch.Tensor = visual  # (B, H, W, C, 17)
            logits = self.head_for(module_name)(q)
            w = torch.softmax(logits, dim=-1)
            masked = groups * w[:, None, None, :, None]
            b, h, ww, c, comp = masked.shape
            weights = MaskWeights(w, logits, "soft")
            return self.kproj(masked.reshape(b, h, ww, c * comp)), weights
        return visual, None

    # --- forward ---------------------------------------------------------

    def forward(
        self,
        tokens: torch.Tensor,
        lengths: torch.Tensor,
        features: torch.Tensor,
        layouts: Optional[torch.Tensor] = None,
    ) -> ModelOutput:
        cfg = self.config
        f_s, f_w = self.encoder(tokens, lengths)
        visual = self.prepare_visual(features)
        if cfg.mode == "mac":
            return self._forward_mac(f_s, f_w, lengths, visual)
        if layouts is None:
            raise ValueError("snmn mode requires expert layouts")
        return self._forward_snmn(f_s, f_w, lengths, visual, layouts)

    def _forward_mac(self, f_s, f_w, lengths, visual) -> ModelOutput:
        cfg = self.config
        b = f_s.shape[0]
        m = self.memory_init.unsqueeze(0).expand(b, -1)
        q = self.queries.initial_query(b)
        attn_steps, word_steps, mask_steps, has_steps = [], [], [], []
        for t in range(1, cfg.steps + 1):
            q, a_w = self.queries.step(f_s, f_w, lengths, q, t)
            knowledge, weights = self.knowledge(q, visual, "shared")
            m, attention = self.cell(q, m, knowledge)
            attn_steps.append(attention)
            word_steps.append(a_w)
            mask_steps.append(self._mask_tensor(weights, b))
            has_steps.append(
                torch.full((b,), weights is not None, dtype=torch.bool)
            )
        logits = self.classifier(m, f_s)
        return ModelOutput(
            answer_logits=logits,
            attention=torch.stack(attn_steps, dim=1),
            word_attention=torch.stack(word_steps, dim=1),
            mask_weights=torch.stack(mask_steps, dim=1),
            has_mask=torch.stack(has_steps, dim=1),
        )

    def _mask_tensor(self, weights: Optional[MaskWeights], b: int) -> torch.Tensor:
        if weights is None:
            return torch.full((b, self.config.num_caps), float("nan"), dtype=torch.float64)
        return weights.weights

    def _forward_snmn(self, f_s, f_w, lengths, visual, layouts) -> ModelOutput:
        cfg = self.config
        b = f_s.shape[0]
        h = w = cfg.grid
        n = h * w
        if layouts.shape != (b, cfg.steps):
            raise ValueError("layouts must be (batch, steps)")
        dtype = torch.float64
        stack = torch.zeros(b, STACK_DEPTH, n, dtype=dtype)
        sp = torch.zeros(b, dtype=torch.long)
        acc = torch.zeros(b, cfg.d, dtype=dtype)
        ans_feats = torch.zeros(b, 2, cfg.d, dtype=dtype)
        ans_maps = torch.zeros(b, 2, n, dtype=dtype)
        ans_count = torch.zeros(b, dtype=torch.long)
        prev_attention = torch.full((b, n), 1.0 / n, dtype=dtype)
        q = self.queries.initial_query(b)

        attn_steps, word_steps, mask_steps, has_steps = [], [], [], []
        mods = self.modules_snmn
        for t in range(1, cfg.steps + 1):
            q, a_w = self.queries.step(f_s, f_w, lengths, q, t)
            attention = prev_attention.clone()
            mask_rec = torch.full((b, cfg.num_caps), float("nan"), dtype=dtype)
            has_rec = torch.zeros(b, dtype=torch.bool)
            step_ids = layouts[:, t - 1]
            for mid in step_ids.unique().tolist():
                name = MODULES[mid]
                sel = (step_ids == mid).nonzero(as_tuple=True)[0]
                if name == "NoOp":
                    continue
                if name == "Scene":
                    uniform = torch.full((len(sel), n), 1.0 / n, dtype=dtype)
                    stack, sp = _push(stack, sp, sel, uniform)
                    attention = attention.index_put((sel,), uniform)
                    continue
                if name in ("And", "Or"):
                    if (sp[sel] < 2).any():
                        raise LayoutError(f"{name} popped an empty stack")
                    a2, (stack, sp) = _pop(stack, sp, sel)
                    a1, (stack, sp) = _pop(stack, sp, sel)
                    combined = torch.minimum(a1, a2) if name == "And" else torch.maximum(a1, a2)
                    combined = normalize_map(combined)
                    stack, sp = _push(stack, sp, sel, combined)
                    attention = attention.index_put((sel,), combined)
                    continue
                # query-consuming modules
                if (sp[sel] < 1).any() and name in ("Relate", "Answer"):
                    raise LayoutError(f"{name} popped an empty stack")
                q_sel = q[sel]
                visual_sel = _select_visual(visual, sel)
                knowledge, weights = self.knowledge(q_sel, visual_sel, name)
                k = knowledge.reshape(len(sel), n, cfg.d) if knowledge.dim() == 4 else knowledge
                if weights is not None:
                    mask_rec = mask_rec.index_put((sel,), weights.weights)
                    has_rec = has_rec.index_put(
                        (sel,), torch.ones(len(sel), dtype=torch.bool)
                    )
                if name == "Find":
                    pushed = torch.softmax(mods.find_logits(q_sel, k), dim=-1)
                    stack, sp = _push(stack, sp, sel, pushed)
                    attention = attention.index_put((sel,), pushed)
                elif name == "Relate":
                    popped, (stack, sp) = _pop(stack, sp, sel)
                    pushed = torch.softmax(
                        mods.relate_logits(q_sel, k, popped, h, w), dim=-1
                    )
                    stack, sp = _push(stack, sp, sel, pushed)
                    attention = attention.index_put((sel,), pushed)
                elif name == "Answer":
                    popped, (stack, sp) = _pop(stack, sp, sel)
                    feat = mods.answer_read(q_sel, k, popped)
                    acc = acc.index_put((sel,), acc[sel] + feat)
                    slot = torch.clamp(ans_count[sel], max=1)
                    ans_feats = ans_feats.index_put((sel, slot), feat)
                    ans_maps = ans_maps.index_put((sel, slot), popped)
                    ans_count = ans_count.index_put((sel,), ans_count[sel] + 1)
                    attention = attention.index_put((sel,), popped)
                elif name == "Compare":
                    f1 = ans_feats[sel, 0]
                    f2 = ans_feats[sel, 1]
                    feat = mods.compare_read(q_sel, f1, f2)
                    acc = acc.index_put((sel,), acc[sel] + feat)
                    mean_map = 0.5 * (ans_maps[sel, 0] + ans_maps[sel, 1])
                    attention = attention.index_put((sel,), mean_map)
                else:  # pragma: no cover
                    raise LayoutError(f"unknown module {name!r}")
            prev_attention = attention
            attn_steps.append(attention.reshape(b, h, w))
            word_steps.append(a_w)
            mask_steps.append(mask_rec)
            has_steps.append(has_rec)

        logits = self.classifier(acc, f_s)
        return ModelOutput(
            answer_logits=logits,
            attention=torch.stack(attn_steps, dim=1),
            word_attention=torch.stack(word_steps, dim=1),
            mask_weights=torch.stack(mask_steps, dim=1),
            has_mask=torch.stack(has_steps, dim=1),
        )


def _select_visual(visual, sel: torch.Tensor):
    if isinstance(visual, CapsuleField):
        return CapsuleField(visual.poses[sel], visual.activations[sel])
    return visual[sel]


def _push(stack, sp, sel, maps):
    stack = stack.index_put((sel, sp[sel]), maps)
    sp = sp.index_put((sel,), sp[sel] + 1)
    return stack, sp


def _pop(stack, sp, sel):
    sp = sp.index_put((sel,), sp[sel] - 1)
    values = stack[sel, sp[sel]]
    return values, (stack, sp)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic re-initialization of every parameter from one seed."""
    gen = torch.Generator().manual_seed(seed)

    def uniform_(t: torch.Tensor, bound: float) -> None:
        with torch.no_grad():
            t.copy_(
                (torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            )

    for module in model.modules():
        if isinstance(module, nn.Linear):
            bound = 1.0 / math.sqrt(module.in_features)
            uniform_(module.weight, bound)
            if module.bias is not None:
                with torch.no_grad():
                    module.bias.zero_()
        elif isinstance(module, nn.Embedding):
            with torch.no_grad():
                module.weight.copy_(
                    torch.randn(module.weight.shape, generator=gen, dtype=torch.float64)
                )
                if module.padding_idx is not None:
                    module.weight[module.padding_idx].zero_()
        elif isinstance(module, nn.LSTM):
            for name, p in module.named_parameters():
                if "weight" in name:
                    uniform_(p, 1.0 / math.sqrt(module.hidden_size))
                else:
                    with torch.no_grad():
                        p.zero_()
        elif isinstance(module, EmRouting):
            with torch.no_grad():
                module.transforms.copy_(
                    torch.randn(module.transforms.shape, generator=gen, dtype=torch.float64)
                    * 0.5
                )
                module.beta_a.zero_()
                module.beta_u.zero_()
    for name, p in model.named_parameters():
        if name.endswith("q_init") or name.endswith("memory_init"):
            with torch.no_grad():
                p.zero_()
        elif name.endswith("relate_mix"):
            with torch.no_grad():
                p.fill_(1.0)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def run_episode(
    model: VqaModel,
    tokens: torch.Tensor,
    lengths: torch.Tensor,
    features: torch.Tensor,
    layouts: Optional[torch.Tensor] = None,
    layout_names: Optional[Sequence[List[str]]] = None,
) -> List[AttentionTrace]:
    """Forward a batch and unpack per-sample traces (no gradients)."""
    model.eval()
    with torch.no_grad():
        out = model(tokens, lengths, features, layouts)
    traces = []
    for i in range(tokens.shape[0]):
        traces.append(
            AttentionTrace(
                attention=out.attention[i].numpy().copy(),
                word_attention=out.word_attention[i].numpy().copy(),
                mask_weights=out.mask_weights[i].numpy().copy(),
                has_mask=out.has_mask[i].numpy().copy(),
                answer_logits=out.answer_logits[i].numpy().copy(),
                predicted=int(out.answer_logits[i].argmax()),
                layout=list(layout_names[i]) if layout_names is not None else None,
            )
        )
    return traces
