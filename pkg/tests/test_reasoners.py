import numpy as np
import pytest
import torch

import capsvqa.world as world
from capsvqa.model import (
    AttentionTrace,
    ModelConfig,
    VqaModel,
    count_parameters,
    init_parameters,
    run_episode,
)
from capsvqa.reasoners import (
    LayoutError,
    MODULE_INDEX,
    MODULES,
    SNMN_STEPS,
    MacCell,
    layout_from_program,
    layout_ids,
    normalize_map,
)
from capsvqa.text import Vocabulary, pad_batch
from capsvqa.world import ProgramNode, gen_dataset, render_oracle


@pytest.fixture(scope="module")
def tiny_data():
    ds = gen_dataset(8, 10, seed=0)
    vocab = Vocabulary(t for q in ds.questions for t in q.question_tokens)
    return ds, vocab


def batch_from(ds, vocab, qas):
    tokens, lengths = pad_batch([vocab.encode(q.question_tokens) for q in qas])
    feats = torch.tensor(np.stack([render_oracle(ds.scenes[q.scene_seed]) for q in qas]))
    return tokens, lengths, feats


def build_model(vocab, mode="mac", **kw):
    torch.manual_seed(0)
    defaults = dict(
        vocab_size=len(vocab),
        n_answers=len(world.ANSWERS),
        feature_dim=10,
        mode=mode,
        steps=4 if mode == "mac" else SNMN_STEPS,
        num_caps=4,
        d=16,
        d_embed=8,
    )
    defaults.update(kw)
    model = VqaModel(ModelConfig(**defaults))
    init_parameters(model, 0)
    return model


# --- layouts ----------------------------------------------------------------


def test_layout_simple_count():
    program = (
        ProgramNode("scene"),
        ProgramNode("filter_color", ("red",), (0,)),
        ProgramNode("count", (), (1,)),
    )
    names = [n for n, _ in layout_from_program(program)]
    assert names == ["Find", "Answer"] + ["NoOp"] * 7


def test_layout_bare_scene_count():
    program = (ProgramNode("scene"), ProgramNode("count", (), (0,)))
    names = [n for n, _ in layout_from_program(program)]
    assert names[:2] == ["Scene", "Answer"]


def test_layout_relate_chain():
    program = (
        ProgramNode("scene"),
        ProgramNode("filter_shape", ("circle",), (0,)),
        ProgramNode("unique", (), (1,)),
        ProgramNode("relate", ("left",), (2,)),
        ProgramNode("filter_color", ("red",), (3,)),
        ProgramNode("exist", (), (4,)),
    )
    names = [n for n, _ in layout_from_program(program)]
    assert names[:5] == ["Find", "Relate", "Find", "And", "Answer"]


def test_layout_compare_counts():
    program = (
        ProgramNode("scene"),
        ProgramNode("filter_shape", ("circle",), (0,)),
        ProgramNode("count", (), (1,)),
        ProgramNode("filter_shape", ("square",), (0,)),
        ProgramNode("count", (), (3,)),
        ProgramNode("greater_than", (), (2, 4)),
    )
    names = [n for n, _ in layout_from_program(program)]
    assert names[:5] == ["Find", "Answer", "Find", "Answer", "Compare"]


def test_layout_rejects_overlong_program():
    nodes = [ProgramNode("scene")]
    for k in range(6):
        nodes.append(ProgramNode("filter_color", ("red",), (len(nodes) - 1,)))
        nodes.append(ProgramNode("unique", (), (len(nodes) - 1,)))
        nodes.append(ProgramNode("relate", ("left",), (len(nodes) - 1,)))
    nodes.append(ProgramNode("exist", (), (len(nodes) - 1,)))
    with pytest.raises(LayoutError):
        layout_from_program(tuple(nodes), steps=3)


def test_every_generated_program_has_valid_layout(tiny_data):
    ds, _ = tiny_data
    for qa in ds.questions:
        ids = layout_ids(qa.program)
        assert len(ids) == SNMN_STEPS
        assert all(0 <= i < len(MODULES) for i in ids)


# --- normalize_map ----------------------------------------------------------


def test_normalize_map_handles_zero_maps():
    m = torch.zeros(2, 16, dtype=torch.float64)
    m[1, 3] = 2.0
    out = normalize_map(m)
    assert torch.allclose(out[0], torch.full((16,), 1 / 16, dtype=torch.float64))
    assert float(out[1].sum()) == pytest.approx(1.0)
    assert float(out[1, 3]) == pytest.approx(1.0)


# --- MAC --------------------------------------------------------------------


def test_mac_uniform_attention_when_logit_weights_zero(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab)
    with torch.no_grad():
        model.cell.attend.weight.zero_()
        model.cell.attend.bias.zero_()
    tokens, lengths, feats = batch_from(ds, vocab, ds.questions[:3])
    out = model(tokens, lengths, feats)
    assert torch.allclose(
        out.attention, torch.full_like(out.attention, 1 / 64), atol=1e-12
    )


def test_mac_attention_normalized_and_deterministic(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab)
    tokens, lengths, feats = batch_from(ds, vocab, ds.questions[:5])
    out1 = model(tokens, lengths, feats)
    out2 = model(tokens, lengths, feats)
    sums = out1.attention.sum(dim=(2, 3))
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-9)
    assert torch.equal(out1.answer_logits, out2.answer_logits)
    assert torch.equal(out1.attention, out2.attention)


def test_mac_mask_depends_only_on_query(tiny_data):
    # Same question twice in a batch: every step's mask weights must agree.
    ds, vocab = tiny_data
    model = build_model(vocab)
    qa = ds.questions[0]
    tokens, lengths, feats = batch_from(ds, vocab, [qa, qa])
    out = model(tokens, lengths, feats)
    assert torch.allclose(out.mask_weights[0], out.mask_weights[1], atol=1e-12)
    assert torch.all(out.has_mask)


def test_mac_trace_step_count(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab)
    tokens, lengths, feats = batch_from(ds, vocab, ds.questions[:2])
    traces = run_episode(model, tokens, lengths, feats)
    assert len(traces) == 2
    assert traces[0].attention.shape == (4, 8, 8)
    assert traces[0].word_attention.shape[0] == 4


def test_mac_rejects_separate_masking():
    with pytest.raises(ValueError):
        ModelConfig(
            vocab_size=5, n_answers=3, feature_dim=10, mode="mac", mask_sharing="separate"
        ).validate()


# --- masked-conv and plain baselines ----------------------------------------


def test_conv_baseline_equal_logits_scale_groups(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab, mask_mode="conv")
    with torch.no_grad():
        model.mask_heads["shared"].map.weight.zero_()
        model.mask_heads["shared"].map.bias.zero_()
    tokens, lengths, feats = batch_from(ds, vocab, ds.questions[:2])
    f_s, f_w = model.encoder(tokens, lengths)
    groups = model.prepare_visual(feats)
    q = model.queries.initial_query(2)
    k_masked, weights = model.knowledge(q, groups, "shared")
    c = model.config.num_caps
    assert torch.allclose(
        weights.weights, torch.full((2, c), 1 / c, dtype=torch.float64)
    )
    b, h, w, _, comp = groups.shape
    manual = model.kproj((groups / c).reshape(b, h, w, c * comp))
    assert torch.allclose(k_masked, manual, atol=1e-12)


def test_plain_baseline_has_no_mask_records(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab, mask_mode="none")
    tokens, lengths, feats = batch_from(ds, vocab, ds.questions[:2])
    out = model(tokens, lengths, feats)
    assert not out.has_mask.any()
    assert torch.isnan(out.mask_weights).all()


def test_param_count_reported_for_conv_vs_caps(tiny_data):
    _, vocab = tiny_data
    caps = build_model(vocab, mask_mode="soft")
    conv = build_model(vocab, mask_mode="conv")
    assert count_parameters(caps) > 0
    assert count_parameters(conv) > 0
    assert count_parameters(caps) != count_parameters(conv)


# --- SNMN -------------------------------------------------------------------


def snmn_batch(ds, vocab, qas):
    tokens, lengths, feats = batch_from(ds, vocab, qas)
    layouts = torch.tensor([layout_ids(q.program) for q in qas])
    return tokens, lengths, feats, layouts


def test_snmn_requires_layouts(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab, mode="snmn", mask_sharing="separate")
    tokens, lengths, feats = batch_from(ds, vocab, ds.questions[:2])
    with pytest.raises(ValueError):
        model(tokens, lengths, feats)


def test_snmn_attention_normalized_every_step(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab, mode="snmn", mask_sharing="separate")
    tokens, lengths, feats, layouts = snmn_batch(ds, vocab, ds.questions[:16])
    out = model(tokens, lengths, feats, layouts)
    sums = out.attention.sum(dim=(2, 3))
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-9)


def test_snmn_sentinel_mask_records(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab, mode="snmn", mask_sharing="separate")
    qa = next(q for q in ds.questions if q.family == "count")
    names = [n for n, _ in layout_from_program(qa.program)]
    tokens, lengths, feats, layouts = snmn_batch(ds, vocab, [qa])
    out = model(tokens, lengths, feats, layouts)
    for t, name in enumerate(names):
        masked_module = name in ("Find", "Relate", "Answer", "Compare")
        assert bool(out.has_mask[0, t]) == masked_module
        if not masked_module:
            assert torch.isnan(out.mask_weights[0, t]).all()


def test_snmn_separate_masking_differs_across_modules(tiny_data):
    # Find and Answer see the same question but use different mask layers;
    # with random parameters their weights at fixed q differ.
    ds, vocab = tiny_data
    model = build_model(vocab, mode="snmn", mask_sharing="separate")
    qa = next(q for q in ds.questions if q.family == "count")
    names = [n for n, _ in layout_from_program(qa.program)]
    find_t = names.index("Find")
    ans_t = names.index("Answer")
    tokens, lengths, feats, layouts = snmn_batch(ds, vocab, [qa])
    out = model(tokens, lengths, feats, layouts)
    assert not torch.allclose(out.mask_weights[0, find_t], out.mask_weights[0, ans_t])


def test_snmn_shared_masking_same_for_same_query(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab, mode="snmn", mask_sharing="shared")
    qa = next(q for q in ds.questions if q.family == "count")
    tokens, lengths, feats, layouts = snmn_batch(ds, vocab, [qa])
    # Force all steps to consume the same query so shared masking is visible.
    with torch.no_grad():
        for proj in model.queries.sentence_proj:
            proj.weight.copy_(model.queries.sentence_proj[0].weight)
            proj.bias.copy_(model.queries.sentence_proj[0].bias)
        model.queries.fuse.weight.zero_()
    out = model(tokens, lengths, feats, layouts)
    steps = [t for t in range(SNMN_STEPS) if bool(out.has_mask[0, t])]
    for t in steps[1:]:
        assert torch.allclose(out.mask_weights[0, steps[0]], out.mask_weights[0, t], atol=1e-9)


def test_snmn_scene_pushes_uniform(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab, mode="snmn", mask_sharing="separate")
    qa = ds.questions[0]
    tokens, lengths, feats = batch_from(ds, vocab, [qa])
    count_all = (ProgramNode("scene"), ProgramNode("count", (), (0,)))
    layouts = torch.tensor([layout_ids(count_all)])
    out = model(tokens, lengths, feats, layouts)
    assert torch.allclose(
        out.attention[0, 0], torch.full((8, 8), 1 / 64, dtype=torch.float64), atol=1e-12
    )


def test_snmn_noop_preserves_trace_map_and_answer(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab, mode="snmn", mask_sharing="separate")
    qa = next(q for q in ds.questions if q.family == "exist")
    names = [n for n, _ in layout_from_program(qa.program)]
    n_active = sum(1 for n in names if n != "NoOp")
    tokens, lengths, feats, layouts = snmn_batch(ds, vocab, [qa])
    out = model(tokens, lengths, feats, layouts)
    for t in range(n_active, SNMN_STEPS):
        assert torch.allclose(out.attention[0, t], out.attention[0, n_active - 1])
    # Truncated layout (NoOps dropped) must give identical answer logits.
    short = torch.tensor([layout_ids(qa.program)])  # already padded to 9
    out2 = model(tokens, lengths, feats, short)
    assert torch.allclose(out.answer_logits, out2.answer_logits, atol=1e-12)


def test_snmn_and_idempotent_after_renormalization():
    a = torch.rand(3, 64, dtype=torch.float64)
    a /= a.sum(dim=-1, keepdim=True)
    combined = normalize_map(torch.minimum(a, a))
    assert torch.allclose(combined, a, atol=1e-12)


def test_snmn_trace_includes_layout(tiny_data):
    ds, vocab = tiny_data
    model = build_model(vocab, mode="snmn", mask_sharing="separate")
    qa = ds.questions[0]
    names = [[n for n, _ in layout_from_program(qa.program)]]
    tokens, lengths, feats, layouts = snmn_batch(ds, vocab, [qa])
    traces = run_episode(model, tokens, lengths, feats, layouts, names)
    assert traces[0].layout == names[0]
    assert traces[0].attention.shape == (SNMN_STEPS, 8, 8)
