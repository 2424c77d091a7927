import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from msp_dst.corpus import Schema, SlotDef, dialogue_from_dict
from msp_dst.encoder import build_vocab, schema_tokens
from msp_dst.model import (
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
    zero_head_parameters,
)
from msp_dst.tracker import track_corpus
from msp_dst.training import (
    CorpusBundle,
    TrainConfig,
    TrainingError,
    build_turn_items,
    collate,
    compute_losses,
    grad_check,
    joint_loss,
    loss_hit_categorical,
    loss_hit_span,
    loss_mention,
    loss_type,
    lr_at,
    train,
)

LN2 = math.log(2.0)
LN4 = math.log(4.0)


# ---------------------------------------------------------------------------
# loss functions
# ---------------------------------------------------------------------------

def test_perfect_predictions_cost_nothing():
    p = torch.tensor([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
    assert float(loss_type(p, torch.tensor([1, 0]))) == 0.0


def test_uniform_four_way_costs_ln4():
    p = torch.full((1, 4), 0.25, dtype=torch.float64)
    assert abs(float(loss_type(p, torch.tensor([2]))) - LN4) < 1e-12


def test_type_loss_additive_over_examples():
    p = torch.full((2, 4), 0.25, dtype=torch.float64)
    assert abs(float(loss_type(p, torch.tensor([0, 3]))) - 2 * LN4) < 1e-12


def test_empty_mention_batch_costs_zero():
    assert float(loss_mention(torch.zeros(0, 4), torch.zeros(0, dtype=torch.long))) == 0.0


def test_mention_loss_from_selection_probability():
    e2 = math.exp(2)
    p = torch.tensor([[e2 / (e2 + 1), 1 / (e2 + 1), 0.0, 0.0]], dtype=torch.float64)
    got = float(loss_mention(p, torch.tensor([0])))
    assert abs(got - (-math.log(e2 / (e2 + 1)))) < 1e-9
    assert abs(got - 0.126928) < 1e-5


def test_span_loss_uniform_ten_tokens():
    p = torch.full((1, 10), 0.1, dtype=torch.float64)
    got = float(loss_hit_span(p, p, torch.tensor([3]), torch.tensor([5])))
    assert abs(got - math.log(10.0)) < 1e-12


def test_categorical_loss_uniform_two_values():
    p = torch.full((1, 2), 0.5, dtype=torch.float64)
    assert abs(float(loss_hit_categorical(p, torch.tensor([1]))) - LN2) < 1e-12


def test_clamped_log_never_infinite():
    p = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    got = float(loss_type(p, torch.tensor([1])))
    assert math.isfinite(got)
    assert got == pytest.approx(-math.log(1e-12))


def test_joint_weighting_composition():
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (0.6, 0.2, 0.2)
    assert float(joint_loss(1.0, 1.0, 1.0, cfg)) == pytest.approx(1.0)
    assert float(joint_loss(0.0, 0.0, 0.0, cfg)) == 0.0
    got = joint_loss(LN4, 0.0, LN2, cfg)
    assert got == pytest.approx(0.6 * LN4 + 0.2 * LN2, abs=1e-9)
    assert got == pytest.approx(0.970406, abs=1e-6)


@settings(max_examples=40)
@given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=99))
def test_loss_additivity_over_partitions(split, seed):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(12, 4, generator=gen, dtype=torch.float64)
    p = torch.softmax(logits, dim=1)
    labels = torch.randint(0, 4, (12,), generator=gen)
    whole = float(loss_type(p, labels))
    parts = float(loss_type(p[:split], labels[:split])) + float(
        loss_type(p[split:], labels[split:]))
    assert whole == pytest.approx(parts, abs=1e-9)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-0.1)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def test_lr_warmup_midpoint():
    assert lr_at(50, 1000, 1e-5, 0.1) == pytest.approx(5e-6)


def test_lr_peak_at_warmup_boundary():
    assert lr_at(100, 1000, 1e-5, 0.1) == pytest.approx(1e-5)


def test_lr_linear_decay():
    assert lr_at(550, 1000, 1e-5, 0.1) == pytest.approx(5e-6)
    assert lr_at(1000, 1000, 1e-5, 0.1) == pytest.approx(0.0)


def test_lr_step_beyond_total_rejected():
    with pytest.raises(ValueError):
        lr_at(1001, 1000, 1e-5, 0.1)


def test_lr_piecewise_linear_and_continuous():
    total, peak, warmup = 200, 1e-3, 0.1
    values = [lr_at(s, total, peak, warmup) for s in range(total + 1)]
    assert max(values) == pytest.approx(peak)
    assert values.index(max(values)) == 20
    diffs = [values[i + 1] - values[i] for i in range(total)]
    ramp = set(round(d, 12) for d in diffs[:20])
    decay = set(round(d, 12) for d in diffs[20:])
    assert len(ramp) == 1 and len(decay) == 1


# ---------------------------------------------------------------------------
# micro model fixtures
# ---------------------------------------------------------------------------

def micro_schema() -> Schema:
    return Schema([
        SlotDef("toy-color", "toy", "categorical", ("red", "green", "blue"), ()),
        SlotDef("toy-size", "toy", "span", (), ("toy-color",)),
    ])


def micro_bundle(n=6) -> CorpusBundle:
    schema = micro_schema()
    colors = ["red", "green", "blue"]
    sizes = ["three", "five", "seven"]
    dialogues = []
    for i in range(n):
        color = colors[i % 3]
        size = sizes[(i + 1) % 3]
        raw = {"id": f"toy-{i}", "turns": [
            {"agent": "hello , what do you want ?",
             "user": f"i want a {color} one .",
             "state": {"toy-color": color}},
            {"agent": "which size do you need ?",
             "user": f"size {size} please .",
             "state": {"toy-color": color, "toy-size": size}},
            {"agent": "done , goodbye .", "user": "thanks , goodbye .",
             "state": {"toy-color": color, "toy-size": size}},
        ]}
        dialogues.append(dialogue_from_dict(raw, schema))
    return CorpusBundle(schema, dialogues, dialogues[:2], dialogues[:2])


def micro_model(bundle, strategy="msp", dim=8, seed=0):
    streams = []
    for d in bundle.train:
        for t in d.turns:
            streams.append(t.agent_tokens)
            streams.append(t.user_tokens)
    # pad the vocabulary to a fixed 50-token inventory
    extra = [f"filler{i}" for i in range(30)]
    vocab = build_vocab(streams, extra_tokens=schema_tokens(bundle.schema) + extra)
    config = ModelConfig(strategy=strategy, dim=dim, blocks=1, attn_heads=2,
                         max_len=64)
    return build_model(bundle.schema, vocab, config, seed=seed)


# ---------------------------------------------------------------------------
# zero-initialized analytic values
# ---------------------------------------------------------------------------

def test_zero_heads_give_analytic_losses():
    bundle = micro_bundle()
    model = micro_model(bundle).double()
    model.table.matrix = model.table.matrix.double()
    model.clear_value_cache()
    zero_head_parameters(model)
    items = build_turn_items(bundle.train[:1], model)
    batch = collate(items, model)
    batch["pool_reps"] = batch["pool_reps"].double()
    losses = compute_losses(model, batch)
    n_type = batch["type"].numel()
    assert float(losses["type"]) == pytest.approx(n_type * LN4, abs=1e-9)
    # one categorical hit example per dialogue turn 1, |V| = 3
    n_cat = int((batch["cat"] >= 0).sum())
    span_rows = batch["span"][:, :, 0] >= 0
    assert n_cat == 1 and int(span_rows.sum()) == 1
    # spans contribute ln(L) for the uniform distribution over each context
    lengths = batch["lengths"] - 1
    span_len = float(lengths[span_rows.any(dim=1)][0])
    expect_hit = math.log(3.0) + math.log(span_len)
    assert float(losses["hit"]) == pytest.approx(expect_hit, abs=1e-9)


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

def test_grad_check_micro_model_under_tolerance():
    bundle = micro_bundle()
    model = micro_model(bundle)
    items = build_turn_items(bundle.train, model)
    batch = collate(items[:6], model)
    err = grad_check(model, batch, h=1e-4, n_samples=60, seed=1)
    assert err < 1e-5


def test_grad_check_skips_frozen_embeddings():
    bundle = micro_bundle()
    model = micro_model(bundle)
    frozen = model.table.matrix.clone()
    items = build_turn_items(bundle.train, model)
    batch = collate(items[:4], model)
    grad_check(model, batch, n_samples=20, seed=0)
    assert not model.table.matrix.requires_grad
    assert torch.equal(model.table.matrix, frozen.double())


def test_zero_loss_batch_has_stationary_bias_gradient():
    bundle = micro_bundle()
    model = micro_model(bundle).double()
    model.table.matrix = model.table.matrix.double()
    model.clear_value_cache()
    items = build_turn_items(bundle.train[:1], model)
    batch = collate(items, model)
    batch["pool_reps"] = batch["pool_reps"].double()
    # drive the type head to a perfect fit on one example family by brute
    # bias: the gradient at the label coordinate then vanishes
    with torch.no_grad():
        model.type_weight.zero_()
        model.type_bias.zero_()
        model.type_bias[:, 0] += 40.0  # everything "none"
    keep = batch["type"] == 0
    batch = dict(batch)
    batch["type"] = torch.where(keep, batch["type"], torch.zeros_like(batch["type"]))
    losses = compute_losses(model, batch)
    losses["type"].backward()
    grad = model.type_bias.grad[:, 0]
    assert float(grad.abs().max()) < 1e-9


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_single_dialogue_memorization():
    bundle = micro_bundle(n=1)
    cfg = TrainConfig(epochs=600, lr=1e-2, batch_size=4, seed=0, patience=0,
                      warmup=0.1)
    model, history = train(cfg, ModelConfig(strategy="msp", dim=16, blocks=1,
                                            attn_heads=2, max_len=64), bundle)
    assert min(h["train_loss"] for h in history) < 0.01


def test_training_deterministic_given_seed():
    bundle = micro_bundle()
    cfg = TrainConfig(epochs=2, lr=1e-3, batch_size=4, seed=7, patience=0)
    mc = ModelConfig(strategy="msp", dim=8, blocks=1, attn_heads=2, max_len=64)
    _, history_a = train(cfg, mc, bundle)
    _, history_b = train(cfg, mc, bundle)
    assert history_a == history_b


def test_early_stopping_respects_patience():
    bundle = micro_bundle()
    cfg = TrainConfig(epochs=40, lr=1e-3, batch_size=4, seed=0, patience=2)
    mc = ModelConfig(strategy="msp", dim=8, blocks=1, attn_heads=2, max_len=64)
    _, history = train(cfg, mc, bundle)
    assert len(history) < 40
    best = max(h["dev_jga"] for h in history)
    best_epoch = next(h["epoch"] for h in history if h["dev_jga"] == best)
    assert history[-1]["epoch"] <= best_epoch + 2


def test_frozen_embedding_table_unchanged_by_training():
    from msp_dst.encoder import EmbeddingTable

    bundle = micro_bundle()
    cfg = TrainConfig(epochs=2, lr=1e-3, batch_size=4, seed=3, patience=0)
    mc = ModelConfig(strategy="msp", dim=8, blocks=1, attn_heads=2, max_len=64)
    model, _ = train(cfg, mc, bundle)
    # the table is derived purely from (vocab, seed); training must not move it
    pristine = EmbeddingTable(model.vocab, 8, seed=mc.embedding_seed)
    assert torch.equal(model.table.matrix, pristine.matrix)


def test_history_schema():
    bundle = micro_bundle()
    cfg = TrainConfig(epochs=2, lr=1e-3, batch_size=4, seed=0, patience=0)
    mc = ModelConfig(strategy="msp", dim=8, blocks=1, attn_heads=2, max_len=64)
    _, history = train(cfg, mc, bundle)
    assert [h["epoch"] for h in history] == [1, 2]
    for h in history:
        assert set(h) == {"epoch", "train_loss", "dev_jga", "lr"}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    bundle = micro_bundle()
    model = micro_model(bundle, seed=4)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(model, path)
    restored = load_checkpoint(path, schema=bundle.schema)
    result_a = track_corpus(model, bundle.test)
    result_b = track_corpus(restored, bundle.test)
    for did in result_a.states:
        assert [s.values for s in result_a.states[did]] == [
            s.values for s in result_b.states[did]]


def test_checkpoint_fingerprint_mismatch(tmp_path):
    bundle = micro_bundle()
    model = micro_model(bundle)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(model, path)
    other = Schema([SlotDef("x-y", "x", "span", (), ())])
    with pytest.raises(ValueError, match="fingerprint"):
        load_checkpoint(path, schema=other)


def test_paper_scale_preset():
    cfg = TrainConfig.paper_scale()
    assert cfg.lr == pytest.approx(1e-5)
    assert cfg.epochs == 20
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (0.6, 0.2, 0.2)
