"""Losses, the warmup/decay learning-rate schedule, teacher-forced batch
construction, the training loop, and finite-difference gradient verification."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch

from . import metrics
from .corpus import (
    Dialogue,
    Schema,
    label_dialogue,
    parse_dialogues,
    parse_schema,
)
from .encoder import build_vocab, schema_tokens
from .model import DstModel, ModelConfig, build_model
from .tracker import track_corpus

logger = logging.getLogger("msp_dst.training")

LOG_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.6
    beta: float = 0.2
    gamma: float = 0.2
    lr: float = 1e-3
    epochs: int = 20
    warmup: float = 0.1
    patience: int = 5
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 <= self.warmup < 1:
            raise ValueError("warmup proportion must lie in [0, 1)")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Preset matching a full-scale pretrained-backbone run."""
        return cls(**{"lr": 1e-5, "epochs": 20, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def nll_sum(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Sum of -log(probability at the label index), floored at 1e-12."""
    if probs.shape[0] == 0:
        return probs.new_zeros(())
    picked = probs[torch.arange(probs.shape[0]), labels]
    if bool((picked < LOG_FLOOR).any()):
        logger.warning("clamped %d probabilities at the log floor",
                       int((picked < LOG_FLOOR).sum()))
    return -torch.log(picked.clamp(min=LOG_FLOOR)).sum()


def loss_type(p_type: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return nll_sum(p_type, labels)


def loss_mention(p_mention: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Selection loss over examples labeled mentioned; an empty set costs 0."""
    return nll_sum(p_mention, labels)


def loss_hit_categorical(p_hit: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return nll_sum(p_hit, labels)


def loss_hit_span(p_start: torch.Tensor, p_end: torch.Tensor,
                  y_start: torch.Tensor, y_end: torch.Tensor) -> torch.Tensor:
    return 0.5 * (nll_sum(p_start, y_start) + nll_sum(p_end, y_end))


def joint_loss(l_type, l_mention, l_hit, config: TrainConfig):
    """Weighted sum of the three component losses."""
    return config.alpha * l_type + config.beta * l_mention + config.gamma * l_hit


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def lr_at(step: int, total_steps: int, peak_lr: float, warmup: float) -> float:
    """Linear ramp to peak over the warmup fraction, then linear decay to 0
    at total_steps."""
    if step > total_steps:
        raise ValueError(f"step {step} exceeds total_steps {total_steps}")
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    warmup_steps = warmup * total_steps
    if step <= warmup_steps and warmup_steps > 0:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    return peak_lr * (1.0 - (step - warmup_steps) / (total_steps - warmup_steps))


# ---------------------------------------------------------------------------
# teacher-forced batches
# ---------------------------------------------------------------------------

@dataclass
class TurnItem:
    dialogue_id: str
    turn_index: int
    token_ids: list[int]
    type_labels: list[int]          # length S, schema order
    mention_labels: list[int]       # -1 when unsupervised
    cat_labels: list[int]
    span_labels: list[tuple[int, int]]
    pool_reps: torch.Tensor | None  # (S, K, n)
    pool_mask: torch.Tensor | None  # (S, K)


def build_turn_items(dialogues: list[Dialogue], model: DstModel) -> list[TurnItem]:
    """Materialize per-turn training items with teacher-forced pools.

    Pool entry representations come from the frozen table, so they are
    constants; labels follow the model's strategy and ablation toggles.
    """
    cfg = model.config
    schema = model.schema
    classes = model.type_classes
    items: list[TurnItem] = []
    for d in dialogues:
        labeled = label_dialogue(
            d, schema, strategy=cfg.strategy, max_len=cfg.max_len, K=cfg.K,
            pool_mode=cfg.pool_mode, categorical_heads=cfg.categorical_heads,
        )
        for turn in labeled:
            ctx = turn.context
            ids = [model.vocab.cls_id] + model.vocab.ids(ctx.token_texts)
            types, mentions, cats, spans = [], [], [], []
            for name in schema.slot_names:
                ex = turn.examples[name]
                types.append(classes.index(ex.hit_type_label))
                mentions.append(-1 if ex.mention_index_label is None
                                else ex.mention_index_label)
                cats.append(-1 if ex.categorical_label is None else ex.categorical_label)
                spans.append(ex.span_label if ex.span_label is not None else (-1, -1))
            pool_reps = pool_mask = None
            if cfg.strategy == "msp":
                pools = [turn.pools[name] for name in schema.slot_names]
                pool_reps, pool_mask = model.pool_tensors(pools)
            items.append(TurnItem(d.id, turn.turn_index, ids, types, mentions,
                                  cats, spans, pool_reps, pool_mask))
    return items


def collate(items: list[TurnItem], model: DstModel) -> dict:
    pad = model.vocab.pad_id
    lengths = torch.tensor([len(it.token_ids) for it in items], dtype=torch.long)
    L = int(lengths.max())
    ids = torch.full((len(items), L), pad, dtype=torch.long)
    for b, it in enumerate(items):
        ids[b, :len(it.token_ids)] = torch.tensor(it.token_ids, dtype=torch.long)
    batch = {
        "ids": ids,
        "lengths": lengths,
        "type": torch.tensor([it.type_labels for it in items], dtype=torch.long),
        "mention": torch.tensor([it.mention_labels for it in items], dtype=torch.long),
        "cat": torch.tensor([it.cat_labels for it in items], dtype=torch.long),
        "span": torch.tensor([it.span_labels for it in items], dtype=torch.long),
    }
    if model.config.strategy == "msp":
        batch["pool_reps"] = torch.stack([it.pool_reps for it in items])
        batch["pool_mask"] = torch.stack([it.pool_mask for it in items])
    return batch


def compute_losses(model: DstModel, batch: dict) -> dict[str, torch.Tensor]:
    """Component losses summed over every supervised (turn, slot) cell of the
    batch."""
    cls, toks, tok_mask = model.encode_batch(batch["ids"], batch["lengths"])
    zero = cls.new_zeros(())
    l_mention, l_hit = zero.clone(), zero.clone()

    m_fused = None
    if model.config.strategy == "msp":
        m_fused, _ = model.fuse_all(batch["pool_reps"], batch["pool_mask"], cls)

    type_logits = model.type_logits_all(m_fused, cls)  # (B, S, C)
    p_type = torch.softmax(type_logits, dim=2)
    l_type = loss_type(p_type.reshape(-1, p_type.shape[2]),
                       batch["type"].reshape(-1))

    if model.config.strategy == "msp":
        sel = batch["mention"] >= 0  # (B, S)
        if bool(sel.any()):
            logits = model.mention_logits_all(cls, batch["pool_reps"],
                                              batch["pool_mask"])
            p_mention = torch.softmax(logits[sel], dim=1)
            l_mention = l_mention + loss_mention(p_mention, batch["mention"][sel])

    for i, name in enumerate(model.schema.slot_names):
        if model.slot_kind(name) == "categorical":
            sub = batch["cat"][:, i] >= 0
            if bool(sub.any()):
                p_cat = torch.softmax(
                    model.cat_logits(name,
                                     m_fused[sub, i] if m_fused is not None else None,
                                     cls[sub]), dim=1)
                l_hit = l_hit + loss_hit_categorical(p_cat, batch["cat"][sub, i])
        else:
            sub = batch["span"][:, i, 0] >= 0
            if bool(sub.any()):
                s_logits, e_logits = model.span_logits(name, toks[sub], tok_mask[sub])
                p_start = torch.softmax(s_logits, dim=1)
                p_end = torch.softmax(e_logits, dim=1)
                l_hit = l_hit + loss_hit_span(p_start, p_end,
                                              batch["span"][sub, i, 0],
                                              batch["span"][sub, i, 1])
    return {"type": l_type, "mention": l_mention, "hit": l_hit}


# ---------------------------------------------------------------------------
# corpus bundles on disk
# ---------------------------------------------------------------------------

@dataclass
class CorpusBundle:
    schema: Schema
    train: list[Dialogue]
    dev: list[Dialogue]
    test: list[Dialogue]
    events: list[dict] = field(default_factory=list)


def load_corpus_dir(path: str | Path) -> CorpusBundle:
    path = Path(path)
    schema = parse_schema(path / "schema.json")
    splits = {}
    for split in ("train", "dev", "test"):
        file = path / f"{split}.jsonl"
        splits[split] = parse_dialogues(file, schema) if file.exists() else []
    events: list[dict] = []
    events_file = path / "events.jsonl"
    if events_file.exists():
        for line in events_file.read_text(encoding="utf-8").splitlines():
            if line.strip():
                events.append(json.loads(line))
    return CorpusBundle(schema, splits["train"], splits["dev"], splits["test"], events)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def make_vocab(train_dialogues: list[Dialogue], schema: Schema):
    streams = []
    for d in train_dialogues:
        for turn in d.turns:
            streams.append(turn.agent_tokens)
            streams.append(turn.user_tokens)
    return build_vocab(streams, extra_tokens=schema_tokens(schema))


def train(
    train_config: TrainConfig,
    model_config: ModelConfig,
    bundle: CorpusBundle,
) -> tuple[DstModel, list[dict]]:
    """Train one model; returns the model restored to its best dev-JGA epoch
    and the per-epoch history."""
    torch.manual_seed(train_config.seed)
    vocab = make_vocab(bundle.train, bundle.schema)
    model = build_model(bundle.schema, vocab, model_config, seed=train_config.seed)
    items = build_turn_items(bundle.train, model)
    if not items:
        raise TrainingError("no training examples")

    steps_per_epoch = math.ceil(len(items) / train_config.batch_size)
    total_steps = max(1, steps_per_epoch * train_config.epochs)
    optimizer = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=train_config.lr)

    # Length-bucketed batches keep padding small; the batch order is shuffled
    # each epoch with the run's seeded generator.
    by_length = sorted(range(len(items)), key=lambda i: len(items[i].token_ids))
    buckets = [
        collate([items[i] for i in by_length[lo:lo + train_config.batch_size]], model)
        for lo in range(0, len(by_length), train_config.batch_size)
    ]

    rng = random.Random(train_config.seed)
    history: list[dict] = []
    best_jga = -1.0
    best_state = None
    stale = 0
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        model.train()
        order = list(range(len(buckets)))
        rng.shuffle(order)
        epoch_loss = 0.0
        last_lr = 0.0
        for bucket_index in order:
            step += 1
            last_lr = lr_at(step, total_steps, train_config.lr, train_config.warmup)
            for group in optimizer.param_groups:
                group["lr"] = last_lr
            batch = buckets[bucket_index]
            losses = compute_losses(model, batch)
            loss = joint_loss(losses["type"], losses["mention"], losses["hit"],
                              train_config)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"type={float(losses['type'])} mention={float(losses['mention'])} "
                    f"hit={float(losses['hit'])}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())

        dev_jga = _dev_jga(model, bundle)
        history.append({
            "epoch": epoch,
            "train_loss": epoch_loss,
            "dev_jga": dev_jga,
            "lr": last_lr,
        })
        logger.info("epoch %d loss %.4f dev_jga %.4f", epoch, epoch_loss, dev_jga)
        if dev_jga > best_jga:
            best_jga = dev_jga
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if train_config.patience and stale >= train_config.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def _dev_jga(model: DstModel, bundle: CorpusBundle) -> float:
    dialogues = bundle.dev or bundle.train
    result = track_corpus(model, dialogues)
    preds, golds = metrics.aligned_states(result, dialogues)
    return metrics.joint_goal_accuracy(preds, golds, bundle.schema)


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(
    model: DstModel,
    batch: dict,
    h: float = 1e-4,
    n_samples: int = 120,
    seed: int = 0,
    config: TrainConfig | None = None,
) -> float:
    """Compare analytic gradients of the joint loss against central
    differences over sampled trainable parameters; returns the maximum
    relative error. Runs in double precision; frozen tensors are skipped by
    construction (they carry no gradient)."""
    config = config or TrainConfig()
    model = model.double()
    model.table.matrix = model.table.matrix.double()
    model.clear_value_cache()
    batch = _batch_to_double(batch)
    model.eval()

    def closure() -> torch.Tensor:
        losses = compute_losses(model, batch)
        return joint_loss(losses["type"], losses["mention"], losses["hit"], config)

    loss = closure()
    model.zero_grad()
    loss.backward()

    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    rng = random.Random(seed)
    max_rel = 0.0
    for _ in range(n_samples):
        pname, param = named[rng.randrange(len(named))]
        flat = param.detach().reshape(-1)
        idx = rng.randrange(flat.numel())
        analytic = float(param.grad.reshape(-1)[idx]) if param.grad is not None else 0.0
        if not math.isfinite(analytic):
            raise TrainingError(f"non-finite analytic gradient in {pname}")
        with torch.no_grad():
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(closure())
            flat[idx] = orig - h
            down = float(closure())
            flat[idx] = orig
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel


def _batch_to_double(batch: dict) -> dict:
    out = dict(batch)
    if "pool_reps" in out:
        out["pool_reps"] = out["pool_reps"].double()
    return out
