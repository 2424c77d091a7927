"""Recurrent state tracking: applies per-slot head outputs turn by turn under
one of four update strategies, maintaining predicted states and an audit
trace. Supports batched tracking across dialogues, oracle-label replay, and
forced-noise error injection."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np
import torch

from . import encoder as enc
from .corpus import (
    DONTCARE,
    NONE_VALUE,
    Dialogue,
    DialogueState,
    Schema,
    TurnLabels,
    state_tokens,
)
from .heads import HeadOutputs
from .model import DstModel, STRATEGIES
from .msp import MentionedSlotPool, build_msp

DISPOSITIONS = ("inherited", "revised", "extracted", "none")


class TrackingError(RuntimeError):
    pass


@dataclass
class TraceRecord:
    dialogue_id: str
    turn: int
    slot: str
    hit_type: str
    mention_index: int | None
    value: str
    disposition: str
    mention_source: str | None = None
    noise: bool = False

    def to_dict(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "turn": self.turn,
            "slot": self.slot,
            "hit_type": self.hit_type,
            "mention_index": self.mention_index,
            "value": self.value,
            "disposition": self.disposition,
            "mention_source": self.mention_source,
            "noise": self.noise,
        }


@dataclass
class NoisePlan:
    """Forced wrong value injected into the predicted state of one slot at
    the turn where its gold value first becomes concrete."""

    slot: str
    turn: int
    value: str


@dataclass
class SlotDecision:
    hit_type: str
    mention_index: int | None = None
    categorical_value: str | None = None
    span: tuple[int, int] | None = None


@dataclass
class TrackResult:
    states: dict[str, list[DialogueState]] = field(default_factory=dict)
    traces: dict[str, list[TraceRecord]] = field(default_factory=dict)

    def all_traces(self) -> list[TraceRecord]:
        rows: list[TraceRecord] = []
        for did in self.states:
            rows.extend(self.traces[did])
        return rows


def serialize_state_string(state: DialogueState, schema: Schema) -> list[str]:
    """Deterministic "slot = value" token rendering in schema order; none
    slots are omitted."""
    return state_tokens(state, schema)


# ---------------------------------------------------------------------------
# decision application
# ---------------------------------------------------------------------------

def _read_span(span: tuple[int, int] | None, token_texts: list[str]) -> str:
    if span is None:
        return NONE_VALUE
    start, end = span
    if start > end or start < 0 or end >= len(token_texts):
        return NONE_VALUE
    return " ".join(token_texts[start:end + 1])


def apply_decision(
    strategy: str,
    decision: SlotDecision,
    prev_value: str,
    pool: MentionedSlotPool | None,
    token_texts: list[str],
) -> str:
    """Next value of one slot given the head decision for this turn."""
    kind = decision.hit_type
    if kind == "dontcare":
        return DONTCARE
    if kind == "none":
        # changed_state treats an unmentioned slot as inherited; the other
        # strategies assert absence.
        return prev_value if strategy == "changed_state" else NONE_VALUE
    if kind == "mentioned":
        if pool is None or pool.is_empty or decision.mention_index is None:
            return NONE_VALUE
        if not pool.mask[decision.mention_index]:
            return NONE_VALUE
        return pool.entries[decision.mention_index].value
    if kind == "hit":
        if decision.categorical_value is not None:
            return decision.categorical_value
        return _read_span(decision.span, token_texts)
    raise TrackingError(f"unknown hit type {kind!r}")


def update_slot(
    slot,
    prev_state: DialogueState,
    outputs: HeadOutputs,
    pool: MentionedSlotPool,
    token_texts: list[str],
) -> str:
    """Value update for one slot under the pool strategy, reading the head
    outputs' argmax decisions."""
    decision = SlotDecision(
        hit_type=outputs.hit_type,
        mention_index=outputs.mention_index,
        categorical_value=outputs.categorical_value,
        span=outputs.span,
    )
    return apply_decision("msp", decision, prev_state.values.get(slot.name, NONE_VALUE),
                          pool, token_texts)


def _disposition(hit_type: str, prev_value: str, new_value: str, strategy: str) -> str:
    if hit_type == "hit":
        if prev_value != NONE_VALUE and new_value != prev_value:
            return "revised"
        return "extracted"
    if hit_type == "mentioned":
        return "inherited" if new_value != NONE_VALUE else "none"
    if hit_type == "dontcare":
        return "inherited" if prev_value == DONTCARE else "extracted"
    # hit_type == "none"
    if strategy == "changed_state" and prev_value != NONE_VALUE:
        return "inherited"
    return "none"


# ---------------------------------------------------------------------------
# batched model tracking
# ---------------------------------------------------------------------------

def _argmax_rows(t: torch.Tensor) -> np.ndarray:
    return np.argmax(t.detach().numpy(), axis=1)


def track_corpus(
    model: DstModel,
    dialogues: list[Dialogue],
    strategy: str | None = None,
    batch_size: int = 64,
    noise: dict[str, NoisePlan] | None = None,
) -> TrackResult:
    """Track every dialogue with the model, batching across dialogues.

    Turn t uses only the observed context and the predicted state at t-1;
    gold states are never consulted.
    """
    strategy = strategy or model.config.strategy
    if strategy not in STRATEGIES:
        raise TrackingError(f"unknown strategy {strategy!r}")
    if strategy != model.config.strategy:
        raise TrackingError(
            f"checkpoint was trained for {model.config.strategy!r}; "
            f"cannot track with strategy {strategy!r}"
        )
    noise = noise or {}
    model.eval()

    schema = model.schema
    cfg = model.config
    result = TrackResult()
    running: dict[str, dict] = {}
    for d in dialogues:
        result.states[d.id] = []
        result.traces[d.id] = []
        running[d.id] = {
            "values": {name: NONE_VALUE for name in schema.slot_names},
            "updated": {},
            "utterances": [],
        }

    max_turns = max(len(d) for d in dialogues) if dialogues else 0
    for t in range(1, max_turns + 1):
        active = [d for d in dialogues if len(d) >= t]
        for lo in range(0, len(active), batch_size):
            _track_turn_batch(model, active[lo:lo + batch_size], t, strategy,
                              running, result, noise)
    return result


def _track_turn_batch(model, batch, t, strategy, running, result, noise):
    schema = model.schema
    cfg = model.config
    contexts = []
    pools_by_slot: dict[str, list[MentionedSlotPool]] = {}
    prev_states = []
    for d in batch:
        run = running[d.id]
        turn = d.turns[t - 1]
        run["utterances"].append(("agent", turn.agent_tokens))
        run["utterances"].append(("user", turn.user_tokens))
        prev = DialogueState(dict(run["values"]), dict(run["updated"]))
        prev_states.append(prev)
        extra = state_tokens(prev, schema) if strategy == "full_state" else None
        contexts.append(
            enc.tokenize_context(run["utterances"], cfg.max_len, model.vocab,
                                 state_tokens=extra)
        )

    lengths = torch.tensor([len(c.token_ids) for c in contexts], dtype=torch.long)
    L = int(lengths.max())
    ids = torch.full((len(batch), L), model.vocab.pad_id, dtype=torch.long)
    for b, c in enumerate(contexts):
        ids[b, :len(c.token_ids)] = torch.tensor(c.token_ids, dtype=torch.long)

    with torch.no_grad():
        cls, toks, tok_mask = model.encode_batch(ids, lengths)

        m_fused = None
        mention_idx = None
        if strategy == "msp":
            for slot in schema.slots:
                pools_by_slot[slot.name] = [
                    build_msp(slot, prev_states[b], schema, K=cfg.K,
                              table=None, pool_mode=cfg.pool_mode)
                    for b in range(len(batch))
                ]
            reps_mask = [model.pool_tensors(pools_by_slot[name])
                         for name in schema.slot_names]
            pool_reps = torch.stack([rm[0] for rm in reps_mask], dim=1)  # (B,S,K,n)
            pool_mask = torch.stack([rm[1] for rm in reps_mask], dim=1)  # (B,S,K)
            m_fused, _ = model.fuse_all(pool_reps, pool_mask, cls)
            logits = model.mention_logits_all(cls, pool_reps, pool_mask)
            filled = torch.where(pool_mask.any(dim=2, keepdim=True), logits,
                                 torch.zeros_like(logits))
            mention_idx = np.argmax(filled.numpy(), axis=2)  # (B, S)

        type_idx = np.argmax(
            torch.softmax(model.type_logits_all(m_fused, cls), dim=2).numpy(), axis=2)

        decisions: dict[str, list[SlotDecision]] = {}
        for i, slot in enumerate(schema.slots):
            cat_values = span_pairs = None
            if model.slot_kind(slot.name) == "categorical":
                cat_probs = torch.softmax(
                    model.cat_logits(slot.name,
                                     m_fused[:, i] if m_fused is not None else None,
                                     cls), dim=1)
                cat_values = _argmax_rows(cat_probs)
            else:
                s_logits, e_logits = model.span_logits(slot.name, toks, tok_mask)
                span_pairs = (_argmax_rows(s_logits), _argmax_rows(e_logits))

            per_slot = []
            ontology = schema.slot(slot.name).ontology
            for b in range(len(batch)):
                hit_type = model.type_classes[type_idx[b, i]]
                dec = SlotDecision(hit_type=hit_type)
                if hit_type == "mentioned" and mention_idx is not None:
                    dec.mention_index = int(mention_idx[b, i])
                if hit_type == "hit":
                    if cat_values is not None:
                        dec.categorical_value = ontology[int(cat_values[b])]
                    else:
                        start, end = int(span_pairs[0][b]), int(span_pairs[1][b])
                        dec.span = (start, end) if start <= end else None
                per_slot.append(dec)
            decisions[slot.name] = per_slot

    for b, d in enumerate(batch):
        run = running[d.id]
        plan = noise.get(d.id)
        for slot in schema.slots:
            dec = decisions[slot.name][b]
            pool = pools_by_slot[slot.name][b] if strategy == "msp" else None
            prev_value = prev_states[b].values[slot.name]
            value = apply_decision(strategy, dec, prev_value, pool,
                                   contexts[b].token_texts)
            injected = False
            if plan is not None and plan.slot == slot.name and plan.turn == t:
                value = plan.value
                injected = True
            disposition = _disposition(dec.hit_type, prev_value, value, strategy)
            source = None
            if (dec.hit_type == "mentioned" and pool is not None
                    and dec.mention_index is not None
                    and pool.mask[dec.mention_index]):
                source = pool.entries[dec.mention_index].source_slot
            if value != run["values"][slot.name]:
                run["values"][slot.name] = value
                if value == NONE_VALUE:
                    run["updated"].pop(slot.name, None)
                else:
                    run["updated"][slot.name] = t
            result.traces[d.id].append(
                TraceRecord(d.id, t, slot.name, dec.hit_type, dec.mention_index,
                            value, disposition, mention_source=source, noise=injected)
            )
        result.states[d.id].append(
            DialogueState(dict(run["values"]), dict(run["updated"]))
        )


def track_dialogue(
    model: DstModel,
    dialogue: Dialogue,
    strategy: str | None = None,
    noise: dict[str, NoisePlan] | None = None,
) -> tuple[list[DialogueState], list[TraceRecord]]:
    """Track one dialogue; identical to the batched path with batch size 1."""
    result = track_corpus(model, [dialogue], strategy=strategy, batch_size=1,
                          noise=noise)
    return result.states[dialogue.id], result.traces[dialogue.id]


# ---------------------------------------------------------------------------
# oracle replay: feed gold labels through the update engine
# ---------------------------------------------------------------------------

def track_corpus_oracle(
    dialogues: list[Dialogue],
    schema: Schema,
    labels: dict[str, list[TurnLabels]],
    strategy: str = "msp",
    K: int = 4,
    pool_mode: str = "full",
) -> TrackResult:
    """Replay teacher labels through the state update rules.

    On a corpus where every hit label resolves (no unmatched spans), the
    predicted states reproduce the gold states exactly.
    """
    if strategy not in STRATEGIES:
        raise TrackingError(f"unknown strategy {strategy!r}")
    result = TrackResult()
    for d in dialogues:
        values = {name: NONE_VALUE for name in schema.slot_names}
        updated: dict[str, int] = {}
        result.states[d.id] = []
        result.traces[d.id] = []
        for t, turn_labels in enumerate(labels[d.id], start=1):
            prev = DialogueState(dict(values), dict(updated))
            for slot in schema.slots:
                ex = turn_labels.examples[slot.name]
                pool = None
                if strategy == "msp":
                    pool = build_msp(slot, prev, schema, K=K, table=None,
                                     pool_mode=pool_mode)
                dec = SlotDecision(
                    hit_type=ex.hit_type_label,
                    mention_index=ex.mention_index_label,
                    categorical_value=(
                        schema.slot(slot.name).ontology[ex.categorical_label]
                        if ex.categorical_label is not None else None
                    ),
                    span=ex.span_label,
                )
                prev_value = prev.values[slot.name]
                value = apply_decision(strategy, dec, prev_value, pool,
                                       turn_labels.context.token_texts)
                disposition = _disposition(dec.hit_type, prev_value, value, strategy)
                source = None
                if (dec.hit_type == "mentioned" and pool is not None
                        and dec.mention_index is not None
                        and pool.mask[dec.mention_index]):
                    source = pool.entries[dec.mention_index].source_slot
                if value != values[slot.name]:
                    values[slot.name] = value
                    if value == NONE_VALUE:
                        updated.pop(slot.name, None)
                    else:
                        updated[slot.name] = t
                result.traces[d.id].append(
                    TraceRecord(d.id, t, slot.name, ex.hit_type_label,
                                ex.mention_index_label, value, disposition,
                                mention_source=source)
                )
            result.states[d.id].append(DialogueState(dict(values), dict(updated)))
    return result


# ---------------------------------------------------------------------------
# forced-noise plans
# ---------------------------------------------------------------------------

def _first_fills(d: Dialogue, schema: Schema) -> list[tuple[str, int, str]]:
    """(slot, turn, value) for each slot's first concrete gold value."""
    fills: list[tuple[str, int, str]] = []
    seen: set[str] = set()
    for t, turn in enumerate(d.turns, start=1):
        for name in schema.slot_names:
            value = turn.gold_state.values[name]
            if name in seen or value in (NONE_VALUE, DONTCARE):
                continue
            seen.add(name)
            fills.append((name, t, value))
    return fills


def _restated_later(d: Dialogue, slot_value: str, fill_turn: int) -> bool:
    from .corpus import find_span

    for t in range(fill_turn, len(d.turns)):
        turn = d.turns[t]
        if (find_span(slot_value, turn.agent_tokens) is not None
                or find_span(slot_value, turn.user_tokens) is not None):
            return True
    return False


def build_noise_plans(
    dialogues: list[Dialogue],
    schema: Schema,
    seed: int = 0,
    rate: float = 1.0,
    restated_only: bool = False,
) -> dict[str, NoisePlan]:
    """Plan one early wrong-value injection per dialogue.

    Picks a slot whose gold value first becomes concrete before the final
    turn and substitutes a different value drawn from that slot's corpus
    value inventory. With ``restated_only`` the slot must additionally keep
    its gold value to the end and have it re-stated in a later utterance, so
    the dialogue carries later evidence a tracker could use to recover.
    Deterministic given (corpus, seed).
    """
    inventory: dict[str, list[str]] = {name: [] for name in schema.slot_names}
    for d in dialogues:
        for turn in d.turns:
            for name, value in turn.gold_state.values.items():
                if value not in (NONE_VALUE, DONTCARE) and value not in inventory[name]:
                    inventory[name].append(value)

    plans: dict[str, NoisePlan] = {}
    rng = random.Random(seed)
    for d in dialogues:
        take = rng.random() < rate
        eligible = [(name, t, value) for name, t, value in _first_fills(d, schema)
                    if t < len(d.turns)]
        if restated_only:
            final = d.turns[-1].gold_state.values
            eligible = [
                (name, t, value) for name, t, value in eligible
                if final[name] == value and _restated_later(d, value, t)
            ]
        if not take or not eligible:
            continue
        slot, turn_idx, value = eligible[rng.randrange(len(eligible))]
        alternatives = [v for v in inventory[slot] if v != value]
        if not alternatives:
            continue
        plans[d.id] = NoisePlan(slot=slot, turn=turn_idx,
                                value=alternatives[rng.randrange(len(alternatives))])
    return plans
