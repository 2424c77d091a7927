"""Corpus handling: slot schema, dialogue files, value normalization and
per-turn per-slot training labels for every prediction head."""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

NONE_VALUE = "none"
DONTCARE = "dontcare"

# Class orderings are fixed and serialized with checkpoints.
HIT_TYPES = ("none", "dontcare", "mentioned", "hit")
CHANGE_TYPES = ("none", "dontcare", "hit")

MAX_RELEVANT_SLOTS = 3

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class CorpusError(ValueError):
    """Malformed schema or dialogue input."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlotDef:
    name: str
    domain: str
    kind: str  # "categorical" | "span"
    ontology: tuple[str, ...] = ()
    relevant_slots: tuple[str, ...] = ()


@dataclass
class Schema:
    slots: list[SlotDef]
    synonyms: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._by_name = {s.name: s for s in self.slots}
        self._index = {s.name: i for i, s in enumerate(self.slots)}

    def slot(self, name: str) -> SlotDef:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def slot_index(self, name: str) -> int:
        return self._index[name]

    @property
    def slot_names(self) -> list[str]:
        return [s.name for s in self.slots]

    @property
    def domains(self) -> list[str]:
        seen: list[str] = []
        for s in self.slots:
            if s.domain not in seen:
                seen.append(s.domain)
        return seen

    def to_dict(self) -> dict:
        return {
            "slots": [
                {
                    "name": s.name,
                    "domain": s.domain,
                    "kind": s.kind,
                    "ontology": list(s.ontology),
                    "relevant_slots": list(s.relevant_slots),
                }
                for s in self.slots
            ],
            "synonyms": dict(sorted(self.synonyms.items())),
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class DialogueState:
    """Slot -> value map plus the turn index of each slot's latest change."""

    values: dict[str, str]
    last_updated: dict[str, int] = field(default_factory=dict)

    def copy(self) -> "DialogueState":
        return DialogueState(dict(self.values), dict(self.last_updated))

    @staticmethod
    def empty(schema: Schema) -> "DialogueState":
        return DialogueState({name: NONE_VALUE for name in schema.slot_names}, {})


@dataclass
class Turn:
    agent_tokens: list[str]
    user_tokens: list[str]
    gold_state: DialogueState


@dataclass
class Dialogue:
    id: str
    turns: list[Turn]

    def __len__(self) -> int:
        return len(self.turns)


@dataclass
class TrainingExample:
    """Labels for one (turn, slot) cell.

    Exactly one auxiliary label is populated, matching hit_type_label:
    mention_index_label for "mentioned", categorical_label or span_label
    for "hit" (span_label may be missing when the value is not findable in
    the encoded context; such examples carry unmatched=True and are kept
    for the type loss only).
    """

    turn_index: int
    slot: str
    hit_type_label: str
    mention_index_label: int | None = None
    categorical_label: int | None = None
    span_label: tuple[int, int] | None = None
    unmatched: bool = False


# ---------------------------------------------------------------------------
# text normalization
# ---------------------------------------------------------------------------

def normalize_value(value: str, synonyms: dict[str, str] | None = None) -> str:
    """Lowercase, strip punctuation, collapse whitespace, apply synonyms."""
    norm = " ".join(value.lower().translate(_PUNCT_TABLE).split())
    if synonyms:
        norm = synonyms.get(norm, norm)
    return norm


def tokenize_utterance(text: str) -> list[str]:
    """Whitespace tokenization with leading/trailing punctuation split off."""
    tokens: list[str] = []
    for piece in text.lower().split():
        head, tail = 0, len(piece)
        lead: list[str] = []
        while head < tail and piece[head] in string.punctuation:
            lead.append(piece[head])
            head += 1
        trail: list[str] = []
        while tail > head and piece[tail - 1] in string.punctuation:
            trail.append(piece[tail - 1])
            tail -= 1
        tokens.extend(lead)
        if head < tail:
            tokens.append(piece[head:tail])
        tokens.extend(reversed(trail))
    return tokens


def find_span(value: str, tokens: list[str]) -> tuple[int, int] | None:
    """Token indices of the most recent occurrence of ``value`` in ``tokens``.

    Matching is on normalized forms (lowercase, punctuation stripped); the
    returned indices address the original token list. Returns None when the
    value does not occur.
    """
    if not value:
        raise ValueError("find_span requires a non-empty value")
    want = normalize_value(value).split()
    if not want:
        return None
    norm = [normalize_value(t) for t in tokens]
    m = len(want)
    for start in range(len(tokens) - m, -1, -1):
        if norm[start:start + m] == want:
            return (start, start + m - 1)
    return None


def _value_variants(value: str, synonyms: dict[str, str]) -> list[str]:
    """Surface forms to try when locating a value in context."""
    variants = [value]
    norm = normalize_value(value)
    canon = synonyms.get(norm)
    if canon and canon != norm:
        variants.append(canon)
    for alias, target in synonyms.items():
        if target == norm and alias != norm:
            variants.append(alias)
    return variants


# ---------------------------------------------------------------------------
# schema / dialogue parsing
# ---------------------------------------------------------------------------

def parse_schema(path: str | Path) -> Schema:
    """Load and validate a schema file (see README for the JSON layout)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read schema {path}: {exc}") from exc
    return schema_from_dict(raw)


def schema_from_dict(raw: dict) -> Schema:
    slots_raw = raw.get("slots")
    if not slots_raw:
        raise CorpusError("empty schema")
    slots: list[SlotDef] = []
    for entry in slots_raw:
        try:
            name = entry["name"]
            domain = entry["domain"]
            kind = entry["kind"]
        except (TypeError, KeyError) as exc:
            raise CorpusError(f"malformed slot entry: {entry!r}") from exc
        ontology = tuple(entry.get("ontology") or ())
        relevant = tuple(entry.get("relevant_slots") or ())
        if kind not in ("categorical", "span"):
            raise CorpusError(f"slot {name}: unknown kind {kind!r}")
        if kind == "categorical" and not ontology:
            raise CorpusError(f"categorical slot {name} has empty ontology")
        if kind == "span" and ontology:
            raise CorpusError(f"span slot {name} must not declare an ontology")
        if len(relevant) > MAX_RELEVANT_SLOTS:
            raise CorpusError(
                f"slot {name} lists {len(relevant)} relevant slots "
                f"(at most {MAX_RELEVANT_SLOTS} allowed)"
            )
        slots.append(SlotDef(name, domain, kind, ontology, relevant))
    names = [s.name for s in slots]
    if len(set(names)) != len(names):
        raise CorpusError("duplicate slot names in schema")
    known = set(names)
    for s in slots:
        for ref in s.relevant_slots:
            if ref not in known:
                raise CorpusError(f"slot {s.name}: unknown relevant slot {ref!r}")
    synonyms = {
        normalize_value(k): normalize_value(v)
        for k, v in (raw.get("synonyms") or {}).items()
    }
    return Schema(slots, synonyms)


def parse_dialogues(path: str | Path, schema: Schema) -> list[Dialogue]:
    """Load a JSON-lines dialogue file, filling absent slots with none and
    computing last_updated by scanning turns in order."""
    path = Path(path)
    dialogues: list[Dialogue] = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read dialogues {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: bad JSON: {exc}") from exc
        dialogues.append(dialogue_from_dict(raw, schema))
    return dialogues


def dialogue_from_dict(raw: dict, schema: Schema) -> Dialogue:
    did = raw.get("id", "")
    turns_raw = raw.get("turns") or []
    if not turns_raw:
        raise CorpusError(f"dialogue {did!r}: empty dialogue")
    turns: list[Turn] = []
    values = {name: NONE_VALUE for name in schema.slot_names}
    last_updated: dict[str, int] = {}
    for t, entry in enumerate(turns_raw, start=1):
        state_raw = entry.get("state") or {}
        for slot_name in state_raw:
            if slot_name not in schema:
                raise CorpusError(
                    f"dialogue {did!r} turn {t}: unknown slot {slot_name!r}"
                )
        for name in schema.slot_names:
            new = state_raw.get(name, values[name])
            if new != values[name]:
                values[name] = new
                if new == NONE_VALUE:
                    last_updated.pop(name, None)
                else:
                    last_updated[name] = t
        turns.append(
            Turn(
                agent_tokens=tokenize_utterance(entry.get("agent", "")),
                user_tokens=tokenize_utterance(entry.get("user", "")),
                gold_state=DialogueState(dict(values), dict(last_updated)),
            )
        )
    return Dialogue(id=did, turns=turns)


def state_tokens(state: DialogueState, schema: Schema) -> list[str]:
    """Deterministic token rendering of a state: "slot = value" pairs in
    schema order joined with ";" separators, none slots omitted."""
    tokens: list[str] = []
    for slot in schema.slots:
        value = state.values.get(slot.name, NONE_VALUE)
        if value == NONE_VALUE:
            continue
        if tokens:
            tokens.append(";")
        tokens.extend([slot.name, "="])
        tokens.extend(tokenize_utterance(value))
    return tokens


# ---------------------------------------------------------------------------
# label derivation
# ---------------------------------------------------------------------------

@dataclass
class TurnLabels:
    """One turn's encoded context plus the label set of every slot."""

    turn_index: int
    context: "object"  # encoder.TokenizedContext
    examples: dict[str, TrainingExample]
    pools: dict[str, "object"]  # slot -> msp.MentionedSlotPool (msp strategy)


def _categorical_index(slot: SlotDef, value: str, synonyms: dict[str, str]) -> int:
    want = normalize_value(value, synonyms)
    for i, v in enumerate(slot.ontology):
        if normalize_value(v, synonyms) == want:
            return i
    raise CorpusError(f"slot {slot.name}: value {value!r} not in ontology")


def _find_span_with_synonyms(
    value: str, tokens: list[str], synonyms: dict[str, str]
) -> tuple[int, int] | None:
    for variant in _value_variants(value, synonyms):
        span = find_span(variant, tokens)
        if span is not None:
            return span
    return None


def label_dialogue(
    dialogue: Dialogue,
    schema: Schema,
    *,
    strategy: str = "msp",
    max_len: int = 512,
    K: int = 4,
    pool_mode: str = "full",
    categorical_heads: bool = True,
) -> list[TurnLabels]:
    """Derive teacher-forced labels for every (turn, slot) of a dialogue.

    Strategies share the value-head labels but differ in the hit-type label:

    * msp: four classes; "mentioned" whenever the gold value appears in the
      pool built from the gold state at t-1 (self entry preferred on ties).
    * changed_state: three classes against the latest turn only; a slot left
      unchanged is labeled none (inherit).
    * pure_context / full_state: three classes against the current gold
      state (full re-prediction); full_state appends the gold previous state
      string to the encoder input.
    """
    from . import encoder as enc
    from . import msp as msppool

    if strategy not in ("msp", "pure_context", "changed_state", "full_state"):
        raise ValueError(f"unknown strategy {strategy!r}")

    syn = schema.synonyms
    out: list[TurnLabels] = []
    utterances: list[tuple[str, list[str]]] = []
    prev_state = DialogueState.empty(schema)
    for t, turn in enumerate(dialogue.turns, start=1):
        utterances.append(("agent", turn.agent_tokens))
        utterances.append(("user", turn.user_tokens))
        extra = state_tokens(prev_state, schema) if strategy == "full_state" else None
        ctx = enc.tokenize_context(utterances, max_len, state_tokens=extra)

        examples: dict[str, TrainingExample] = {}
        pools: dict[str, object] = {}
        for slot in schema.slots:
            kind = slot.kind if categorical_heads else "span"
            gold = turn.gold_state.values[slot.name]
            prev = prev_state.values[slot.name]
            pool = None
            if strategy == "msp":
                pool = msppool.build_msp(
                    slot, prev_state, schema, K=K, table=None, pool_mode=pool_mode
                )
                pools[slot.name] = pool

            ex = TrainingExample(turn_index=t, slot=slot.name, hit_type_label="none")
            if strategy == "changed_state" and gold == prev:
                ex.hit_type_label = "none"  # unchanged -> inherit
            elif gold == NONE_VALUE:
                ex.hit_type_label = "none"
            elif gold == DONTCARE:
                ex.hit_type_label = "dontcare"
            else:
                mention_idx = None
                if strategy == "msp":
                    mention_idx = _match_pool_entry(pool, slot.name, gold, syn)
                if mention_idx is not None:
                    ex.hit_type_label = "mentioned"
                    ex.mention_index_label = mention_idx
                else:
                    ex.hit_type_label = "hit"
                    if kind == "categorical":
                        ex.categorical_label = _categorical_index(slot, gold, syn)
                    else:
                        span = _find_span_with_synonyms(gold, ctx.token_texts, syn)
                        if span is None:
                            ex.unmatched = True
                        else:
                            ex.span_label = span
            examples[slot.name] = ex
        out.append(TurnLabels(t, ctx, examples, pools))
        prev_state = turn.gold_state
    return out


def _match_pool_entry(pool, slot_name: str, gold: str, synonyms: dict[str, str]):
    """Pool index whose value equals the gold value; self entry wins ties."""
    want = normalize_value(gold, synonyms)
    matches = [
        i
        for i, (entry, real) in enumerate(zip(pool.entries, pool.mask))
        if real and normalize_value(entry.value, synonyms) == want
    ]
    if not matches:
        return None
    for i in matches:
        if pool.entries[i].source_slot == slot_name:
            return i
    return matches[0]


def derive_labels(
    dialogue: Dialogue,
    schema: Schema,
    *,
    strategy: str = "msp",
    max_len: int = 512,
    K: int = 4,
    pool_mode: str = "full",
    categorical_heads: bool = True,
) -> list[TrainingExample]:
    """Flat per-(turn, slot) label list for a dialogue."""
    labeled = label_dialogue(
        dialogue,
        schema,
        strategy=strategy,
        max_len=max_len,
        K=K,
        pool_mode=pool_mode,
        categorical_heads=categorical_heads,
    )
    flat: list[TrainingExample] = []
    for turn in labeled:
        for name in schema.slot_names:
            flat.append(turn.examples[name])
    return flat
