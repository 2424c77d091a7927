"""Synthetic two-domain dialogue corpus with controlled phenomena: value
corrections, indirect cross-slot mentions, agent-offered distractor values,
and dontcare answers. Every dialogue carries full per-turn gold states and a
sidecar log of phenomenon events."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, asdict
from pathlib import Path

from .corpus import DONTCARE, NONE_VALUE, Schema, SlotDef

DAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")
TIMES = ("09:15", "09:45", "10:00", "11:30", "12:15", "13:00", "14:30",
         "15:45", "17:00", "18:15", "19:45", "21:00")
PEOPLE = ("one", "two", "three", "four", "five", "six", "seven", "eight")
CITIES = ("cambridge", "london", "norwich", "peterborough", "stevenage",
          "ely", "kings lynn", "broxbourne", "leicester", "stansted")
FOODS = ("italian", "chinese", "indian", "british", "thai", "mexican",
         "turkish", "japanese", "seafood", "french")
NAMES = ("golden curry", "copper kettle", "jinling noodle bar", "pizza hut",
         "curry prince", "yippee noodle bar", "the gardenia", "la raza",
         "city stop restaurant", "royal spice")

VALUE_INVENTORY: dict[str, tuple[str, ...]] = {
    "train-day": DAYS,
    "train-leaveat": TIMES,
    "train-people": PEOPLE,
    "train-destination": CITIES,
    "restaurant-name": NAMES,
    "restaurant-food": FOODS,
    "restaurant-day": DAYS,
    "restaurant-people": PEOPLE,
}

DOMAIN_SLOTS = {
    "train": ("train-day", "train-leaveat", "train-people", "train-destination"),
    "restaurant": ("restaurant-name", "restaurant-food", "restaurant-day",
                   "restaurant-people"),
}

# slots that may inherit each other's values across domains
PAIRED = {
    "train-day": "restaurant-day",
    "restaurant-day": "train-day",
    "train-people": "restaurant-people",
    "restaurant-people": "train-people",
}

DISTRACTOR_SLOT = {"train": "train-leaveat", "restaurant": "restaurant-name"}


def build_synthetic_schema(categorical_slots: bool = False) -> Schema:
    """Two-domain eight-slot schema with a cross-domain relevant-slot
    dictionary. All slots are span-extracted by default; with
    ``categorical_slots`` the day and food slots carry closed ontologies
    instead."""
    day_kind = "categorical" if categorical_slots else "span"
    day_ont = DAYS if categorical_slots else ()
    food_kind = "categorical" if categorical_slots else "span"
    food_ont = FOODS if categorical_slots else ()
    slots = [
        SlotDef("train-day", "train", day_kind, day_ont, ("restaurant-day",)),
        SlotDef("train-leaveat", "train", "span", (), ()),
        SlotDef("train-people", "train", "span", (), ("restaurant-people",)),
        SlotDef("train-destination", "train", "span", (), ()),
        SlotDef("restaurant-name", "restaurant", "span", (), ()),
        SlotDef("restaurant-food", "restaurant", food_kind, food_ont, ()),
        SlotDef("restaurant-day", "restaurant", day_kind, day_ont, ("train-day",)),
        SlotDef("restaurant-people", "restaurant", "span", (), ("train-people",)),
    ]
    return Schema(slots, synonyms={})


@dataclass
class GeneratorConfig:
    n_dialogues: int = 2000
    correction_rate: float = 0.2
    indirect_rate: float = 0.3
    distractor_rate: float = 0.3
    dontcare_rate: float = 0.08
    two_domain_rate: float = 0.65
    restatement_rate: float = 0.5
    smalltalk_rate: float = 0.6
    categorical_slots: bool = False
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self) -> None:
        for field_name in ("correction_rate", "indirect_rate", "distractor_rate",
                           "dontcare_rate", "two_domain_rate", "restatement_rate",
                           "smalltalk_rate"):
            rate = getattr(self, field_name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{field_name} must lie in [0, 1], got {rate}")
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# utterance templates
# ---------------------------------------------------------------------------

OPENERS = {
    "train": ("i need a train .", "i am looking for a train ."),
    "restaurant": ("i need a restaurant .", "i am looking for a place to eat ."),
}

SWITCH = {
    "train": "yes , i also need a train .",
    "restaurant": "yes , i also need a restaurant .",
}

INFORM = {
    "train-day": ("i want to leave on {v} .", "the train should be on {v} ."),
    "train-leaveat": ("i need a train leaving after {v} .",
                      "i would like to leave at {v} ."),
    "train-people": ("the train is for {v} people .", "{v} people please ."),
    "train-destination": ("i am going to {v} .", "the destination is {v} ."),
    "restaurant-name": ("i am looking for {v} .", "please book {v} ."),
    "restaurant-food": ("i want {v} food .", "something {v} would be great ."),
    "restaurant-day": ("the restaurant should be for {v} .",
                       "book the table for {v} ."),
    "restaurant-people": ("a table for {v} people .",
                          "the restaurant is for {v} people ."),
}

ASK = {
    "train-day": "what day would you like to travel ?",
    "train-leaveat": "when do you want to leave ?",
    "train-people": "how many people will travel ?",
    "train-destination": "where are you going ?",
    "restaurant-name": "which restaurant are you looking for ?",
    "restaurant-food": "what kind of food do you want ?",
    "restaurant-day": "what day should i book the table for ?",
    "restaurant-people": "how many people is the table for ?",
}

INDIRECT = {
    "restaurant-day": "the restaurant should be on the same day as the train .",
    "train-day": "the train should be on the same day as the restaurant .",
    "restaurant-people": "the table is for the same number of people as the train .",
    "train-people": "the train is for the same number of people as the restaurant .",
}

DONTCARE_LINE = {
    "train-day": "any day is fine .",
    "train-leaveat": "i do not care about the departure time .",
    "train-people": "the number of people does not matter .",
    "train-destination": "any destination is fine .",
    "restaurant-name": "any restaurant is fine .",
    "restaurant-food": "i do not care about the food type .",
    "restaurant-day": "any day works for the table .",
    "restaurant-people": "the table size does not matter .",
}

DISTRACTOR_OFFER = {
    "train-leaveat": "there is a train leaving at {v} .",
    "restaurant-name": "how about {v} instead ?",
}

ACCEPT = ("ok , that works for me .", "yes , that sounds good .")

AGENT_ACK = ("sure , let me note that .", "alright , got it .", "no problem .")

CLOSING_AGENT = "great , i have booked everything you asked for . goodbye !"
CLOSING_USER = "thank you , goodbye !"
GREETING = "hello , how can i help you today ?"
ANYTHING_ELSE = "is there anything else i can help you with ?"

SMALLTALK = (
    ("is there anything else i can help you with right now ?",
     "what will the weather be like tomorrow , do you know ?"),
    ("i am afraid i cannot help you with the weather forecast .",
     "no problem at all , thanks for checking anyway ."),
    ("is there anything else you would like me to look into today ?",
     "do you happen to know a good taxi company around here ?"),
    ("i am sorry , i cannot recommend a particular company myself .",
     "alright , that is completely fine , never mind then ."),
    ("can i help you with some sightseeing information as well ?",
     "not right now , i was just wondering about the area ."),
    ("the city centre is lovely this time of year , by the way .",
     "that is good to hear , i am looking forward to the visit ."),
)


# ---------------------------------------------------------------------------
# dialogue assembly
# ---------------------------------------------------------------------------

@dataclass
class _TurnDraft:
    agent: str
    user: str
    changes: dict[str, str]


def _pick(rng: random.Random, options) -> str:
    return options[rng.randrange(len(options))]


def _generate_dialogue(idx: int, config: GeneratorConfig, seed: int):
    """One dialogue plus its sidecar events; deterministic given (idx, seed)."""
    rng = random.Random(seed * 1_000_003 + idx)
    correction_coin = rng.random() < config.correction_rate
    indirect_coin = rng.random() < config.indirect_rate
    distractor_coin = rng.random() < config.distractor_rate
    restatement_coin = rng.random() < config.restatement_rate
    smalltalk_coin = rng.random() < config.smalltalk_rate

    primary = _pick(rng, ("train", "restaurant"))
    secondary = "restaurant" if primary == "train" else "train"
    two_domain = indirect_coin or rng.random() < config.two_domain_rate

    goals_primary = list(rng.sample(DOMAIN_SLOTS[primary], rng.randint(2, 3)))
    goals_secondary: list[str] = []
    if two_domain:
        # paired slots are co-informed only through an indirect mention, so a
        # pool rarely holds two different plausible values for one slot
        allowed = [s for s in DOMAIN_SLOTS[secondary]
                   if PAIRED.get(s) not in goals_primary]
        k = min(rng.randint(2, 3), len(allowed))
        goals_secondary = list(rng.sample(allowed, k))

    def force_in(goals: list[str], slot: str, protected: tuple = ()) -> None:
        if slot in goals:
            return
        spots = [i for i, g in enumerate(goals) if g not in protected]
        if spots:
            goals[spots[rng.randrange(len(spots))]] = slot
        else:
            goals.append(slot)

    distractor_slot = None
    if distractor_coin:
        distractor_slot = DISTRACTOR_SLOT[primary]
        force_in(goals_primary, distractor_slot)

    indirect_source = indirect_target = None
    if indirect_coin:
        kind = _pick(rng, ("day", "people"))
        indirect_source = f"{primary}-{kind}"
        indirect_target = f"{secondary}-{kind}"
        force_in(goals_primary, indirect_source, protected=(distractor_slot,))
        force_in(goals_secondary, indirect_target)

    # choose values; paired slots get distinct values unless tied indirectly
    values: dict[str, str] = {}
    for slot in goals_primary + goals_secondary:
        inventory = VALUE_INVENTORY[slot]
        value = _pick(rng, inventory)
        partner = PAIRED.get(slot)
        if partner in values and slot != indirect_target:
            while value == values[partner]:
                value = _pick(rng, inventory)
        values[slot] = value
    if indirect_target is not None:
        values[indirect_target] = values[indirect_source]

    # dontcare answers (never on the opener, distractor, or indirect slots)
    protected = {goals_primary[0], distractor_slot, indirect_source, indirect_target}
    if goals_secondary:
        protected.add(goals_secondary[0])
    for slot in goals_primary + goals_secondary:
        if slot in protected:
            continue
        if rng.random() < config.dontcare_rate:
            values[slot] = DONTCARE

    drafts: list[_TurnDraft] = []
    events: list[dict] = []

    def inform_line(slot: str) -> str:
        if values[slot] == DONTCARE:
            return DONTCARE_LINE[slot]
        if slot == indirect_target:
            return INDIRECT[slot]
        return _pick(rng, INFORM[slot]).format(v=values[slot])

    def emit_informs(goals: list[str], first_agent: str, first_prefix: str) -> None:
        for i, slot in enumerate(goals):
            agent = first_agent if i == 0 else ASK[slot]
            prefix = first_prefix if i == 0 else ""
            if slot == distractor_slot and values[slot] != DONTCARE:
                final = values[slot]
                alternatives = [v for v in VALUE_INVENTORY[slot] if v != final]
                trap = _pick(rng, alternatives)
                drafts.append(_TurnDraft(
                    agent, prefix + _pick(rng, INFORM[slot]).format(v=trap),
                    {slot: trap}))
                drafts.append(_TurnDraft(
                    DISTRACTOR_OFFER[slot].format(v=final), _pick(rng, ACCEPT),
                    {slot: final}))
                events.append({"slot": slot, "turn": len(drafts), "event": "distractor"})
                continue
            drafts.append(_TurnDraft(agent, prefix + inform_line(slot),
                                     {slot: values[slot]}))
            if slot == indirect_target:
                events.append({"slot": slot, "turn": len(drafts), "event": "indirect"})

    def emit_smalltalk() -> None:
        for agent_line, user_line in rng.sample(SMALLTALK, rng.randint(3, 4)):
            drafts.append(_TurnDraft(agent_line, user_line, {}))

    emit_informs(goals_primary, GREETING, _pick(rng, OPENERS[primary]) + " ")
    if goals_secondary:
        # off-task chatter between the domains pushes the first domain's
        # statements toward the edge of a bounded encoder window
        if smalltalk_coin:
            emit_smalltalk()
        emit_informs(goals_secondary, ANYTHING_ELSE, SWITCH[secondary] + " ")

    informed = [s for s in goals_primary + goals_secondary
                if values[s] != DONTCARE]

    if restatement_coin and informed:
        # the user repeats an already-given value; the state does not change,
        # and the wording is indistinguishable from a plain inform
        slot = informed[rng.randrange(len(informed))]
        line = _pick(rng, INFORM[slot]).format(v=values[slot])
        drafts.append(_TurnDraft(_pick(rng, AGENT_ACK), line, {}))

    if correction_coin:
        candidates = [s for s in informed
                      if s not in (distractor_slot, indirect_target)]
        if not candidates:
            candidates = informed
        slot = candidates[rng.randrange(len(candidates))]
        old = values[slot]
        partner = PAIRED.get(slot)
        pool_values = {old}
        if partner in values:
            pool_values.add(values[partner])
        alternatives = [v for v in VALUE_INVENTORY[slot] if v not in pool_values]
        new = _pick(rng, alternatives)
        values[slot] = new
        line = _pick(rng, INFORM[slot]).format(v=new)
        if rng.random() < 0.25:
            line = "actually , " + line
        drafts.append(_TurnDraft(_pick(rng, AGENT_ACK), line, {slot: new}))
        events.append({"slot": slot, "turn": len(drafts), "event": "correction"})

    if smalltalk_coin and not goals_secondary:
        emit_smalltalk()

    drafts.append(_TurnDraft(CLOSING_AGENT, CLOSING_USER, {}))

    did = f"syn-{idx:05d}"
    state: dict[str, str] = {}
    turns = []
    for draft in drafts:
        state.update(draft.changes)
        turns.append({
            "agent": draft.agent,
            "user": draft.user,
            "state": dict(sorted(state.items())),
        })
    for event in events:
        event["dialogue_id"] = did
    return {"id": did, "turns": turns}, events


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def generate_synthetic_corpus(
    config: GeneratorConfig,
    seed: int,
    out_dir: str | Path,
) -> dict[str, Path]:
    """Write schema, train/dev/test splits, and the sidecar event log.

    Byte-identical output for identical (config, seed).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schema = build_synthetic_schema(categorical_slots=config.categorical_slots)

    dialogues: list[dict] = []
    events: list[dict] = []
    for idx in range(config.n_dialogues):
        dialogue, dialogue_events = _generate_dialogue(idx, config, seed)
        dialogues.append(dialogue)
        events.extend(dialogue_events)

    n = len(dialogues)
    n_train = round(n * config.splits[0])
    n_dev = round(n * config.splits[1])
    split_of: dict[str, str] = {}
    splits = {
        "train": dialogues[:n_train],
        "dev": dialogues[n_train:n_train + n_dev],
        "test": dialogues[n_train + n_dev:],
    }
    for name, rows in splits.items():
        for d in rows:
            split_of[d["id"]] = name

    paths: dict[str, Path] = {}
    schema_path = out_dir / "schema.json"
    schema_path.write_text(_dump(schema.to_dict()) + "\n", encoding="utf-8")
    paths["schema"] = schema_path
    for name, rows in splits.items():
        p = out_dir / f"{name}.jsonl"
        p.write_text("".join(_dump(d) + "\n" for d in rows), encoding="utf-8")
        paths[name] = p
    events_path = out_dir / "events.jsonl"
    ordered_keys = ("dialogue_id", "turn", "slot", "event")
    with open(events_path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(_dump({k: event[k] for k in ordered_keys}) + "\n")
    paths["events"] = events_path

    manifest = out_dir / "manifest.json"
    manifest.write_text(
        _dump({"config": config.to_dict(), "seed": seed,
               "split_sizes": {k: len(v) for k, v in splits.items()}}) + "\n",
        encoding="utf-8")
    paths["manifest"] = manifest
    return paths
