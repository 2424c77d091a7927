"""Evaluation: joint goal accuracy, per-domain JGA, per-slot outcome taxonomy
(TP/TN/FP/FN/PLFP) with precision/recall/F1, inherit analysis, and strategy
comparison tables."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass

from .corpus import DONTCARE, NONE_VALUE, DialogueState, Schema, normalize_value

OUTCOMES = ("TP", "TN", "FP", "FN", "PLFP")


class MetricsError(ValueError):
    pass


def values_equal(a: str, b: str, synonyms: dict[str, str] | None = None) -> bool:
    if a == b:
        return True
    return normalize_value(a, synonyms) == normalize_value(b, synonyms)


def classify_outcome(pred: str, gold: str, synonyms: dict[str, str] | None = None) -> str:
    """Five-way outcome for one (turn, slot) cell.

    dontcare counts as a positive value and must match exactly like any
    other value.
    """
    gold_none = gold == NONE_VALUE
    pred_none = pred == NONE_VALUE
    if gold_none and pred_none:
        return "TN"
    if gold_none:
        return "FP"
    if pred_none:
        return "FN"
    return "TP" if values_equal(pred, gold, synonyms) else "PLFP"


def aligned_states(result, dialogues) -> tuple[list[DialogueState], list[DialogueState]]:
    """Flatten a tracking result and the gold dialogues into aligned per-turn
    state lists."""
    preds: list[DialogueState] = []
    golds: list[DialogueState] = []
    for d in dialogues:
        tracked = result.states[d.id]
        if len(tracked) != len(d.turns):
            raise MetricsError(f"dialogue {d.id}: prediction/gold turn mismatch")
        preds.extend(tracked)
        golds.extend(turn.gold_state for turn in d.turns)
    return preds, golds


def joint_goal_accuracy(
    preds: list[DialogueState],
    golds: list[DialogueState],
    schema: Schema,
) -> float:
    """Fraction of turns where every slot value is predicted exactly right."""
    if len(preds) != len(golds):
        raise MetricsError("prediction/gold length mismatch")
    if not preds:
        return 0.0
    syn = schema.synonyms
    hits = 0
    for pred, gold in zip(preds, golds):
        ok = all(
            values_equal(pred.values.get(name, NONE_VALUE), gold.values[name], syn)
            for name in schema.slot_names
        )
        hits += ok
    return hits / len(preds)


def slot_metrics(
    preds: list[DialogueState],
    golds: list[DialogueState],
    schema: Schema,
) -> dict[str, dict]:
    """Per-slot outcome counts and derived metrics.

    precision = TP/(TP+FP); recall = TP/(TP+FN+PLFP); F1 is their harmonic
    mean; accuracy = (TP+TN)/total. A zero denominator yields metric 0 and
    the metric name is listed under "undefined".
    """
    if len(preds) != len(golds):
        raise MetricsError("prediction/gold length mismatch")
    syn = schema.synonyms
    report: dict[str, dict] = {}
    for name in schema.slot_names:
        counts = {o: 0 for o in OUTCOMES}
        for pred, gold in zip(preds, golds):
            outcome = classify_outcome(
                pred.values.get(name, NONE_VALUE), gold.values[name], syn)
            counts[outcome] += 1
        report[name] = _derive_slot_metrics(counts, len(preds))
    return report


def _derive_slot_metrics(counts: dict[str, int], total: int) -> dict:
    undefined: list[str] = []

    def ratio(num: int, denom: int, metric: str) -> float:
        if denom == 0:
            undefined.append(metric)
            return 0.0
        return num / denom

    precision = ratio(counts["TP"], counts["TP"] + counts["FP"], "precision")
    recall = ratio(counts["TP"], counts["TP"] + counts["FN"] + counts["PLFP"], "recall")
    if precision + recall == 0:
        undefined.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    accuracy = ratio(counts["TP"] + counts["TN"], total, "accuracy")
    return {
        "counts": counts,
        "total": total,
        "accuracy": accuracy,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "undefined": undefined,
    }


def domain_jga(
    preds: list[DialogueState],
    golds: list[DialogueState],
    schema: Schema,
) -> dict[str, float]:
    """JGA per domain over that domain's slots, restricted to turns where
    the domain is active in gold (at least one non-none gold slot). Domains
    without active turns are absent from the result."""
    if len(preds) != len(golds):
        raise MetricsError("prediction/gold length mismatch")
    syn = schema.synonyms
    out: dict[str, float] = {}
    for domain in schema.domains:
        slots = [s.name for s in schema.slots if s.domain == domain]
        hits = active = 0
        for pred, gold in zip(preds, golds):
            if all(gold.values[name] == NONE_VALUE for name in slots):
                continue
            active += 1
            hits += all(
                values_equal(pred.values.get(name, NONE_VALUE), gold.values[name], syn)
                for name in slots
            )
        if active:
            out[domain] = hits / active
    return out


# ---------------------------------------------------------------------------
# inherit analysis
# ---------------------------------------------------------------------------

@dataclass
class InheritReport:
    error_count: int = 0
    inherit_error_count: int = 0
    revision_success: int = 0
    indirect_tracked: int = 0
    indirect_total: int = 0

    def to_dict(self) -> dict:
        return {
            "error_count": self.error_count,
            "inherit_error_count": self.inherit_error_count,
            "revision_success": self.revision_success,
            "indirect_tracked": self.indirect_tracked,
            "indirect_total": self.indirect_total,
        }


def _gold_source_slot(schema: Schema, slot: str, gold_prev: DialogueState,
                      gold_value: str) -> str | None:
    syn = schema.synonyms
    for name in sorted(schema.slot(slot).relevant_slots, key=schema.slot_index):
        if values_equal(gold_prev.values.get(name, NONE_VALUE), gold_value, syn):
            return name
    return None


def inherit_analysis(
    traces: list,
    golds: dict[str, list[DialogueState]],
    events: list[dict],
    schema: Schema,
) -> InheritReport:
    """Count wrong predictions, inappropriate inheritance, successful
    revisions, and tracked indirect mentions.

    ``traces`` holds per-(dialogue, turn, slot) records; ``golds`` maps
    dialogue id to its per-turn gold states; ``events`` are sidecar rows.
    """
    syn = schema.synonyms
    by_cell: dict[tuple[str, int, str], object] = {}
    for row in traces:
        by_cell[(row.dialogue_id, row.turn, row.slot)] = row

    report = InheritReport()
    inherit_cells: set[tuple[str, int, str]] = set()
    wrong_cells: set[tuple[str, int, str]] = set()

    for (did, turn, slot), row in by_cell.items():
        if did not in golds or turn > len(golds[did]):
            raise MetricsError(f"trace row {did}/{turn} has no aligned gold state")
        gold_value = golds[did][turn - 1].values[slot]
        correct = values_equal(row.value, gold_value, syn)
        prior_row = by_cell.get((did, turn - 1, slot))
        prior_value = prior_row.value if prior_row is not None else NONE_VALUE
        prior_gold = golds[did][turn - 2].values[slot] if turn > 1 else NONE_VALUE
        prior_wrong = not values_equal(prior_value, prior_gold, syn)
        if not correct:
            report.error_count += 1
            wrong_cells.add((did, turn, slot))
            if row.disposition == "inherited" and prior_wrong:
                inherit_cells.add((did, turn, slot))
        if row.disposition == "revised" and prior_wrong and correct:
            report.revision_success += 1

    for event in events:
        if event.get("event") != "indirect":
            continue
        cell = (event["dialogue_id"], event["turn"], event["slot"])
        if cell[0] not in golds or cell not in by_cell:
            continue
        report.indirect_total += 1
        did, turn, slot = cell
        gold_value = golds[did][turn - 1].values[slot]
        gold_prev = golds[did][turn - 2] if turn > 1 else DialogueState.empty(schema)
        source = _gold_source_slot(schema, slot, gold_prev, gold_value)
        row = by_cell[cell]
        tracked = (
            row.hit_type == "mentioned"
            and source is not None
            and getattr(row, "mention_source", None) == source
        )
        if tracked:
            report.indirect_tracked += 1
        elif cell in wrong_cells:
            inherit_cells.add(cell)

    report.inherit_error_count = len(inherit_cells)
    return report


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def build_report(
    preds: list[DialogueState],
    golds: list[DialogueState],
    schema: Schema,
    inherit: InheritReport | None = None,
) -> dict:
    per_slot = slot_metrics(preds, golds, schema)
    report = {
        "jga": joint_goal_accuracy(preds, golds, schema),
        "domain_jga": domain_jga(preds, golds, schema),
        "slots": per_slot,
        "turns": len(preds),
    }
    if inherit is not None:
        report["inherit"] = inherit.to_dict()
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")


def render_slot_table(per_slot: dict[str, dict]) -> str:
    """Plain-text error distribution table (one row per slot)."""
    header = (
        f"{'slot':<24}{'acc':>7}{'prec':>7}{'rec':>7}{'f1':>7}"
        f"{'TP':>6}{'TN':>6}{'FP':>6}{'FN':>6}{'PLFP':>6}"
    )
    lines = [header, "-" * len(header)]
    for name, row in per_slot.items():
        c = row["counts"]
        lines.append(
            f"{name:<24}"
            f"{row['accuracy']:>7.3f}{row['precision']:>7.3f}"
            f"{row['recall']:>7.3f}{row['f1']:>7.3f}"
            f"{c['TP']:>6}{c['TN']:>6}{c['FP']:>6}{c['FN']:>6}{c['PLFP']:>6}"
        )
    return "\n".join(lines)


def compare_strategies(results: dict[str, dict[int, float]]) -> dict:
    """Summarize per-strategy per-seed JGA with medians.

    ``results`` maps strategy -> {seed: jga}. Raises when a strategy has no
    runs (e.g. a missing checkpoint).
    """
    rows = []
    medians = {}
    for strategy, by_seed in results.items():
        if not by_seed:
            raise MetricsError(f"no runs recorded for strategy {strategy!r}")
        for seed in sorted(by_seed):
            rows.append({"strategy": strategy, "seed": seed, "jga": by_seed[seed]})
        medians[strategy] = statistics.median(by_seed[s] for s in by_seed)
    return {"rows": rows, "medians": medians}


def render_comparison(summary: dict) -> str:
    lines = [f"{'strategy':<16}{'seed':>6}{'jga':>9}", "-" * 31]
    for row in summary["rows"]:
        lines.append(f"{row['strategy']:<16}{row['seed']:>6}{row['jga']:>9.4f}")
    lines.append("-" * 31)
    for strategy, median in summary["medians"].items():
        lines.append(f"{strategy:<16}{'med':>6}{median:>9.4f}")
    return "\n".join(lines)
