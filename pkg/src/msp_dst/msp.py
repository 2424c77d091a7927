"""Mentioned slot pool: the per-slot memory of inheritable values built from
the previous dialogue state, and its attention-fused representation."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .corpus import DONTCARE, NONE_VALUE, DialogueState, Schema, SlotDef


@dataclass
class PoolEntry:
    source_slot: str
    value: str
    updated_turn: int
    representation: torch.Tensor | None = None


@dataclass
class MentionedSlotPool:
    """Exactly K entries; padded entries carry an empty value, a zero
    representation and mask False. none and dontcare never appear."""

    entries: list[PoolEntry]
    mask: list[bool]
    K: int

    @property
    def real_count(self) -> int:
        return sum(self.mask)

    @property
    def is_empty(self) -> bool:
        return self.real_count == 0

    def representations(self, dim: int) -> torch.Tensor:
        """(K, dim) matrix; padded rows are zero."""
        rows = []
        for entry, real in zip(self.entries, self.mask):
            if real and entry.representation is not None:
                rows.append(entry.representation)
            else:
                rows.append(torch.zeros(dim))
        return torch.stack(rows)


def build_msp(
    slot: SlotDef,
    prev_state: DialogueState,
    schema: Schema,
    K: int = 4,
    table=None,
    pool_mode: str = "full",
) -> MentionedSlotPool:
    """Assemble the pool for one slot from the previous state.

    Candidates are the slot's own previous value followed by the values of
    its relevant slots in schema order, skipping none and dontcare. With more
    than K candidates only the latest-updated K are kept (ties broken
    self-first, then schema order). Entry representations come from the
    embedding table when one is supplied.
    """
    if pool_mode not in ("full", "self"):
        raise ValueError(f"unknown pool_mode {pool_mode!r}")
    from .corpus import tokenize_utterance

    candidates: list[tuple[int, PoolEntry]] = []  # (priority, entry)
    own = prev_state.values.get(slot.name, NONE_VALUE)
    if own not in (NONE_VALUE, DONTCARE):
        candidates.append(
            (0, PoolEntry(slot.name, own, prev_state.last_updated.get(slot.name, 0)))
        )
    if pool_mode == "full":
        relevant = sorted(slot.relevant_slots, key=schema.slot_index)
        for rank, name in enumerate(relevant, start=1):
            value = prev_state.values.get(name, NONE_VALUE)
            if value in (NONE_VALUE, DONTCARE):
                continue
            candidates.append(
                (rank, PoolEntry(name, value, prev_state.last_updated.get(name, 0)))
            )

    if len(candidates) > K:
        keep = sorted(candidates, key=lambda c: (-c[1].updated_turn, c[0]))[:K]
        candidates = sorted(keep, key=lambda c: c[0])

    entries = [entry for _, entry in candidates]
    if table is not None:
        for entry in entries:
            entry.representation = table.embed_text(tokenize_utterance(entry.value))
    mask = [True] * len(entries)
    while len(entries) < K:
        entries.append(PoolEntry("", "", 0))
        mask.append(False)
    return MentionedSlotPool(entries=entries, mask=mask, K=K)


# ---------------------------------------------------------------------------
# fused representation
# ---------------------------------------------------------------------------

def fuse_batch(
    pool_reps: torch.Tensor,
    pool_mask: torch.Tensor,
    r_slot: torch.Tensor,
    r_cls: torch.Tensor,
    w_fused: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched attention fusion.

    pool_reps: (B, K, n); pool_mask: (B, K) bool; r_slot: (n,) or (B, n);
    r_cls: (B, n); w_fused: (n, n). Returns (fused (B, n), weights (B, K)).
    Scores are (r_slot + r_cls) W m_i; padded entries are masked out of the
    normalized exponential; an all-masked pool fuses to the zero vector.
    """
    query = (r_slot + r_cls) @ w_fused  # (B, n)
    scores = torch.einsum("bn,bkn->bk", query, pool_reps)
    scores = scores.masked_fill(~pool_mask, float("-inf"))
    any_real = pool_mask.any(dim=1, keepdim=True)
    safe = torch.where(any_real, scores, torch.zeros_like(scores))
    weights = torch.softmax(safe, dim=1) * pool_mask
    denom = weights.sum(dim=1, keepdim=True).clamp(min=1e-30)
    weights = weights / denom * any_real
    fused = torch.einsum("bk,bkn->bn", weights, pool_reps)
    return fused, weights


def fusion_weights(
    pool: MentionedSlotPool,
    r_slot: torch.Tensor,
    r_cls: torch.Tensor,
    w_fused: torch.Tensor,
) -> torch.Tensor:
    """Attention weights over pool entries (zeros when the pool is empty)."""
    dim = r_cls.shape[-1]
    reps = pool.representations(dim).unsqueeze(0)
    mask = torch.tensor([pool.mask], dtype=torch.bool)
    if r_slot.shape != r_cls.shape:
        raise ValueError("r_slot and r_cls dimensions disagree")
    if w_fused.shape != (dim, dim):
        raise ValueError("fusion matrix shape mismatch")
    _, weights = fuse_batch(reps, mask, r_slot.unsqueeze(0), r_cls.unsqueeze(0), w_fused)
    return weights[0]


def fuse(
    pool: MentionedSlotPool,
    r_slot: torch.Tensor,
    r_cls: torch.Tensor,
    w_fused: torch.Tensor,
) -> torch.Tensor:
    """Probability-weighted sum of pool entry representations."""
    dim = r_cls.shape[-1]
    reps = pool.representations(dim).unsqueeze(0)
    mask = torch.tensor([pool.mask], dtype=torch.bool)
    if r_slot.shape != r_cls.shape:
        raise ValueError("r_slot and r_cls dimensions disagree")
    if w_fused.shape != (dim, dim):
        raise ValueError("fusion matrix shape mismatch")
    fused, _ = fuse_batch(reps, mask, r_slot.unsqueeze(0), r_cls.unsqueeze(0), w_fused)
    return fused[0]
