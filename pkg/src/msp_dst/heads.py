"""Per-slot prediction heads: hit type, mentioned-value selection,
categorical value, and span extraction.

All heads emit proper probability distributions; ties at decision time break
toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import HIT_TYPES
from .msp import MentionedSlotPool


def _argmax_first(values: torch.Tensor) -> int:
    """Index of the maximum; the lowest index wins ties."""
    return int(np.argmax(values.detach().numpy()))


@dataclass
class HeadOutputs:
    """Per-slot head results for one turn."""

    p_type: torch.Tensor
    type_classes: tuple[str, ...]
    p_mention: torch.Tensor | None = None
    mention_index: int | None = None
    p_categorical: torch.Tensor | None = None
    categorical_value: str | None = None
    p_start: torch.Tensor | None = None
    p_end: torch.Tensor | None = None
    span: tuple[int, int] | None = None

    @property
    def hit_type(self) -> str:
        return self.type_classes[_argmax_first(self.p_type)]


def predict_hit_type(
    m_fused: torch.Tensor,
    r_cls: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    classes: tuple[str, ...] = HIT_TYPES,
) -> torch.Tensor:
    """Distribution over hit-type classes from the fused pool representation
    plus the classification vector (elementwise sum)."""
    if m_fused.shape != r_cls.shape:
        raise ValueError("m_fused and r_cls dimensions disagree")
    if weight.shape[0] != len(classes) or weight.shape[1] != r_cls.shape[-1]:
        raise ValueError("type head shape mismatch")
    logits = weight @ (m_fused + r_cls) + bias
    return torch.softmax(logits, dim=-1)


def mention_logits_batch(
    r_cls: torch.Tensor,
    pool_reps: torch.Tensor,
    pool_mask: torch.Tensor,
    w_mention: torch.Tensor,
) -> torch.Tensor:
    """Bilinear selection scores r_cls W m_i, padded entries at -inf.

    r_cls: (B, n); pool_reps: (B, K, n); pool_mask: (B, K) bool.
    """
    query = r_cls @ w_mention  # (B, n)
    scores = torch.einsum("bn,bkn->bk", query, pool_reps)
    return scores.masked_fill(~pool_mask, float("-inf"))


def select_mentioned(
    r_cls: torch.Tensor,
    pool: MentionedSlotPool,
    w_mention: torch.Tensor,
) -> tuple[torch.Tensor, int | None]:
    """Selection distribution over pool entries and the chosen index.

    Padded entries receive probability exactly 0. An all-masked pool yields
    the zero distribution and no selection.
    """
    dim = r_cls.shape[-1]
    reps = pool.representations(dim).unsqueeze(0)
    mask = torch.tensor([pool.mask], dtype=torch.bool)
    logits = mention_logits_batch(r_cls.unsqueeze(0), reps, mask, w_mention)[0]
    if pool.is_empty:
        return torch.zeros(pool.K), None
    probs = torch.softmax(logits, dim=-1)
    probs = torch.where(mask[0], probs, torch.zeros_like(probs))
    return probs, _argmax_first(probs)


def predict_categorical(
    m_fused: torch.Tensor,
    r_cls: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    ontology: tuple[str, ...],
) -> tuple[torch.Tensor, str]:
    """Distribution over a categorical slot's ontology and the argmax value."""
    if weight.shape[0] != len(ontology):
        raise ValueError("categorical head does not match the ontology size")
    logits = weight @ (m_fused + r_cls) + bias
    probs = torch.softmax(logits, dim=-1)
    return probs, ontology[_argmax_first(probs)]


def span_logits_batch(
    token_vectors: torch.Tensor,
    token_mask: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Start/end logits over the token axis with padding masked to -inf.

    token_vectors: (B, L, n); token_mask: (B, L) bool. Returns (start, end),
    each (B, L).
    """
    proj = token_vectors @ weight.T + bias  # (B, L, 2)
    start = proj[..., 0].masked_fill(~token_mask, float("-inf"))
    end = proj[..., 1].masked_fill(~token_mask, float("-inf"))
    return start, end


def predict_span(
    token_vectors: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, tuple[int, int] | None]:
    """Start/end distributions over tokens and the predicted span.

    The span is (argmax start, argmax end); it is None when the start index
    exceeds the end index.
    """
    if token_vectors.ndim != 2 or token_vectors.shape[0] == 0:
        raise ValueError("predict_span requires at least one token vector")
    mask = torch.ones(1, token_vectors.shape[0], dtype=torch.bool)
    start_logits, end_logits = span_logits_batch(token_vectors.unsqueeze(0), mask, weight, bias)
    p_start = torch.softmax(start_logits[0], dim=-1)
    p_end = torch.softmax(end_logits[0], dim=-1)
    start = _argmax_first(p_start)
    end = _argmax_first(p_end)
    span = (start, end) if start <= end else None
    return p_start, p_end, span
