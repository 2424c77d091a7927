"""Context encoding: tokenized contexts with a leading classification token,
a frozen embedding table for slot/value text, and a small trainable
self-attention encoder producing one classification vector plus per-token
vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
AGENT_SEP = "[AGENT]"
USER_SEP = "[USER]"
STATE_SEP = "[STATE]"

SPECIALS = (PAD, UNK, CLS, AGENT_SEP, USER_SEP, STATE_SEP)

_SEP_FOR_SPEAKER = {"agent": AGENT_SEP, "user": USER_SEP, "state": STATE_SEP}


class EncoderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabulary and tokenized contexts
# ---------------------------------------------------------------------------

@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self) -> None:
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id = self._ids[PAD]
        self.unk_id = self._ids[UNK]
        self.cls_id = self._ids[CLS]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def ids(self, tokens: list[str]) -> list[int]:
        return [self.id(t) for t in tokens]


def build_vocab(token_streams, extra_tokens=()) -> Vocab:
    """Vocabulary from corpus tokens plus specials; unknowns at use time map
    to the [UNK] bucket."""
    seen: set[str] = set()
    for stream in token_streams:
        seen.update(stream)
    seen.update(extra_tokens)
    ordered = list(SPECIALS) + sorted(seen - set(SPECIALS))
    return Vocab(ordered)


def schema_tokens(schema) -> list[str]:
    """Tokens a schema contributes to the vocabulary: slot names (whole and
    word-split for slot representations), ontology values, state-string
    punctuation."""
    from .corpus import tokenize_utterance

    out: list[str] = ["=", ";"]
    for slot in schema.slots:
        out.append(slot.name)
        out.extend(slot_name_tokens(slot.name))
        for value in slot.ontology:
            out.extend(tokenize_utterance(value))
    return out


def slot_name_tokens(name: str) -> list[str]:
    return name.replace("-", " ").replace("_", " ").split()


@dataclass
class TokenizedContext:
    """Token ids with the classification token at position 0; token_texts
    holds the original text of the stream positions (ids[1:]) for span
    readout; boundaries give (turn, speaker, start, end) ranges over the
    stream after truncation."""

    token_ids: list[int]
    token_texts: list[str]
    boundaries: list[tuple[int, str, int, int]] = field(default_factory=list)

    @property
    def stream_len(self) -> int:
        return len(self.token_texts)


def tokenize_context(
    utterances: list[tuple[str, list[str]]],
    max_len: int,
    vocab: Vocab | None = None,
    state_tokens: list[str] | None = None,
) -> TokenizedContext:
    """Join utterances with speaker separator tokens, keep the latest tokens
    within budget, and prepend the classification token.

    ``utterances`` is a list of (speaker, tokens) pairs in dialogue order,
    speaker in {"agent", "user"}. ``state_tokens``, when given, are appended
    after the dialogue stream behind a state separator and are protected from
    truncation (the dialogue stream truncates first).
    """
    if max_len < 2:
        raise EncoderError("max_len must be >= 2")
    if not utterances:
        raise EncoderError("empty context")

    stream: list[str] = []
    spans: list[tuple[int, str, int, int]] = []
    for i, (speaker, tokens) in enumerate(utterances):
        if speaker not in ("agent", "user"):
            raise EncoderError(f"unknown speaker {speaker!r}")
        if i > 0:
            stream.append(_SEP_FOR_SPEAKER[speaker])
        start = len(stream)
        stream.extend(tokens)
        spans.append((i // 2 + 1, speaker, start, len(stream)))

    tail: list[str] = []
    if state_tokens is not None:
        tail = [STATE_SEP] + list(state_tokens)
    budget = max_len - 1 - len(tail)
    if budget < 0:
        raise EncoderError("state string alone exceeds the token budget")
    dropped = max(0, len(stream) - budget)
    if dropped:
        stream = stream[dropped:]
        clipped = []
        for turn, speaker, s, e in spans:
            s, e = s - dropped, e - dropped
            if e <= 0:
                continue
            clipped.append((turn, speaker, max(0, s), e))
        spans = clipped
    if tail:
        spans.append((len(utterances) // 2 + 1, "state", len(stream), len(stream) + len(tail)))
        stream = stream + tail

    ids = [0] * (len(stream) + 1)
    if vocab is not None:
        ids = [vocab.cls_id] + vocab.ids(stream)
    return TokenizedContext(token_ids=ids, token_texts=stream, boundaries=spans)


# ---------------------------------------------------------------------------
# frozen embedding table for slot / value text
# ---------------------------------------------------------------------------

class EmbeddingTable:
    """Fixed random token embeddings used for slot and value representations.

    Locked during training: multi-token texts are represented by the
    arithmetic mean of their token vectors. Every vector carries a shared
    mean offset so that any average of real token embeddings is linearly
    separable from the all-zero padding representation.
    """

    def __init__(self, vocab: Vocab, dim: int, seed: int = 0, frozen: bool = True):
        self.vocab = vocab
        self.dim = dim
        self.frozen = frozen
        gen = torch.Generator().manual_seed(seed)
        offset = 0.5 / dim**0.5
        self.matrix = torch.randn(len(vocab), dim, generator=gen) / dim**0.5 + offset
        self.matrix.requires_grad_(False)

    def embed_text(self, tokens: list[str]) -> torch.Tensor:
        if not tokens:
            raise EncoderError("embed_text requires a non-empty token list")
        ids = torch.tensor(self.vocab.ids(tokens), dtype=torch.long)
        return self.matrix[ids].mean(dim=0)


def embed_text(tokens: list[str], table: EmbeddingTable) -> torch.Tensor:
    """Mean of the table's token vectors."""
    return table.embed_text(tokens)


# ---------------------------------------------------------------------------
# trainable encoder
# ---------------------------------------------------------------------------

class EncoderBlock(nn.Module):
    def __init__(self, dim: int, attn_heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, attn_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None) -> torch.Tensor:
        attn_out, _ = self.attn(x, x, x, key_padding_mask=key_padding_mask, need_weights=False)
        x = self.norm1(x + attn_out)
        x = self.norm2(x + self.ff(x))
        return x


class ContextEncoder(nn.Module):
    """Token + learned position embeddings followed by bidirectional
    self-attention blocks. Deterministic given (input, parameters)."""

    def __init__(self, vocab_size: int, dim: int, blocks: int = 2,
                 attn_heads: int = 4, max_len: int = 512, pad_id: int = 0):
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        self.pad_id = pad_id
        self.token_emb = nn.Embedding(vocab_size, dim, padding_idx=pad_id)
        self.pos_emb = nn.Embedding(max_len, dim)
        self.blocks = nn.ModuleList(EncoderBlock(dim, attn_heads) for _ in range(blocks))

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor):
        """ids: (B, L) padded with pad_id, classification token first;
        lengths: (B,) true lengths. Returns (cls (B, n), tokens (B, L-1, n),
        token_mask (B, L-1) True at real stream positions)."""
        B, L = ids.shape
        if L > self.max_len:
            raise EncoderError(f"sequence length {L} exceeds max_len {self.max_len}")
        positions = torch.arange(L, device=ids.device).unsqueeze(0).expand(B, L)
        x = self.token_emb(ids) + self.pos_emb(positions)
        pad_mask = torch.arange(L, device=ids.device).unsqueeze(0) >= lengths.unsqueeze(1)
        for block in self.blocks:
            x = block(x, key_padding_mask=pad_mask)
        cls = x[:, 0, :]
        tokens = x[:, 1:, :]
        token_mask = ~pad_mask[:, 1:]
        return cls, tokens, token_mask


@dataclass
class ContextEncoding:
    cls_vector: torch.Tensor
    token_vectors: torch.Tensor


def encode(ctx: TokenizedContext, model: ContextEncoder) -> ContextEncoding:
    """Encode a single tokenized context (no padding)."""
    ids = torch.tensor([ctx.token_ids], dtype=torch.long)
    lengths = torch.tensor([len(ctx.token_ids)], dtype=torch.long)
    with torch.no_grad():
        cls, tokens, _ = model(ids, lengths)
    return ContextEncoding(cls_vector=cls[0], token_vectors=tokens[0])
