"""The assembled tracker model: shared context encoder, frozen slot/value
embedding table, and per-slot head parameters for one update strategy.

Head parameters are stored stacked across slots (slot axis first) so a whole
turn's slots are scored in a few batched contractions; per-slot views are
exposed for the single-example head functions."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn

from . import heads as H
from .corpus import CHANGE_TYPES, HIT_TYPES, Schema, schema_from_dict, tokenize_utterance
from .encoder import ContextEncoder, EmbeddingTable, Vocab, slot_name_tokens

STRATEGIES = ("pure_context", "changed_state", "full_state", "msp")


@dataclass
class ModelConfig:
    strategy: str = "msp"
    dim: int = 64
    blocks: int = 2
    attn_heads: int = 4
    max_len: int = 512
    K: int = 4
    pool_mode: str = "full"  # "full" | "self"
    categorical_heads: bool = True
    embedding_seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.pool_mode not in ("full", "self"):
            raise ValueError(f"unknown pool_mode {self.pool_mode!r}")

    @property
    def type_classes(self) -> tuple[str, ...]:
        return HIT_TYPES if self.strategy == "msp" else CHANGE_TYPES

    def to_dict(self) -> dict:
        return asdict(self)


def _key(name: str) -> str:
    # nn.ModuleDict forbids "." in keys; slot names use "-" and "_" only.
    return name.replace(".", "_")


class DstModel(nn.Module):
    def __init__(self, schema: Schema, vocab: Vocab, config: ModelConfig):
        super().__init__()
        self.schema = schema
        self.vocab = vocab
        self.config = config
        n = config.dim
        S = len(schema.slots)
        C = len(config.type_classes)

        self.table = EmbeddingTable(vocab, n, seed=config.embedding_seed, frozen=True)
        self.encoder = ContextEncoder(
            len(vocab), n, blocks=config.blocks, attn_heads=config.attn_heads,
            max_len=config.max_len, pad_id=vocab.pad_id,
        )

        r_slot = torch.stack(
            [self.table.embed_text(slot_name_tokens(s.name)) for s in schema.slots]
        )
        self.register_buffer("r_slot", r_slot, persistent=True)

        bound = 1.0 / math.sqrt(n)
        self.type_weight = nn.Parameter(torch.empty(S, C, n).uniform_(-bound, bound))
        self.type_bias = nn.Parameter(torch.empty(S, C).uniform_(-bound, bound))
        if config.strategy == "msp":
            self.fusion_weight = nn.Parameter(torch.empty(S, n, n).uniform_(-bound, bound))
            self.mention_weight = nn.Parameter(torch.randn(S, n, n) * 0.02)

        self.cat_heads = nn.ModuleDict()
        self.span_heads = nn.ModuleDict()
        for s in schema.slots:
            if self.slot_kind(s.name) == "categorical":
                self.cat_heads[_key(s.name)] = nn.Linear(n, len(s.ontology))
            else:
                self.span_heads[_key(s.name)] = nn.Linear(n, 2)

        self._value_cache: dict[str, torch.Tensor] = {}

    # -- structure ----------------------------------------------------------

    def slot_kind(self, name: str) -> str:
        if not self.config.categorical_heads:
            return "span"
        return self.schema.slot(name).kind

    @property
    def type_classes(self) -> tuple[str, ...]:
        return self.config.type_classes

    def slot_vector(self, name: str) -> torch.Tensor:
        return self.r_slot[self.schema.slot_index(name)]

    def value_representation(self, value: str) -> torch.Tensor:
        cached = self._value_cache.get(value)
        if cached is None:
            cached = self.table.embed_text(tokenize_utterance(value))
            self._value_cache[value] = cached
        return cached

    def clear_value_cache(self) -> None:
        self._value_cache.clear()

    def pool_tensors(self, pools) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, K, n) entry representations and (B, K) mask from a pool list;
        representations come from the frozen table (constants)."""
        n = self.config.dim
        reps = torch.zeros(len(pools), pools[0].K, n)
        mask = torch.zeros(len(pools), pools[0].K, dtype=torch.bool)
        for b, pool in enumerate(pools):
            for k, (entry, real) in enumerate(zip(pool.entries, pool.mask)):
                if not real:
                    continue
                mask[b, k] = True
                if entry.representation is not None:
                    reps[b, k] = entry.representation
                else:
                    reps[b, k] = self.value_representation(entry.value)
        return reps, mask

    # -- batched forward across every slot ------------------------------------

    def encode_batch(self, ids: torch.Tensor, lengths: torch.Tensor):
        return self.encoder(ids, lengths)

    def fuse_all(self, pool_reps: torch.Tensor, pool_mask: torch.Tensor,
                 cls: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Attention-fused pool representation for every slot at once.

        pool_reps: (B, S, K, n); pool_mask: (B, S, K); cls: (B, n).
        Returns (fused (B, S, n), weights (B, S, K)); empty pools fuse to
        zero with weight rows of zeros.
        """
        query = torch.einsum("bsn,snm->bsm", self.r_slot.unsqueeze(0) + cls.unsqueeze(1),
                             self.fusion_weight)
        scores = torch.einsum("bsm,bskm->bsk", query, pool_reps)
        scores = scores.masked_fill(~pool_mask, float("-inf"))
        any_real = pool_mask.any(dim=2, keepdim=True)
        safe = torch.where(any_real, scores, torch.zeros_like(scores))
        weights = torch.softmax(safe, dim=2) * pool_mask
        weights = weights / weights.sum(dim=2, keepdim=True).clamp(min=1e-30) * any_real
        fused = torch.einsum("bsk,bskn->bsn", weights, pool_reps)
        return fused, weights

    def type_logits_all(self, m_fused: torch.Tensor | None,
                        cls: torch.Tensor) -> torch.Tensor:
        """(B, S, C) hit-type logits; msp adds the fused pool vector."""
        x = cls.unsqueeze(1)
        if m_fused is not None:
            x = x + m_fused
        return torch.einsum("scn,bsn->bsc", self.type_weight, x) + self.type_bias

    def mention_logits_all(self, cls: torch.Tensor, pool_reps: torch.Tensor,
                           pool_mask: torch.Tensor) -> torch.Tensor:
        """(B, S, K) selection logits with padded entries at -inf."""
        query = torch.einsum("bn,snm->bsm", cls, self.mention_weight)
        scores = torch.einsum("bsm,bskm->bsk", query, pool_reps)
        return scores.masked_fill(~pool_mask, float("-inf"))

    def cat_logits(self, slot: str, m_fused: torch.Tensor | None,
                   cls: torch.Tensor) -> torch.Tensor:
        x = cls if m_fused is None else m_fused + cls
        return self.cat_heads[_key(slot)](x)

    def span_logits(self, slot: str, tokens: torch.Tensor,
                    token_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        head = self.span_heads[_key(slot)]
        return H.span_logits_batch(tokens, token_mask, head.weight, head.bias)

    # -- per-slot parameter views (single-example head functions) -------------

    def type_parameters(self, slot: str) -> tuple[torch.Tensor, torch.Tensor]:
        i = self.schema.slot_index(slot)
        return self.type_weight[i], self.type_bias[i]

    def fusion_parameters(self, slot: str) -> torch.Tensor:
        return self.fusion_weight[self.schema.slot_index(slot)]

    def mention_parameters(self, slot: str) -> torch.Tensor:
        return self.mention_weight[self.schema.slot_index(slot)]

    # -- persistence -----------------------------------------------------------

    def checkpoint_payload(self) -> dict:
        return {
            "format_version": 1,
            "schema": self.schema.to_dict(),
            "schema_fingerprint": self.schema.fingerprint(),
            "vocab": list(self.vocab.tokens),
            "model_config": self.config.to_dict(),
            "type_classes": list(self.type_classes),
            "ontologies": {
                s.name: list(s.ontology) for s in self.schema.slots if s.ontology
            },
            "embedding_table": self.table.matrix,
            "state_dict": self.state_dict(),
        }


def zero_head_parameters(model: DstModel) -> None:
    """Zero every head parameter; useful for analytic loss baselines."""
    with torch.no_grad():
        model.type_weight.zero_()
        model.type_bias.zero_()
        if model.config.strategy == "msp":
            model.fusion_weight.zero_()
            model.mention_weight.zero_()
        for module in (model.cat_heads, model.span_heads):
            for layer in module.values():
                layer.weight.zero_()
                layer.bias.zero_()


def build_model(schema: Schema, vocab: Vocab, config: ModelConfig,
                seed: int | None = None) -> DstModel:
    if seed is not None:
        torch.manual_seed(seed)
    return DstModel(schema, vocab, config)


def save_checkpoint(model: DstModel, path) -> None:
    torch.save(model.checkpoint_payload(), path)


def load_checkpoint(path, schema: Schema | None = None) -> DstModel:
    """Restore a model; when a schema is supplied its fingerprint must match
    the one stored in the checkpoint."""
    payload = torch.load(path, weights_only=False)
    stored = schema_from_dict(payload["schema"])
    if schema is not None and schema.fingerprint() != payload["schema_fingerprint"]:
        raise ValueError("checkpoint schema fingerprint does not match the given schema")
    config = ModelConfig(**payload["model_config"])
    vocab = Vocab(list(payload["vocab"]))
    model = DstModel(stored if schema is None else schema, vocab, config)
    model.load_state_dict(payload["state_dict"])
    model.table.matrix = payload["embedding_table"]
    model.table.matrix.requires_grad_(False)
    model.eval()
    return model
