"""Trie-constrained beam search and full-ranking metrics."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .quantizer import CodeSequence
from .seqmodel import Recommender, VocabLayout, tokenize_history, trim_padding

logger = logging.getLogger(__name__)


class TrieNode:
    __slots__ = ("children", "item", "min_item", "_tokens", "_kids")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.item: str | None = None
        self.min_item: str | None = None
        self._tokens = None
        self._kids = None

    def freeze(self):
        order = sorted(self.children)
        self._tokens = np.asarray(order, dtype=np.int64)
        self._kids = [self.children[t] for t in order]


class PrefixTrie:
    """Accepts exactly the token sequences of the mapped items."""

    def __init__(self, id_map: Mapping[str, CodeSequence], layout: VocabLayout):
        self.layout = layout
        self.root = TrieNode()
        self.n_items = 0
        for item in sorted(id_map):
            node = self.root
            for tok in layout.item_tokens(id_map[item]):
                node = node.children.setdefault(tok, TrieNode())
                if node.min_item is None:
                    node.min_item = item
            if node.item is not None:
                raise ValueError(f"items {node.item!r} and {item!r} share the semantic id {id_map[item]}")
            node.item = item
            self.n_items += 1
        self.root.min_item = min(id_map) if id_map else None
        stack = [self.root]
        while stack:
            node = stack.pop()
            node.freeze()
            stack.extend(node.children.values())

    def lookup(self, tokens: Iterable[int]) -> TrieNode | None:
        node = self.root
        for tok in tokens:
            node = node.children.get(int(tok))
            if node is None:
                return None
        return node

    def __contains__(self, tokens) -> bool:
        node = self.lookup(tokens)
        return node is not None and node.item is not None


def build_prefix_trie(id_map: Mapping[str, CodeSequence], layout: VocabLayout) -> PrefixTrie:
    return PrefixTrie(id_map, layout)


@dataclass
class RankedList:
    items: list[str]
    scores: list[float]

    def rank_of(self, item: str) -> int | None:
        """1-based rank, or None if absent."""
        try:
            return self.items.index(item) + 1
        except ValueError:
            return None


@torch.no_grad()
def constrained_beam_search_batch(model: Recommender, src: torch.Tensor, mask: torch.Tensor,
                                  trie: PrefixTrie, beam_size: int) -> list[RankedList]:
    """Beam search for a batch of histories; every expansion follows the trie.

    Hypotheses are ranked by summed natural-log token probabilities (softmax
    over the full vocabulary); equal scores fall back to the smallest item id
    reachable from the hypothesis.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    was_training = model.training
    model.eval()
    try:
        memory = model.encode_history(src, mask)
        B = src.shape[0]
        # per user: list of (score, prefix tuple, node)
        beams = [[(0.0, (), trie.root)] for _ in range(B)]
        for step in range(model.layout.seq_len):
            owners = [u for u in range(B) for _ in beams[u]]
            if not owners:
                break
            prefixes = torch.tensor([b[1] for u in range(B) for b in beams[u]], dtype=torch.long)
            prefixes = prefixes.view(len(owners), step)
            idx = torch.tensor(owners)
            logits = model.next_token_logits(None, mask[idx], prefixes, memory=memory[idx])
            logp = F.log_softmax(logits.double(), dim=-1).numpy()
            row = 0
            for u in range(B):
                cands = []
                for score, prefix, node in beams[u]:
                    lp = logp[row, node._tokens]
                    for tok, kid, v in zip(node._tokens.tolist(), node._kids, lp.tolist()):
                        cands.append((score + v, prefix + (tok,), kid))
                    row += 1
                cands.sort(key=lambda c: (-c[0], c[2].min_item))
                beams[u] = cands[:beam_size]
    finally:
        model.train(was_training)
    return [RankedList([n.item for _, _, n in bs], [s for s, _, _ in bs]) for bs in beams]


def constrained_beam_search(model: Recommender, src: torch.Tensor, mask: torch.Tensor,
                            trie: PrefixTrie, beam_size: int = 30) -> RankedList:
    return constrained_beam_search_batch(model, src[None], mask[None], trie, beam_size)[0]


def recall_at_k(ranked: RankedList | Sequence[str], target: str, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    items = ranked.items if isinstance(ranked, RankedList) else list(ranked)
    return 1.0 if target in items[:k] else 0.0


def ndcg_at_k(ranked: RankedList | Sequence[str], target: str, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    items = ranked.items if isinstance(ranked, RankedList) else list(ranked)
    top = items[:k]
    if target not in top:
        return 0.0
    return 1.0 / math.log2(top.index(target) + 2)


@dataclass
class MetricsReport:
    metrics: list[dict] = field(default_factory=list)  # name, k, value, n_users
    seed: int | None = None
    config_digest: str | None = None
    split: str = "test"

    def value(self, name: str, k: int) -> float:
        for m in self.metrics:
            if m["name"] == name and m["k"] == k:
                return m["value"]
        raise KeyError(f"{name}@{k}")

    def to_jsonl(self) -> str:
        lines = []
        for m in self.metrics:
            rec = dict(m, split=self.split, seed=self.seed, config_digest=self.config_digest)
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsReport":
        report = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            report.seed, report.config_digest = rec.pop("seed"), rec.pop("config_digest")
            report.split = rec.pop("split", "test")
            report.metrics.append(rec)
        return report

    def table(self) -> str:
        rows = [f"{'metric':<10} {'K':>4} {'value':>8} {'users':>6}"]
        for m in self.metrics:
            rows.append(f"{m['name']:<10} {m['k']:>4d} {m['value']:>8.4f} {m['n_users']:>6d}")
        return "\n".join(rows)


def aggregate(per_user: Mapping[tuple[str, int], Sequence[float]], **meta) -> MetricsReport:
    report = MetricsReport(**meta)
    for (name, k), values in per_user.items():
        report.metrics.append({"name": name, "k": k, "value": float(np.mean(values)), "n_users": len(values)})
    return report


def evaluate(model: Recommender, id_map: Mapping[str, CodeSequence], examples, max_items: int,
             ks: Sequence[int] = (10, 20), beam_size: int = 30, batch_size: int = 64,
             split: str = "test", seed: int | None = None, config_digest: str | None = None) -> MetricsReport:
    """Decode every example's history and score its held-out target.

    Candidates are every item in ``id_map``; items already in the history
    are not removed.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("cannot evaluate an empty split")
    if beam_size < max(ks):
        warnings.warn(f"beam_size={beam_size} < max K={max(ks)}; recall is capped by list length", stacklevel=2)
    layout = model.layout
    trie = PrefixTrie(id_map, layout)
    per_user = {(name, k): [] for name in ("recall", "ndcg") for k in ks}
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        pairs = [tokenize_history(ex.history, id_map, layout, max_items) for ex in chunk]
        src = torch.stack([p[0] for p in pairs])
        mask = torch.stack([p[1] for p in pairs])
        src, mask = trim_padding(src, mask)
        for ex, ranked in zip(chunk, constrained_beam_search_batch(model, src, mask, trie, beam_size)):
            for k in ks:
                per_user[("recall", k)].append(recall_at_k(ranked, ex.target, k))
                per_user[("ndcg", k)].append(ndcg_at_k(ranked, ex.target, k))
    return aggregate(per_user, seed=seed, config_digest=config_digest, split=split)
