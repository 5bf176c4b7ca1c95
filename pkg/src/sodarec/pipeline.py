"""Tokenizer pretraining and alternating tokenizer/recommender training."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
import torch

from .config import ABLATIONS, TrainConfig
from .corpus import EmbeddingTable, SplitDataset, build_sequences, k_core_filter, split_leave_one_out
from .decoding import MetricsReport, evaluate
from .quantizer import RQVAE, CodeSequence, semantic_ids_for
from .seqmodel import Recommender, VocabLayout, sequence_nll, tokenize_history, tokenize_target, trim_padding
from .soda import combined_loss, history_distribution, in_batch_negatives, pointwise_variant, soda_loss

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    pass


@dataclass
class Corpus:
    table: EmbeddingTable
    split: SplitDataset


def prepare_corpus(log: pd.DataFrame, table: EmbeddingTable, k_core: int = 5, max_len: int = 20) -> Corpus:
    """Filter, sequence and split a log; restrict the table to surviving items."""
    filtered = k_core_filter(log, k_core) if k_core > 0 else log
    split = split_leave_one_out(build_sequences(filtered, max_len), max_len)
    return Corpus(table.subset(split.items()), split)


def set_determinism(config: TrainConfig) -> None:
    if config.sequential:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} loss ({value}); aborting")


def tokenizer_epoch(quantizer: RQVAE, z: torch.Tensor, optimizer, batch_size: int,
                    generator: torch.Generator) -> dict[str, float]:
    quantizer.train()
    order = torch.randperm(z.shape[0], generator=generator)
    totals = {"loss": 0.0, "recon": 0.0}
    for start in range(0, len(order), batch_size):
        batch = z[order[start:start + batch_size]]
        parts = quantizer.loss(batch)
        optimizer.zero_grad()
        parts["loss"].backward()
        optimizer.step()
        loss = parts["loss"].item()
        _check_finite(loss, "tokenizer")
        for key in totals:
            totals[key] += parts[key].item() * len(batch)
    return {key: v / z.shape[0] for key, v in totals.items()}


def pretrain_tokenizer(table: EmbeddingTable, config: TrainConfig,
                       on_epoch: Callable[[dict], None] | None = None) -> tuple[RQVAE, list[dict]]:
    """k-means initialization followed by ``pretrain_epochs`` of tokenizer training."""
    tcfg = config.tokenizer
    if tcfg.d_in != table.dim:
        raise ValueError(f"tokenizer d_in={tcfg.d_in} but embeddings have dimension {table.dim}")
    dtype = _DTYPES[config.dtype]
    quantizer = RQVAE(tcfg).to(dtype)
    z = torch.as_tensor(table.vectors, dtype=dtype)
    quantizer.init_codebooks(z)
    optimizer = torch.optim.Adam(quantizer.parameters(), lr=config.tokenizer_lr)
    gen = torch.Generator().manual_seed(tcfg.seed)
    curve = []
    for epoch in range(config.pretrain_epochs):
        stats = tokenizer_epoch(quantizer, z, optimizer, config.tokenizer_batch_size, gen)
        rec = {"phase": "pretrain", "epoch": epoch, "l_token": stats["loss"], "recon": stats["recon"]}
        curve.append(rec)
        if on_epoch:
            on_epoch(rec)
    quantizer.eval()
    return quantizer, curve


def tensor_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class RunReport:
    ablation: str
    config_digest: str
    seed: int
    curves: list[dict] = field(default_factory=list)  # one record per epoch
    steps: list[dict] = field(default_factory=list)  # one record per optimizer step
    validation: MetricsReport | None = None
    test: MetricsReport | None = None
    wall_clock: float = 0.0

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        d = {
            "ablation": self.ablation,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "curves": self.curves,
            "validation": self.validation.metrics if self.validation else None,
            "test": self.test.metrics if self.test else None,
        }
        if include_wall_clock:
            d["wall_clock"] = self.wall_clock
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class _Examples:
    """Tokenized training examples, rebuilt whenever semantic ids change."""

    def __init__(self, examples, id_map, layout, max_items, item_index):
        pairs = [tokenize_history(ex.history, id_map, layout, max_items) for ex in examples]
        self.src = torch.stack([p[0] for p in pairs])
        self.mask = torch.stack([p[1] for p in pairs])
        self.tgt = torch.stack([tokenize_target(ex.target, id_map, layout) for ex in examples])
        self.target_row = torch.tensor([item_index[ex.target] for ex in examples], dtype=torch.long)

    def __len__(self):
        return self.src.shape[0]


@dataclass
class TrainedArtifacts:
    quantizer: RQVAE
    model: Recommender
    id_map: dict[str, CodeSequence]
    report: RunReport
    initial_id_map: dict[str, CodeSequence] = field(default_factory=dict)


def build_recommender(config: TrainConfig, dtype=torch.float32) -> Recommender:
    layout = VocabLayout(config.tokenizer.L, config.tokenizer.K, config.n_disambiguation)
    return Recommender(config.model, layout, config.max_len * layout.seq_len, config.tokenizer.d_code).to(dtype)


def _set_trainable(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def train_alternating(quantizer: RQVAE, corpus: Corpus, config: TrainConfig, ablation: str = "full",
                      model: Recommender | None = None, evaluate_at_end: bool = True,
                      on_step: Callable[[dict], None] | None = None,
                      on_epoch: Callable[[dict], None] | None = None,
                      hooks: dict | None = None) -> TrainedArtifacts:
    """Cycles of recommender epochs (tokenizer frozen) then tokenizer epochs.

    Ablations: ``no_neg`` uses the positive-only loss, ``no_loss`` drops the
    distributional term entirely, ``no_alter`` never touches the tokenizer.
    ``hooks`` may hold ``after_rec_phase`` / ``after_tok_phase`` callables
    receiving a dict of live training state (used by tests).
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    if not corpus.split.train:
        raise TrainingError("empty training split")
    hooks = hooks or {}
    started = time.perf_counter()
    dtype = _DTYPES[config.dtype]
    torch.manual_seed(config.seed)
    shuffle_gen = torch.Generator().manual_seed(config.seed)
    tok_gen = torch.Generator().manual_seed(config.seed + 1)

    table = corpus.table
    item_index = {item: i for i, item in enumerate(table.item_ids)}
    z_items = torch.as_tensor(table.vectors, dtype=dtype)
    if model is None:
        model = build_recommender(config, dtype)
    layout = model.layout
    quantizer = quantizer.to(dtype)

    id_map = semantic_ids_for(quantizer, table.item_ids, table.vectors)
    initial_id_map = dict(id_map)
    train = _Examples(corpus.split.train, id_map, layout, config.max_len, item_index)

    rec_opt = torch.optim.Adam(model.parameters(), lr=config.rec_lr)
    tok_opt = torch.optim.Adam(quantizer.parameters(), lr=config.tokenizer_lr)
    soda_cfg = config.soda
    use_soda = ablation != "no_loss"
    report = RunReport(ablation=ablation, config_digest=config.digest(), seed=config.seed)

    def emit_step(rec):
        report.steps.append(rec)
        if on_step:
            on_step(rec)

    def emit_epoch(rec):
        report.curves.append(rec)
        if on_epoch:
            on_epoch(rec)

    for cycle in range(config.cycles):
        # recommender phase
        _set_trainable(quantizer, False)
        _set_trainable(model, True)
        quantizer.eval()
        with torch.no_grad():
            item_soft = quantizer.soft_codes(z_items, soda_cfg.tau)
        model.train()
        for epoch in range(config.rec_epochs_per_cycle):
            order = torch.randperm(len(train), generator=shuffle_gen)
            sums = {"l_rec": 0.0, "l_soda": 0.0, "soda_contribution": 0.0, "combined": 0.0}
            n_steps = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                src, mask = trim_padding(train.src[idx], train.mask[idx])
                tgt = train.tgt[idx]
                logits, memory = model(src, mask, tgt)
                l_rec = sequence_nll(logits, tgt).mean()
                l_soda = torch.zeros((), dtype=dtype)
                if use_soda and (ablation == "no_neg" or len(idx) >= 2):
                    r_x = model.project(model.pool(memory, mask))
                    h_plus = history_distribution(r_x, quantizer, soda_cfg.tau)
                    h_y = item_soft[train.target_row[idx]]
                    if ablation == "no_neg":
                        l_soda = pointwise_variant(h_plus, h_y, soda_cfg.beta, soda_cfg.epsilon)
                    else:
                        l_soda = soda_loss(h_plus, in_batch_negatives(h_plus), h_y, soda_cfg.beta,
                                           soda_cfg.epsilon)
                    total = combined_loss(l_rec, l_soda, soda_cfg.lam)
                else:
                    total = l_rec
                rec_opt.zero_grad()
                total.backward()
                rec_opt.step()
                rec = {
                    "phase": "rec", "cycle": cycle, "epoch": epoch, "step": n_steps,
                    "l_rec": l_rec.item(), "l_soda": l_soda.item(),
                    "soda_contribution": (soda_cfg.lam * l_soda).item() if use_soda else 0.0,
                    "combined": total.item(),
                }
                _check_finite(rec["combined"], "recommender")
                emit_step(rec)
                for key in sums:
                    sums[key] += rec[key]
                n_steps += 1
            emit_epoch({"phase": "rec", "cycle": cycle, "epoch": epoch,
                        **{k: v / max(n_steps, 1) for k, v in sums.items()}})
        if "after_rec_phase" in hooks:
            hooks["after_rec_phase"]({"cycle": cycle, "quantizer": quantizer, "model": model})

        if ablation == "no_alter" or config.tokenizer_epochs_per_cycle == 0:
            continue
        # tokenizer phase
        _set_trainable(model, False)
        _set_trainable(quantizer, True)
        model.eval()
        for epoch in range(config.tokenizer_epochs_per_cycle):
            stats = tokenizer_epoch(quantizer, z_items, tok_opt, config.tokenizer_batch_size, tok_gen)
            emit_epoch({"phase": "tokenizer", "cycle": cycle, "epoch": epoch,
                        "l_token": stats["loss"], "recon": stats["recon"]})
        quantizer.eval()
        id_map = semantic_ids_for(quantizer, table.item_ids, table.vectors)
        train = _Examples(corpus.split.train, id_map, layout, config.max_len, item_index)
        if "after_tok_phase" in hooks:
            hooks["after_tok_phase"]({"cycle": cycle, "quantizer": quantizer, "model": model,
                                      "id_map": id_map, "train": train})

    _set_trainable(model, True)
    _set_trainable(quantizer, True)
    model.eval()
    quantizer.eval()
    if evaluate_at_end:
        common = dict(max_items=config.max_len, ks=config.ks, beam_size=config.beam_size,
                      batch_size=config.eval_batch_size, seed=config.seed, config_digest=report.config_digest)
        report.validation = evaluate(model, id_map, corpus.split.validation, split="validation", **common)
        report.test = evaluate(model, id_map, corpus.split.test, split="test", **common)
    report.wall_clock = time.perf_counter() - started
    return TrainedArtifacts(quantizer, model, id_map, report, initial_id_map)


def run_experiment(log: pd.DataFrame, table: EmbeddingTable, config: TrainConfig, ablation: str = "full",
                   quantizer: RQVAE | None = None, **kwargs) -> TrainedArtifacts:
    """Prepare the corpus, pretrain the tokenizer if needed, then train."""
    set_determinism(config)
    corpus = prepare_corpus(log, table, config.k_core, config.max_len)
    pretrain_curve = []
    if quantizer is None:
        quantizer, pretrain_curve = pretrain_tokenizer(corpus.table, config)
    out = train_alternating(quantizer, corpus, config, ablation, **kwargs)
    out.report.curves = pretrain_curve + out.report.curves
    return out


def artifact_tensors(artifacts: TrainedArtifacts) -> dict[str, torch.Tensor]:
    tensors = {f"tokenizer.{k}": v for k, v in artifacts.quantizer.state_dict().items()}
    tensors.update({f"recommender.{k}": v for k, v in artifacts.model.state_dict().items()})
    return tensors


def load_artifact_tensors(tensors: dict[str, torch.Tensor], config: TrainConfig) -> tuple[RQVAE, Recommender]:
    quantizer = RQVAE(config.tokenizer)
    model = build_recommender(config)
    quantizer.load_state_dict({k[len("tokenizer."):]: v for k, v in tensors.items() if k.startswith("tokenizer.")})
    model.load_state_dict({k[len("recommender."):]: v for k, v in tensors.items()
                           if k.startswith("recommender.")})
    quantizer.eval()
    model.eval()
    return quantizer, model


def summarize(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")
