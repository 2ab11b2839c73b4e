"""Two-phase training: baseline pretraining, then context fine-tuning.

Each batch walks its documents position by position, so sentence i-1's
states are in hand (as gold, teacher-forced context) before sentence i is
processed.  Gradients accumulate over all positions of a batch and one
AdaGrad step is applied per batch, after global-norm clipping.  The best
epoch is chosen by dev BLEU, decoded greedily with gold target-side
context for the variants that need one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import corpus as C
from . import evaluation as E
from . import tensor as T
from .bpe import Vocabulary
from .model import (ModelConfig, TranslationModel, VARIANTS,
                    parameter_shapes, _init_param)


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; training cannot continue."""


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    dropout: float = 0.2
    max_docs_per_batch: int = 128
    grad_clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dev_bleu: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        """1-based epoch with the highest dev BLEU; ties go to the earliest."""
        if not self.records:
            raise ValueError("empty training log")
        scores = [r.dev_bleu for r in self.records]
        return int(np.argmax(scores)) + 1

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(f"{r.epoch}\t{r.loss:.6f}\t{r.dev_bleu:.4f}\t{r.seconds:.3f}\n")

    @classmethod
    def load(cls, path) -> "TrainLog":
        records = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                e, loss, bleu, secs = line.rstrip("\n").split("\t")
                records.append(EpochRecord(int(e), float(loss), float(bleu),
                                           float(secs)))
        return cls(records)


def select_best(log: TrainLog, checkpoints: Sequence) -> object:
    """Checkpoint of the best dev-BLEU epoch (earliest on ties)."""
    if len(checkpoints) != len(log.records):
        raise ValueError("one checkpoint per logged epoch required")
    return checkpoints[log.best_epoch - 1]


def _build_cache(model: TranslationModel, prev, training: bool, rng):
    if prev is None or not model.cfg.uses_context:
        return model.context_states()
    enc, dec, pos = prev
    return model.context_states(
        prev_src_ids=pos.src, prev_src_mask=pos.src_mask,
        prev_encoder=enc, prev_decoder_states=dec,
        prev_trg_ids=pos.trg, prev_trg_mask=pos.trg_mask,
        training=training, rng=rng)


def _dev_bleu(model, dev_docs, src_vocab, trg_vocab) -> float:
    """Greedy-decode the dev set and score BLEU on de-segmented text.

    Target-side context comes from the gold previous sentence, so epoch
    selection measures how well the context mechanism is being used rather
    than the model's own first-sentence coin flips.
    """
    hyps, _ = E.translate_corpus(model, dev_docs, src_vocab, trg_vocab,
                                 gold_context=True)
    hyp_sents, ref_sents = [], []
    for doc, hyp_doc in zip(dev_docs, hyps):
        for (src, trg), hyp in zip(doc.pairs, hyp_doc):
            hyp_sents.append(E.debpe(hyp))
            ref_sents.append(E.debpe(trg))
    return E.bleu(hyp_sents, ref_sents).bleu


def train_model(model: TranslationModel, train_docs: Sequence[C.Document],
                dev_docs: Sequence[C.Document], src_vocab: Vocabulary,
                trg_vocab: Vocabulary, cfg: TrainConfig,
                grad_hook: Optional[Callable[[TranslationModel], None]] = None,
                ) -> tuple[TranslationModel, TrainLog]:
    """Train in place; returns (best-dev model, per-epoch log).

    `grad_hook` runs after each batch's backward pass and may zero
    gradients (e.g. to freeze the context branch).
    """
    model.cfg.dropout = cfg.dropout
    params = model.param_list()
    opt = T.AdaGrad(params, lr=cfg.lr)
    shuffle_rng = T.make_rng(cfg.seed, 1)
    dropout_rng = T.make_rng(cfg.seed, 2)
    log = TrainLog()
    best_params: Optional[dict[str, np.ndarray]] = None
    best_bleu = -1.0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        batches = C.make_batches(train_docs, src_vocab, trg_vocab,
                                 max_docs=cfg.max_docs_per_batch,
                                 rng=shuffle_rng)
        epoch_nll, epoch_tokens = 0.0, 0.0
        for b_idx, batch in enumerate(batches):
            opt.zero_grad()
            prev = None
            batch_tokens = 0.0
            for p_idx, pos in enumerate(batch.positions):
                cache = _build_cache(model, prev, training=True, rng=dropout_rng)
                loss, enc, dec, ntok = model.forward_loss(
                    pos, cache, training=True, rng=dropout_rng)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {b_idx}, "
                        f"sentence position {p_idx}")
                T.backward(T.mul(loss, float(ntok)))
                epoch_nll += float(loss.data) * ntok
                epoch_tokens += ntok
                batch_tokens += ntok
                prev = (enc, dec, pos)
            scale = 1.0 / batch_tokens
            for p in params:
                if p.grad is not None:
                    p.grad *= scale
            if grad_hook is not None:
                grad_hook(model)
            T.clip_global_norm(params, cfg.grad_clip_norm)
            opt.step()
        dev = _dev_bleu(model, dev_docs, src_vocab, trg_vocab)
        log.records.append(EpochRecord(
            epoch, epoch_nll / max(epoch_tokens, 1.0), dev,
            time.perf_counter() - started))
        if dev > best_bleu:
            best_bleu = dev
            best_params = {n: p.data.copy() for n, p in model.params.items()}
    assert best_params is not None
    best = TranslationModel(
        model.cfg,
        params={n: T.Tensor(a, requires_grad=True) for n, a in best_params.items()},
        dtype=model.dtype)
    return best, log


def pretrain_baseline(train_docs, dev_docs, src_vocab: Vocabulary,
                      trg_vocab: Vocabulary, model_cfg: ModelConfig,
                      cfg: TrainConfig) -> tuple[TranslationModel, TrainLog]:
    if model_cfg.variant != "baseline":
        raise ValueError("pretraining runs the baseline variant")
    model = TranslationModel(model_cfg, rng=T.make_rng(cfg.seed, 0))
    return train_model(model, train_docs, dev_docs, src_vocab, trg_vocab, cfg)


def init_from_baseline(baseline: TranslationModel, variant: str,
                       rng: np.random.Generator) -> TranslationModel:
    """Start a context variant from baseline weights.

    Shared weights are copied; the context block of the output projection
    is zero so the new model initially reproduces the baseline exactly;
    separated variants' context LSTM starts from fresh random weights.
    """
    if variant not in VARIANTS or variant == "baseline":
        raise ValueError(f"not a context variant: {variant}")
    base_cfg = baseline.cfg
    cfg = ModelConfig(variant=variant, emb_dim=base_cfg.emb_dim,
                      hidden_dim=base_cfg.hidden_dim,
                      src_vocab_size=base_cfg.src_vocab_size,
                      trg_vocab_size=base_cfg.trg_vocab_size,
                      layers=base_cfg.layers, dropout=base_cfg.dropout)
    h = cfg.hidden_dim
    params: dict[str, T.Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "attn_out":
            data = np.zeros(shape, dtype=baseline.dtype)
            data[:2 * h] = baseline.params["attn_out"].data
            params[name] = T.Tensor(data, requires_grad=True)
        elif name.startswith("ctx_"):
            params[name] = _init_param(name, shape, rng, baseline.dtype)
        else:
            params[name] = T.Tensor(baseline.params[name].data.copy(),
                                    requires_grad=True)
    return TranslationModel(cfg, params=params, dtype=baseline.dtype)


def context_freeze_hook(model: TranslationModel) -> None:
    """Zero the gradients of everything the baseline does not have."""
    h = model.cfg.hidden_dim
    attn = model.params["attn_out"]
    if attn.grad is not None:
        attn.grad[2 * h:] = 0.0
    for name, p in model.params.items():
        if name.startswith("ctx_") and p.grad is not None:
            p.grad[:] = 0.0


def fine_tune_context(baseline: TranslationModel, variant: str, train_docs,
                      dev_docs, src_vocab: Vocabulary, trg_vocab: Vocabulary,
                      cfg: TrainConfig, freeze_context: bool = False,
                      ) -> tuple[TranslationModel, TrainLog]:
    """Fine-tune a context variant from a pretrained baseline."""
    if len(src_vocab) != baseline.cfg.src_vocab_size \
            or len(trg_vocab) != baseline.cfg.trg_vocab_size:
        raise ValueError("vocabulary sizes do not match the baseline checkpoint")
    model = init_from_baseline(baseline, variant, T.make_rng(cfg.seed, 3))
    hook = context_freeze_hook if freeze_context else None
    return train_model(model, train_docs, dev_docs, src_vocab, trg_vocab, cfg,
                       grad_hook=hook)
