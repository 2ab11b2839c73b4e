"""Document-aware decoding, corpus BLEU, and bootstrap significance.

Decoding walks each document in order: source-side caches come from the
sentences just encoded, target-side caches from the decoder states
recorded while generating the previous hypothesis.  With
`gold_context=True` the target-side caches are teacher-forced over the
gold previous sentence instead, which is how the context mechanisms are
probed on the synthetic tasks (the reference choice is unrecoverable from
the model's own first-sentence output).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
import math
from typing import Optional, Sequence

import numpy as np

from . import bpe as B
from . import corpus as C
from . import tensor as T
from .bpe import Vocabulary
from .model import ContextCache, TranslationModel

debpe = B.remove_bpe


@dataclass
class TranslationStats:
    cache_reuses: int = 0        # sentences translated with saved states
    context_recomputes: int = 0  # sentences whose context ran a fresh encoder


def _encode_rows(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max((len(r) for r in rows), default=1))
    mat = np.full((len(rows), width), B.PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.float32)
    for i, r in enumerate(rows):
        mat[i, :len(r)] = r
        mask[i, :len(r)] = 1.0
    return mat, mask


def _teacher_forced_states(model, enc, cache: ContextCache,
                           gold_rows: list[list[int]]
                           ) -> tuple[T.Tensor, np.ndarray]:
    """Decoder states over gold tokens, as produced during training.

    `cache` must be the same context the sentence was decoded with, so the
    recorded states match the training-time regime.  State t is the one
    the decoder reached after consuming gold token t.
    """
    ids, mask = _encode_rows(gold_rows)
    b, n = ids.shape
    inputs = np.concatenate(
        [np.full((b, 1), B.BOS, dtype=np.int64), ids], axis=1)
    carry = model.init_carry(enc)
    states = []
    for t in range(n + 1):
        res = model.decode_step(inputs[:, t], carry, enc, cache)
        carry = res.carry
        states.append(res.h_top)
    return T.stack(states[1:], axis=1), mask


class _DocState:
    """Everything position i-1 leaves behind for position i's cache."""

    def __init__(self, enc, src_ids, src_mask, hyp_rows, dec_states, dec_mask,
                 gold_rows, gold_dec=None):
        self.enc = enc
        self.src_ids = src_ids
        self.src_mask = src_mask
        self.hyp_rows = hyp_rows
        self.dec_states = dec_states
        self.dec_mask = dec_mask
        self.gold_rows = gold_rows
        self.gold_dec = gold_dec  # (states, mask) from the teacher-forced pass


def _inference_cache(model, prev: Optional[_DocState], gold_context: bool,
                     active: np.ndarray, stats: TranslationStats) -> ContextCache:
    variant = model.cfg.variant
    if prev is None or variant == "baseline":
        return model.context_states()
    n_active = int(active.sum())
    kwargs = {}
    if variant in ("shared-source", "shared-mix"):
        kwargs["prev_encoder"] = prev.enc
        stats.cache_reuses += n_active
    if variant == "separated-source":
        kwargs["prev_src_ids"] = prev.src_ids
        kwargs["prev_src_mask"] = prev.src_mask
        stats.context_recomputes += n_active
    if variant in ("shared-target", "shared-mix"):
        if gold_context:
            dec_states, dec_mask = prev.gold_dec
        else:
            dec_states, dec_mask = prev.dec_states, prev.dec_mask
            if variant == "shared-target":
                stats.cache_reuses += n_active
        kwargs["prev_decoder_states"] = dec_states
        kwargs["prev_trg_mask"] = dec_mask
    if variant == "separated-target":
        rows = prev.gold_rows if gold_context else prev.hyp_rows
        ids, mask = _encode_rows(rows)
        kwargs["prev_trg_ids"] = ids
        kwargs["prev_trg_mask"] = mask
        stats.context_recomputes += n_active
    return model.context_states(**kwargs)


def _greedy_group(model, docs: Sequence[C.Document], src_vocab, trg_vocab,
                  max_ratio: float, gold_context: bool,
                  stats: TranslationStats) -> list[list[list[str]]]:
    n_docs = len(docs)
    max_positions = max(len(d) for d in docs)
    hyps: list[list[list[str]]] = [[] for _ in range(n_docs)]
    prev: Optional[_DocState] = None
    for i in range(max_positions):
        active = np.array([1.0 if i < len(d) else 0.0 for d in docs],
                          dtype=np.float32)
        src_rows = [src_vocab.encode(d.pairs[i][0]) if i < len(d) else []
                    for d in docs]
        gold_rows = [trg_vocab.encode(d.pairs[i][1]) if i < len(d) else []
                     for d in docs]
        src_ids, src_mask = _encode_rows(src_rows)
        with T.no_grad():
            enc = model.encode(src_ids, src_mask)
            cache = _inference_cache(model, prev, gold_context, active, stats)
            limits = [int(math.ceil(max_ratio * len(r))) if a else 0
                      for r, a in zip(src_rows, active)]
            finished = [a == 0.0 for a in active]
            capped = [False] * n_docs
            emitted: list[list[int]] = [[] for _ in range(n_docs)]
            carry = model.init_carry(enc)
            y = np.full(n_docs, B.BOS, dtype=np.int64)
            h_steps: list[np.ndarray] = []
            while not all(finished):
                res = model.decode_step(y, carry, enc, cache)
                carry = res.carry
                h_steps.append(res.h_top.data)
                tok = res.probs.data.argmax(axis=1)
                nxt = np.full(n_docs, B.EOS, dtype=np.int64)
                for d in range(n_docs):
                    if finished[d]:
                        continue
                    t = int(tok[d])
                    if t == B.EOS:
                        finished[d] = True
                    else:
                        emitted[d].append(t)
                        nxt[d] = t
                        if len(emitted[d]) >= limits[d]:
                            finished[d] = True
                            capped[d] = True
                y = nxt
            # state for token t is the top state after it was fed back; a
            # length-capped final token never was, so it has no state
            per_doc_states = []
            for d in range(n_docs):
                valid = len(emitted[d]) - (1 if capped[d] else 0)
                per_doc_states.append([h_steps[t + 1][d]
                                       for t in range(valid)])
            dec_states, dec_mask = _collect_states(per_doc_states, model)
            gold_dec = None
            if gold_context and model.cfg.variant in ("shared-target",
                                                      "shared-mix"):
                gold_dec = _teacher_forced_states(model, enc, cache, gold_rows)
        for d in range(n_docs):
            if active[d]:
                hyps[d].append(trg_vocab.decode(emitted[d]))
        prev = _DocState(enc, src_ids, src_mask, emitted, dec_states, dec_mask,
                         gold_rows, gold_dec)
    return hyps


def _collect_states(per_doc_states: list[list[np.ndarray]],
                    model) -> tuple[T.Tensor, np.ndarray]:
    """Pad per-document decoder state lists into a cache matrix and mask."""
    n_docs = len(per_doc_states)
    width = max(1, max((len(s) for s in per_doc_states), default=1))
    states = np.zeros((n_docs, width, model.cfg.hidden_dim), dtype=model.dtype)
    mask = np.zeros((n_docs, width), dtype=np.float32)
    for d, rows in enumerate(per_doc_states):
        for t, row in enumerate(rows):
            states[d, t] = row
            mask[d, t] = 1.0
    return T.Tensor(states), mask


def _beam_sentence(model, enc, cache, beam_size: int, max_len: int
                   ) -> tuple[list[int], list[np.ndarray]]:
    """Beam search for one sentence; returns (tokens, per-step top states)."""
    start_carry = model.init_carry(enc)
    beams = [{"tokens": [], "logp": 0.0, "carry": start_carry, "states": []}]
    done: list[dict] = []
    for _ in range(max_len + 1):
        if not beams:
            break
        y = np.array([b["tokens"][-1] if b["tokens"] else B.BOS
                      for b in beams], dtype=np.int64)
        carry = [(T.Tensor(np.concatenate([b["carry"][layer][0].data
                                           for b in beams], axis=0)),
                  T.Tensor(np.concatenate([b["carry"][layer][1].data
                                           for b in beams], axis=0)))
                 for layer in range(2)]
        res = model.decode_step(y, carry, enc, cache)
        logp = np.log(np.maximum(res.probs.data.astype(np.float64), 1e-300))
        totals = np.array([b["logp"] for b in beams])[:, None] + logp
        # stable sort so exact ties resolve like argmax (lowest index first)
        flat = np.argsort(-totals.ravel(), kind="stable")[:2 * beam_size]
        new_beams = []
        for idx in flat:
            parent, token = divmod(int(idx), logp.shape[1])
            # h_top consumed the parent's newest token, so it lags by one
            parent_states = beams[parent]["states"]
            if beams[parent]["tokens"]:
                parent_states = parent_states + [res.h_top.data[parent].copy()]
            child = {
                "tokens": beams[parent]["tokens"] + [token],
                "logp": float(totals[parent, token]),
                "carry": [(T.Tensor(res.carry[layer][0].data[parent:parent + 1].copy()),
                           T.Tensor(res.carry[layer][1].data[parent:parent + 1].copy()))
                          for layer in range(2)],
                "states": parent_states,
            }
            if token == B.EOS:
                child["tokens"] = child["tokens"][:-1]
                done.append(child)
            elif len(child["tokens"]) >= max_len:
                done.append(child)
            else:
                new_beams.append(child)
            if len(new_beams) >= beam_size:
                break
        beams = new_beams
        if len(done) >= beam_size:
            break
    pool = done if done else beams
    best = max(pool, key=lambda b: b["logp"])
    return best["tokens"], best["states"][:len(best["tokens"])]


def _beam_document(model, doc: C.Document, src_vocab, trg_vocab,
                   beam_size: int, max_ratio: float, gold_context: bool,
                   stats: TranslationStats) -> list[list[str]]:
    hyp_doc = []
    prev: Optional[_DocState] = None
    active = np.ones(1, dtype=np.float32)
    for i, (src, trg) in enumerate(doc.pairs):
        src_rows = [src_vocab.encode(src)]
        gold_rows = [trg_vocab.encode(trg)]
        src_ids, src_mask = _encode_rows(src_rows)
        with T.no_grad():
            enc = model.encode(src_ids, src_mask)
            cache = _inference_cache(model, prev, gold_context, active, stats)
            tokens, states = _beam_sentence(
                model, enc, cache, beam_size,
                max_len=int(math.ceil(max_ratio * len(src_rows[0]))))
            dec_states, dec_mask = _collect_states([states], model)
            gold_dec = None
            if gold_context and model.cfg.variant in ("shared-target",
                                                      "shared-mix"):
                gold_dec = _teacher_forced_states(model, enc, cache, gold_rows)
        hyp_doc.append(trg_vocab.decode(tokens))
        prev = _DocState(enc, src_ids, src_mask, [tokens], dec_states,
                         dec_mask, gold_rows, gold_dec)
    return hyp_doc


def translate_corpus(model: TranslationModel, docs: Sequence[C.Document],
                     src_vocab: Vocabulary, trg_vocab: Vocabulary,
                     beam_size: int = 1, max_ratio: float = 2.0,
                     gold_context: bool = False, batch_docs: int = 64
                     ) -> tuple[list[list[list[str]]], TranslationStats]:
    """Translate documents in order; returns subword-token hypotheses."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    stats = TranslationStats()
    hyps: list[list[list[str]]] = []
    if beam_size == 1:
        for start in range(0, len(docs), batch_docs):
            group = docs[start:start + batch_docs]
            hyps.extend(_greedy_group(model, group, src_vocab, trg_vocab,
                                      max_ratio, gold_context, stats))
    else:
        for doc in docs:
            hyps.append(_beam_document(model, doc, src_vocab, trg_vocab,
                                       beam_size, max_ratio, gold_context,
                                       stats))
    return hyps, stats


def translate_document(model: TranslationModel, doc: C.Document,
                       src_vocab: Vocabulary, trg_vocab: Vocabulary,
                       beam_size: int = 1, max_ratio: float = 2.0,
                       gold_context: bool = False
                       ) -> tuple[list[list[str]], TranslationStats]:
    """Translate one document sentence by sentence."""
    hyps, stats = translate_corpus(model, [doc], src_vocab, trg_vocab,
                                   beam_size=beam_size, max_ratio=max_ratio,
                                   gold_context=gold_context)
    return hyps[0], stats


# ---------------------------------------------------------------------------
# BLEU


@dataclass
class EvalReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int

    def pretty(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.bleu:.2f}  (precisions {ps}, "
                f"BP {self.brevity_penalty:.4f}, "
                f"hyp len {self.hyp_length}, ref len {self.ref_length})")

    def records(self) -> str:
        lines = [f"bleu={self.bleu:.2f}"]
        lines += [f"p{n}={p:.6f}" for n, p in enumerate(self.precisions, 1)]
        lines += [f"brevity_penalty={self.brevity_penalty:.6f}",
                  f"hyp_length={self.hyp_length}",
                  f"ref_length={self.ref_length}"]
        return "\n".join(lines) + "\n"


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp: Sequence[str], ref: Sequence[str]) -> np.ndarray:
    """[clip_1..4, total_1..4, hyp_len, ref_len] for one sentence pair."""
    row = np.zeros(10, dtype=np.int64)
    for n in range(1, 5):
        hyp_counts = _ngrams(hyp, n)
        ref_counts = _ngrams(ref, n)
        row[n - 1] = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        row[4 + n - 1] = max(len(hyp) - n + 1, 0)
    row[8] = len(hyp)
    row[9] = len(ref)
    return row


def _bleu_from_totals(totals: np.ndarray) -> tuple[float, list[float], float]:
    clip, tot = totals[:4], totals[4:8]
    hyp_len, ref_len = int(totals[8]), int(totals[9])
    precisions = [(clip[n] / tot[n]) if tot[n] > 0 else 0.0 for n in range(4)]
    if hyp_len == 0:
        return 0.0, precisions, 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if any(p == 0.0 for p in precisions):
        return 0.0, precisions, bp
    score = bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)
    return 100.0 * score, precisions, bp


def bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]
         ) -> EvalReport:
    """Corpus BLEU-4 with clipped precisions and brevity penalty, unsmoothed."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    totals = np.zeros(10, dtype=np.int64)
    for hyp, ref in zip(hyps, refs):
        totals += sentence_stats(hyp, ref)
    score, precisions, bp = _bleu_from_totals(totals)
    return EvalReport(bleu=score, precisions=precisions, brevity_penalty=bp,
                      hyp_length=int(totals[8]), ref_length=int(totals[9]))


# ---------------------------------------------------------------------------
# paired bootstrap


@dataclass
class SignificanceResult:
    p_value: float
    n_resamples: int
    mean_delta: float  # mean over resamples of BLEU(B) - BLEU(A)
    wins_b: int
    ties: int

    def records(self) -> str:
        return (f"p_value={self.p_value:.4f}\n"
                f"n_resamples={self.n_resamples}\n"
                f"mean_delta={self.mean_delta:.4f}\n"
                f"wins_b={self.wins_b}\nties={self.ties}\n")


def bootstrap_significance(hyps_a: Sequence[Sequence[str]],
                           hyps_b: Sequence[Sequence[str]],
                           refs: Sequence[Sequence[str]],
                           n_resamples: int = 1000,
                           seed: int = 0) -> SignificanceResult:
    """Paired bootstrap over sentences, testing "B better than A".

    p is the fraction of resamples where BLEU(B) <= BLEU(A); small p
    means B's advantage survives resampling.
    """
    if not (len(hyps_a) == len(hyps_b) == len(refs)):
        raise ValueError("system outputs and references must align")
    n_sents = len(refs)
    stats_a = np.stack([sentence_stats(h, r) for h, r in zip(hyps_a, refs)])
    stats_b = np.stack([sentence_stats(h, r) for h, r in zip(hyps_b, refs)])
    rng = np.random.default_rng(seed)
    not_better = 0
    ties = 0
    deltas = np.empty(n_resamples)
    for k in range(n_resamples):
        idx = rng.integers(0, n_sents, size=n_sents)
        score_a, _, _ = _bleu_from_totals(stats_a[idx].sum(axis=0))
        score_b, _, _ = _bleu_from_totals(stats_b[idx].sum(axis=0))
        deltas[k] = score_b - score_a
        if score_b <= score_a:
            not_better += 1
        if score_b == score_a:
            ties += 1
    return SignificanceResult(
        p_value=not_better / n_resamples,
        n_resamples=n_resamples,
        mean_delta=float(deltas.mean()),
        wins_b=int((deltas > 0).sum()),
        ties=ties)


# ---------------------------------------------------------------------------
# synthetic-task slot scoring


@dataclass
class SlotReport:
    """Accuracy of the ambiguous slots against the hidden document choice."""

    slot_accuracy: float
    n_slots: int
    self_consistency: float    # agreement with the model's own sentence-1 pick
    n_consistency_slots: int
    per_system_choice: dict = field(default_factory=dict)

    def records(self) -> str:
        return (f"slot_accuracy={self.slot_accuracy:.4f}\n"
                f"n_slots={self.n_slots}\n"
                f"self_consistency={self.self_consistency:.4f}\n"
                f"n_consistency_slots={self.n_consistency_slots}\n")


def _first_synonym(tokens: Sequence[str]) -> Optional[str]:
    for t in tokens:
        if t in C.SYNONYMS:
            return t
    return None


def score_slots(hyp_docs: Sequence[Sequence[Sequence[str]]],
                metas: Sequence[C.SlotMeta]) -> SlotReport:
    """Score de-segmented hypotheses against the synthetic metadata.

    A slot is correct when the first synonym token emitted in that
    sentence equals the document's hidden choice.  Self-consistency
    instead compares each slot with the synonym the model emitted in the
    document's first sentence, when it emitted one there.
    """
    if len(hyp_docs) != len(metas):
        raise ValueError("hypothesis documents and metadata must align")
    correct = total = 0
    cons_correct = cons_total = 0
    choices: Counter = Counter()
    for hyp_doc, meta in zip(hyp_docs, metas):
        anchor = _first_synonym(hyp_doc[0]) if hyp_doc else None
        for slot in meta.slot_indices:
            if slot >= len(hyp_doc):
                total += 1
                continue
            got = _first_synonym(hyp_doc[slot])
            choices[got] += 1
            total += 1
            if got == meta.choice:
                correct += 1
            if anchor is not None:
                cons_total += 1
                if got == anchor:
                    cons_correct += 1
    return SlotReport(
        slot_accuracy=correct / total if total else 0.0,
        n_slots=total,
        self_consistency=cons_correct / cons_total if cons_total else 0.0,
        n_consistency_slots=cons_total,
        per_system_choice=dict(choices))
